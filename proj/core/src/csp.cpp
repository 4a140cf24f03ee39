#include "deepcsp/csp.hpp"

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "deepcsp/error.hpp"
#include "deepcsp/linalg.hpp"

namespace deepcsp::csp {
namespace {

// XXᵀ for a (D, T) matrix.
Tensor gram(const Tensor& x) {
  const std::size_t d = x.rows(), t = x.cols();
  Tensor a(Shape{d, d});
  auto store = [&](std::size_t i, std::size_t j, double v) {
    a(i, j) = v;
    a(j, i) = v;
  };
  for (std::size_t i = 0; i < d; ++i) {
    const double* xi = &x(i, 0);
    std::size_t j = i;
    // Four columns at a time; each sum keeps its own sequential order.
    for (; j + 4 <= d; j += 4) {
      const double *x0 = &x(j, 0), *x1 = &x(j + 1, 0), *x2 = &x(j + 2, 0), *x3 = &x(j + 3, 0);
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t k = 0; k < t; ++k) {
        s0 += xi[k] * x0[k];
        s1 += xi[k] * x1[k];
        s2 += xi[k] * x2[k];
        s3 += xi[k] * x3[k];
      }
      store(i, j, s0);
      store(i, j + 1, s1);
      store(i, j + 2, s2);
      store(i, j + 3, s3);
    }
    for (; j < d; ++j) {
      const double* xj = &x(j, 0);
      double acc = 0.0;
      for (std::size_t k = 0; k < t; ++k) acc += xi[k] * xj[k];
      store(i, j, acc);
    }
  }
  return a;
}

void add_scaled_identity(Tensor& m, double s) {
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += s;
}

void add_outer(Tensor& m, const Tensor& vectors, std::size_t col, double weight) {
  const std::size_t n = m.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double vi = weight * vectors(i, col);
    for (std::size_t j = 0; j < n; ++j) m(i, j) += vi * vectors(j, col);
  }
}

}  // namespace

TrialCovariance normalized_covariance(const Tensor& trial) {
  if (trial.rank() != 2) throw ShapeError("normalized_covariance: trial must be (D, T)");
  if (!trial.all_finite()) throw NonFiniteError("normalized_covariance: non-finite samples");
  Tensor a = gram(trial);
  const double t = trace(a);
  if (!(t > 0.0)) throw InvalidArgument("normalized_covariance: all-zero trial");
  TrialCovariance out{(1.0 / t) * a, t};
  return out;
}

ClassCovariances class_covariances(std::span<const Tensor> trials, std::span<const int> labels,
                                   double shrinkage_factor) {
  if (trials.size() != labels.size()) throw ShapeError("class_covariances: one label per trial");
  if (trials.empty()) throw InvalidArgument("class_covariances: no trials");
  const std::size_t d = trials.front().rows();
  ClassCovariances out;
  out.c1 = Tensor(Shape{d, d});
  out.c2 = Tensor(Shape{d, d});
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (trials[i].rows() != d) throw ShapeError("class_covariances: trials differ in channel count");
    const auto cov = normalized_covariance(trials[i]);
    if (labels[i] == 0) {
      out.c1 = out.c1 + cov.matrix;
      ++out.count1;
    } else if (labels[i] == 1) {
      out.c2 = out.c2 + cov.matrix;
      ++out.count2;
    } else {
      throw InvalidArgument("class_covariances: labels must be 0 or 1");
    }
  }
  if (out.count1 == 0 || out.count2 == 0) {
    throw InvalidArgument("class_covariances: a class has no trials");
  }
  out.c1 = (1.0 / static_cast<double>(out.count1)) * out.c1;
  out.c2 = (1.0 / static_cast<double>(out.count2)) * out.c2;
  const double dd = static_cast<double>(d);
  out.shrinkage1 = shrinkage_factor * trace(out.c1) / dd;
  out.shrinkage2 = shrinkage_factor * trace(out.c2) / dd;
  add_scaled_identity(out.c1, out.shrinkage1);
  add_scaled_identity(out.c2, out.shrinkage2);
  return out;
}

ClassCovariances class_covariances(const data::EpochSet& epochs, double shrinkage_factor) {
  const auto trials = epochs.trial_list();
  return class_covariances(trials, epochs.labels, shrinkage_factor);
}

std::vector<double> SpatialFilterBank::filter(std::size_t j) const {
  std::vector<double> w(filters.rows());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = filters(i, j);
  return w;
}

SpatialFilterBank csp_fit(const Tensor& c1, const Tensor& c2, std::size_t n_components) {
  require_same_shape(c1, c2, "csp_fit");
  const std::size_t d = c1.rows();
  if (n_components == 0 || 2 * n_components > d) {
    throw InvalidArgument("csp_fit: need 1 <= n and 2n <= " + std::to_string(d) + " channels, got n = " +
                          std::to_string(n_components));
  }
  const auto eig = generalized_eig_spd(c1, c1 + c2);
  SpatialFilterBank bank;
  bank.n_components = n_components;
  bank.filters = Tensor(Shape{d, 2 * n_components});
  for (std::size_t j = 0; j < 2 * n_components; ++j) {
    const std::size_t src = j < n_components ? j : d - 2 * n_components + j;
    bank.eigenvalues.push_back(eig.values[src]);
    for (std::size_t i = 0; i < d; ++i) bank.filters(i, j) = eig.vectors(i, src);
  }
  return bank;
}

SpatialFilterBank fit_filter_bank(std::span<const Tensor> trials, std::span<const int> labels,
                                  std::size_t n_components, double shrinkage_factor) {
  const auto cov = class_covariances(trials, labels, shrinkage_factor);
  return csp_fit(cov.c1, cov.c2, n_components);
}

std::vector<double> csp_features(const SpatialFilterBank& bank, const Tensor& trial,
                                 std::size_t* floored) {
  if (trial.rank() != 2 || trial.rows() != bank.channels()) {
    throw ShapeError("csp_features: filter bank expects " + std::to_string(bank.channels()) +
                     " channels, trial has shape " + shape_string(trial.shape()));
  }
  const std::size_t d = trial.rows(), t = trial.cols(), k = bank.size();
  std::vector<double> features(k);
  std::vector<double> projected(t);
  for (std::size_t j = 0; j < k; ++j) {
    std::fill(projected.begin(), projected.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      const double w = bank.filters(i, j);
      const double* row = &trial(i, 0);
      for (std::size_t s = 0; s < t; ++s) projected[s] += w * row[s];
    }
    double power = 0.0;
    for (double v : projected) power += v * v;
    double variance = power / static_cast<double>(t);
    if (!(variance > kFeatureFloor)) {
      variance = kFeatureFloor;
      if (floored) ++*floored;
    }
    features[j] = std::log(variance);
  }
  return features;
}

double trace_ratio(const Tensor& selected, const Tensor& c1, const Tensor& c2) {
  require_same_shape(c1, c2, "trace_ratio");
  if (selected.rank() != 2 || selected.rows() != c1.rows()) {
    throw ShapeError("trace_ratio: filters " + shape_string(selected.shape()) +
                     " do not match covariance " + shape_string(c1.shape()));
  }
  const Tensor wt = transpose(selected);
  const double num = trace(matmul(matmul(wt, c1), selected));
  const double den = trace(matmul(matmul(wt, c1 + c2), selected));
  return num / den;
}

std::uint64_t fingerprint(std::span<const Tensor> tensors) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  for (const auto& t : tensors) {
    for (auto d : t.shape()) mix(d);
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      mix(bits);
    }
  }
  return h;
}

DeepCspLossState deepcsp_loss(std::span<const Tensor> latents, std::span<const int> labels,
                              std::size_t n_components, double shrinkage_factor) {
  if (latents.empty()) throw InvalidArgument("deepcsp_loss: no latent trials");
  const std::size_t f = latents.front().rows();
  if (n_components == 0 || 2 * n_components > f) {
    throw InvalidArgument("deepcsp_loss: need 2n <= " + std::to_string(f) + " latent channels");
  }
  DeepCspLossState st;
  st.covariances = class_covariances(latents, labels, shrinkage_factor);
  const Tensor& c1 = st.covariances.c1;
  const Tensor& c2 = st.covariances.c2;
  auto eig = generalized_eig_spd(c1, c1 + c2);
  st.eigenvalues = eig.values;
  st.eigenvectors = std::move(eig.vectors);
  st.n_components = n_components;

  const double weight = 1.0 / static_cast<double>(2 * n_components);
  st.grad_c1 = Tensor(Shape{f, f});
  st.grad_c2 = Tensor(Shape{f, f});
  double objective = 0.0;
  for (std::size_t j = 0; j < f; ++j) {
    const bool top = j < n_components;
    const bool bottom = j >= f - n_components;
    if (!top && !bottom) continue;
    st.selected.push_back(j);
    const double lambda = st.eigenvalues[j];
    // dλ/dC̄₁ = (1 - λ) vvᵀ, dλ/dC̄₂ = -λ vvᵀ, with vᵀ(C̄₁ + C̄₂)v = 1.
    const double sign = top ? 1.0 : -1.0;  // top terms add λ, bottom terms add 1 - λ
    objective += top ? lambda : 1.0 - lambda;
    add_outer(st.grad_c1, st.eigenvectors, j, -weight * sign * (1.0 - lambda));
    add_outer(st.grad_c2, st.eigenvectors, j, -weight * sign * (-lambda));
  }
  st.loss = -weight * objective;

  // The shrinkage term ε = factor · trace(C̄)/D also depends on C̄.
  const double shrink = shrinkage_factor / static_cast<double>(f);
  const double t1 = trace(st.grad_c1), t2 = trace(st.grad_c2);
  add_scaled_identity(st.grad_c1, shrink * t1);
  add_scaled_identity(st.grad_c2, shrink * t2);
  st.grad_c1 = symmetrize(st.grad_c1);
  st.grad_c2 = symmetrize(st.grad_c2);

  auto is_selected = [&](std::size_t j) { return j < n_components || j >= f - n_components; };
  for (std::size_t j = 1; j < f; ++j) {
    if ((is_selected(j - 1) || is_selected(j)) &&
        st.eigenvalues[j - 1] - st.eigenvalues[j] < kDegeneracyGap) {
      st.degenerate = true;
    }
  }
  st.fingerprint = fingerprint(latents);
  return st;
}

std::vector<Tensor> deepcsp_backward(const DeepCspLossState& state,
                                     std::span<const Tensor> latents,
                                     std::span<const int> labels) {
  if (latents.size() != labels.size()) throw ShapeError("deepcsp_backward: one label per trial");
  if (fingerprint(latents) != state.fingerprint) {
    throw Error("deepcsp_backward: stale loss state (latents changed since the loss was computed)");
  }
  std::vector<Tensor> grads;
  grads.reserve(latents.size());
  const double inv1 = 1.0 / static_cast<double>(state.covariances.count1);
  const double inv2 = 1.0 / static_cast<double>(state.covariances.count2);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const Tensor& x = latents[i];
    const bool first = labels[i] == 0;
    const Tensor g = (first ? inv1 : inv2) * (first ? state.grad_c1 : state.grad_c2);
    // ∂L/∂X = (2/t)(G - (trace(GA)/t) I) X with A = XXᵀ, t = trace(A)
    const Tensor gx = matmul(g, x);
    double t = 0.0, tr_ga = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      t += x[k] * x[k];
      tr_ga += gx[k] * x[k];
    }
    Tensor out(x.shape());
    const double a = 2.0 / t, b = 2.0 * tr_ga / (t * t);
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = a * gx[k] - b * x[k];
    grads.push_back(std::move(out));
  }
  return grads;
}

std::string filter_bank_to_json(const SpatialFilterBank& bank) {
  nlohmann::json j;
  j["n_components"] = bank.n_components;
  j["channel_names"] = bank.channel_names;
  j["eigenvalues"] = bank.eigenvalues;
  j["rows"] = bank.filters.rows();
  j["cols"] = bank.filters.cols();
  j["filters"] = bank.filters.storage();
  return j.dump(2);
}

SpatialFilterBank filter_bank_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("filter bank JSON: ") + e.what());
  }
  SpatialFilterBank bank;
  try {
    bank.n_components = j.at("n_components").get<std::size_t>();
    bank.channel_names = j.value("channel_names", std::vector<std::string>{});
    bank.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();
    auto values = j.at("filters").get<std::vector<double>>();
    const std::size_t cols = 2 * bank.n_components;
    if (cols == 0 || values.size() % cols != 0) throw InvalidArgument("filter bank JSON: bad filter count");
    const std::size_t rows = j.value("rows", values.size() / cols);
    bank.filters = Tensor(Shape{rows, cols}, std::move(values));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("filter bank JSON: ") + e.what());
  }
  if (bank.eigenvalues.size() != bank.size()) throw InvalidArgument("filter bank JSON: eigenvalue count");
  if (!bank.channel_names.empty() && bank.channel_names.size() != bank.channels()) {
    throw InvalidArgument("filter bank JSON: channel name count");
  }
  return bank;
}

}  // namespace deepcsp::csp
