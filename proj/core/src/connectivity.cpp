#include "deepcsp/connectivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "deepcsp/error.hpp"

namespace deepcsp::connectivity {
namespace {

using signal::Complex;

constexpr Method kAllMethods[] = {Method::coh,  Method::plv,  Method::iplv, Method::pli,
                                  Method::dpli, Method::wpli, Method::dwpli};

std::size_t segment_length(double fs, const Options& o) {
  return o.segment_length ? o.segment_length : signal::default_segment_length(fs);
}

// Im and the full product of z_x · conj(z_y), written out so that swapping the
// arguments negates the imaginary part exactly.
Complex cross(Complex x, Complex y) {
  const double a = x.real(), b = x.imag(), c = y.real(), d = y.imag();
  return {a * c + b * d, b * c - a * d};
}

double clamp_unit(double v, std::size_t* clamped) {
  if (v < 0.0 || v > 1.0) {
    if (clamped) ++*clamped;
    return std::clamp(v, 0.0, 1.0);
  }
  return v;
}

double coherence_from(const signal::SegmentSpectra& sx, const signal::SegmentSpectra& sy,
                      signal::Band band, std::size_t* clamped) {
  const auto gxy = signal::cross_spectrum(sx, sy);
  const auto gxx = signal::cross_spectrum(sx, sx);
  const auto gyy = signal::cross_spectrum(sy, sy);
  double total = 0.0;
  std::size_t bins = 0;
  for (std::size_t k = 0; k < gxy.freqs.size(); ++k) {
    const double f = gxy.freqs[k];
    if (f < band.low || f > band.high) continue;
    ++bins;
    const double denom = gxx.values[k].real() * gyy.values[k].real();
    if (denom <= 0.0) continue;  // a silent channel is coherent with nothing
    total += clamp_unit(std::norm(gxy.values[k]) / denom, clamped);
  }
  if (bins == 0) throw InvalidArgument("coherence: no frequency bins inside the band");
  return total / static_cast<double>(bins);
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::coh: return "coh";
    case Method::plv: return "plv";
    case Method::iplv: return "iplv";
    case Method::pli: return "pli";
    case Method::dpli: return "dpli";
    case Method::wpli: return "wpli";
    case Method::dwpli: return "dwpli";
  }
  return "unknown";
}

std::optional<Method> parse_method(std::string_view name) {
  for (auto m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

double coherence(std::span<const double> x, std::span<const double> y, double fs,
                 const Options& options) {
  if (x.size() != y.size()) throw ShapeError("coherence: signals differ in length");
  const std::size_t seg = segment_length(fs, options);
  if (x.size() < 2 * seg) {
    throw InvalidArgument("coherence: need at least two segments of " + std::to_string(seg) +
                          " samples");
  }
  const auto sx = signal::welch_segments(x, fs, seg, options.overlap);
  const auto sy = signal::welch_segments(y, fs, seg, options.overlap);
  return coherence_from(sx, sy, options.band, nullptr);
}

std::vector<Complex> prepared_analytic(std::span<const double> x, double fs,
                                       const Options& options) {
  const std::size_t trim = signal::edge_trim_samples(fs);
  if (x.size() <= 2 * trim + 8) {
    throw InvalidArgument("phase_metric: signal too short for edge trimming (" +
                          std::to_string(x.size()) + " samples)");
  }
  const std::size_t taps =
      options.fir_taps ? options.fir_taps : signal::default_fir_taps(fs, options.band);
  const auto filtered = signal::fir_bandpass(x, fs, options.band, taps);
  auto z = signal::analytic_signal(filtered, options.band).values;
  return std::vector<Complex>(z.begin() + static_cast<std::ptrdiff_t>(trim),
                              z.end() - static_cast<std::ptrdiff_t>(trim));
}

double phase_metric(std::span<const Complex> zx, std::span<const Complex> zy, Method method,
                    std::size_t* clamped) {
  if (zx.size() != zy.size()) throw ShapeError("phase_metric: signals differ in length");
  if (zx.empty()) throw InvalidArgument("phase_metric: empty signal");
  const double n = static_cast<double>(zx.size());
  double sum_re = 0.0, sum_im = 0.0;
  double sum_sign = 0.0, sum_step = 0.0;
  double sum_imag = 0.0, sum_abs_imag = 0.0, sum_sq_imag = 0.0;
  bool any_signal = false;
  for (std::size_t t = 0; t < zx.size(); ++t) {
    const Complex s = cross(zx[t], zy[t]);
    const double mag = std::abs(s);
    if (mag > 0.0) any_signal = true;
    const double dphi = std::atan2(s.imag(), s.real());
    if (mag > 0.0) {
      sum_re += s.real() / mag;
      sum_im += s.imag() / mag;
    } else {
      sum_re += 1.0;  // e^{i·0}
    }
    sum_sign += dphi > 0.0 ? 1.0 : (dphi < 0.0 ? -1.0 : 0.0);
    sum_step += dphi > 0.0 ? 1.0 : (dphi < 0.0 ? 0.0 : 0.5);
    sum_imag += s.imag();
    sum_abs_imag += std::abs(s.imag());
    sum_sq_imag += s.imag() * s.imag();
  }
  if (!any_signal) throw InvalidArgument("phase_metric: no signal left in the band");

  switch (method) {
    case Method::plv: return std::min(1.0, std::hypot(sum_re, sum_im) / n);
    case Method::iplv: return std::min(1.0, std::abs(sum_im) / n);
    case Method::pli: return std::abs(sum_sign) / n;
    case Method::dpli: return sum_step / n;
    case Method::wpli:
      return sum_abs_imag > 0.0 ? clamp_unit(std::abs(sum_imag) / sum_abs_imag, clamped) : 0.0;
    case Method::dwpli: {
      const double num = sum_imag * sum_imag - sum_sq_imag;
      const double den = sum_abs_imag * sum_abs_imag - sum_sq_imag;
      if (!(den > 0.0)) return 0.0;
      return clamp_unit(num / den, clamped);
    }
    case Method::coh: break;
  }
  throw InvalidArgument("phase_metric: coherence is not a phase estimator");
}

double phase_metric(std::span<const double> x, std::span<const double> y, double fs, Method method,
                    const Options& options) {
  if (method == Method::coh) throw InvalidArgument("phase_metric: use coherence() for coh");
  if (x.size() != y.size()) throw ShapeError("phase_metric: signals differ in length");
  const auto zx = prepared_analytic(x, fs, options);
  const auto zy = prepared_analytic(y, fs, options);
  return phase_metric(zx, zy, method);
}

ConnectivityGraph connectivity_matrix(const data::EpochSet& epochs, Method method,
                                      const Options& options) {
  epochs.validate();
  const std::size_t d = epochs.channels(), t = epochs.samples(), n = epochs.size();
  if (d < 2) throw InvalidArgument("connectivity: need at least 2 channels");
  if (n == 0) throw InvalidArgument("connectivity: need at least one trial");

  ConnectivityGraph g;
  g.estimator = method;
  g.band = options.band;
  g.directed = method == Method::dpli;
  g.trials_used = n;
  g.channel_names = epochs.channel_names;
  g.adjacency = Tensor(Shape{d, d});

  Tensor sums(Shape{d, d});
  const double fs = epochs.fs;
  const std::size_t seg = segment_length(fs, options);
  if (method == Method::coh && t < 2 * seg) {
    throw InvalidArgument("coherence: need at least two segments of " + std::to_string(seg) +
                          " samples");
  }
  for (std::size_t trial = 0; trial < n; ++trial) {
    const double* base = &epochs.trials(trial, 0, 0);
    auto channel = [&](std::size_t c) { return std::span<const double>(base + c * t, t); };
    if (method == Method::coh) {
      std::vector<signal::SegmentSpectra> spectra;
      spectra.reserve(d);
      for (std::size_t c = 0; c < d; ++c) {
        spectra.push_back(signal::welch_segments(channel(c), fs, seg, options.overlap));
      }
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i + 1; j < d; ++j) {
          sums(i, j) += coherence_from(spectra[i], spectra[j], options.band, &g.clamped);
        }
      }
    } else {
      std::vector<std::vector<Complex>> z;
      z.reserve(d);
      for (std::size_t c = 0; c < d; ++c) z.push_back(prepared_analytic(channel(c), fs, options));
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i + 1; j < d; ++j) {
          sums(i, j) += phase_metric(z[i], z[j], method, &g.clamped);
        }
      }
    }
  }

  double diagonal = 0.0;
  if (method == Method::coh || method == Method::plv) diagonal = 1.0;
  if (method == Method::dpli) diagonal = 0.5;
  for (std::size_t i = 0; i < d; ++i) {
    g.adjacency(i, i) = diagonal;
    for (std::size_t j = i + 1; j < d; ++j) {
      const double v = sums(i, j) / static_cast<double>(n);
      g.adjacency(i, j) = v;
      g.adjacency(j, i) = g.directed ? 1.0 - v : v;
    }
  }
  return g;
}

NormalizedGraph graph_normalize(const ConnectivityGraph& graph, bool self_loops, double threshold) {
  const Tensor& a = graph.adjacency;
  if (a.rank() != 2 || a.rows() != a.cols()) throw ShapeError("graph_normalize: adjacency must be square");
  if (!a.all_finite()) throw NonFiniteError("graph_normalize: non-finite adjacency");
  const std::size_t d = a.rows();
  NormalizedGraph out;
  out.weights = Tensor(Shape{d, d});
  Tensor& w = out.weights;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double v = a(i, j);
      if (graph.estimator == Method::dpli) v = std::abs(v - 0.5) * 2.0;
      if (i == j) v = self_loops ? 1.0 : 0.0;
      if (v < threshold) v = 0.0;
      w(i, j) = v;
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < d; ++j) row += w(i, j);
    if (row <= 0.0) {
      ++out.isolated;
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) w(i, j) /= row;
  }
  return out;
}

std::string graph_sidecar_json(const ConnectivityGraph& graph) {
  nlohmann::json j;
  j["estimator"] = to_string(graph.estimator);
  j["band"] = {graph.band.low, graph.band.high};
  j["trials_used"] = graph.trials_used;
  j["directed"] = graph.directed;
  j["clamped"] = graph.clamped;
  j["channel_names"] = graph.channel_names;
  return j.dump(2) + "\n";
}

std::string graph_csv(const ConnectivityGraph& graph) {
  std::ostringstream os;
  const std::size_t d = graph.adjacency.rows();
  for (std::size_t i = 0; i < d; ++i) {
    if (i) os << ',';
    os << (i < graph.channel_names.size() ? graph.channel_names[i] : "ch" + std::to_string(i));
  }
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (j) os << ',';
      std::snprintf(buf, sizeof buf, "%.17g", graph.adjacency(i, j));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace deepcsp::connectivity
