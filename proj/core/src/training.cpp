#include "deepcsp/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "deepcsp/synth.hpp"

namespace deepcsp::training {
namespace {

using json = nlohmann::json;
using models::Model;

// Keeps the classifier shuffle independent of the split stream.
constexpr std::uint64_t kShuffleStream = 0x9e3779b97f4a7c15ull;

struct Chunk {
  Tensor batch;                   // (B, D, T)
  std::vector<std::size_t> rows;  // positions in the owning trial list
  std::shared_ptr<const ConvInputSpectra> spectra;
};

std::vector<Chunk> make_chunks(const models::ModelConfig& config, const data::EpochSet& set,
                               std::span<const std::size_t> indices, std::size_t chunk_size) {
  std::vector<Chunk> chunks;
  for (std::size_t start = 0; start < indices.size(); start += chunk_size) {
    const std::size_t end = std::min(indices.size(), start + chunk_size);
    Chunk c;
    std::vector<Tensor> parts;
    for (std::size_t i = start; i < end; ++i) {
      parts.push_back(set.trial(indices[i]));
      c.rows.push_back(i);
    }
    c.batch = stack(parts);
    c.spectra = models::prepare_input(config, c.batch);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

// Forward pass that keeps each chunk's tape for the feature step.
struct RecordedForward {
  std::vector<Tape> tapes;
  std::vector<models::FeatureGraph> graphs;
  std::vector<Tensor> latents;  // one (F, T) tensor per trial
};

RecordedForward record_forward(const Model& model, const std::vector<Chunk>& chunks) {
  RecordedForward out;
  const Tensor* graph = model.graph ? &*model.graph : nullptr;
  for (const auto& c : chunks) {
    Tape tape;
    auto fg = models::record_features(tape, model.config, model.params, c.batch, graph, true, c.spectra);
    const Tensor& lat = tape.value(fg.latent);
    for (std::size_t b = 0; b < lat.dim(0); ++b) out.latents.push_back(lat.slice0(b));
    out.tapes.push_back(std::move(tape));
    out.graphs.push_back(std::move(fg));
  }
  return out;
}

std::vector<Tensor> plain_forward(const Model& model, const std::vector<Chunk>& chunks) {
  std::vector<Tensor> out;
  const Tensor* graph = model.graph ? &*model.graph : nullptr;
  for (const auto& c : chunks) {
    const Tensor lat = models::extract_features(model.config, model.params, c.batch, graph, c.spectra);
    for (std::size_t b = 0; b < lat.dim(0); ++b) out.push_back(lat.slice0(b));
  }
  return out;
}

std::vector<std::vector<double>> head_features(const csp::SpatialFilterBank& bank,
                                               std::span<const Tensor> latents) {
  std::vector<std::vector<double>> rows;
  rows.reserve(latents.size());
  for (const auto& l : latents) rows.push_back(models::deepcsp_head(l, bank));
  return rows;
}

Tensor standardized_matrix(const models::Standardizer& s,
                           const std::vector<std::vector<double>>& rows) {
  const std::size_t k = rows.empty() ? 0 : rows.front().size();
  Tensor out(Shape{rows.size(), k});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = s.apply(rows[i]);
    std::copy(r.begin(), r.end(), &out(i, 0));
  }
  return out;
}

Metrics score(const Tensor& logits, std::span<const int> labels) {
  Metrics m;
  m.trials = labels.size();
  std::array<std::size_t, 2> correct{}, total{};
  double ce = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z0 = logits(i, 0), z1 = logits(i, 1);
    const double mx = std::max(z0, z1);
    const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
    const auto y = static_cast<std::size_t>(labels[i]);
    ce += lse - logits(i, y);
    const std::size_t predicted = z1 > z0 ? 1 : 0;
    ++total[y];
    if (predicted == y) {
      ++correct[y];
      ++hits;
    }
  }
  const double n = static_cast<double>(labels.size());
  m.accuracy = static_cast<double>(hits) / n;
  m.cross_entropy = ce / n;
  for (std::size_t c = 0; c < 2; ++c) {
    m.class_accuracy[c] = total[c] ? static_cast<double>(correct[c]) / static_cast<double>(total[c])
                                   : std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NonFiniteLoss("training: non-finite " + what);
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_feature >= 0.0) || !(lr_classifier >= 0.0)) {
    throw InvalidArgument("train: learning rates must be non-negative");
  }
  if (batch_size == 0) throw InvalidArgument("train: batch size must be positive");
  if (chunk_size == 0) throw InvalidArgument("train: chunk size must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw InvalidArgument("train: validation fraction must be in [0, 1)");
  }
  if (!(shrinkage >= 0.0)) throw InvalidArgument("train: shrinkage must be non-negative");
}

void classifier_sgd_epoch(models::ModelParams& params, const Tensor& features,
                          std::span<const int> labels, double lr, std::size_t batch_size,
                          std::mt19937_64& rng) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw ShapeError("classifier: one feature row per label");
  }
  if (batch_size == 0) throw InvalidArgument("classifier: batch size must be positive");
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t k = features.cols();
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Tensor xb(Shape{end - start, k});
    std::vector<int> yb;
    for (std::size_t i = start; i < end; ++i) {
      std::copy(&features(order[i], 0), &features(order[i], 0) + k, &xb(i - start, 0));
      yb.push_back(labels[order[i]]);
    }
    Tape tape;
    std::vector<Var> vars;
    const Var loss = models::record_classifier_loss(tape, params, xb, yb, vars);
    if (!std::isfinite(tape.value(loss)[0])) throw NonFiniteLoss("classifier loss became non-finite");
    const auto grads = tape.backward(loss);
    for (std::size_t p = 0; p < vars.size(); ++p) {
      const Tensor g = grads.get(vars[p], params.classifier[p].value);
      auto& w = params.classifier[p].value;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      w.quantize();
    }
  }
}

TrainResult train(const data::EpochSet& train_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  train_set.validate();
  if (train_set.count(0) == 0 || train_set.count(1) == 0) {
    throw InvalidArgument("train: both classes must be present");
  }

  TrainResult result;
  Model model;
  model.config = config.model;
  model.config.channels = train_set.channels();
  model.config.fs = train_set.fs;
  models::validate(model.config);
  const std::size_t n = model.config.n_components;

  if (config.validation_fraction > 0.0) {
    auto [fit, val] = data::split_indices(train_set.labels, config.validation_fraction,
                                          model.config.seed, true);
    result.fit_indices = std::move(fit);
    result.validation_indices = std::move(val);
  } else {
    for (std::size_t i = 0; i < train_set.size(); ++i) result.fit_indices.push_back(i);
  }
  const bool has_validation = !result.validation_indices.empty();
  std::vector<int> fit_labels, val_labels;
  for (auto i : result.fit_indices) fit_labels.push_back(train_set.labels[i]);
  for (auto i : result.validation_indices) val_labels.push_back(train_set.labels[i]);

  if (model.config.kind == models::ModelKind::shallow_gcn) {
    auto options = config.connectivity;
    const auto graph = connectivity::connectivity_matrix(train_set, config.estimator, options);
    model.graph = connectivity::graph_normalize(graph, config.self_loops, config.graph_threshold).weights;
    model.estimator = config.estimator;
    model.graph_band = options.band;
    model.graph_threshold = config.graph_threshold;
  }
  model.params = models::init_params(model.config);

  const auto fit_chunks = make_chunks(model.config, train_set, result.fit_indices, config.chunk_size);
  const auto val_chunks =
      make_chunks(model.config, train_set, result.validation_indices, config.chunk_size);
  std::mt19937_64 shuffle_rng(model.config.seed ^ kShuffleStream);

  // Refits the head on fresh fit latents and scores both splits.
  std::vector<std::vector<double>> fit_rows;
  auto refit_head = [&](std::span<const Tensor> fit_latents) {
    model.bank = csp::fit_filter_bank(fit_latents, fit_labels, n, config.shrinkage);
    fit_rows = head_features(model.bank, fit_latents);
    model.standardizer = models::Standardizer::fit(fit_rows);
  };
  auto score_split = [&](const std::vector<std::vector<double>>& rows, std::span<const int> labels) {
    const Tensor x = standardized_matrix(model.standardizer, rows);
    const Tensor logits = models::classifier_logits(model.params, x);
    return score(logits, labels);
  };
  auto score_validation = [&](const Metrics& fit_metrics) {
    if (!has_validation) return fit_metrics;
    const auto val_latents = plain_forward(model, val_chunks);
    return score_split(head_features(model.bank, val_latents), val_labels);
  };

  RecordedForward forward = record_forward(model, fit_chunks);
  refit_head(forward.latents);
  {
    EpochMetrics m0;
    const auto st = csp::deepcsp_loss(forward.latents, fit_labels, n, config.shrinkage);
    m0.deepcsp_loss = st.loss;
    m0.eigenvalues = st.eigenvalues;
    for (std::size_t j = 0; j < n; ++j) m0.top_mean += st.eigenvalues[j] / static_cast<double>(n);
    m0.degenerate = st.degenerate;
    const Metrics fit_m = score_split(fit_rows, fit_labels);
    const Metrics val_m = score_validation(fit_m);
    m0.train_cross_entropy = fit_m.cross_entropy;
    m0.train_accuracy = fit_m.accuracy;
    m0.val_cross_entropy = val_m.cross_entropy;
    m0.val_accuracy = val_m.accuracy;
    result.history.push_back(m0);
    if (on_epoch) on_epoch(m0);
  }
  result.model = model;
  double best = result.history.back().val_cross_entropy;
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;

    // Feature-extractor step on the DeepCSP loss over the whole fit split.
    const auto st = csp::deepcsp_loss(forward.latents, fit_labels, n, config.shrinkage);
    if (!std::isfinite(st.loss)) {
      throw NonFiniteLoss("training: DeepCSP loss became non-finite at epoch " + std::to_string(epoch));
    }
    m.deepcsp_loss = st.loss;
    m.eigenvalues = st.eigenvalues;
    for (std::size_t j = 0; j < n; ++j) m.top_mean += st.eigenvalues[j] / static_cast<double>(n);
    m.degenerate = st.degenerate;

    const auto latent_grads = csp::deepcsp_backward(st, forward.latents, fit_labels);
    std::vector<Tensor> param_grads;
    for (const auto& p : model.params.feature_extractor) param_grads.emplace_back(p.value.shape());
    for (std::size_t c = 0; c < fit_chunks.size(); ++c) {
      std::vector<Tensor> parts;
      for (auto row : fit_chunks[c].rows) parts.push_back(latent_grads[row]);
      const Seed seed{forward.graphs[c].latent, stack(parts)};
      const auto grads = forward.tapes[c].backward(std::span<const Seed>(&seed, 1));
      for (std::size_t k = 0; k < param_grads.size(); ++k) {
        if (const Tensor* g = grads.find(forward.graphs[c].params[k])) {
          param_grads[k] = param_grads[k] + *g;
        }
      }
    }
    for (std::size_t k = 0; k < param_grads.size(); ++k) {
      require_finite(param_grads[k], "gradient for " + model.params.feature_extractor[k].name);
      auto& w = model.params.feature_extractor[k].value;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config.lr_feature * param_grads[k][i];
      w.quantize();
      require_finite(w, "weights for " + model.params.feature_extractor[k].name + " at epoch " +
                            std::to_string(epoch) + " (learning rate too large?)");
    }

    // Fresh latents: refit the bank and standardizer, keep the tapes for the next step.
    forward = record_forward(model, fit_chunks);
    refit_head(forward.latents);

    // Classifier pass in shuffled minibatches.
    try {
      classifier_sgd_epoch(model.params, standardized_matrix(model.standardizer, fit_rows), fit_labels,
                           config.lr_classifier, config.batch_size, shuffle_rng);
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss(std::string(e.what()) + " at epoch " + std::to_string(epoch));
    }

    const Metrics fit_m = score_split(fit_rows, fit_labels);
    const Metrics val_m = score_validation(fit_m);
    m.train_cross_entropy = fit_m.cross_entropy;
    m.train_accuracy = fit_m.accuracy;
    m.val_cross_entropy = val_m.cross_entropy;
    m.val_accuracy = val_m.accuracy;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);

    if (m.val_cross_entropy < best) {
      best = m.val_cross_entropy;
      result.best_epoch = epoch;
      result.model = model;
      stale = 0;
    } else if (config.patience > 0 && ++stale >= config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

BaselineResult csp_baseline(const data::EpochSet& train_set, const data::EpochSet& test_set,
                            const BaselineConfig& config) {
  train_set.validate();
  test_set.validate();
  if (train_set.count(0) == 0 || train_set.count(1) == 0) {
    throw InvalidArgument("csp: both classes must be present in the training trials");
  }
  if (test_set.size() > 0 && test_set.channels() != train_set.channels()) {
    throw ShapeError("csp: training and test trials differ in channel count");
  }
  const std::size_t n = config.n_components;
  if (n == 0 || 2 * n > train_set.channels()) {
    throw InvalidArgument("csp: 2 * components must not exceed the " +
                          std::to_string(train_set.channels()) + " channels");
  }
  BaselineResult r;
  const auto trials = train_set.trial_list();
  r.bank = csp::fit_filter_bank(trials, train_set.labels, n, config.shrinkage);
  r.bank.channel_names = train_set.channel_names;
  auto rows = [&](const data::EpochSet& set) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < set.size(); ++i) out.push_back(csp::csp_features(r.bank, set.trial(i)));
    return out;
  };
  const auto train_rows = rows(train_set);
  r.standardizer = models::Standardizer::fit(train_rows);

  models::ModelConfig mc;
  mc.channels = train_set.channels();
  mc.fs = train_set.fs;
  mc.hidden = config.hidden;
  mc.n_components = n;
  mc.seed = config.seed;
  // Only the classifier weights are used; the extractor shapes just need to be valid.
  mc.filters = std::max<std::size_t>(1, (2 * n + 2) / 3);
  const auto all = models::init_params(mc);
  r.params.classifier = all.classifier;

  const Tensor x_train = standardized_matrix(r.standardizer, train_rows);
  std::mt19937_64 rng(config.seed ^ kShuffleStream);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    classifier_sgd_epoch(r.params, x_train, train_set.labels, config.lr, config.batch_size, rng);
  }
  r.train = score(models::classifier_logits(r.params, x_train), train_set.labels);
  if (test_set.size() > 0) {
    const Tensor x_test = standardized_matrix(r.standardizer, rows(test_set));
    r.test = score(models::classifier_logits(r.params, x_test), test_set.labels);
  }
  return r;
}

std::vector<Tensor> latent_features(const Model& model, const data::EpochSet& epochs) {
  std::vector<std::size_t> all(epochs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return plain_forward(model, make_chunks(model.config, epochs, all, 64));
}

Metrics evaluate(const Model& model, const data::EpochSet& test_set) {
  if (test_set.size() == 0) throw InvalidArgument("evaluate: empty test set");
  test_set.validate();
  if (test_set.channels() != model.config.channels) {
    throw ShapeError("evaluate: model expects " + std::to_string(model.config.channels) +
                     " channels, data has " + std::to_string(test_set.channels()));
  }
  if (model.bank.size() == 0) throw InvalidArgument("evaluate: model has no fitted filter bank");
  const auto latents = latent_features(model, test_set);
  const Tensor x = standardized_matrix(model.standardizer, head_features(model.bank, latents));
  return score(models::classifier_logits(model.params, x), test_set.labels);
}

std::string export_scatter(std::span<const Tensor> latents, std::span<const int> labels,
                           const csp::SpatialFilterBank& bank, std::size_t n) {
  if (latents.size() != labels.size()) throw ShapeError("export_scatter: one label per trial");
  if (bank.n_components == 0) throw InvalidArgument("export_scatter: empty filter bank");
  if (n == 0 || n > bank.size()) {
    throw InvalidArgument("export_scatter: can show 1.." + std::to_string(bank.size()) + " components");
  }
  const std::size_t top = (n + 1) / 2, bottom = n / 2;
  if (top > bank.n_components || bottom > bank.n_components) {
    throw InvalidArgument("export_scatter: bank has only " + std::to_string(bank.n_components) +
                          " filters per block");
  }
  std::vector<std::size_t> columns;
  for (std::size_t j = 0; j < top; ++j) columns.push_back(j);
  for (std::size_t j = bank.size() - bottom; j < bank.size(); ++j) columns.push_back(j);

  std::ostringstream os;
  for (std::size_t j = 0; j < n; ++j) os << "component_" << columns[j] << ',';
  os << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const auto f = csp::csp_features(bank, latents[i]);
    for (auto c : columns) {
      std::snprintf(buf, sizeof buf, "%.17g", f[c]);
      os << buf << ',';
    }
    os << labels[i] << '\n';
  }
  return os.str();
}

std::string export_topomap(const csp::SpatialFilterBank& bank,
                           std::span<const data::Position> positions) {
  if (positions.size() != bank.channels()) {
    throw InvalidArgument("export_topomap: " + std::to_string(bank.channels()) +
                          " channels but " + std::to_string(positions.size()) + " positions");
  }
  json components = json::array();
  for (std::size_t j = 0; j < bank.size(); ++j) {
    json records = json::array();
    for (std::size_t i = 0; i < bank.channels(); ++i) {
      const std::string name =
          i < bank.channel_names.size() ? bank.channel_names[i] : "ch" + std::to_string(i);
      records.push_back({{"channel", name},
                         {"x", positions[i][0]},
                         {"y", positions[i][1]},
                         {"weight", bank.filters(i, j)}});
    }
    components.push_back({{"index", j}, {"eigenvalue", bank.eigenvalues[j]}, {"records", records}});
  }
  return json{{"components", components}}.dump(2) + "\n";
}

std::uint64_t head_checksum(const Model& model) {
  std::vector<Tensor> parts{model.bank.filters, Tensor::vector(model.bank.eigenvalues),
                            Tensor::vector(model.standardizer.mean),
                            Tensor::vector(model.standardizer.scale)};
  if (model.graph) parts.push_back(*model.graph);
  return csp::fingerprint(parts);
}

std::string epoch_metrics_json(const EpochMetrics& m) {
  json j{{"epoch", m.epoch},
         {"deepcsp_loss", finite_or_null(m.deepcsp_loss)},
         {"eigenvalues", m.eigenvalues},
         {"top_mean", m.top_mean},
         {"degenerate", m.degenerate},
         {"train_cross_entropy", finite_or_null(m.train_cross_entropy)},
         {"train_accuracy", m.train_accuracy},
         {"val_cross_entropy", finite_or_null(m.val_cross_entropy)},
         {"val_accuracy", m.val_accuracy}};
  return j.dump();
}

std::string metrics_json(const Metrics& m) {
  json j{{"trials", m.trials},
         {"accuracy", m.accuracy},
         {"class_accuracy", {finite_or_null(m.class_accuracy[0]), finite_or_null(m.class_accuracy[1])}},
         {"cross_entropy", finite_or_null(m.cross_entropy)}};
  return j.dump(2) + "\n";
}

void write_metrics_jsonl(const std::filesystem::path& path, std::span<const EpochMetrics> history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& m : history) os << epoch_metrics_json(m) << '\n';
  if (!os) throw Error("failed writing " + path.string());
}

}  // namespace deepcsp::training
