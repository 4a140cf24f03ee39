#include "deepcsp/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include <nlohmann/json.hpp>

#include "deepcsp/epochs.hpp"
#include "deepcsp/error.hpp"

namespace deepcsp::models {
namespace {

using data::FormatError;
using data::FormatErrorKind;
using json = nlohmann::json;

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  t.quantize();
  return t;
}

Tensor zeros_f32(Shape shape) { return Tensor(std::move(shape), 0.0, DType::f32); }

const Tensor* find_param(const std::vector<NamedTensor>& group, std::string_view name) {
  for (const auto& p : group) {
    if (p.name == name) return &p.value;
  }
  return nullptr;
}

json config_to_json(const ModelConfig& c) {
  return json{{"kind", to_string(c.kind)},     {"channels", c.channels},
              {"fs", c.fs},                   {"filters", c.filters},
              {"graph_filters", c.graph_filters}, {"hidden", c.hidden},
              {"n_components", c.n_components}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  const auto kind = parse_model_kind(j.at("kind").get<std::string>());
  if (!kind) throw InvalidArgument("checkpoint: unknown model kind");
  c.kind = *kind;
  c.channels = j.at("channels").get<std::size_t>();
  c.fs = j.at("fs").get<double>();
  c.filters = j.at("filters").get<std::size_t>();
  c.graph_filters = j.at("graph_filters").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.n_components = j.at("n_components").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json tensor_to_json(const Tensor& t) { return json{{"shape", t.shape()}, {"data", t.storage()}}; }

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

std::string to_string(ModelKind kind) {
  return kind == ModelKind::shallow_gcn ? "shallow-gcn" : "shallow-deepcsp";
}

std::optional<ModelKind> parse_model_kind(std::string_view name) {
  if (name == "shallow-deepcsp") return ModelKind::shallow_deepcsp;
  if (name == "shallow-gcn") return ModelKind::shallow_gcn;
  return std::nullopt;
}

std::array<std::size_t, 3> kernel_sizes(double fs) {
  return {static_cast<std::size_t>(std::floor(fs / 2.0)),
          static_cast<std::size_t>(std::floor(fs / 3.0)),
          static_cast<std::size_t>(std::floor(fs / 4.0))};
}

std::size_t latent_channels(const ModelConfig& c) {
  if (c.kind == ModelKind::shallow_gcn) return 3 * c.channels + c.graph_filters * c.channels;
  return 3 * c.filters;
}

void validate(const ModelConfig& c) {
  if (c.channels < 2) throw InvalidArgument("model: need at least 2 channels");
  if (!(c.fs >= 4.0)) throw InvalidArgument("model: sampling rate must be at least 4 Hz");
  if (c.kind == ModelKind::shallow_deepcsp && c.filters == 0) {
    throw InvalidArgument("model: need at least one filter per branch");
  }
  if (c.kind == ModelKind::shallow_gcn && c.graph_filters == 0) {
    throw InvalidArgument("model: need at least one graph filter");
  }
  if (c.hidden == 0) throw InvalidArgument("model: hidden width must be positive");
  if (c.n_components == 0 || 2 * c.n_components > latent_channels(c)) {
    throw InvalidArgument("model: 2 * n_components (" + std::to_string(2 * c.n_components) +
                          ") exceeds the " + std::to_string(latent_channels(c)) +
                          " latent channels");
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : feature_extractor) n += p.value.size();
  for (const auto& p : classifier) n += p.value.size();
  return n;
}

const Tensor& ModelParams::at(std::string_view name) const {
  if (const Tensor* t = find_param(feature_extractor, name)) return *t;
  if (const Tensor* t = find_param(classifier, name)) return *t;
  throw InvalidArgument("model: no parameter named " + std::string(name));
}

Tensor& ModelParams::at(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(name));
}

void ModelParams::quantize() {
  for (auto& p : feature_extractor) p.value.quantize();
  for (auto& p : classifier) p.value.quantize();
}

ModelParams init_params(const ModelConfig& c) {
  validate(c);
  std::mt19937_64 rng(c.seed);
  ModelParams p;
  const auto ks = kernel_sizes(c.fs);
  const std::size_t d = c.channels;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string prefix = "temporal" + std::to_string(b);
    if (c.kind == ModelKind::shallow_deepcsp) {
      p.feature_extractor.push_back(
          {prefix + ".kernel", glorot({c.filters, d, ks[b]}, d * ks[b], c.filters * ks[b], rng)});
      p.feature_extractor.push_back({prefix + ".bias", zeros_f32({c.filters})});
    } else {
      p.feature_extractor.push_back({prefix + ".kernel", glorot({d, 1, ks[b]}, ks[b], ks[b], rng)});
      p.feature_extractor.push_back({prefix + ".bias", zeros_f32({d})});
    }
  }
  if (c.kind == ModelKind::shallow_gcn) {
    p.feature_extractor.push_back({"graph.w_self", glorot({c.graph_filters, 3}, 3, c.graph_filters, rng)});
    p.feature_extractor.push_back({"graph.w_neigh", glorot({c.graph_filters, 3}, 3, c.graph_filters, rng)});
  }
  const std::size_t in = 2 * c.n_components;
  p.classifier.push_back({"fc1.weight", glorot({in, c.hidden}, in, c.hidden, rng)});
  p.classifier.push_back({"fc1.bias", zeros_f32({c.hidden})});
  p.classifier.push_back({"fc2.weight", glorot({c.hidden, 2}, c.hidden, 2, rng)});
  p.classifier.push_back({"fc2.bias", zeros_f32({2})});
  return p;
}

std::shared_ptr<const ConvInputSpectra> prepare_input(const ModelConfig& config, const Tensor& batch) {
  if (batch.rank() != 3) throw ShapeError("model: expected a (B, D, T) batch");
  return conv1d_input_spectra(batch, conv1d_fft_length(batch.dim(2), kernel_sizes(config.fs)[0]));
}

FeatureGraph record_features(Tape& tape, const ModelConfig& c, const ModelParams& params,
                             const Tensor& batch, const Tensor* graph, bool requires_grad,
                             std::shared_ptr<const ConvInputSpectra> input_spectra) {
  validate(c);
  if (batch.rank() != 3 || batch.dim(1) != c.channels) {
    throw ShapeError("model: expected a (B, " + std::to_string(c.channels) + ", T) batch, got " +
                     shape_string(batch.shape()));
  }
  const std::size_t k_max = kernel_sizes(c.fs)[0];
  if (batch.dim(2) < k_max) {
    throw ShapeError("model: " + std::to_string(batch.dim(2)) +
                     " samples is shorter than the longest kernel (" + std::to_string(k_max) + ")");
  }
  FeatureGraph fg;
  for (const auto& p : params.feature_extractor) fg.params.push_back(tape.leaf(p.value, requires_grad));
  fg.input = tape.constant(batch);

  const std::size_t groups = c.kind == ModelKind::shallow_gcn ? c.channels : 1;
  std::vector<Var> branches;
  for (std::size_t b = 0; b < 3; ++b) {
    Var h = tape.conv1d(fg.input, fg.params[2 * b], groups, input_spectra);
    h = tape.add_bias(h, fg.params[2 * b + 1], 1);
    branches.push_back(tape.relu(h));
  }
  Var temporal = tape.concat(branches, 1);
  if (c.kind == ModelKind::shallow_deepcsp) {
    fg.latent = temporal;
    return fg;
  }
  if (!graph) throw InvalidArgument("model: the GCN variant needs an adjacency matrix");
  if (graph->rank() != 2 || graph->rows() != c.channels || graph->cols() != c.channels) {
    throw ShapeError("model: adjacency " + shape_string(graph->shape()) + " does not match " +
                     std::to_string(c.channels) + " channels");
  }
  // Rows of `temporal` are branch-major (b·D + v), so the per-node GraphSage
  // update for every time step is one (F_g·D, 3D) mixing matrix.
  Var eye = tape.constant(Tensor::identity(c.channels));
  Var adj = tape.constant(*graph);
  Var mix = tape.add(tape.kron(fg.params[6], eye), tape.kron(fg.params[7], adj));
  Var graph_out = tape.relu(tape.matmul(mix, temporal));
  const Var parts[] = {temporal, graph_out};
  fg.latent = tape.concat(parts, 1);
  return fg;
}

Tensor extract_features(const ModelConfig& config, const ModelParams& params, const Tensor& batch,
                        const Tensor* graph, std::shared_ptr<const ConvInputSpectra> input_spectra) {
  Tape tape;
  const auto fg = record_features(tape, config, params, batch, graph, false, std::move(input_spectra));
  return tape.value(fg.latent);
}

Tensor temporal_block(const ModelConfig& config, const ModelParams& params, const Tensor& trial) {
  if (config.kind != ModelKind::shallow_deepcsp) {
    throw InvalidArgument("temporal_block: defined for the shallow-deepcsp variant");
  }
  if (trial.rank() != 2) throw ShapeError("temporal_block: trial must be (D, T)");
  const Tensor batch = trial.reshaped({1, trial.rows(), trial.cols()});
  return extract_features(config, params, batch, nullptr).slice0(0);
}

Tensor graphsage_layer(const Tensor& h, const Tensor& adjacency, const Tensor& w_self,
                       const Tensor& w_neigh, bool relu) {
  if (h.rank() != 2) throw ShapeError("graphsage_layer: node features must be (V, C)");
  const std::size_t v = h.rows(), c = h.cols();
  if (adjacency.rank() != 2 || adjacency.rows() != v || adjacency.cols() != v) {
    throw ShapeError("graphsage_layer: adjacency " + shape_string(adjacency.shape()) +
                     " does not match " + std::to_string(v) + " nodes");
  }
  if (w_self.rank() != 2 || w_self.cols() != c) throw ShapeError("graphsage_layer: W_self must be (F, C)");
  require_same_shape(w_self, w_neigh, "graphsage_layer weights");
  const std::size_t f = w_self.rows();
  const Tensor agg = matmul(adjacency, h);  // (V, C) neighbour means
  Tensor out(Shape{v, f});
  for (std::size_t n = 0; n < v; ++n)
    for (std::size_t o = 0; o < f; ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += w_self(o, k) * h(n, k) + w_neigh(o, k) * agg(n, k);
      out(n, o) = relu ? std::max(0.0, acc) : acc;
    }
  return out;
}

Standardizer Standardizer::fit(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw InvalidArgument("standardizer: no rows");
  const std::size_t k = rows.front().size();
  Standardizer s;
  s.mean.assign(k, 0.0);
  s.scale.assign(k, 1.0);
  for (const auto& r : rows) {
    if (r.size() != k) throw ShapeError("standardizer: ragged rows");
    for (std::size_t j = 0; j < k; ++j) s.mean[j] += r[j];
  }
  const double n = static_cast<double>(rows.size());
  for (auto& m : s.mean) m /= n;
  for (std::size_t j = 0; j < k; ++j) {
    double var = 0.0;
    for (const auto& r : rows) var += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    const double sd = std::sqrt(var / n);
    s.scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  return s;
}

std::vector<double> Standardizer::apply(std::span<const double> row) const {
  if (empty()) return {row.begin(), row.end()};
  if (row.size() != mean.size()) {
    throw ShapeError("standardizer: fitted on " + std::to_string(mean.size()) + " features, got " +
                     std::to_string(row.size()));
  }
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = (row[j] - mean[j]) * scale[j];
  return out;
}

std::vector<double> deepcsp_head(const Tensor& latent, const csp::SpatialFilterBank& bank) {
  if (latent.rank() != 2 || latent.rows() != bank.channels()) {
    throw ShapeError("deepcsp_head: filter bank was fitted on " + std::to_string(bank.channels()) +
                     " latent channels, features have shape " + shape_string(latent.shape()));
  }
  return csp::csp_features(bank, latent);
}

Tensor classifier_logits(const ModelParams& params, const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("classifier: features must be (B, 2n)");
  if (!features.all_finite()) throw NonFiniteError("classifier: non-finite features");
  const Tensor& w1 = params.at("fc1.weight");
  const Tensor& b1 = params.at("fc1.bias");
  const Tensor& w2 = params.at("fc2.weight");
  const Tensor& b2 = params.at("fc2.bias");
  if (features.cols() != w1.rows()) {
    throw ShapeError("classifier: expected " + std::to_string(w1.rows()) + " features, got " +
                     std::to_string(features.cols()));
  }
  Tensor h = matmul(features, w1);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) = std::max(0.0, h(i, j) + b1[j]);
  Tensor z = matmul(h, w2);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += b2[j];
  return z;
}

Tensor softmax(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) denom += std::exp(logits(i, j) - mx);
    for (std::size_t j = 0; j < logits.cols(); ++j) p(i, j) = std::exp(logits(i, j) - mx) / denom;
  }
  return p;
}

std::vector<double> classify(const ModelParams& params, std::span<const double> features) {
  const Tensor row(Shape{1, features.size()}, std::vector<double>(features.begin(), features.end()));
  const Tensor p = softmax(classifier_logits(params, row));
  return {p[0], p[1]};
}

Var record_classifier_loss(Tape& tape, const ModelParams& params, const Tensor& features,
                           std::span<const int> labels, std::vector<Var>& param_vars) {
  param_vars.clear();
  for (const auto& p : params.classifier) param_vars.push_back(tape.leaf(p.value, true));
  Var x = tape.constant(features);
  Var h = tape.relu(tape.add_bias(tape.matmul(x, param_vars[0]), param_vars[1], 1));
  Var z = tape.add_bias(tape.matmul(h, param_vars[2]), param_vars[3], 1);
  return tape.softmax_cross_entropy(z, labels);
}

Tensor predict_proba(const Model& model, const Tensor& batch) {
  const Tensor* graph = model.graph ? &*model.graph : nullptr;
  const Tensor latents = extract_features(model.config, model.params, batch, graph);
  const std::size_t n = latents.dim(0), k = model.bank.size();
  Tensor features(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = model.standardizer.apply(deepcsp_head(latents.slice0(i), model.bank));
    std::copy(row.begin(), row.end(), &features(i, 0));
  }
  return softmax(classifier_logits(model.params, features));
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  json meta;
  meta["config"] = config_to_json(model.config);
  json shapes = json::array();
  auto describe = [&shapes](const std::vector<NamedTensor>& group, const char* name) {
    for (const auto& p : group) shapes.push_back({{"name", p.name}, {"group", name}, {"shape", p.value.shape()}});
  };
  describe(model.params.feature_extractor, "feature_extractor");
  describe(model.params.classifier, "classifier");
  meta["parameters"] = shapes;
  if (model.bank.size() > 0) meta["filter_bank"] = json::parse(csp::filter_bank_to_json(model.bank));
  meta["standardizer"] = {{"mean", model.standardizer.mean}, {"scale", model.standardizer.scale}};
  if (model.graph) {
    meta["graph"] = {{"adjacency", tensor_to_json(*model.graph)},
                     {"estimator", model.estimator ? connectivity::to_string(*model.estimator) : ""},
                     {"band", {model.graph_band.low, model.graph_band.high}},
                     {"threshold", model.graph_threshold}};
  }
  const std::string text = meta.dump();
  if (text.size() > UINT32_MAX) throw InvalidArgument("checkpoint: metadata too large");

  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  auto put_u32 = [&out](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put_u32(kCheckpointVersion);
  put_u32(static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  auto put_group = [&out](const std::vector<NamedTensor>& group) {
    for (const auto& p : group) {
      for (double v : p.value.data()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
      }
    }
  };
  put_group(model.params.feature_extractor);
  put_group(model.params.classifier);
  return out;
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      throw FormatError(FormatErrorKind::truncated_payload, std::string("checkpoint ends inside ") + what);
    }
  };
  auto get_u32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  need(4, "magic");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError(FormatErrorKind::bad_magic, "expected \"DCSP\"");
  }
  pos = 4;
  const auto version = get_u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::version_mismatch,
                      "checkpoint version " + std::to_string(version) + ", reader supports " +
                          std::to_string(kCheckpointVersion));
  }
  const auto length = get_u32("metadata length");
  need(length, "metadata");
  const std::string text(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + length));
  pos += length;

  Model model;
  try {
    const json meta = json::parse(text);
    model.config = config_from_json(meta.at("config"));
    model.params = init_params(model.config);
    std::size_t index = 0;
    const auto& shapes = meta.at("parameters");
    for (auto* group : {&model.params.feature_extractor, &model.params.classifier}) {
      for (auto& p : *group) {
        if (index >= shapes.size() || shapes[index].at("name").get<std::string>() != p.name ||
            shapes[index].at("shape").get<Shape>() != p.value.shape()) {
          throw FormatError(FormatErrorKind::inconsistent,
                            "parameter table does not match the model configuration at " + p.name);
        }
        ++index;
      }
    }
    if (index != shapes.size()) throw FormatError(FormatErrorKind::inconsistent, "extra parameters");
    if (meta.contains("filter_bank")) model.bank = csp::filter_bank_from_json(meta.at("filter_bank").dump());
    model.standardizer.mean = meta.at("standardizer").at("mean").get<std::vector<double>>();
    model.standardizer.scale = meta.at("standardizer").at("scale").get<std::vector<double>>();
    if (meta.contains("graph")) {
      const auto& g = meta.at("graph");
      model.graph = tensor_from_json(g.at("adjacency"));
      model.estimator = connectivity::parse_method(g.at("estimator").get<std::string>());
      model.graph_band = {g.at("band").at(0).get<double>(), g.at("band").at(1).get<double>()};
      model.graph_threshold = g.at("threshold").get<double>();
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::inconsistent, std::string("checkpoint metadata: ") + e.what());
  }

  const std::size_t count = model.params.parameter_count();
  if (bytes.size() - pos != 4 * count) {
    throw FormatError(bytes.size() - pos < 4 * count ? FormatErrorKind::truncated_payload
                                                     : FormatErrorKind::inconsistent,
                      "expected " + std::to_string(4 * count) + " parameter bytes, found " +
                          std::to_string(bytes.size() - pos));
  }
  for (auto* group : {&model.params.feature_extractor, &model.params.classifier}) {
    for (auto& p : *group) {
      for (auto& v : p.value.data()) {
        std::uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        float f;
        std::memcpy(&f, &bits, 4);
        v = f;
      }
    }
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatErrorKind::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError(FormatErrorKind::io, "failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace deepcsp::models
