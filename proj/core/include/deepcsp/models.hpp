#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deepcsp/connectivity.hpp"
#include "deepcsp/csp.hpp"
#include "deepcsp/tape.hpp"
#include "deepcsp/tensor.hpp"

namespace deepcsp::models {

enum class ModelKind { shallow_deepcsp, shallow_gcn };

std::string to_string(ModelKind kind);
/// "shallow-deepcsp" or "shallow-gcn".
std::optional<ModelKind> parse_model_kind(std::string_view name);

struct ModelConfig {
  ModelKind kind = ModelKind::shallow_deepcsp;
  std::size_t channels = 15;
  double fs = 512.0;
  std::size_t filters = 8;        // per temporal branch (shallow_deepcsp)
  std::size_t graph_filters = 1;  // GraphSage outputs per node (shallow_gcn)
  std::size_t hidden = 16;
  std::size_t n_components = 4;
  std::uint64_t seed = 42;
};

/// ⌊fs/2⌋, ⌊fs/3⌋, ⌊fs/4⌋.
std::array<std::size_t, 3> kernel_sizes(double fs);

/// Rows of one trial's latent features.
std::size_t latent_channels(const ModelConfig& config);

/// Throws InvalidArgument for unusable configurations.
void validate(const ModelConfig& config);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Trainable weights in declaration order, split into the two groups that
/// get separate optimizers.
struct ModelParams {
  std::vector<NamedTensor> feature_extractor;
  std::vector<NamedTensor> classifier;

  std::size_t parameter_count() const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  /// Rounds every weight to float precision.
  void quantize();
};

/// Uniform ±√(6 / (fan_in + fan_out)) weights, zero biases, seeded by config.seed.
///
/// shallow_deepcsp: temporal{0,1,2}.kernel (F, D, K_b), temporal{b}.bias (F).
/// shallow_gcn:     temporal{b}.kernel (D, 1, K_b) depthwise, temporal{b}.bias (D),
///                  graph.w_self and graph.w_neigh (F_g, 3).
/// Both:            fc1.weight (2n, h), fc1.bias (h), fc2.weight (h, 2), fc2.bias (2).
ModelParams init_params(const ModelConfig& config);

/// Tape variables of the feature extractor, paired with ModelParams::feature_extractor.
struct FeatureGraph {
  std::vector<Var> params;
  Var input;
  Var latent;  // (B, latent_channels, T)
};

/// Spectra of a fixed batch for the temporal convolutions; pass them to
/// record_features to skip recomputing them on every pass over the batch.
std::shared_ptr<const ConvInputSpectra> prepare_input(const ModelConfig& config, const Tensor& batch);

/// Records the feature extractor on `tape` for a (B, D, T) batch. `graph` is
/// the row-normalized adjacency and is required for shallow_gcn.
FeatureGraph record_features(Tape& tape, const ModelConfig& config, const ModelParams& params,
                             const Tensor& batch, const Tensor* graph, bool requires_grad,
                             std::shared_ptr<const ConvInputSpectra> input_spectra = nullptr);

/// Latent features for a (B, D, T) batch, without gradient bookkeeping.
Tensor extract_features(const ModelConfig& config, const ModelParams& params, const Tensor& batch,
                        const Tensor* graph,
                        std::shared_ptr<const ConvInputSpectra> input_spectra = nullptr);

/// Three parallel same-length convolution branches with ReLU, concatenated:
/// (D, T) -> (3F, T). Uses the shallow_deepcsp parameters.
Tensor temporal_block(const ModelConfig& config, const ModelParams& params, const Tensor& trial);

/// Weighted-mean GraphSage layer on node features `h` (V, C):
///   h'_v = act(W_self h_v + W_neigh Σ_u A[v][u] h_u), weights (F_g, C).
Tensor graphsage_layer(const Tensor& h, const Tensor& adjacency, const Tensor& w_self,
                       const Tensor& w_neigh, bool relu = true);

/// z-scores computed on training features.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;  // 1 / std, 1 for constant features

  static Standardizer fit(std::span<const std::vector<double>> rows);
  std::vector<double> apply(std::span<const double> row) const;
  bool empty() const { return mean.empty(); }
};

/// csp_features of one latent trial with the current bank.
std::vector<double> deepcsp_head(const Tensor& latent, const csp::SpatialFilterBank& bank);

/// Logits of the two-layer classifier for feature rows (B, 2n).
Tensor classifier_logits(const ModelParams& params, const Tensor& features);
/// Row-wise softmax.
Tensor softmax(const Tensor& logits);
/// Class probabilities for one feature vector.
std::vector<double> classify(const ModelParams& params, std::span<const double> features);

/// Records the classifier and its mean cross-entropy on `tape`. Returns the
/// loss; `param_vars` receives the classifier variables in declaration order.
Var record_classifier_loss(Tape& tape, const ModelParams& params, const Tensor& features,
                           std::span<const int> labels, std::vector<Var>& param_vars);

/// Everything needed to classify raw trials.
struct Model {
  ModelConfig config;
  ModelParams params;
  csp::SpatialFilterBank bank;
  Standardizer standardizer;
  std::optional<Tensor> graph;  // normalized adjacency, shallow_gcn only
  std::optional<connectivity::Method> estimator;
  signal::Band graph_band;
  double graph_threshold = 0.0;
};

/// Class probabilities (B, 2) for a (B, D, T) batch.
Tensor predict_proba(const Model& model, const Tensor& batch);

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'C', 'S', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "DCSP" | version u32 | JSON length u32 | JSON (config, parameter shapes,
/// head state) | parameters as little-endian f32 in declaration order.
std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace deepcsp::models
