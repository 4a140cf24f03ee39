#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deepcsp/connectivity.hpp"
#include "deepcsp/epochs.hpp"
#include "deepcsp/error.hpp"
#include "deepcsp/models.hpp"

namespace deepcsp::training {

struct TrainConfig {
  models::ModelConfig model;  // channels and fs are taken from the data
  double lr_feature = 0.01;
  double lr_classifier = 0.1;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::size_t patience = 20;  // epochs without validation improvement; 0 disables
  double validation_fraction = 0.2;
  double shrinkage = csp::kDefaultShrinkage;
  std::size_t chunk_size = 64;  // trials per recorded forward pass
  // GCN variant only.
  connectivity::Method estimator = connectivity::Method::plv;
  connectivity::Options connectivity;
  double graph_threshold = 0.0;
  bool self_loops = false;

  /// Throws InvalidArgument when a value is out of range.
  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double deepcsp_loss = 0.0;          // before this epoch's feature step
  std::vector<double> eigenvalues;    // full latent spectrum, descending
  double top_mean = 0.0;              // mean of the n largest eigenvalues
  bool degenerate = false;
  double train_cross_entropy = 0.0;   // fit split, after the classifier pass
  double train_accuracy = 0.0;
  double val_cross_entropy = 0.0;
  double val_accuracy = 0.0;
};

struct Metrics {
  std::size_t trials = 0;
  double accuracy = 0.0;
  std::array<double, 2> class_accuracy{};  // NaN for an absent class
  double cross_entropy = 0.0;
};

struct TrainResult {
  models::Model model;  // best-by-validation snapshot
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::vector<std::size_t> fit_indices;
  std::vector<std::size_t> validation_indices;
};

/// Raised when the loss or a gradient stops being finite.
class NonFiniteLoss : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Alternating protocol. Each epoch: one full-batch SGD step of the feature
/// extractor on the DeepCSP loss, a filter-bank refit on the new latents, then
/// a shuffled pass of minibatch SGD on the classifier. The filter bank and the
/// feature standardizer come from the fit split only. Returns the snapshot with
/// the lowest validation cross-entropy (epoch 0 is the untrained model).
TrainResult train(const data::EpochSet& train_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// One shuffled pass of minibatch SGD over the classifier weights of `params`.
void classifier_sgd_epoch(models::ModelParams& params, const Tensor& features,
                          std::span<const int> labels, double lr, std::size_t batch_size,
                          std::mt19937_64& rng);

/// Classical CSP log-variance features into the same two-layer classifier.
struct BaselineConfig {
  std::size_t n_components = 2;
  std::size_t hidden = 16;
  double lr = 0.1;
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  double shrinkage = csp::kDefaultShrinkage;
  std::uint64_t seed = 42;
};

struct BaselineResult {
  csp::SpatialFilterBank bank;
  models::Standardizer standardizer;
  models::ModelParams params;  // classifier group only
  Metrics train;
  Metrics test;  // empty when there are no test trials
};

BaselineResult csp_baseline(const data::EpochSet& train_set, const data::EpochSet& test_set,
                            const BaselineConfig& config);

/// Accuracy and cross-entropy of a trained model; the model is not modified.
Metrics evaluate(const models::Model& model, const data::EpochSet& test_set);

/// Latent features of every trial.
std::vector<Tensor> latent_features(const models::Model& model, const data::EpochSet& epochs);

/// CSV rows of `n` log-variance features (the first ⌈n/2⌉ filters of the bank's
/// top block and the last ⌊n/2⌋ of its bottom block) followed by the label.
std::string export_scatter(std::span<const Tensor> latents, std::span<const int> labels,
                           const csp::SpatialFilterBank& bank, std::size_t n = 2);

/// {"components": [{"index", "eigenvalue", "records": [{channel, x, y, weight}]}]}
/// with one record per channel for each of the bank's filters.
std::string export_topomap(const csp::SpatialFilterBank& bank,
                           std::span<const data::Position> positions);

/// Hash of the head state (filter bank, standardizer, graph).
std::uint64_t head_checksum(const models::Model& model);

std::string epoch_metrics_json(const EpochMetrics& m);
std::string metrics_json(const Metrics& m);
void write_metrics_jsonl(const std::filesystem::path& path, std::span<const EpochMetrics> history);

}  // namespace deepcsp::training
