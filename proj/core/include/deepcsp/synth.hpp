#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "deepcsp/epochs.hpp"
#include "deepcsp/signal.hpp"

namespace deepcsp::data {

enum class MixingKind {
  orthonormal,     // random orthonormal D×D mixing
  identity,        // source i drives channel i
  single_channel,  // source 0 drives exactly one channel, the rest are mixed
};

/// Recipe for a two-class data set with planted spatial structure:
/// trial = M · S + σ · noise, each source band-limited Gaussian noise scaled
/// to its class's variance profile.
struct SynthSpec {
  std::size_t channels = 15;
  std::size_t samples = 2560;
  double fs = 512.0;
  std::size_t trials_per_class = 50;
  MixingKind mixing = MixingKind::orthonormal;
  /// Channel carrying source 0 for MixingKind::single_channel; drawn from the
  /// seed when unset.
  std::optional<std::size_t> planted_channel;
  /// Per-source variances for each class; empty selects the default pattern
  /// (source 0: 4 vs 1, source 1: 1 vs 4, remaining sources 1).
  std::vector<double> profile0;
  std::vector<double> profile1;
  double noise = 0.1;
  signal::Band band = signal::kMotorBand;
  std::uint64_t seed = 42;
};

struct SynthGroundTruth {
  Tensor mixing;  // (D, D); column i is the spatial pattern of source i
  std::vector<double> profile0;
  std::vector<double> profile1;
  std::size_t planted_channel = 0;  // meaningful for single_channel mixing
};

struct SynthResult {
  EpochSet epochs;
  SynthGroundTruth truth;
  bool degenerate_profiles = false;  // identical profiles: no class signal
};

/// Generates trials alternating label 0, 1, 0, 1, ... Fully determined by `spec`.
SynthResult synth_generate(const SynthSpec& spec);

/// Standard motor-strip montage names and 2-D positions for D = 15, generic
/// ring layout otherwise.
std::vector<std::string> default_channel_names(std::size_t channels);
std::vector<Position> default_channel_positions(std::size_t channels);

/// Stratified (per class) or plain random split. `fraction` of the trials go
/// to the second (held-out) set; both sets keep the original trial order.
std::pair<EpochSet, EpochSet> split(const EpochSet& epochs, double fraction, std::uint64_t seed,
                                    bool stratified = true);

/// Index form of split(): {first, second}.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::span<const int> labels, double fraction, std::uint64_t seed, bool stratified = true);

}  // namespace deepcsp::data
