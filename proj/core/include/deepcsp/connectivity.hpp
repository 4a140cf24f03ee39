#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "deepcsp/epochs.hpp"
#include "deepcsp/signal.hpp"
#include "deepcsp/tensor.hpp"

namespace deepcsp::connectivity {

enum class Method { coh, plv, iplv, pli, dpli, wpli, dwpli };

std::string to_string(Method m);
/// Accepts the lowercase names ("coh", "plv", ...); nullopt otherwise.
std::optional<Method> parse_method(std::string_view name);

struct Options {
  signal::Band band = signal::kMotorBand;
  std::size_t segment_length = 0;  // Welch segment; 0 means one second
  double overlap = 0.5;
  std::size_t fir_taps = 0;  // 0 picks signal::default_fir_taps
};

/// Mean magnitude-squared coherence over the bins inside the band, in [0, 1].
double coherence(std::span<const double> x, std::span<const double> y, double fs,
                 const Options& options = {});

/// One of the phase estimators, computed from the band-passed, edge-trimmed
/// analytic signals. Δφ = arg(z_x · conj(z_y)), so dpli > 0.5 when x leads.
double phase_metric(std::span<const double> x, std::span<const double> y, double fs, Method method,
                    const Options& options = {});

/// Phase statistics from precomputed (trimmed) analytic signals.
double phase_metric(std::span<const signal::Complex> zx, std::span<const signal::Complex> zy,
                    Method method, std::size_t* clamped = nullptr);

/// Band-passed, edge-trimmed analytic signal as used by the phase estimators.
std::vector<signal::Complex> prepared_analytic(std::span<const double> x, double fs,
                                               const Options& options);

struct ConnectivityGraph {
  Tensor adjacency;  // (D, D)
  Method estimator = Method::plv;
  signal::Band band;
  bool directed = false;
  std::size_t trials_used = 0;
  std::size_t clamped = 0;  // estimates clamped into [0, 1]
  std::vector<std::string> channel_names;
};

/// Per-trial pairwise estimate averaged over every trial of `epochs`.
ConnectivityGraph connectivity_matrix(const data::EpochSet& epochs, Method method,
                                      const Options& options = {});

struct NormalizedGraph {
  Tensor weights;            // (D, D), rows sum to 1 or are all zero
  std::size_t isolated = 0;  // rows left without neighbours
};

/// Neighbour weights for graph convolution. dpli is first mapped to
/// |A - 0.5| · 2; entries below `threshold` are dropped; rows are scaled to
/// sum to one. A node without neighbours gets an all-zero row, so a
/// GraphSage layer falls back to its self term.
NormalizedGraph graph_normalize(const ConnectivityGraph& graph, bool self_loops = false,
                                double threshold = 0.0);

/// {estimator, band: [low, high], trials_used, directed, clamped, channel_names}.
std::string graph_sidecar_json(const ConnectivityGraph& graph);
/// Header row of channel names, then D rows of D values.
std::string graph_csv(const ConnectivityGraph& graph);

}  // namespace deepcsp::connectivity
