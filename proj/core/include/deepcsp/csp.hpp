#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deepcsp/epochs.hpp"
#include "deepcsp/tensor.hpp"

namespace deepcsp::csp {

// Labels: 0 selects the first class (C̄₁), 1 the second (C̄₂).

/// Default shrinkage: ε = factor · trace(C̄) / D added to each class mean.
inline constexpr double kDefaultShrinkage = 1e-4;

struct TrialCovariance {
  Tensor matrix;            // XXᵀ / trace(XXᵀ)
  double trace_norm = 0.0;  // trace(XXᵀ)
};

/// Trace-normalized spatial covariance of one (D, T) trial.
TrialCovariance normalized_covariance(const Tensor& trial);

struct ClassCovariances {
  Tensor c1;  // label 0
  Tensor c2;  // label 1
  double shrinkage1 = 0.0;
  double shrinkage2 = 0.0;
  std::size_t count1 = 0;
  std::size_t count2 = 0;
};

/// Per-class means of normalized covariances, each plus ε·I.
ClassCovariances class_covariances(std::span<const Tensor> trials, std::span<const int> labels,
                                   double shrinkage_factor = kDefaultShrinkage);
ClassCovariances class_covariances(const data::EpochSet& epochs,
                                   double shrinkage_factor = kDefaultShrinkage);

/// Spatial filters as columns: n filters with the largest generalized
/// eigenvalues followed by the n with the smallest, all in descending λ order.
struct SpatialFilterBank {
  Tensor filters;                   // (D, 2n)
  std::vector<double> eigenvalues;  // 2n
  std::size_t n_components = 0;
  std::vector<std::string> channel_names;

  std::size_t channels() const { return filters.rows(); }
  std::size_t size() const { return filters.cols(); }
  /// Column j as a standalone vector.
  std::vector<double> filter(std::size_t j) const;
};

/// Solves C̄₁ w = λ (C̄₁ + C̄₂) w and keeps the n top and n bottom filters,
/// normalized so wᵀ(C̄₁ + C̄₂)w = 1.
SpatialFilterBank csp_fit(const Tensor& c1, const Tensor& c2, std::size_t n_components);

/// Fits on the trials' class covariances (with shrinkage).
SpatialFilterBank fit_filter_bank(std::span<const Tensor> trials, std::span<const int> labels,
                                  std::size_t n_components,
                                  double shrinkage_factor = kDefaultShrinkage);

inline constexpr double kFeatureFloor = 1e-12;

/// log(diag(Wᵀ X Xᵀ W) / T): log variance of every projected channel. Zero
/// variance is floored at log(1e-12) and counted in `floored` when given.
std::vector<double> csp_features(const SpatialFilterBank& bank, const Tensor& trial,
                                 std::size_t* floored = nullptr);

/// trace(Wᵀ C̄₁ W) / trace(Wᵀ (C̄₁ + C̄₂) W) for a (D, k) filter selection.
double trace_ratio(const Tensor& selected, const Tensor& c1, const Tensor& c2);

/// Result of the differentiable CSP objective on latent features.
struct DeepCspLossState {
  double loss = 0.0;
  std::vector<double> eigenvalues;  // full spectrum, descending
  Tensor eigenvectors;              // (F, F), columns paired with eigenvalues
  std::vector<std::size_t> selected;
  std::size_t n_components = 0;
  Tensor grad_c1;  // ∂L/∂C̄₁ (symmetric)
  Tensor grad_c2;  // ∂L/∂C̄₂
  ClassCovariances covariances;
  bool degenerate = false;
  std::uint64_t fingerprint = 0;  // identifies the latents the state came from
};

/// L = -(1/2n) [Σ_top λ + Σ_bottom (1 - λ)] over the generalized eigenvalues
/// of the latent class covariances, with gradients of L with respect to both
/// class covariances. Eigenvectors are held fixed in the derivative.
DeepCspLossState deepcsp_loss(std::span<const Tensor> latents, std::span<const int> labels,
                              std::size_t n_components,
                              double shrinkage_factor = kDefaultShrinkage);

/// ∂L/∂X for every latent trial X, chained through the trace normalization.
/// Throws Error if `latents` are not the ones `state` was computed from.
std::vector<Tensor> deepcsp_backward(const DeepCspLossState& state,
                                     std::span<const Tensor> latents,
                                     std::span<const int> labels);

std::uint64_t fingerprint(std::span<const Tensor> tensors);

/// {n_components, channel_names, eigenvalues, filters (row-major)}.
std::string filter_bank_to_json(const SpatialFilterBank& bank);
SpatialFilterBank filter_bank_from_json(const std::string& text);

}  // namespace deepcsp::csp
