#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "deepcsp/fft.hpp"
#include "deepcsp/tensor.hpp"

namespace deepcsp {

/// Time-axis convolution with same-length zero padding, computed as a
/// cross-correlation (the deep-learning convention):
///
///   y[b][o][t] = Σ_i Σ_k w[o][i][k] · x[b][g(o)·Cin/groups + i][t + k - pad]
///
/// with pad = (K - 1) / 2. `input` is (B, Cin, T) or (Cin, T); `kernel` is
/// (Cout, Cin / groups, K). Long kernels go through FFTs; short ones are
/// evaluated directly. Both paths agree to rounding.
struct Conv1dShape {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t length = 0;
  std::size_t kernel = 0;
  std::size_t groups = 1;

  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  std::size_t pad_left() const { return (kernel - 1) / 2; }
};

Conv1dShape conv1d_shape(const Tensor& input, const Tensor& kernel, std::size_t groups);

enum class ConvAlgorithm { automatic, direct, fft };

/// Transform length used by the FFT path for a signal and kernel length.
std::size_t conv1d_fft_length(std::size_t length, std::size_t kernel);

/// Zero-padded spectra of every input row, reusable by the FFT path for as
/// long as the input does not change (e.g. a fixed batch of raw trials).
struct ConvInputSpectra {
  Shape input_shape;
  std::size_t fft_length = 0;
  std::vector<std::vector<signal::Complex>> rows;  // batch-major, then channel
};

std::shared_ptr<const ConvInputSpectra> conv1d_input_spectra(const Tensor& input,
                                                             std::size_t fft_length);

/// `cached` is used when it matches the input shape and the chosen transform
/// length, and ignored otherwise.
Tensor conv1d_forward(const Tensor& input, const Tensor& kernel, std::size_t groups,
                      ConvAlgorithm algo = ConvAlgorithm::automatic,
                      const ConvInputSpectra* cached = nullptr);

/// Gradient with respect to the kernel given the output gradient.
Tensor conv1d_grad_kernel(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          std::size_t groups, ConvAlgorithm algo = ConvAlgorithm::automatic,
                          const ConvInputSpectra* cached = nullptr);

/// Gradient with respect to the input given the output gradient.
Tensor conv1d_grad_input(const Tensor& kernel, const Tensor& grad_out, const Shape& input_shape,
                         std::size_t groups, ConvAlgorithm algo = ConvAlgorithm::automatic);

}  // namespace deepcsp
