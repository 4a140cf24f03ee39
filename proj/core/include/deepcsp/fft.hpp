#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

namespace deepcsp::signal {

using Complex = std::complex<double>;

/// Precomputed discrete Fourier transform of one length. Power-of-two sizes
/// use an iterative radix-2 kernel; every other size is computed exactly at
/// its own length through Bluestein's chirp-z reduction (no zero padding).
class FftPlan {
 public:
  explicit FftPlan(std::size_t n);
  ~FftPlan();
  FftPlan(FftPlan&&) noexcept;
  FftPlan& operator=(FftPlan&&) noexcept;

  std::size_t size() const { return n_; }
  bool is_power_of_two() const { return pow2_; }
  /// e^{-2πik/N} for 0 <= k <= N/2.
  Complex twiddle(std::size_t k) const { return twiddles_[k]; }

  /// In-place forward transform X[k] = Σ x[n] e^{-2πikn/N}.
  void forward(std::span<Complex> data) const;
  /// In-place inverse transform including the 1/N factor.
  void inverse(std::span<Complex> data) const;

 private:
  struct Bluestein;
  void radix2(std::span<Complex> data, bool inverse) const;

  std::size_t n_ = 0;
  bool pow2_ = false;
  std::vector<std::size_t> bitrev_;
  std::vector<Complex> twiddles_;  // e^{-2πik/N}, k < N/2
  std::vector<Complex> stage_twiddles_;  // radix-2 twiddles laid out stage by stage
  std::unique_ptr<Bluestein> bluestein_;
};

/// Shared plan for length n; plans are cached and safe to use concurrently.
const FftPlan& plan_for(std::size_t n);

std::vector<Complex> fft(std::span<const Complex> x);
std::vector<Complex> fft(std::span<const double> x);
std::vector<Complex> ifft(std::span<const Complex> spectrum);

/// Non-negative-frequency half spectrum (n/2 + 1 bins) of a real signal.
std::vector<Complex> rfft(std::span<const double> x);
/// Real signal of length n from its half spectrum.
std::vector<double> irfft(std::span<const Complex> half, std::size_t n);

std::size_t next_power_of_two(std::size_t n);

}  // namespace deepcsp::signal
