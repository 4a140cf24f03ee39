#include "deepcsp/fft.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

#include "deepcsp/error.hpp"

namespace deepcsp::signal {
namespace {

bool power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void require_finite(std::span<const Complex> x) {
  for (const auto& v : x) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
      throw NonFiniteError("fft: non-finite input");
    }
  }
}

void require_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) throw NonFiniteError("fft: non-finite input");
  }
}

}  // namespace

struct FftPlan::Bluestein {
  std::size_t m = 0;
  std::vector<Complex> chirp;         // e^{-iπk²/n}
  std::vector<Complex> kernel_spec;   // FFT_m of the conjugate chirp, wrapped
};

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

FftPlan::FftPlan(std::size_t n) : n_(n), pow2_(power_of_two(n)) {
  if (n == 0) throw InvalidArgument("fft: length must be at least 1");
  twiddles_.resize(n / 2 + 1);
  for (std::size_t k = 0; k < twiddles_.size(); ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    twiddles_[k] = Complex(std::cos(angle), std::sin(angle));
  }
  if (pow2_) {
    bitrev_.resize(n);
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
      bitrev_[i] = r;
    }
    for (std::size_t len = 4; len <= n; len <<= 1) {
      for (std::size_t j = 0; j < len / 2; ++j) stage_twiddles_.push_back(twiddles_[j * (n / len)]);
    }
    return;
  }
  bluestein_ = std::make_unique<Bluestein>();
  auto& bs = *bluestein_;
  bs.m = next_power_of_two(2 * n - 1);
  bs.chirp.resize(n);
  const std::size_t two_n = 2 * n;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t k2 = (k * k) % two_n;  // exact phase reduction
    const double angle = -std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
    bs.chirp[k] = Complex(std::cos(angle), std::sin(angle));
  }
  bs.kernel_spec.assign(bs.m, Complex{});
  bs.kernel_spec[0] = std::conj(bs.chirp[0]);
  for (std::size_t k = 1; k < n; ++k) {
    bs.kernel_spec[k] = std::conj(bs.chirp[k]);
    bs.kernel_spec[bs.m - k] = std::conj(bs.chirp[k]);
  }
  plan_for(bs.m).forward(bs.kernel_spec);
}

FftPlan::~FftPlan() = default;
FftPlan::FftPlan(FftPlan&&) noexcept = default;
FftPlan& FftPlan::operator=(FftPlan&&) noexcept = default;

void FftPlan::radix2(std::span<Complex> a, bool inverse) const {
  const std::size_t n = n_;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
  }
  // Products written out: std::complex multiplication adds NaN recovery we do not need.
  for (std::size_t start = 0; start + 1 < n; start += 2) {
    const Complex u = a[start], v = a[start + 1];
    a[start] = Complex(u.real() + v.real(), u.imag() + v.imag());
    a[start + 1] = Complex(u.real() - v.real(), u.imag() - v.imag());
  }
  const double sign = inverse ? -1.0 : 1.0;
  const Complex* tw = stage_twiddles_.data();
  for (std::size_t len = 4; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    for (std::size_t start = 0; start < n; start += len) {
      Complex* lo = a.data() + start;
      Complex* hi = lo + half;
      for (std::size_t j = 0; j < half; ++j) {
        const double wr = tw[j].real(), wi = sign * tw[j].imag();
        const double hr = hi[j].real(), hv = hi[j].imag();
        const double vr = hr * wr - hv * wi;
        const double vi = hr * wi + hv * wr;
        const double ur = lo[j].real(), ui = lo[j].imag();
        lo[j] = Complex(ur + vr, ui + vi);
        hi[j] = Complex(ur - vr, ui - vi);
      }
    }
    tw += half;
  }
}

void FftPlan::forward(std::span<Complex> data) const {
  if (data.size() != n_) throw ShapeError("fft: buffer length does not match plan");
  if (pow2_) {
    radix2(data, false);
    return;
  }
  const auto& bs = *bluestein_;
  std::vector<Complex> work(bs.m);
  for (std::size_t k = 0; k < n_; ++k) work[k] = data[k] * bs.chirp[k];
  const FftPlan& inner = plan_for(bs.m);
  inner.forward(work);
  for (std::size_t k = 0; k < bs.m; ++k) work[k] *= bs.kernel_spec[k];
  inner.inverse(work);
  for (std::size_t k = 0; k < n_; ++k) data[k] = work[k] * bs.chirp[k];
}

void FftPlan::inverse(std::span<Complex> data) const {
  if (data.size() != n_) throw ShapeError("ifft: buffer length does not match plan");
  const double inv_n = 1.0 / static_cast<double>(n_);
  if (pow2_) {
    radix2(data, true);
    for (auto& v : data) v *= inv_n;
    return;
  }
  for (auto& v : data) v = std::conj(v);
  forward(data);
  for (auto& v : data) v = std::conj(v) * inv_n;
}

const FftPlan& plan_for(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<FftPlan>> cache;
  {
    std::lock_guard lock(mutex);
    auto it = cache.find(n);
    if (it != cache.end()) return *it->second;
  }
  // Built outside the lock: Bluestein plans request their inner power-of-two plan.
  auto plan = std::make_unique<FftPlan>(n);
  std::lock_guard lock(mutex);
  auto [it, inserted] = cache.emplace(n, std::move(plan));
  return *it->second;
}

std::vector<Complex> fft(std::span<const Complex> x) {
  if (x.empty()) throw InvalidArgument("fft: empty input");
  require_finite(x);
  std::vector<Complex> out(x.begin(), x.end());
  plan_for(out.size()).forward(out);
  return out;
}

std::vector<Complex> fft(std::span<const double> x) {
  if (x.empty()) throw InvalidArgument("fft: empty input");
  require_finite(x);
  std::vector<Complex> out(x.begin(), x.end());
  plan_for(out.size()).forward(out);
  return out;
}

std::vector<Complex> ifft(std::span<const Complex> spectrum) {
  if (spectrum.empty()) throw InvalidArgument("ifft: empty input");
  require_finite(spectrum);
  std::vector<Complex> out(spectrum.begin(), spectrum.end());
  plan_for(out.size()).inverse(out);
  return out;
}

std::vector<Complex> rfft(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) throw InvalidArgument("rfft: empty input");
  if (n % 2 != 0 || n < 4) {
    auto full = fft(x);
    full.resize(n / 2 + 1);
    return full;
  }
  // Pack even/odd samples into one half-length complex transform.
  const std::size_t h = n / 2;
  std::vector<Complex> z(h);
  for (std::size_t m = 0; m < h; ++m) z[m] = Complex(x[2 * m], x[2 * m + 1]);
  plan_for(h).forward(z);
  const FftPlan& full = plan_for(n);
  std::vector<Complex> out(h + 1);
  for (std::size_t k = 0; k <= h; ++k) {
    // even = (z_k + conj z_{h-k}) / 2, odd = -i (z_k - conj z_{h-k}) / 2
    const double a = z[k % h].real(), b = z[k % h].imag();
    const double c = z[(h - k) % h].real(), d = -z[(h - k) % h].imag();
    const double er = 0.5 * (a + c), ei = 0.5 * (b + d);
    const double orr = 0.5 * (b - d), oi = -0.5 * (a - c);
    const Complex w = full.twiddle(k);
    out[k] = Complex(er + (w.real() * orr - w.imag() * oi), ei + (w.real() * oi + w.imag() * orr));
  }
  return out;
}

std::vector<double> irfft(std::span<const Complex> half, std::size_t n) {
  if (n == 0 || half.size() != n / 2 + 1) {
    throw ShapeError("irfft: half spectrum must have n/2 + 1 bins");
  }
  if (n % 2 != 0 || n < 4) {
    std::vector<Complex> full(n);
    for (std::size_t k = 0; k < half.size(); ++k) full[k] = half[k];
    for (std::size_t k = half.size(); k < n; ++k) full[k] = std::conj(half[n - k]);
    plan_for(n).inverse(full);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = full[i].real();
    return out;
  }
  const std::size_t h = n / 2;
  const FftPlan& full = plan_for(n);
  std::vector<Complex> z(h);
  for (std::size_t k = 0; k < h; ++k) {
    // z_k = even + i · odd with odd = (X_k - conj X_{h-k}) / 2 · conj(w_k)
    const double a = half[k].real(), b = half[k].imag();
    const double c = half[h - k].real(), d = -half[h - k].imag();
    const double er = 0.5 * (a + c), ei = 0.5 * (b + d);
    const double p = 0.5 * (a - c), q = 0.5 * (b - d);
    const Complex w = full.twiddle(k);
    const double orr = p * w.real() + q * w.imag(), oi = q * w.real() - p * w.imag();
    z[k] = Complex(er - oi, ei + orr);
  }
  plan_for(h).inverse(z);
  std::vector<double> out(n);
  for (std::size_t m = 0; m < h; ++m) {
    out[2 * m] = z[m].real();
    out[2 * m + 1] = z[m].imag();
  }
  return out;
}

}  // namespace deepcsp::signal
