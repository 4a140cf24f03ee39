#include "deepcsp/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "deepcsp/error.hpp"

namespace deepcsp::signal {
namespace {

void require_finite(std::span<const double> x, const char* what) {
  for (double v : x) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + ": non-finite input");
  }
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

// y[n] = Σ h[k] x[n + k - c] with zero outside x, c = (taps - 1) / 2.
std::vector<double> centered_filter(std::span<const double> x, std::span<const double> h) {
  const std::size_t n = x.size(), taps = h.size();
  const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(taps / 2);
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(i) - c;
    const std::size_t k0 = base < 0 ? static_cast<std::size_t>(-base) : 0;
    const std::size_t k1 = std::min(taps, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(n) - base));
    for (std::size_t k = k0; k < k1; ++k) acc += h[k] * x[static_cast<std::size_t>(base + static_cast<std::ptrdiff_t>(k))];
    y[i] = acc;
  }
  return y;
}

}  // namespace

AnalyticSignal analytic_signal(std::span<const double> x, Band source_band) {
  const std::size_t n = x.size();
  if (n < 8) throw InvalidArgument("analytic_signal: need at least 8 samples");
  require_finite(x, "analytic_signal");
  std::vector<Complex> spec(x.begin(), x.end());
  const FftPlan& plan = plan_for(n);
  plan.forward(spec);
  // Bins 1..ceil(n/2)-1 doubled; Nyquist (even n) and DC kept; the rest zeroed.
  const std::size_t positive_end = (n + 1) / 2;
  for (std::size_t k = 1; k < positive_end; ++k) spec[k] *= 2.0;
  for (std::size_t k = n / 2 + 1; k < n; ++k) spec[k] = Complex{};
  plan.inverse(spec);
  for (std::size_t i = 0; i < n; ++i) spec[i] = Complex(x[i], spec[i].imag());
  return AnalyticSignal{std::move(spec), source_band};
}

std::size_t default_segment_length(double fs) {
  return std::max<std::size_t>(8, static_cast<std::size_t>(std::lround(fs)));
}

SegmentSpectra welch_segments(std::span<const double> x, double fs, std::size_t seg_len,
                              double overlap) {
  if (!(fs > 0.0)) throw InvalidArgument("welch_csd: sampling rate must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw InvalidArgument("welch_csd: overlap must be in [0, 1)");
  if (seg_len < 2 || seg_len > x.size()) {
    throw InvalidArgument("welch_csd: fewer than one full segment (" + std::to_string(x.size()) +
                          " samples, segment " + std::to_string(seg_len) + ")");
  }
  require_finite(x, "welch_csd");

  const std::size_t step = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(static_cast<double>(seg_len) * (1.0 - overlap))));
  const std::size_t n_seg = 1 + (x.size() - seg_len) / step;
  const std::size_t bins = seg_len / 2 + 1;

  std::vector<double> window(seg_len);
  double window_power = 0.0;
  for (std::size_t i = 0; i < seg_len; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(seg_len));
    window_power += window[i] * window[i];
  }

  SegmentSpectra out;
  out.segments.reserve(n_seg);
  std::vector<double> xs(seg_len);
  for (std::size_t s = 0; s < n_seg; ++s) {
    const std::size_t off = s * step;
    double mean = 0.0;
    for (std::size_t i = 0; i < seg_len; ++i) mean += x[off + i];
    mean /= static_cast<double>(seg_len);
    for (std::size_t i = 0; i < seg_len; ++i) xs[i] = (x[off + i] - mean) * window[i];
    out.segments.push_back(rfft(xs));
  }
  out.freqs.resize(bins);
  out.scale.resize(bins);
  const double base = 1.0 / (fs * window_power * static_cast<double>(n_seg));
  for (std::size_t k = 0; k < bins; ++k) {
    out.freqs[k] = static_cast<double>(k) * fs / static_cast<double>(seg_len);
    const bool edge = k == 0 || (seg_len % 2 == 0 && k == bins - 1);
    out.scale[k] = edge ? base : 2.0 * base;
  }
  return out;
}

CrossSpectrum cross_spectrum(const SegmentSpectra& x, const SegmentSpectra& y) {
  if (x.segments.size() != y.segments.size() || x.freqs != y.freqs) {
    throw ShapeError("cross_spectrum: segment layouts differ");
  }
  const std::size_t bins = x.freqs.size();
  std::vector<double> acc_re(bins, 0.0), acc_im(bins, 0.0);
  for (std::size_t s = 0; s < x.segments.size(); ++s) {
    const auto& fx = x.segments[s];
    const auto& fy = y.segments[s];
    for (std::size_t k = 0; k < bins; ++k) {
      // X·conj(Y) written out so that swapping x and y conjugates the result exactly.
      const double a = fx[k].real(), b = fx[k].imag();
      const double c = fy[k].real(), d = fy[k].imag();
      acc_re[k] += a * c + b * d;
      acc_im[k] += b * c - a * d;
    }
  }
  CrossSpectrum out;
  out.segments = x.segments.size();
  out.freqs = x.freqs;
  out.values.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    out.values[k] = Complex(acc_re[k] * x.scale[k], acc_im[k] * x.scale[k]);
  }
  return out;
}

CrossSpectrum welch_csd(std::span<const double> x, std::span<const double> y, double fs,
                        std::size_t seg_len, double overlap) {
  if (x.size() != y.size()) throw ShapeError("welch_csd: signals differ in length");
  return cross_spectrum(welch_segments(x, fs, seg_len, overlap),
                        welch_segments(y, fs, seg_len, overlap));
}

std::vector<double> design_bandpass(double fs, Band band, std::size_t taps) {
  if (!(fs > 0.0) || !(band.low > 0.0) || !(band.low < band.high) || !(band.high < fs / 2.0)) {
    throw InvalidArgument("fir_bandpass: band edges must satisfy 0 < low < high < fs/2");
  }
  if (taps < 3 || taps % 2 == 0) throw InvalidArgument("fir_bandpass: tap count must be odd and >= 3");
  const double fl = band.low / fs, fh = band.high / fs;
  const double centre = static_cast<double>(taps - 1) / 2.0;
  std::vector<double> h(taps);
  for (std::size_t i = 0; i < taps; ++i) {
    const double m = static_cast<double>(i) - centre;
    const double ideal = 2.0 * fh * sinc(2.0 * fh * m) - 2.0 * fl * sinc(2.0 * fl * m);
    const double hamming = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                                  static_cast<double>(taps - 1));
    h[i] = ideal * hamming;
  }
  const double fc = 0.5 * (band.low + band.high) / fs;
  Complex gain{};
  for (std::size_t i = 0; i < taps; ++i) {
    const double m = static_cast<double>(i) - centre;
    gain += h[i] * std::polar(1.0, -2.0 * std::numbers::pi * fc * m);
  }
  const double g = std::abs(gain);
  for (auto& v : h) v /= g;
  return h;
}

std::size_t default_fir_taps(double fs, Band band) {
  const double wanted = 3.3 * fs / band.low;
  std::size_t taps = std::max<std::size_t>(129, static_cast<std::size_t>(std::ceil(wanted)));
  taps = std::min<std::size_t>(taps, 2049);
  if (taps % 2 == 0) ++taps;
  return taps;
}

std::vector<double> fir_bandpass(std::span<const double> x, double fs, Band band,
                                 std::size_t taps) {
  const auto h = design_bandpass(fs, band, taps);
  require_finite(x, "fir_bandpass");
  const std::size_t n = x.size();
  if (n == 0) return {};
  // Odd extension by up to 3·taps samples each side suppresses edge transients.
  const std::size_t pad = std::min(n - 1, 3 * taps);
  std::vector<double> ext(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) {
    ext[pad - 1 - i] = 2.0 * x[0] - x[i + 1];
    ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];
  }
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(pad));

  auto forward = centered_filter(ext, h);
  std::reverse(forward.begin(), forward.end());
  auto backward = centered_filter(forward, h);
  std::reverse(backward.begin(), backward.end());
  return std::vector<double>(backward.begin() + static_cast<std::ptrdiff_t>(pad),
                             backward.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

std::size_t edge_trim_samples(double fs) {
  return static_cast<std::size_t>(std::ceil(fs / 4.0));
}

}  // namespace deepcsp::signal
