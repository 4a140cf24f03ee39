#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "deepcsp/fft.hpp"

namespace deepcsp::signal {

/// Frequency band in Hz.
struct Band {
  double low = 0.0;
  double high = 0.0;
  bool operator==(const Band&) const = default;
};

/// Mu + beta rhythm band used for phase estimators and synthetic sources.
inline constexpr Band kMotorBand{8.0, 30.0};

struct AnalyticSignal {
  std::vector<Complex> values;
  Band source_band;  // {0, 0} when the input was not band-limited by us
};

/// Analytic signal via the frequency-domain Hilbert construction: positive
/// bins doubled, negative bins zeroed, DC and Nyquist kept.
AnalyticSignal analytic_signal(std::span<const double> x, Band source_band = {});

struct CrossSpectrum {
  std::vector<double> freqs;    // Hz
  std::vector<Complex> values;  // one-sided cross spectral density
  std::size_t segments = 0;
};

/// Spectra of the Hann-windowed, mean-removed Welch segments of one signal.
/// Computing these once per channel lets many channel pairs share the FFTs.
struct SegmentSpectra {
  std::vector<double> freqs;                  // Hz, seg_len/2 + 1 bins
  std::vector<std::vector<Complex>> segments;  // one half spectrum per segment
  std::vector<double> scale;                  // one-sided density scale per bin
};

SegmentSpectra welch_segments(std::span<const double> x, double fs, std::size_t seg_len,
                              double overlap = 0.5);

/// Averages X · conj(Y) over matching segments of two signals.
CrossSpectrum cross_spectrum(const SegmentSpectra& x, const SegmentSpectra& y);

/// Welch cross-spectral density Gxy = <X · conj(Y)> over Hann-windowed,
/// mean-removed segments.
CrossSpectrum welch_csd(std::span<const double> x, std::span<const double> y, double fs,
                        std::size_t seg_len, double overlap = 0.5);

/// Welch segment length default: one second of data.
std::size_t default_segment_length(double fs);

/// Hamming-windowed sinc band-pass taps, normalized to unit gain at the band centre.
std::vector<double> design_bandpass(double fs, Band band, std::size_t taps);

/// Odd tap count giving a transition width narrower than the low band edge.
std::size_t default_fir_taps(double fs, Band band);

/// Zero-phase FIR band-pass: the filter is run forward and then backward over
/// an odd-reflected extension of the signal.
std::vector<double> fir_bandpass(std::span<const double> x, double fs, Band band,
                                 std::size_t taps);

/// Samples dropped from each end of an analytic signal before phase statistics.
std::size_t edge_trim_samples(double fs);

}  // namespace deepcsp::signal
