#include "deepcsp/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "deepcsp/fft.hpp"

namespace deepcsp::data {
namespace {

// Orthonormal columns from Gaussian draws; `fixed` pins the first column.
Tensor random_orthonormal(std::size_t d, std::mt19937_64& rng, const std::vector<double>* fixed) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor q(Shape{d, d});
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> v(d);
    if (c == 0 && fixed) {
      v = *fixed;
    } else {
      for (auto& x : v) x = normal(rng);
    }
    // Two passes of modified Gram-Schmidt.
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += v[i] * q(i, p);
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * q(i, p);
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < d; ++i) q(i, c) = v[i] / norm;
  }
  return q;
}

// Unit-variance Gaussian noise confined to the in-band FFT bins.
std::vector<double> band_limited_noise(std::size_t t, double fs, signal::Band band,
                                       std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<signal::Complex> half(t / 2 + 1);
  std::vector<std::size_t> bins;
  for (std::size_t k = 1; k < half.size(); ++k) {
    if (t % 2 == 0 && k == t / 2) continue;  // the Nyquist bin is real; skip it
    const double f = static_cast<double>(k) * fs / static_cast<double>(t);
    if (f >= band.low && f <= band.high) bins.push_back(k);
  }
  if (bins.empty()) throw InvalidArgument("synth: source band contains no frequency bins");
  // Var of (2/T)·Re Σ Z_k e^{...} with E|Z_k|² = 1 is 2·nb/T².
  const double scale = static_cast<double>(t) / std::sqrt(2.0 * static_cast<double>(bins.size()));
  for (auto k : bins) {
    const double re = normal(rng), im = normal(rng);
    half[k] = signal::Complex(re, im) * (scale / std::numbers::sqrt2);
  }
  return signal::irfft(half, t);
}

}  // namespace

std::vector<std::string> default_channel_names(std::size_t channels) {
  if (channels == 15) {
    return {"FC3", "FCz", "FC4", "C5", "C3", "C1", "Cz", "C2",
            "C4",  "C6",  "CP3", "CPz", "CP4", "P3", "P4"};
  }
  if (channels == 3) return {"C3", "Cz", "C4"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < channels; ++i) names.push_back("Ch" + std::to_string(i + 1));
  return names;
}

std::vector<Position> default_channel_positions(std::size_t channels) {
  if (channels == 15) {
    return {{-0.40, 0.30}, {0.00, 0.30}, {0.40, 0.30},  {-0.75, 0.00}, {-0.45, 0.00},
            {-0.22, 0.00}, {0.00, 0.00}, {0.22, 0.00},  {0.45, 0.00},  {0.75, 0.00},
            {-0.40, -0.30}, {0.00, -0.30}, {0.40, -0.30}, {-0.40, -0.60}, {0.40, -0.60}};
  }
  if (channels == 3) return {{-0.45, 0.0}, {0.0, 0.0}, {0.45, 0.0}};
  std::vector<Position> pos;
  for (std::size_t i = 0; i < channels; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(channels);
    pos.push_back({0.8 * std::sin(a), 0.8 * std::cos(a)});
  }
  return pos;
}

SynthResult synth_generate(const SynthSpec& spec) {
  const std::size_t d = spec.channels, t = spec.samples;
  if (d < 2) throw InvalidArgument("synth: need at least 2 channels");
  if (t < 8) throw InvalidArgument("synth: need at least 8 samples");
  if (spec.trials_per_class == 0) throw InvalidArgument("synth: need at least one trial per class");
  if (!(spec.fs > 0.0)) throw InvalidArgument("synth: sampling rate must be positive");
  if (!(spec.band.low > 0.0 && spec.band.low < spec.band.high && spec.band.high < spec.fs / 2.0)) {
    throw InvalidArgument("synth: source band must satisfy 0 < low < high < fs/2");
  }
  if (spec.noise < 0.0) throw InvalidArgument("synth: noise level must be non-negative");

  SynthResult out;
  auto& truth = out.truth;
  truth.profile0 = spec.profile0;
  truth.profile1 = spec.profile1;
  if (truth.profile0.empty() && truth.profile1.empty()) {
    truth.profile0.assign(d, 1.0);
    truth.profile1.assign(d, 1.0);
    truth.profile0[0] = 4.0;
    truth.profile1[1] = 4.0;
  }
  if (truth.profile0.size() != d || truth.profile1.size() != d) {
    throw InvalidArgument("synth: variance profiles need one entry per source");
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (!(truth.profile0[i] >= 0.0) || !(truth.profile1[i] >= 0.0)) {
      throw InvalidArgument("synth: variances must be non-negative");
    }
  }
  out.degenerate_profiles = truth.profile0 == truth.profile1;

  std::mt19937_64 rng(spec.seed);
  switch (spec.mixing) {
    case MixingKind::identity:
      truth.mixing = Tensor::identity(d);
      break;
    case MixingKind::orthonormal:
      truth.mixing = random_orthonormal(d, rng, nullptr);
      break;
    case MixingKind::single_channel: {
      std::size_t c = 0;
      if (spec.planted_channel) {
        c = *spec.planted_channel;
        if (c >= d) throw InvalidArgument("synth: planted channel out of range");
      } else {
        c = std::uniform_int_distribution<std::size_t>(0, d - 1)(rng);
      }
      std::vector<double> e(d, 0.0);
      e[c] = 1.0;
      truth.mixing = random_orthonormal(d, rng, &e);
      truth.planted_channel = c;
      break;
    }
  }

  const std::size_t n = 2 * spec.trials_per_class;
  auto& ep = out.epochs;
  ep.fs = spec.fs;
  ep.channel_names = default_channel_names(d);
  ep.channel_positions = default_channel_positions(d);
  ep.trials = Tensor(Shape{n, d, t});
  ep.labels.resize(n);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> sources(d);
  for (std::size_t trial = 0; trial < n; ++trial) {
    const int label = static_cast<int>(trial % 2);
    ep.labels[trial] = label;
    const auto& profile = label == 0 ? truth.profile0 : truth.profile1;
    for (std::size_t s = 0; s < d; ++s) {
      sources[s] = band_limited_noise(t, spec.fs, spec.band, rng);
      const double amp = std::sqrt(profile[s]);
      for (auto& v : sources[s]) v *= amp;
    }
    for (std::size_t ch = 0; ch < d; ++ch) {
      double* row = &ep.trials(trial, ch, 0);
      for (std::size_t s = 0; s < d; ++s) {
        const double m = truth.mixing(ch, s);
        if (m == 0.0) continue;
        const auto& src = sources[s];
        for (std::size_t k = 0; k < t; ++k) row[k] += m * src[k];
      }
      for (std::size_t k = 0; k < t; ++k) row[k] += spec.noise * normal(rng);
    }
  }
  // Samples are stored as f32 on disk; keep memory and file identical.
  ep.trials.quantize();
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::span<const int> labels, double fraction, std::uint64_t seed, bool stratified) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidArgument("split: fraction must be in (0, 1)");
  std::mt19937_64 rng(seed);
  auto shuffle = [&rng](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
      std::swap(v[i - 1], v[j]);
    }
  };
  std::vector<std::size_t> first, second;
  auto take = [&](std::vector<std::size_t> pool) {
    shuffle(pool);
    const auto held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(pool.size())));
    second.insert(second.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(held));
    first.insert(first.end(), pool.begin() + static_cast<std::ptrdiff_t>(held), pool.end());
    return held;
  };
  if (stratified) {
    for (int label : {0, 1}) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == label) pool.push_back(i);
      }
      const std::size_t pool_size = pool.size();
      const std::size_t held = take(std::move(pool));
      if (held == 0 || held == pool_size) {
        throw InvalidArgument("split: stratified split leaves class " + std::to_string(label) +
                              " empty on one side");
      }
    }
  } else {
    std::vector<std::size_t> pool(labels.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    take(std::move(pool));
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {std::move(first), std::move(second)};
}

std::pair<EpochSet, EpochSet> split(const EpochSet& epochs, double fraction, std::uint64_t seed,
                                    bool stratified) {
  const auto [a, b] = split_indices(epochs.labels, fraction, seed, stratified);
  return {epochs.subset(a), epochs.subset(b)};
}

}  // namespace deepcsp::data
