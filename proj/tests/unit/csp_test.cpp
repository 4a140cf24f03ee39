#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "deepcsp/csp.hpp"
#include "deepcsp/error.hpp"
#include "deepcsp/linalg.hpp"
#include "deepcsp/synth.hpp"
#include "test_support.hpp"

namespace deepcsp {
namespace {

using testing::Rng;

Tensor matrix(std::size_t r, std::size_t c, std::initializer_list<double> values) {
  Tensor t(Shape{r, c});
  std::size_t i = 0;
  for (double v : values) t[i++] = v;
  return t;
}

// Lower Cholesky factor, textbook loop.
Tensor cholesky(const Tensor& a) {
  const std::size_t n = a.rows();
  Tensor l(Shape{n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double s = a(j, j);
    for (std::size_t k = 0; k < j; ++k) s -= l(j, k) * l(j, k);
    l(j, j) = std::sqrt(s);
    for (std::size_t i = j + 1; i < n; ++i) {
      double t = a(i, j);
      for (std::size_t k = 0; k < j; ++k) t -= l(i, k) * l(j, k);
      l(i, j) = t / l(j, j);
    }
  }
  return l;
}

Tensor lower_inverse(const Tensor& l) {
  const std::size_t n = l.rows();
  Tensor inv(Shape{n, n});
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = i == c ? 1.0 : 0.0;
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * inv(k, c);
      inv(i, c) = s / l(i, i);
    }
  }
  return inv;
}

// Generalized eigenvalues of (a, b) through L⁻¹ a L⁻ᵀ, descending.
std::vector<double> oracle_eigenvalues(const Tensor& a, const Tensor& b) {
  const Tensor li = lower_inverse(cholesky(b));
  return sym_eig(matmul(matmul(li, a), transpose(li))).values;
}

struct LatentSet {
  std::vector<Tensor> trials;
  std::vector<int> labels;
};

// Class k scales latent channel c by profile_k[c]; distinct profiles keep the spectrum gapped.
LatentSet random_latents(Rng& rng, std::size_t f, std::size_t t, std::size_t per_class) {
  std::uniform_real_distribution<double> u(0.3, 3.0);
  std::vector<double> p0(f), p1(f);
  for (std::size_t c = 0; c < f; ++c) {
    p0[c] = u(rng);
    p1[c] = u(rng);
  }
  LatentSet set;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int label = static_cast<int>(i % 2);
    Tensor x = testing::random_tensor(rng, {f, t});
    for (std::size_t c = 0; c < f; ++c) {
      for (std::size_t s = 0; s < t; ++s) x(c, s) *= label == 0 ? p0[c] : p1[c];
    }
    set.trials.push_back(std::move(x));
    set.labels.push_back(label);
  }
  return set;
}

double min_gap(const std::vector<double>& values) {
  double g = 1e300;
  for (std::size_t i = 1; i < values.size(); ++i) g = std::min(g, values[i - 1] - values[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Covariances

TEST(NormalizedCovariance, HandExamples) {
  const auto a = csp::normalized_covariance(matrix(2, 2, {1, 0, 0, 1}));
  EXPECT_DOUBLE_EQ(a.trace_norm, 2.0);
  EXPECT_DOUBLE_EQ(a.matrix(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(a.matrix(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(a.matrix(0, 1), 0.0);
  const auto b = csp::normalized_covariance(matrix(2, 2, {1, -1, 1, -1}));
  for (double v : b.matrix.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(NormalizedCovariance, UnitTraceSymmetricPsd) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = testing::random_size(rng, 1, 12);
    const std::size_t t = testing::random_size(rng, d, 200);
    const auto c = csp::normalized_covariance(testing::random_tensor(rng, {d, t}, 3.0));
    EXPECT_NEAR(trace(c.matrix), 1.0, 1e-12);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(c.matrix(i, j), c.matrix(j, i));
    }
    EXPECT_GT(sym_eig(c.matrix).values.back(), -1e-12);
  }
}

TEST(NormalizedCovariance, ScaleInvariant) {
  Rng rng(2);
  const Tensor x = testing::random_tensor(rng, {5, 80});
  const auto base = csp::normalized_covariance(x);
  for (double c : {-3.0, 0.01, 250.0}) {
    const auto scaled = csp::normalized_covariance(c * x);
    EXPECT_LT(max_abs(scaled.matrix - base.matrix), 1e-14);
  }
}

TEST(NormalizedCovariance, Errors) {
  EXPECT_THROW(csp::normalized_covariance(Tensor(Shape{3, 10})), InvalidArgument);
  Tensor bad = Tensor(Shape{2, 4}, 1.0);
  bad(1, 2) = std::nan("");
  EXPECT_THROW(csp::normalized_covariance(bad), NonFiniteError);
}

TEST(ClassCovariances, SingleTrialPerClassAddsShrinkage) {
  Rng rng(3);
  const std::vector<Tensor> trials{testing::random_tensor(rng, {4, 50}), testing::random_tensor(rng, {4, 50})};
  const std::vector<int> labels{0, 1};
  const double factor = 1e-3;
  const auto cc = csp::class_covariances(trials, labels, factor);
  for (int k = 0; k < 2; ++k) {
    const Tensor expected = csp::normalized_covariance(trials[k]).matrix;
    const Tensor& got = k == 0 ? cc.c1 : cc.c2;
    const double eps = factor * trace(expected) / 4.0;
    EXPECT_NEAR(k == 0 ? cc.shrinkage1 : cc.shrinkage2, eps, 1e-18);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(got(i, j), expected(i, j) + (i == j ? eps : 0.0), 1e-15);
      }
    }
  }
  EXPECT_EQ(cc.count1, 1u);
  EXPECT_EQ(cc.count2, 1u);
}

TEST(ClassCovariances, DuplicatedTrialsLeaveMeanUnchanged) {
  Rng rng(4);
  std::vector<Tensor> trials;
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) {
    trials.push_back(testing::random_tensor(rng, {3, 40}));
    labels.push_back(i % 2);
  }
  const auto once = csp::class_covariances(trials, labels);
  auto doubled_trials = trials;
  auto doubled_labels = labels;
  doubled_trials.insert(doubled_trials.end(), trials.begin(), trials.end());
  doubled_labels.insert(doubled_labels.end(), labels.begin(), labels.end());
  const auto twice = csp::class_covariances(doubled_trials, doubled_labels);
  EXPECT_LT(max_abs(twice.c1 - once.c1), 1e-15);
  EXPECT_LT(max_abs(twice.c2 - once.c2), 1e-15);
}

TEST(ClassCovariances, MatchesNaiveSummation) {
  Rng rng(5);
  for (int round = 0; round < 10; ++round) {
    const std::size_t d = testing::random_size(rng, 2, 10);
    const std::size_t n = testing::random_size(rng, 2, 30);
    std::vector<Tensor> trials;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      trials.push_back(testing::random_tensor(rng, {d, 60}));
      labels.push_back(i < 1 ? 0 : (i < 2 ? 1 : static_cast<int>(rng() % 2)));
    }
    const auto cc = csp::class_covariances(trials, labels, 0.0);
    for (int k = 0; k < 2; ++k) {
      Tensor sum(Shape{d, d});
      double count = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != k) continue;
        const Tensor& x = trials[i];
        double tr = 0.0;
        for (double v : x.data()) tr += v * v;
        for (std::size_t a = 0; a < d; ++a) {
          for (std::size_t b = 0; b < d; ++b) {
            double s = 0.0;
            for (std::size_t t = 0; t < x.cols(); ++t) s += x(a, t) * x(b, t);
            sum(a, b) += s / tr;
          }
        }
        count += 1.0;
      }
      const Tensor& got = k == 0 ? cc.c1 : cc.c2;
      EXPECT_LT(max_abs(got - (1.0 / count) * sum), 1e-12);
    }
  }
}

TEST(ClassCovariances, Errors) {
  Rng rng(6);
  const std::vector<Tensor> trials{testing::random_tensor(rng, {3, 10}), testing::random_tensor(rng, {3, 10})};
  EXPECT_THROW(csp::class_covariances(trials, std::vector<int>{0, 0}), InvalidArgument);
  EXPECT_THROW(csp::class_covariances(trials, std::vector<int>{0, 2}), InvalidArgument);
  EXPECT_THROW(csp::class_covariances(trials, std::vector<int>{0}), ShapeError);
  const std::vector<Tensor> mixed{testing::random_tensor(rng, {3, 10}), testing::random_tensor(rng, {4, 10})};
  EXPECT_THROW(csp::class_covariances(mixed, std::vector<int>{0, 1}), ShapeError);
}

// ---------------------------------------------------------------------------
// Filter bank

TEST(CspFit, DiagonalExample) {
  const Tensor c1 = testing::diag_matrix({0.45, 0.25, 0.05});
  const Tensor c2 = testing::diag_matrix({0.05, 0.25, 0.45});
  const auto bank = csp::csp_fit(c1, c2, 1);
  ASSERT_EQ(bank.size(), 2u);
  EXPECT_NEAR(bank.eigenvalues[0], 0.9, 1e-12);
  EXPECT_NEAR(bank.eigenvalues[1], 0.1, 1e-12);
  // Unit composite variance: w = e_i / √(0.5).
  EXPECT_NEAR(std::abs(bank.filters(0, 0)), std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(bank.filters(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(bank.filters(2, 0), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(bank.filters(2, 1)), std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(bank.filters(0, 1), 0.0, 1e-12);
}

TEST(CspFit, EqualClassesGiveHalfEverywhere) {
  Rng rng(7);
  const Tensor c = testing::random_spd(rng, 6);
  const auto bank = csp::csp_fit(c, c, 3);
  for (double l : bank.eigenvalues) EXPECT_NEAR(l, 0.5, 1e-10);
}

TEST(CspFit, RandomPairsSatisfyEigenEquationAndNormalization) {
  Rng rng(8);
  for (int round = 0; round < 40; ++round) {
    const std::size_t d = testing::random_size(rng, 2, 16);
    const std::size_t n = testing::random_size(rng, 1, d / 2);
    const Tensor c1 = testing::random_spd(rng, d);
    const Tensor c2 = testing::random_spd(rng, d);
    const Tensor b = c1 + c2;
    const auto bank = csp::csp_fit(c1, c2, n);
    ASSERT_EQ(bank.filters.shape(), (Shape{d, 2 * n}));
    const Tensor gram = matmul(matmul(transpose(bank.filters), b), bank.filters);
    for (std::size_t i = 0; i < 2 * n; ++i) {
      for (std::size_t j = 0; j < 2 * n; ++j) EXPECT_NEAR(gram(i, j), i == j ? 1.0 : 0.0, 1e-8);
    }
    const Tensor lhs = matmul(c1, bank.filters);
    const Tensor rhs = matmul(b, bank.filters);
    for (std::size_t j = 0; j < 2 * n; ++j) {
      for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(lhs(i, j), bank.eigenvalues[j] * rhs(i, j), 1e-9);
    }
    const auto all = oracle_eigenvalues(c1, b);
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_NEAR(bank.eigenvalues[j], all[j], 1e-9);
      EXPECT_NEAR(bank.eigenvalues[n + j], all[d - n + j], 1e-9);
    }
    for (std::size_t j = 0; j < 2 * n; ++j) {
      EXPECT_GE(bank.eigenvalues[j], 0.0);
      EXPECT_LE(bank.eigenvalues[j], 1.0);
      if (j > 0) EXPECT_GE(bank.eigenvalues[j - 1], bank.eigenvalues[j]);
    }
  }
}

TEST(CspFit, LabelSwapReversesBankAndComplementsEigenvalues) {
  Rng rng(9);
  for (int round = 0; round < 30; ++round) {
    const std::size_t d = testing::random_size(rng, 2, 12);
    const std::size_t n = testing::random_size(rng, 1, d / 2);
    const Tensor c1 = testing::random_spd(rng, d);
    const Tensor c2 = testing::random_spd(rng, d);
    const auto bank = csp::csp_fit(c1, c2, n);
    const auto swapped = csp::csp_fit(c2, c1, n);
    const std::size_t k = 2 * n;
    for (std::size_t j = 0; j < k; ++j) {
      EXPECT_NEAR(swapped.eigenvalues[j], 1.0 - bank.eigenvalues[k - 1 - j], 1e-9);
      // Same vector up to sign.
      const double c = testing::dot_columns(swapped.filters, j, bank.filters, k - 1 - j);
      const double na = std::sqrt(testing::dot_columns(swapped.filters, j, swapped.filters, j));
      const double nb = std::sqrt(testing::dot_columns(bank.filters, k - 1 - j, bank.filters, k - 1 - j));
      if (min_gap(oracle_eigenvalues(c1, c1 + c2)) > 1e-6) EXPECT_NEAR(std::abs(c) / (na * nb), 1.0, 1e-7);
    }
  }
}

TEST(CspFit, ScalingOneClassLeavesBankUnchanged) {
  Rng rng(10);
  std::vector<Tensor> trials;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) {
    trials.push_back(testing::random_tensor(rng, {6, 100}));
    labels.push_back(i % 2);
  }
  const auto base = csp::fit_filter_bank(trials, labels, 2);
  for (double c : {0.1, -7.0}) {
    auto scaled = trials;
    for (std::size_t i = 0; i < scaled.size(); ++i) {
      if (labels[i] == 1) scaled[i] = c * scaled[i];
    }
    const auto bank = csp::fit_filter_bank(scaled, labels, 2);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(bank.eigenvalues[j], base.eigenvalues[j], 1e-12);
    for (std::size_t j = 0; j < 4; ++j) {
      const double dot = testing::dot_columns(bank.filters, j, base.filters, j);
      const double nn = testing::dot_columns(base.filters, j, base.filters, j);
      EXPECT_NEAR(std::abs(dot) / nn, 1.0, 1e-9);
    }
  }
}

TEST(CspFit, Errors) {
  Rng rng(11);
  const Tensor c = testing::random_spd(rng, 4);
  EXPECT_THROW(csp::csp_fit(c, c, 3), InvalidArgument);
  EXPECT_THROW(csp::csp_fit(c, c, 0), InvalidArgument);
  const Tensor zero(Shape{4, 4});
  EXPECT_THROW(csp::csp_fit(zero, zero, 1), NotPositiveDefinite);
}

TEST(CspFit, RecoversPlantedUnmixingDirection) {
  data::SynthSpec spec;
  spec.channels = 8;
  spec.samples = 512;
  spec.fs = 256.0;
  spec.trials_per_class = 50;
  spec.noise = 0.1;
  spec.profile0 = {4, 1, 1, 1, 1, 1, 1, 1};
  spec.profile1 = {1, 4, 1, 1, 1, 1, 1, 1};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    spec.seed = seed;
    const auto synth = data::synth_generate(spec);
    const auto bank = csp::fit_filter_bank(synth.epochs.trial_list(), synth.epochs.labels, 1);
    // Orthonormal mixing: the unmixing row of source 0 is mixing column 0.
    const double cosine = testing::dot_columns(bank.filters, 0, synth.truth.mixing, 0) /
                          std::sqrt(testing::dot_columns(bank.filters, 0, bank.filters, 0));
    EXPECT_GT(std::abs(cosine), 0.95) << "seed " << seed;
  }
}

TEST(FilterBank, JsonRoundTrip) {
  Rng rng(12);
  auto bank = csp::csp_fit(testing::random_spd(rng, 5), testing::random_spd(rng, 5), 2);
  bank.channel_names = {"C3", "Cz", "C4", "FCz", "CPz"};
  const auto back = csp::filter_bank_from_json(csp::filter_bank_to_json(bank));
  EXPECT_EQ(back.n_components, 2u);
  EXPECT_EQ(back.channel_names, bank.channel_names);
  EXPECT_EQ(back.eigenvalues, bank.eigenvalues);
  EXPECT_EQ(back.filters.shape(), bank.filters.shape());
  for (std::size_t i = 0; i < bank.filters.size(); ++i) EXPECT_EQ(back.filters[i], bank.filters[i]);
  EXPECT_THROW(csp::filter_bank_from_json("{\"n_components\": 1}"), InvalidArgument);
  EXPECT_THROW(csp::filter_bank_from_json("not json"), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Features

TEST(CspFeatures, IdentityFiltersGiveLogVariance) {
  csp::SpatialFilterBank bank;
  bank.filters = matrix(2, 2, {1, 0, 0, 1});
  bank.eigenvalues = {0.7, 0.3};
  bank.n_components = 1;
  const double e = std::exp(1.0);
  Tensor x(Shape{2, 100});
  for (std::size_t t = 0; t < 100; ++t) {
    const double s = t % 2 == 0 ? 1.0 : -1.0;
    x(0, t) = s;
    x(1, t) = s * std::sqrt(e);
  }
  const auto f = csp::csp_features(bank, x);
  ASSERT_EQ(f.size(), 2u);
  EXPECT_NEAR(f[0], 0.0, 1e-12);
  EXPECT_NEAR(f[1], 1.0, 1e-12);
}

TEST(CspFeatures, ScalingShiftsByTwiceLog) {
  Rng rng(13);
  const auto bank = csp::csp_fit(testing::random_spd(rng, 6), testing::random_spd(rng, 6), 2);
  const Tensor x = testing::random_tensor(rng, {6, 300});
  const auto base = csp::csp_features(bank, x);
  for (double c : {0.5, 3.0, -2.0}) {
    const auto f = csp::csp_features(bank, c * x);
    for (std::size_t j = 0; j < f.size(); ++j) EXPECT_NEAR(f[j] - base[j], 2.0 * std::log(std::abs(c)), 1e-10);
  }
}

TEST(CspFeatures, MatchesProjectedVarianceOracle) {
  Rng rng(14);
  for (int round = 0; round < 20; ++round) {
    const std::size_t d = testing::random_size(rng, 2, 10);
    const std::size_t n = testing::random_size(rng, 1, d / 2);
    const auto bank = csp::csp_fit(testing::random_spd(rng, d), testing::random_spd(rng, d), n);
    const std::size_t t = testing::random_size(rng, 10, 400);
    const Tensor x = testing::random_tensor(rng, {d, t});
    const auto f = csp::csp_features(bank, x);
    for (std::size_t j = 0; j < 2 * n; ++j) {
      double var = 0.0;
      for (std::size_t s = 0; s < t; ++s) {
        double z = 0.0;
        for (std::size_t c = 0; c < d; ++c) z += bank.filters(c, j) * x(c, s);
        var += z * z;
      }
      EXPECT_NEAR(f[j], std::log(var / static_cast<double>(t)), 1e-10);
    }
  }
}

TEST(CspFeatures, ZeroVarianceIsFloored) {
  csp::SpatialFilterBank bank;
  bank.filters = matrix(2, 2, {1, 0, 0, 1});
  bank.eigenvalues = {0.6, 0.4};
  bank.n_components = 1;
  Tensor x(Shape{2, 10});
  for (std::size_t t = 0; t < 10; ++t) x(0, t) = 1.0;
  std::size_t floored = 0;
  const auto f = csp::csp_features(bank, x, &floored);
  EXPECT_EQ(floored, 1u);
  EXPECT_DOUBLE_EQ(f[1], std::log(csp::kFeatureFloor));
  EXPECT_THROW(csp::csp_features(bank, Tensor(Shape{3, 10})), ShapeError);
}

// ---------------------------------------------------------------------------
// Trace ratio

TEST(TraceRatio, DiagonalExample) {
  const Tensor c1 = testing::diag_matrix({0.45, 0.25, 0.05});
  const Tensor c2 = testing::diag_matrix({0.05, 0.25, 0.45});
  const auto bank = csp::csp_fit(c1, c2, 1);
  Tensor top(Shape{3, 1});
  for (std::size_t i = 0; i < 3; ++i) top(i, 0) = bank.filters(i, 0);
  EXPECT_NEAR(csp::trace_ratio(top, c1, c2), 0.9, 1e-12);
  EXPECT_NEAR(csp::trace_ratio(bank.filters, c1, c2), 0.5, 1e-12);
}

TEST(TraceRatio, EigenvectorSubsetsAverageTheirEigenvalues) {
  Rng rng(15);
  for (int round = 0; round < 100; ++round) {
    const std::size_t d = testing::random_size(rng, 2, 12);
    const Tensor c1 = testing::random_spd(rng, d);
    const Tensor c2 = testing::random_spd(rng, d);
    const auto eig = generalized_eig_spd(c1, c1 + c2);
    std::vector<std::size_t> cols(d);
    std::iota(cols.begin(), cols.end(), 0);
    std::shuffle(cols.begin(), cols.end(), rng);
    cols.resize(testing::random_size(rng, 1, d));
    Tensor sel(Shape{d, cols.size()});
    double mean = 0.0;
    for (std::size_t j = 0; j < cols.size(); ++j) {
      for (std::size_t i = 0; i < d; ++i) sel(i, j) = eig.vectors(i, cols[j]);
      mean += eig.values[cols[j]];
    }
    mean /= static_cast<double>(cols.size());
    EXPECT_NEAR(csp::trace_ratio(sel, c1, c2), mean, 1e-10);
  }
}

TEST(TraceRatio, DimensionMismatchThrows) {
  Rng rng(16);
  const Tensor c = testing::random_spd(rng, 4);
  EXPECT_THROW(csp::trace_ratio(Tensor(Shape{3, 1}), c, c), ShapeError);
}

// ---------------------------------------------------------------------------
// DeepCSP loss

TEST(DeepCspLoss, DiagonalExample) {
  // Each trial's XXᵀ is diag(0.9, 0.5, 0.1) (class 0) or its mirror (class 1).
  const Tensor x0 = testing::diag_matrix({std::sqrt(0.9), std::sqrt(0.5), std::sqrt(0.1)});
  const Tensor x1 = testing::diag_matrix({std::sqrt(0.1), std::sqrt(0.5), std::sqrt(0.9)});
  const std::vector<Tensor> latents{x0, x1, x0, x1};
  const std::vector<int> labels{0, 1, 0, 1};
  const auto st = csp::deepcsp_loss(latents, labels, 1, 0.0);
  ASSERT_EQ(st.eigenvalues.size(), 3u);
  EXPECT_NEAR(st.eigenvalues[0], 0.9, 1e-12);
  EXPECT_NEAR(st.eigenvalues[1], 0.5, 1e-12);
  EXPECT_NEAR(st.eigenvalues[2], 0.1, 1e-12);
  EXPECT_NEAR(st.loss, -0.9, 1e-12);
  EXPECT_EQ(st.selected, (std::vector<std::size_t>{0, 2}));
  EXPECT_FALSE(st.degenerate);
}

TEST(DeepCspLoss, IdenticalClassesSitAtChance) {
  Rng rng(17);
  std::vector<Tensor> latents;
  std::vector<int> labels;
  for (int i = 0; i < 3; ++i) {
    const Tensor x = testing::random_tensor(rng, {4, 30});
    latents.push_back(x);
    latents.push_back(x);
    labels.push_back(0);
    labels.push_back(1);
  }
  const auto st = csp::deepcsp_loss(latents, labels, 2);
  for (double l : st.eigenvalues) EXPECT_NEAR(l, 0.5, 1e-10);
  EXPECT_NEAR(st.loss, -0.5, 1e-10);
  EXPECT_TRUE(st.degenerate);
}

TEST(DeepCspLoss, BoundedAndSymmetricGradients) {
  Rng rng(18);
  for (int round = 0; round < 30; ++round) {
    const std::size_t f = testing::random_size(rng, 2, 8);
    const auto set = random_latents(rng, f, 40, 6);
    const std::size_t n = testing::random_size(rng, 1, f / 2);
    const auto st = csp::deepcsp_loss(set.trials, set.labels, n);
    EXPECT_GE(st.loss, -1.0);
    EXPECT_LE(st.loss, -0.5 + 1e-12);
    for (std::size_t i = 0; i < f; ++i) {
      for (std::size_t j = 0; j < f; ++j) {
        EXPECT_EQ(st.grad_c1(i, j), st.grad_c1(j, i));
        EXPECT_EQ(st.grad_c2(i, j), st.grad_c2(j, i));
      }
    }
    // Loss agrees with an independently computed spectrum.
    const auto oracle = oracle_eigenvalues(st.covariances.c1, st.covariances.c1 + st.covariances.c2);
    double obj = 0.0;
    for (std::size_t j = 0; j < n; ++j) obj += oracle[j] + 1.0 - oracle[f - 1 - j];
    EXPECT_NEAR(st.loss, -obj / static_cast<double>(2 * n), 1e-10);
  }
}

TEST(DeepCspLoss, ScalingOneClassLeavesLossUnchanged) {
  Rng rng(19);
  const auto set = random_latents(rng, 6, 50, 8);
  const auto base = csp::deepcsp_loss(set.trials, set.labels, 2);
  auto scaled = set.trials;
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    if (set.labels[i] == 0) scaled[i] = 4.5 * scaled[i];
  }
  EXPECT_NEAR(csp::deepcsp_loss(scaled, set.labels, 2).loss, base.loss, 1e-12);
}

TEST(DeepCspLoss, LabelSwapKeepsLossAndComplementsSpectrum) {
  Rng rng(20);
  for (int round = 0; round < 20; ++round) {
    const std::size_t f = testing::random_size(rng, 2, 8);
    const auto set = random_latents(rng, f, 30, 5);
    auto swapped = set.labels;
    for (int& l : swapped) l = 1 - l;
    const std::size_t n = testing::random_size(rng, 1, f / 2);
    const auto a = csp::deepcsp_loss(set.trials, set.labels, n);
    const auto b = csp::deepcsp_loss(set.trials, swapped, n);
    for (std::size_t j = 0; j < f; ++j) EXPECT_NEAR(b.eigenvalues[j], 1.0 - a.eigenvalues[f - 1 - j], 1e-9);
    EXPECT_NEAR(a.loss, b.loss, 1e-9);
  }
}

TEST(DeepCspLoss, Errors) {
  Rng rng(21);
  const auto set = random_latents(rng, 4, 20, 3);
  EXPECT_THROW(csp::deepcsp_loss(set.trials, set.labels, 3), InvalidArgument);
  EXPECT_THROW(csp::deepcsp_loss(set.trials, set.labels, 0), InvalidArgument);
  EXPECT_THROW(csp::deepcsp_loss(std::vector<Tensor>{}, std::vector<int>{}, 1), InvalidArgument);
  const std::vector<int> one_class(set.labels.size(), 1);
  EXPECT_THROW(csp::deepcsp_loss(set.trials, one_class, 1), InvalidArgument);
}

// ---------------------------------------------------------------------------
// DeepCSP backward

TEST(DeepCspBackward, ZeroUpstreamGivesZeroGradient) {
  Rng rng(22);
  const auto set = random_latents(rng, 4, 25, 4);
  auto st = csp::deepcsp_loss(set.trials, set.labels, 1);
  st.grad_c1 = Tensor(Shape{4, 4});
  st.grad_c2 = Tensor(Shape{4, 4});
  for (const auto& g : csp::deepcsp_backward(st, set.trials, set.labels)) EXPECT_EQ(max_abs(g), 0.0);
}

TEST(DeepCspBackward, IdentityUpstreamIsOrthogonalToScaling) {
  Rng rng(23);
  const auto set = random_latents(rng, 5, 25, 4);
  auto st = csp::deepcsp_loss(set.trials, set.labels, 2);
  st.grad_c1 = testing::diag_matrix({1, 1, 1, 1, 1});
  st.grad_c2 = testing::diag_matrix({1, 1, 1, 1, 1});
  for (const auto& g : csp::deepcsp_backward(st, set.trials, set.labels)) EXPECT_LT(max_abs(g), 1e-15);
}

TEST(DeepCspBackward, GradientIsOrthogonalToEachTrial) {
  // Scale invariance of the loss in each trial: <∂L/∂X, X> = 0.
  Rng rng(24);
  const auto set = random_latents(rng, 6, 40, 5);
  const auto st = csp::deepcsp_loss(set.trials, set.labels, 2);
  const auto grads = csp::deepcsp_backward(st, set.trials, set.labels);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    double dot = 0.0, gn = 0.0, xn = 0.0;
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      dot += grads[i][k] * set.trials[i][k];
      gn += grads[i][k] * grads[i][k];
      xn += set.trials[i][k] * set.trials[i][k];
    }
    EXPECT_LT(std::abs(dot), 1e-12 * std::sqrt(gn * xn) + 1e-15);
  }
}

TEST(DeepCspBackward, MatchesFiniteDifferences) {
  Rng rng(25);
  int checked = 0;
  while (checked < 20) {
    const std::size_t f = rng() % 2 == 0 ? 4 : 6;
    const auto set = random_latents(rng, f, 30, 5);
    const std::size_t n = testing::random_size(rng, 1, f / 2);
    const auto st = csp::deepcsp_loss(set.trials, set.labels, n);
    if (min_gap(st.eigenvalues) <= 1e-3) continue;
    ++checked;
    const auto grads = csp::deepcsp_backward(st, set.trials, set.labels);
    for (std::size_t trial : {std::size_t{0}, std::size_t{3}, set.trials.size() - 1}) {
      auto f_of = [&](const Tensor& x) {
        auto probe = set.trials;
        probe[trial] = x;
        return csp::deepcsp_loss(probe, set.labels, n).loss;
      };
      const auto entries = testing::all_entries(set.trials[trial]);
      const auto fd = testing::finite_difference(f_of, set.trials[trial], entries);
      EXPECT_LT(testing::relative_error(testing::pick(grads[trial], entries), fd), 1e-4)
          << "round " << checked << " trial " << trial;
    }
  }
}

TEST(DeepCspBackward, RejectsStaleState) {
  Rng rng(26);
  auto set = random_latents(rng, 4, 20, 3);
  const auto st = csp::deepcsp_loss(set.trials, set.labels, 1);
  set.trials[2](1, 1) += 1e-3;
  EXPECT_THROW(csp::deepcsp_backward(st, set.trials, set.labels), Error);
}

}  // namespace
}  // namespace deepcsp
