#include "deepcsp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deepcsp/error.hpp"

namespace deepcsp {
namespace {

void require_square_finite(const Tensor& a, const char* what) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " +
                     shape_string(a.shape()));
  }
  if (!a.all_finite()) throw NonFiniteError(std::string(what) + ": non-finite entries");
}

double off_diagonal_norm2(const Tensor& a) {
  double s = 0.0;
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
  return s;
}

// Orders eigenpairs by value descending; ties keep the original index order.
void sort_descending(std::vector<double>& values, Tensor& vectors) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return values[i] > values[j]; });
  std::vector<double> sorted(n);
  Tensor v(Shape{vectors.rows(), n});
  for (std::size_t k = 0; k < n; ++k) {
    sorted[k] = values[order[k]];
    for (std::size_t r = 0; r < vectors.rows(); ++r) v(r, k) = vectors(r, order[k]);
  }
  values = std::move(sorted);
  vectors = std::move(v);
}

void fix_signs(Tensor& vectors) {
  for (std::size_t c = 0; c < vectors.cols(); ++c) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < vectors.rows(); ++r) {
      if (std::abs(vectors(r, c)) > std::abs(vectors(best, c)) + 1e-12) best = r;
    }
    if (vectors(best, c) < 0.0) {
      for (std::size_t r = 0; r < vectors.rows(); ++r) vectors(r, c) = -vectors(r, c);
    }
  }
}

bool has_close_neighbours(const std::vector<double>& values) {
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i - 1] - values[i] < kDegeneracyGap) return true;
  }
  return false;
}

}  // namespace

SymEig sym_eig(const Tensor& input) {
  require_square_finite(input, "sym_eig");
  const std::size_t n = input.rows();
  Tensor a = symmetrize(input);
  Tensor v = Tensor::identity(n);

  const double scale = std::max(frobenius_norm(a), 1e-300);
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    const double off = off_diagonal_norm2(a);
    if (off <= 1e-32 * scale * scale) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        // Skip entries already negligible against both diagonal terms.
        if (sweep > 3 && std::abs(apq) < 1e-18 * (std::abs(app) + std::abs(aqq))) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  SymEig out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
  out.vectors = std::move(v);
  sort_descending(out.values, out.vectors);
  fix_signs(out.vectors);
  out.degenerate = has_close_neighbours(out.values);
  return out;
}

Tensor whitening_matrix(const Tensor& composite) {
  require_square_finite(composite, "whitening_matrix");
  const SymEig eig = sym_eig(composite);
  const std::size_t n = composite.rows();
  if (eig.values.back() <= kMinPositiveEigenvalue) {
    throw NotPositiveDefinite("composite matrix is not positive definite (smallest eigenvalue " +
                              std::to_string(eig.values.back()) + ")");
  }
  Tensor p(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const double inv_sqrt = 1.0 / std::sqrt(eig.values[i]);
    for (std::size_t j = 0; j < n; ++j) p(i, j) = inv_sqrt * eig.vectors(j, i);
  }
  return p;
}

GeneralizedEig generalized_eig_spd(const Tensor& a, const Tensor& b) {
  require_square_finite(a, "generalized_eig_spd");
  require_square_finite(b, "generalized_eig_spd");
  require_same_shape(a, b, "generalized_eig_spd");

  const Tensor p = whitening_matrix(symmetrize(b));
  const Tensor whitened = matmul(matmul(p, symmetrize(a)), transpose(p));
  SymEig inner = sym_eig(whitened);

  GeneralizedEig out;
  out.values = std::move(inner.values);
  out.vectors = matmul(transpose(p), inner.vectors);
  fix_signs(out.vectors);
  out.degenerate = inner.degenerate;
  return out;
}

}  // namespace deepcsp
