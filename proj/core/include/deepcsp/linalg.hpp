#pragma once

#include <vector>

#include "deepcsp/tensor.hpp"

namespace deepcsp {

/// Adjacent eigenvalues closer than this are reported as degenerate.
inline constexpr double kDegeneracyGap = 1e-10;

struct SymEig {
  std::vector<double> values;  // descending
  Tensor vectors;              // orthonormal columns, column i pairs with values[i]
  bool degenerate = false;
};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// The input is symmetrized first. Each eigenvector's largest-magnitude entry
/// is made positive so results are reproducible.
SymEig sym_eig(const Tensor& a);

struct GeneralizedEig {
  std::vector<double> values;  // descending
  Tensor vectors;              // columns v with vᵀ B v = 1
  bool degenerate = false;
};

/// Whitening transform P = Λ^{-1/2} Uᵀ of a symmetric positive definite
/// matrix C = U Λ Uᵀ, so that P C Pᵀ = I.
Tensor whitening_matrix(const Tensor& composite);

/// Solves A v = λ B v for symmetric PSD A and symmetric PD B by whitening B
/// and diagonalizing the whitened A.
GeneralizedEig generalized_eig_spd(const Tensor& a, const Tensor& b);

/// Smallest eigenvalue B must exceed to count as positive definite.
inline constexpr double kMinPositiveEigenvalue = 1e-12;

}  // namespace deepcsp
