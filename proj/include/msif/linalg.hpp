#pragma once

// Dense symmetric kernels used by the curvature code: eigendecomposition,
// covariance accumulation, Kronecker-factored damped solves and a dense
// damped-solve reference.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "msif/common.hpp"

namespace msif::linalg {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct EigenPair {
  Matrix<Scalar> vectors;  // orthogonal, column i pairs with values(i)
  Vector<Scalar> values;   // descending
};

enum class EigenMethod {
  automatic,    // cyclic Jacobi up to kJacobiMaxOrder, tridiagonal QR above
  jacobi,
  tridiagonal,
};

inline constexpr Eigen::Index kJacobiMaxOrder = 64;

template <typename Derived>
typename Derived::Scalar symmetry_defect(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.size() == 0) return Scalar(0);
  return (m - m.transpose()).cwiseAbs().maxCoeff();
}

template <typename Derived>
void require_symmetric(const Eigen::MatrixBase<Derived>& m, const char* what) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() != m.cols()) {
    throw ContractError(std::string(what) + ": matrix is not square");
  }
  if (!m.allFinite()) throw ContractError(std::string(what) + ": non-finite entries");
  const Scalar scale = m.size() ? m.cwiseAbs().maxCoeff() : Scalar(0);
  if (symmetry_defect(m) > Scalar(1e-12) * std::max(scale, Scalar(1e-300))) {
    throw ContractError(std::string(what) + ": matrix is not symmetric");
  }
}

namespace detail {

// Cyclic Jacobi with the classic threshold schedule. Works on a copy of the
// symmetrized input; rotations accumulate into `v`.
template <typename Scalar>
void jacobi_eigen(Matrix<Scalar> a, Vector<Scalar>& d, Matrix<Scalar>& v) {
  const Eigen::Index n = a.rows();
  v.setIdentity(n, n);
  d = a.diagonal();
  Vector<Scalar> b = d;
  Vector<Scalar> z = Vector<Scalar>::Zero(n);
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    Scalar off = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += std::abs(a(p, q));
    if (off == Scalar(0)) return;
    const Scalar tresh = sweep < 3 ? Scalar(0.2) * off / Scalar(n * n) : Scalar(0);
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar g = Scalar(100) * std::abs(a(p, q));
        if (sweep > 3 && std::abs(d(p)) + g == std::abs(d(p)) &&
            std::abs(d(q)) + g == std::abs(d(q))) {
          a(p, q) = 0;
          continue;
        }
        if (std::abs(a(p, q)) <= tresh) continue;
        const Scalar h = d(q) - d(p);
        Scalar t;
        if (std::abs(h) + g == std::abs(h)) {
          t = a(p, q) / h;
        } else {
          const Scalar theta = Scalar(0.5) * h / a(p, q);
          t = Scalar(1) / (std::abs(theta) + std::sqrt(Scalar(1) + theta * theta));
          if (theta < 0) t = -t;
        }
        const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
        const Scalar s = t * c;
        const Scalar tau = s / (Scalar(1) + c);
        const Scalar hh = t * a(p, q);
        z(p) -= hh;
        z(q) += hh;
        d(p) -= hh;
        d(q) += hh;
        a(p, q) = 0;
        auto rotate = [&](Scalar& x, Scalar& y) {
          const Scalar gx = x, hy = y;
          x = gx - s * (hy + gx * tau);
          y = hy + s * (gx - hy * tau);
        };
        // Only the strict upper triangle of `a` is kept current.
        for (Eigen::Index j = 0; j < p; ++j) rotate(a(j, p), a(j, q));
        for (Eigen::Index j = p + 1; j < q; ++j) rotate(a(p, j), a(j, q));
        for (Eigen::Index j = q + 1; j < n; ++j) rotate(a(p, j), a(q, j));
        for (Eigen::Index j = 0; j < n; ++j) rotate(v(j, p), v(j, q));
      }
    }
    b += z;
    d = b;
    z.setZero();
  }
  throw NumericError("sym_eigendecompose: Jacobi sweeps did not converge");
}

}  // namespace detail

/// Eigendecomposition of a symmetric matrix. Eigenvalues are returned in
/// descending order; every eigenvector is sign-normalized so that its
/// largest-magnitude entry (first one on ties) is positive.
template <typename Derived>
EigenPair<typename Derived::Scalar> sym_eigendecompose(const Eigen::MatrixBase<Derived>& m,
                                                       EigenMethod method = EigenMethod::automatic) {
  using Scalar = typename Derived::Scalar;
  require_symmetric(m, "sym_eigendecompose");
  const Eigen::Index n = m.rows();
  const Matrix<Scalar> sym = (m + m.transpose()) * Scalar(0.5);

  Vector<Scalar> values;
  Matrix<Scalar> vectors;
  if (method == EigenMethod::automatic) {
    method = n <= kJacobiMaxOrder ? EigenMethod::jacobi : EigenMethod::tridiagonal;
  }
  if (method == EigenMethod::jacobi) {
    detail::jacobi_eigen<Scalar>(sym, values, vectors);
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> solver(sym);
    if (solver.info() != Eigen::Success) {
      throw NumericError("sym_eigendecompose: tridiagonal QR did not converge");
    }
    values = solver.eigenvalues();
    vectors = solver.eigenvectors();
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return values(i) > values(j); });

  EigenPair<Scalar> out{Matrix<Scalar>(n, n), Vector<Scalar>(n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.values(k) = values(src);
    auto col = vectors.col(src);
    Eigen::Index arg = 0;
    Scalar best = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(col(i)) > best) {
        best = std::abs(col(i));
        arg = i;
      }
    }
    out.vectors.col(k) = col(arg) < 0 ? Vector<Scalar>(-col) : Vector<Scalar>(col);
  }
  return out;
}

/// Running second-moment accumulator: sum of x xᵀ over sample rows.
/// Mergeable, so partial accumulators can be reduced in any order.
template <typename Scalar>
class CovAccumulator {
 public:
  CovAccumulator() = default;
  explicit CovAccumulator(Eigen::Index dim) : sum_(Matrix<Scalar>::Zero(dim, dim)) {}

  Eigen::Index dim() const { return sum_.rows(); }
  std::int64_t count() const { return count_; }

  /// Each row of `samples` is one sample.
  template <typename Derived>
  void add_rows(const Eigen::MatrixBase<Derived>& samples) {
    if (samples.cols() != dim()) throw ContractError("CovAccumulator: dimension mismatch");
    sum_.template selfadjointView<Eigen::Lower>().rankUpdate(samples.transpose());
    count_ += samples.rows();
  }

  template <typename Derived>
  void add(const Eigen::MatrixBase<Derived>& sample) {
    if (sample.size() != dim()) throw ContractError("CovAccumulator: dimension mismatch");
    add_rows(sample.transpose());
  }

  void merge(const CovAccumulator& other) {
    if (other.dim() != dim()) throw ContractError("CovAccumulator: merge dimension mismatch");
    sum_ += other.sum_;
    count_ += other.count_;
  }

  Matrix<Scalar> finalize() const {
    if (count_ == 0) throw ContractError("CovAccumulator: finalize with zero samples");
    Matrix<Scalar> out = sum_.template selfadjointView<Eigen::Lower>();
    out /= static_cast<Scalar>(count_);
    return out;
  }

 private:
  Matrix<Scalar> sum_;
  std::int64_t count_ = 0;
};

/// Applies (G̃ + λI)⁻¹ to vec(V) for G̃ = (Q_A ⊗ Q_S) diag(vec Λ) (Q_A ⊗ Q_S)ᵀ,
/// without materializing the Kronecker product. V and Λ are out×in.
template <typename DQa, typename DQs, typename DLam, typename DV>
Matrix<typename DV::Scalar> kron_precondition(const Eigen::MatrixBase<DQa>& q_a,
                                              const Eigen::MatrixBase<DQs>& q_s,
                                              const Eigen::MatrixBase<DLam>& lambda_diag,
                                              typename DV::Scalar damping,
                                              const Eigen::MatrixBase<DV>& v) {
  using Scalar = typename DV::Scalar;
  if (q_a.rows() != q_a.cols() || q_s.rows() != q_s.cols() || v.rows() != q_s.rows() ||
      v.cols() != q_a.rows() || lambda_diag.rows() != v.rows() ||
      lambda_diag.cols() != v.cols()) {
    throw ContractError("kron_precondition: shape mismatch");
  }
  if (!(damping > Scalar(0))) throw ContractError("kron_precondition: damping must be > 0");
  Matrix<Scalar> rotated = q_s.transpose() * v * q_a;
  rotated.array() /= lambda_diag.array() + damping;
  return q_s * rotated * q_a.transpose();
}

/// Reference solve of (G + λI) x = v for PSD G. Used as the oracle for every
/// approximate inverse-curvature product.
template <typename DG, typename DV>
Vector<typename DG::Scalar> dense_damped_solve(const Eigen::MatrixBase<DG>& g,
                                               typename DG::Scalar damping,
                                               const Eigen::MatrixBase<DV>& v) {
  using Scalar = typename DG::Scalar;
  if (g.rows() != g.cols() || v.size() != g.rows()) {
    throw ContractError("dense_damped_solve: shape mismatch");
  }
  if (!(damping > Scalar(0))) throw ContractError("dense_damped_solve: damping must be > 0");
  if (!g.allFinite() || !v.allFinite()) throw ContractError("dense_damped_solve: non-finite input");
  const Matrix<Scalar> sym = (g + g.transpose()) * Scalar(0.5);
  const Scalar scale = sym.size() ? sym.cwiseAbs().maxCoeff() : Scalar(0);
  if (sym.size() > 0) {
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(sym, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError("dense_damped_solve: eigenvalue check failed");
    if (es.eigenvalues().minCoeff() < -Scalar(1e-10) * std::max(scale, Scalar(1))) {
      throw ContractError("dense_damped_solve: matrix is not positive semi-definite");
    }
  }
  Matrix<Scalar> damped = sym;
  damped.diagonal().array() += damping;
  Eigen::LLT<Matrix<Scalar>> llt(damped);
  if (llt.info() != Eigen::Success) throw NumericError("dense_damped_solve: Cholesky failed");
  Vector<Scalar> x = llt.solve(v);
  // Two rounds of refinement bring the residual to working precision.
  for (int i = 0; i < 2; ++i) x += llt.solve(Vector<Scalar>(v - damped * x));
  return x;
}

}  // namespace msif::linalg
