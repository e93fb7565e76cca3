#ifndef ALIGN_RIDGE_HPP
#define ALIGN_RIDGE_HPP

// Ridge regression through the thin SVD X = U S V^T. With shrinkage factors
// f_k = s_k^2 / (s_k^2 + alpha):
//
//   w     = V diag(s_k / (s_k^2 + alpha)) U^T y
//   y_hat = U diag(f_k) U^T y
//   h_ii  = sum_k U_ik^2 f_k
//
// One decomposition serves every alpha, which keeps tiny penalties such as
// 1e-30 stable (no normal-equation matrix is ever formed). Singular values
// below the rank tolerance are dropped, so alpha = 0 on a rank-deficient
// design gives the minimum-norm least-squares solution.

#include "align/stats.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace align {

/// The penalty grid {1e-30, 1e-29, ..., 1e29}.
inline std::vector<double> default_alpha_grid()
{
  std::vector<double> grid;
  for (int e = -30; e <= 29; ++e) grid.push_back(std::pow(10.0, e));
  return grid;
}

template <typename Scalar>
class RidgeSvd {
public:
  RidgeSvd() = default;

  explicit RidgeSvd(const Eigen::Ref<const Matrix<Scalar>>& x) { compute(x); }

  RidgeSvd& compute(const Eigen::Ref<const Matrix<Scalar>>& x)
  {
    if (x.rows() < 1 || x.cols() < 1) throw std::invalid_argument("ridge: empty design matrix");
    if (!x.allFinite()) throw std::invalid_argument("ridge: non-finite design matrix");
    Eigen::BDCSVD<Matrix<Scalar>> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector<Scalar>& s = svd.singularValues();
    const Scalar tol = s.size() ? s(0) * static_cast<Scalar>(std::max(x.rows(), x.cols())) *
                                      std::numeric_limits<Scalar>::epsilon()
                                : Scalar(0);
    Eigen::Index rank = 0;
    while (rank < s.size() && s(rank) > tol) ++rank;
    u_ = svd.matrixU().leftCols(rank);
    v_ = svd.matrixV().leftCols(rank);
    s_ = s.head(rank);
    u_squared_ = u_.array().square().matrix();
    return *this;
  }

  Eigen::Index rank() const noexcept { return s_.size(); }
  Eigen::Index rows() const noexcept { return u_.rows(); }
  Eigen::Index cols() const noexcept { return v_.rows(); }
  const Vector<Scalar>& singular_values() const noexcept { return s_; }
  const Matrix<Scalar>& u() const noexcept { return u_; }

  Vector<Scalar> shrinkage(Scalar alpha) const
  {
    const auto s2 = s_.array().square();
    return (s2 / (s2 + alpha)).matrix();
  }

  /// Effective degrees of freedom, trace of the hat matrix.
  Scalar effective_dof(Scalar alpha) const { return shrinkage(alpha).sum(); }

  /// Projection of the targets onto the left singular vectors, reused across alphas.
  template <typename Derived>
  Matrix<Scalar> project(const Eigen::MatrixBase<Derived>& y) const
  {
    return u_.transpose() * y;
  }

  template <typename Derived>
  Matrix<Scalar> weights(const Eigen::MatrixBase<Derived>& y, Scalar alpha) const
  {
    return weights_from_projection(project(y), alpha);
  }

  Matrix<Scalar> weights_from_projection(const Matrix<Scalar>& uty, Scalar alpha) const
  {
    const Vector<Scalar> scale = (s_.array() / (s_.array().square() + alpha)).matrix();
    return v_ * (scale.asDiagonal() * uty);
  }

  Matrix<Scalar> fitted_from_projection(const Matrix<Scalar>& uty, Scalar alpha) const
  {
    return u_ * (shrinkage(alpha).asDiagonal() * uty);
  }

  Vector<Scalar> hat_diagonal(Scalar alpha) const { return u_squared_ * shrinkage(alpha); }

private:
  Matrix<Scalar> u_, v_, u_squared_;
  Vector<Scalar> s_;
};

template <typename Scalar>
struct RidgeSolutionT {
  Vector<Scalar> weights;
  Scalar alpha = 0;
  Scalar effective_dof = 0;
};

using RidgeSolution = RidgeSolutionT<double>;

/// Solves (X^T X + alpha I) w = X^T y without an intercept.
template <typename DerivedX, typename DerivedY>
RidgeSolutionT<typename DerivedX::Scalar> ridge_fit(const Eigen::MatrixBase<DerivedX>& x,
                                                    const Eigen::MatrixBase<DerivedY>& y,
                                                    typename DerivedX::Scalar alpha)
{
  using Scalar = typename DerivedX::Scalar;
  if (alpha < 0) throw std::invalid_argument("ridge_fit: alpha must be non-negative");
  if (x.rows() != y.size()) throw std::invalid_argument("ridge_fit: row count mismatch");
  const RidgeSvd<Scalar> solver(x);
  RidgeSolutionT<Scalar> sol;
  sol.weights = solver.weights(y, alpha).col(0);
  sol.alpha = alpha;
  sol.effective_dof = solver.effective_dof(alpha);
  return sol;
}

/// Closed-form leave-one-out residuals e_i = (y_i - y_hat_i) / (1 - h_ii) for
/// every column of y. With an intercept the data are centered and the
/// unpenalized constant contributes 1/n to every leverage. Rows whose
/// leverage is numerically 1 get an infinite residual.
template <typename Scalar>
Matrix<Scalar> loo_residuals(const Eigen::Ref<const Matrix<Scalar>>& x, const Eigen::Ref<const Matrix<Scalar>>& y,
                             Scalar alpha, bool fit_intercept = false)
{
  if (x.rows() != y.rows()) throw std::invalid_argument("loo_residuals: row count mismatch");
  Matrix<Scalar> xc = x;
  Matrix<Scalar> yc = y;
  Scalar base = 0;
  if (fit_intercept) {
    xc.rowwise() -= x.colwise().mean();
    yc.rowwise() -= y.colwise().mean();
    base = Scalar(1) / static_cast<Scalar>(x.rows());
  }
  const RidgeSvd<Scalar> solver(xc);
  const Matrix<Scalar> uty = solver.project(yc);
  Matrix<Scalar> resid = yc - solver.fitted_from_projection(uty, alpha);
  const Vector<Scalar> h = (solver.hat_diagonal(alpha).array() + base).matrix();
  for (Eigen::Index i = 0; i < resid.rows(); ++i) {
    const Scalar denom = Scalar(1) - h(i);
    if (denom <= std::sqrt(std::numeric_limits<Scalar>::epsilon())) {
      resid.row(i).setConstant(std::numeric_limits<Scalar>::infinity());
    } else {
      resid.row(i) /= denom;
    }
  }
  return resid;
}

}  // namespace align

#endif  // ALIGN_RIDGE_HPP
