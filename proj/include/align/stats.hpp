#ifndef ALIGN_STATS_HPP
#define ALIGN_STATS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace align {

/// Raised when a correlation is requested for a vector without variance.
class UndefinedCorrelation : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

// Centered sum of squares below this is indistinguishable from a constant vector.
template <typename Derived>
bool is_degenerate(const Eigen::MatrixBase<Derived>& centered, typename Derived::Scalar scale)
{
  using Scalar = typename Derived::Scalar;
  const Scalar ss = centered.squaredNorm();
  const Scalar tol = static_cast<Scalar>(centered.size()) * std::numeric_limits<Scalar>::epsilon() * scale;
  return !(ss > tol * tol);
}

}  // namespace detail

/// Centers x and scales it to unit Euclidean norm, so that the Pearson
/// correlation of two such vectors is their dot product.
template <typename Derived>
Vector<typename Derived::Scalar> standardize(const Eigen::MatrixBase<Derived>& x)
{
  using Scalar = typename Derived::Scalar;
  if (x.size() < 2) throw UndefinedCorrelation("correlation needs at least two observations");
  Vector<Scalar> c = x.derived().template cast<Scalar>();
  c.array() -= c.mean();
  if (detail::is_degenerate(c, x.cwiseAbs().maxCoeff())) throw UndefinedCorrelation("zero-variance vector");
  c /= c.norm();
  return c;
}

/// Pearson correlation coefficient.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar pearson(const Eigen::MatrixBase<DerivedA>& x, const Eigen::MatrixBase<DerivedB>& y)
{
  using Scalar = typename DerivedA::Scalar;
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const Vector<Scalar> a = standardize(x);
  const Vector<Scalar> b = standardize(y);
  return std::clamp(a.dot(b), Scalar(-1), Scalar(1));
}

/// Average ranks (1-based); tied values receive the mean of their rank range.
template <typename Derived>
Vector<typename Derived::Scalar> average_ranks(const Eigen::MatrixBase<Derived>& x)
{
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = x.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a) < x(b); });

  Vector<Scalar> ranks(n);
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && x(order[j + 1]) == x(order[i])) ++j;
    const Scalar rank = Scalar(i + j) / Scalar(2) + Scalar(1);
    for (Eigen::Index k = i; k <= j; ++k) ranks(order[k]) = rank;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation: Pearson correlation of average ranks.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar spearman(const Eigen::MatrixBase<DerivedA>& x, const Eigen::MatrixBase<DerivedB>& y)
{
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 3) throw std::invalid_argument("spearman: need at least 3 observations");
  try {
    return pearson(average_ranks(x), average_ranks(y));
  } catch (const UndefinedCorrelation&) {
    throw UndefinedCorrelation("spearman: zero rank variance");
  }
}

/// Per-column Pearson correlation between two equally shaped matrices.
/// Degenerate columns yield NaN rather than throwing.
template <typename DerivedA, typename DerivedB>
Vector<typename DerivedA::Scalar> columnwise_pearson(const Eigen::MatrixBase<DerivedA>& x,
                                                     const Eigen::MatrixBase<DerivedB>& y)
{
  using Scalar = typename DerivedA::Scalar;
  Vector<Scalar> r(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    try {
      r(j) = pearson(x.col(j), y.col(j));
    } catch (const UndefinedCorrelation&) {
      r(j) = std::numeric_limits<Scalar>::quiet_NaN();
    }
  }
  return r;
}

}  // namespace align

#endif  // ALIGN_STATS_HPP
