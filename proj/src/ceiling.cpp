#include "align/ceiling.hpp"

#include "align/stats.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace align {

CeilingEstimate noise_ceiling(const Eigen::Ref<const Eigen::MatrixXd>& responses)
{
  if (responses.cols() < 2) throw std::invalid_argument("noise_ceiling: need at least two participants");
  if (responses.rows() < 3) throw std::invalid_argument("noise_ceiling: need at least three aligned responses");
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();

  CeilingEstimate est;
  est.per_participant.assign(static_cast<std::size_t>(responses.cols()), nan);
  std::vector<Eigen::Index> kept;
  for (Eigen::Index p = 0; p < responses.cols(); ++p) {
    try {
      (void)standardize(responses.col(p));
      kept.push_back(p);
    } catch (const UndefinedCorrelation&) {
      est.excluded.push_back(static_cast<int>(p));
    }
  }
  if (kept.size() < 2) {
    est.ceiling = nan;
    return est;
  }

  Eigen::VectorXd total = Eigen::VectorXd::Zero(responses.rows());
  for (auto p : kept) total += responses.col(p);
  double sum = 0.0;
  int n = 0;
  for (auto p : kept) {
    const Eigen::VectorXd others = (total - responses.col(p)) / static_cast<double>(kept.size() - 1);
    try {
      const double r = pearson(responses.col(p), others);
      est.per_participant[static_cast<std::size_t>(p)] = r;
      sum += r;
      ++n;
    } catch (const UndefinedCorrelation&) {
      est.excluded.push_back(static_cast<int>(p));
    }
  }
  est.ceiling = n > 0 ? sum / n : nan;
  return est;
}

std::map<int, AdjustedPredictivity> ceiling_adjust(const std::map<int, double>& predictivity,
                                                   const std::map<int, double>& ceiling, double cutoff)
{
  std::map<int, AdjustedPredictivity> out;
  for (const auto& [area, r] : predictivity) {
    AdjustedPredictivity a;
    a.r = r;
    auto it = ceiling.find(area);
    a.ceiling = it == ceiling.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
    a.reliable = std::isfinite(a.ceiling) && a.ceiling > cutoff;
    a.adjusted = a.reliable ? r / a.ceiling : std::numeric_limits<double>::quiet_NaN();
    out.emplace(area, a);
  }
  return out;
}

}  // namespace align
