#ifndef ALIGN_CEILING_HPP
#define ALIGN_CEILING_HPP

#include <Eigen/Dense>

#include <map>
#include <vector>

namespace align {

struct CeilingEstimate {
  double ceiling = 0.0;                ///< NaN when fewer than two participants remain
  std::vector<double> per_participant; ///< leave-one-out correlations, NaN for excluded participants
  std::vector<int> excluded;           ///< participant columns without variance
  bool defined() const noexcept { return ceiling == ceiling; }
};

/// Inter-participant reliability. Column p holds participant p's responses,
/// rows aligned by stimulus. Each participant is correlated with the mean of
/// the others; the ceiling is the mean of these correlations. Columns without
/// variance are excluded from both roles.
CeilingEstimate noise_ceiling(const Eigen::Ref<const Eigen::MatrixXd>& responses);

struct AdjustedPredictivity {
  double r = 0.0;
  double ceiling = 0.0;
  double adjusted = 0.0;  ///< r / ceiling; NaN when unreliable
  bool reliable = false;
};

inline constexpr double kDefaultCeilingCutoff = 0.05;

/// Divides predictivity by the area's ceiling. Areas with ceiling at or below
/// the cutoff, or without a ceiling, are flagged unreliable.
std::map<int, AdjustedPredictivity> ceiling_adjust(const std::map<int, double>& predictivity,
                                                   const std::map<int, double>& ceiling,
                                                   double cutoff = kDefaultCeilingCutoff);

}  // namespace align

#endif  // ALIGN_CEILING_HPP
