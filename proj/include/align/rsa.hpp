#ifndef ALIGN_RSA_HPP
#define ALIGN_RSA_HPP

#include "align/types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace align {

enum class RsaCondition { TextOnly, TextImage };
enum class VoxelRestriction { All, Significant };

std::string_view condition_name(RsaCondition c) noexcept;  ///< "text-only" / "text+image"
RsaCondition parse_condition(std::string_view s);
std::string_view restriction_name(VoxelRestriction r) noexcept;  ///< "all" / "significant"
VoxelRestriction parse_restriction(std::string_view s);

/// One row per concept: the mean of the included sentence and picture rows,
/// with all word-cloud rows of the concept counted as a single vector.
/// Text-only uses sentences and word clouds; text+image adds pictures.
Eigen::MatrixXd concept_vectors(const Eigen::Ref<const Eigen::MatrixXd>& values, std::span<const Stimulus> rows,
                                int concept_count, RsaCondition condition);

/// Correlation-distance matrix 1 - r between rows, with an exact zero diagonal.
Eigen::MatrixXd rdm(const Eigen::Ref<const Eigen::MatrixXd>& vectors);

/// Strict lower triangle, row-major: (1,0), (2,0), (2,1), (3,0), ...
Eigen::VectorXd lower_triangle(const Eigen::Ref<const Eigen::MatrixXd>& m);

/// Spearman correlation of the lower triangles of two RDMs.
double rsa_score(const Eigen::Ref<const Eigen::MatrixXd>& rdm_a, const Eigen::Ref<const Eigen::MatrixXd>& rdm_b);

struct RsaScore {
  double rho = 0.0;
  RsaCondition condition = RsaCondition::TextImage;
  VoxelRestriction restriction = VoxelRestriction::All;
};

struct BaselineDistribution {
  double mean = 0.0;
  double sd = 0.0;   ///< sample standard deviation, 0 for a single shuffle
  double max = 0.0;
  std::vector<double> scores;
};

/// RSA scores after permuting the concepts of the brain side. Shuffle k draws
/// from its own stream, so the distribution depends only on the seed.
BaselineDistribution shuffled_baseline(const Eigen::Ref<const Eigen::MatrixXd>& model_vectors,
                                       const Eigen::Ref<const Eigen::MatrixXd>& brain_vectors, int n_shuffles,
                                       std::uint64_t seed, bool exclude_identity = true);

}  // namespace align

#endif  // ALIGN_RSA_HPP
