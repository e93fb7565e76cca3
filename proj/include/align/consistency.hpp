#ifndef ALIGN_CONSISTENCY_HPP
#define ALIGN_CONSISTENCY_HPP

#include "align/manifest.hpp"
#include "align/stats.hpp"
#include "align/types.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace align {

/// Per-concept mean responses under each paradigm, for one voxel or voxel set.
template <typename Scalar>
struct ParadigmResponsesT {
  Vector<Scalar> sentence;
  Vector<Scalar> picture;
  Vector<Scalar> word_cloud;

  const Vector<Scalar>& operator[](Paradigm p) const noexcept
  {
    return p == Paradigm::Sentence ? sentence : p == Paradigm::Picture ? picture : word_cloud;
  }
};

using ParadigmResponses = ParadigmResponsesT<double>;

/// Mean of the three pairwise Pearson correlations between paradigm vectors.
/// Throws UndefinedCorrelation if any vector is constant.
template <typename Scalar>
Scalar semantic_consistency(const ParadigmResponsesT<Scalar>& r)
{
  if (r.sentence.size() != r.picture.size() || r.sentence.size() != r.word_cloud.size())
    throw std::invalid_argument("semantic_consistency: paradigm vectors differ in length");
  return (pearson(r.sentence, r.picture) + pearson(r.sentence, r.word_cloud) + pearson(r.word_cloud, r.picture)) / 3;
}

enum class Half { All, A, B };

/// Per (concept, paradigm), the repetition indices assigned to half A, as a
/// bitmask over {0..5}; half B is the complement.
struct SplitAssignment {
  int concept_count = 0;
  std::vector<std::uint8_t> half_a;

  std::uint8_t mask(int concept_id, Paradigm p) const { return half_a.at(static_cast<std::size_t>(concept_id * 3 + index_of(p))); }
  bool selects(const Stimulus& s, Half h) const
  {
    if (h == Half::All) return true;
    const bool in_a = (mask(s.concept_id, s.paradigm) >> s.repetition) & 1U;
    return h == Half::A ? in_a : !in_a;
  }
};

/// Concept-by-voxel mean responses, one matrix per paradigm.
struct ConceptMeans {
  std::array<Eigen::MatrixXd, 3> by_paradigm;

  Eigen::Index voxel_count() const noexcept { return by_paradigm[0].cols(); }
  ParadigmResponses voxel(Eigen::Index v) const;
  /// Averages responses over the voxel set first.
  ParadigmResponses voxel_set(std::span<const Eigen::Index> voxels) const;
};

/// Averages activation rows per (concept, paradigm) over the repetitions the
/// selected half admits. Throws if some (concept, paradigm) has no admitted row.
ConceptMeans concept_means(const Eigen::Ref<const Eigen::MatrixXd>& beta, std::span<const Stimulus> rows,
                           int concept_count, Half half = Half::All, const SplitAssignment* split = nullptr);

/// Semantic consistency per voxel; NaN where a paradigm vector is constant.
Eigen::VectorXd voxel_consistency(const ConceptMeans& means);

/// The ten 3|3 partitions of {0..5}, as half-A bitmasks containing
/// repetition 0, in lexicographic order of the half-A set.
const std::array<std::uint8_t, 10>& three_three_partitions();

/// Number of participants whose seen repetitions split unevenly
/// (e.g. 3 vs 1) under the given half-A mask.
int split_imbalance(std::uint8_t half_a, std::span<const std::uint8_t> seen_by_participant);

/// seen[p][concept * 3 + paradigm] is the bitmask of repetitions participant p saw.
SplitAssignment split_half_partition(const std::vector<std::vector<std::uint8_t>>& seen, int concept_count);
SplitAssignment split_half_partition(const Manifest& m);

struct PermutationResult {
  double c_observed = 0.0;
  double p_value = 1.0;
  int n_permutations = 0;
  std::uint64_t seed = 0;
};

/// One-sided permutation test of the consistency score. Each permutation
/// shuffles the paradigm vectors independently; p = (1 + #{C~ >= C}) / (N + 1).
PermutationResult permutation_pvalue(const ParadigmResponses& responses, int n_permutations, std::uint64_t seed);

struct SignificanceOptions {
  int n_permutations = 1000;
  double alpha = 0.05;
  std::uint64_t seed = 42;
  /// Added to local voxel indices when deriving RNG streams, so a volume
  /// processed in blocks draws the same streams as in one pass.
  std::int64_t voxel_offset = 0;
};

struct SignificanceResult {
  std::vector<std::uint8_t> mask;
  Eigen::VectorXd c_a, c_b;
  Eigen::VectorXd p_a, p_b;
  std::vector<Eigen::Index> excluded;  ///< voxels with a constant paradigm vector in either half
};

/// Voxel is significant iff p < alpha on both halves of the split.
SignificanceResult significance_mask(const Eigen::Ref<const Eigen::MatrixXd>& beta, std::span<const Stimulus> rows,
                                     int concept_count, const SplitAssignment& split,
                                     const SignificanceOptions& options = {});

/// Fraction of participants whose mask is set, per voxel.
MapVolume probabilistic_map(std::span<const MaskVolume> masks);

}  // namespace align

#endif  // ALIGN_CONSISTENCY_HPP
