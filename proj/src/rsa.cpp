#include "align/rsa.hpp"

#include "align/rng.hpp"
#include "align/stats.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

namespace align {

std::string_view condition_name(RsaCondition c) noexcept
{
  return c == RsaCondition::TextOnly ? "text-only" : "text+image";
}

RsaCondition parse_condition(std::string_view s)
{
  if (s == "text-only") return RsaCondition::TextOnly;
  if (s == "text+image") return RsaCondition::TextImage;
  throw std::invalid_argument("unknown RSA condition '" + std::string(s) + "'");
}

std::string_view restriction_name(VoxelRestriction r) noexcept
{
  return r == VoxelRestriction::All ? "all" : "significant";
}

VoxelRestriction parse_restriction(std::string_view s)
{
  if (s == "all" || s == "none") return VoxelRestriction::All;
  if (s == "significant") return VoxelRestriction::Significant;
  throw std::invalid_argument("unknown voxel restriction '" + std::string(s) + "'");
}

Eigen::MatrixXd concept_vectors(const Eigen::Ref<const Eigen::MatrixXd>& values, std::span<const Stimulus> rows,
                                int concept_count, RsaCondition condition)
{
  if (static_cast<std::size_t>(values.rows()) != rows.size())
    throw std::invalid_argument("concept_vectors: row count mismatch");
  const auto n = static_cast<Eigen::Index>(concept_count);
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n, values.cols());
  Eigen::MatrixXd wc_sums = Eigen::MatrixXd::Zero(n, values.cols());
  std::vector<int> counts(static_cast<std::size_t>(concept_count), 0);
  std::vector<int> wc_counts(static_cast<std::size_t>(concept_count), 0);

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Stimulus& s = rows[i];
    if (s.concept_id < 0 || s.concept_id >= concept_count) throw std::out_of_range("concept_vectors: concept id out of range");
    const auto r = static_cast<Eigen::Index>(i);
    const auto c = static_cast<std::size_t>(s.concept_id);
    switch (s.paradigm) {
      case Paradigm::WordCloud:
        wc_sums.row(s.concept_id) += values.row(r);
        ++wc_counts[c];
        break;
      case Paradigm::Picture:
        if (condition == RsaCondition::TextOnly) break;
        [[fallthrough]];
      case Paradigm::Sentence:
        sums.row(s.concept_id) += values.row(r);
        ++counts[c];
        break;
    }
  }

  Eigen::MatrixXd out(n, values.cols());
  for (int c = 0; c < concept_count; ++c) {
    const auto k = static_cast<std::size_t>(c);
    const int total = counts[k] + (wc_counts[k] > 0 ? 1 : 0);
    if (total == 0) throw std::runtime_error("concept_vectors: concept " + std::to_string(c) + " has no included stimuli");
    Eigen::RowVectorXd acc = sums.row(c);
    if (wc_counts[k] > 0) acc += wc_sums.row(c) / wc_counts[k];
    out.row(c) = acc / total;
  }
  return out;
}

Eigen::MatrixXd rdm(const Eigen::Ref<const Eigen::MatrixXd>& vectors)
{
  Eigen::MatrixXd z(vectors.cols(), vectors.rows());
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    try {
      z.col(i) = standardize(vectors.row(i).transpose());
    } catch (const UndefinedCorrelation&) {
      throw UndefinedCorrelation("rdm: row " + std::to_string(i) + " is constant");
    }
  }
  Eigen::MatrixXd d = (1.0 - (z.transpose() * z).array()).cwiseMax(0.0).cwiseMin(2.0).matrix();
  d = (0.5 * (d + d.transpose())).eval();
  d.diagonal().setZero();
  return d;
}

Eigen::VectorXd lower_triangle(const Eigen::Ref<const Eigen::MatrixXd>& m)
{
  if (m.rows() != m.cols()) throw std::invalid_argument("lower_triangle: matrix is not square");
  const Eigen::Index n = m.rows();
  Eigen::VectorXd out(n * (n - 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) out(k++) = m(i, j);
  }
  return out;
}

double rsa_score(const Eigen::Ref<const Eigen::MatrixXd>& rdm_a, const Eigen::Ref<const Eigen::MatrixXd>& rdm_b)
{
  if (rdm_a.rows() != rdm_b.rows() || rdm_a.cols() != rdm_b.cols()) throw std::invalid_argument("rsa_score: RDM shapes differ");
  return spearman(lower_triangle(rdm_a), lower_triangle(rdm_b));
}

BaselineDistribution shuffled_baseline(const Eigen::Ref<const Eigen::MatrixXd>& model_vectors,
                                       const Eigen::Ref<const Eigen::MatrixXd>& brain_vectors, int n_shuffles,
                                       std::uint64_t seed, bool exclude_identity)
{
  if (model_vectors.rows() != brain_vectors.rows()) throw std::invalid_argument("shuffled_baseline: concept count mismatch");
  if (n_shuffles < 1) throw std::invalid_argument("shuffled_baseline: need at least one shuffle");
  const Eigen::Index n = brain_vectors.rows();
  if (n < 3) throw std::invalid_argument("shuffled_baseline: need at least 3 concepts");

  // Permuting concepts permutes RDM entries, so the rank multiset of the
  // brain triangle is fixed and ranks can be gathered instead of recomputed.
  const Eigen::VectorXd model_z = standardize(average_ranks(lower_triangle(rdm(model_vectors))));
  const Eigen::VectorXd brain_ranks = average_ranks(lower_triangle(rdm(brain_vectors)));
  Eigen::MatrixXd rank_matrix = Eigen::MatrixXd::Zero(n, n);
  {
    Eigen::Index k = 0;
    for (Eigen::Index i = 1; i < n; ++i) {
      for (Eigen::Index j = 0; j < i; ++j) rank_matrix(i, j) = rank_matrix(j, i) = brain_ranks(k++);
    }
  }
  const double rank_mean = brain_ranks.mean();
  const double rank_norm = (brain_ranks.array() - rank_mean).matrix().norm();
  if (!(rank_norm > 0.0)) throw UndefinedCorrelation("shuffled_baseline: brain RDM has zero rank variance");

  BaselineDistribution out;
  out.scores.resize(static_cast<std::size_t>(n_shuffles));
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  for (int s = 0; s < n_shuffles; ++s) {
    Rng rng(derive_seed(seed, {tag::rsa_shuffle, static_cast<std::uint64_t>(s)}));
    bool identity = true;
    while (identity) {
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      rng.shuffle(std::span<Eigen::Index>(perm));
      identity = exclude_identity;
      for (std::size_t i = 0; identity && i < perm.size(); ++i) identity = perm[i] == static_cast<Eigen::Index>(i);
    }
    double dot = 0.0;
    Eigen::Index k = 0;
    for (Eigen::Index i = 1; i < n; ++i) {
      const Eigen::Index pi = perm[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < i; ++j) {
        dot += model_z(k++) * (rank_matrix(pi, perm[static_cast<std::size_t>(j)]) - rank_mean);
      }
    }
    out.scores[static_cast<std::size_t>(s)] = std::clamp(dot / rank_norm, -1.0, 1.0);
  }

  const Eigen::Map<const Eigen::VectorXd> v(out.scores.data(), n_shuffles);
  out.mean = v.mean();
  out.max = v.maxCoeff();
  out.sd = n_shuffles > 1 ? std::sqrt((v.array() - out.mean).square().sum() / (n_shuffles - 1)) : 0.0;
  return out;
}

}  // namespace align
