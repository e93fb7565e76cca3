#include "align/consistency.hpp"

#include "align/rng.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace align {
namespace {

// Standardized paradigm vectors turn each Pearson term into a dot product.
// The sentence vector stays in place; the other two are shuffled independently.
class PermutationKernel {
public:
  explicit PermutationKernel(const ParadigmResponses& r)
      : s_(standardize(r.sentence)), p_(standardize(r.picture)), wc_(standardize(r.word_cloud))
  {
    if (s_.size() != p_.size() || s_.size() != wc_.size())
      throw std::invalid_argument("permutation test: paradigm vectors differ in length");
    observed_ = score(p_, wc_);
  }

  double observed() const noexcept { return observed_; }

  int count_at_least_observed(int n_permutations, std::uint64_t seed)
  {
    Rng rng(seed);
    Eigen::VectorXd p = p_;
    Eigen::VectorXd wc = wc_;
    std::span<double> ps(p.data(), static_cast<std::size_t>(p.size()));
    std::span<double> ws(wc.data(), static_cast<std::size_t>(wc.size()));
    int count = 0;
    for (int k = 0; k < n_permutations; ++k) {
      rng.shuffle(ps);
      rng.shuffle(ws);
      if (score(p, wc) >= observed_) ++count;
    }
    return count;
  }

private:
  double score(const Eigen::VectorXd& p, const Eigen::VectorXd& wc) const
  {
    return (s_.dot(p) + s_.dot(wc) + wc.dot(p)) / 3.0;
  }

  Eigen::VectorXd s_, p_, wc_;
  double observed_ = 0.0;
};

}  // namespace

ParadigmResponses ConceptMeans::voxel(Eigen::Index v) const
{
  return {by_paradigm[0].col(v), by_paradigm[1].col(v), by_paradigm[2].col(v)};
}

ParadigmResponses ConceptMeans::voxel_set(std::span<const Eigen::Index> voxels) const
{
  if (voxels.empty()) throw std::invalid_argument("voxel_set: empty voxel set");
  ParadigmResponses r;
  Eigen::VectorXd* out[3] = {&r.sentence, &r.picture, &r.word_cloud};
  for (int k = 0; k < 3; ++k) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(by_paradigm[static_cast<std::size_t>(k)].rows());
    for (Eigen::Index v : voxels) acc += by_paradigm[static_cast<std::size_t>(k)].col(v);
    *out[k] = acc / static_cast<double>(voxels.size());
  }
  return r;
}

ConceptMeans concept_means(const Eigen::Ref<const Eigen::MatrixXd>& beta, std::span<const Stimulus> rows,
                           int concept_count, Half half, const SplitAssignment* split)
{
  if (static_cast<std::size_t>(beta.rows()) != rows.size())
    throw std::invalid_argument("concept_means: activation rows do not match stimulus rows");
  if (half != Half::All && split == nullptr) throw std::invalid_argument("concept_means: half selection needs a split");

  ConceptMeans means;
  std::array<std::vector<int>, 3> counts;
  for (std::size_t k = 0; k < 3; ++k) {
    means.by_paradigm[k] = Eigen::MatrixXd::Zero(concept_count, beta.cols());
    counts[k].assign(static_cast<std::size_t>(concept_count), 0);
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Stimulus& s = rows[r];
    if (s.concept_id < 0 || s.concept_id >= concept_count) throw std::out_of_range("concept_means: concept id out of range");
    if (split != nullptr && !split->selects(s, half)) continue;
    const auto k = static_cast<std::size_t>(index_of(s.paradigm));
    means.by_paradigm[k].row(s.concept_id) += beta.row(static_cast<Eigen::Index>(r));
    ++counts[k][static_cast<std::size_t>(s.concept_id)];
  }
  for (std::size_t k = 0; k < 3; ++k) {
    for (int c = 0; c < concept_count; ++c) {
      const int n = counts[k][static_cast<std::size_t>(c)];
      if (n == 0)
        throw std::runtime_error("concept_means: concept " + std::to_string(c) + " has no selected repetitions in paradigm " +
                                 std::string(code(kParadigms[k])));
      means.by_paradigm[k].row(c) /= static_cast<double>(n);
    }
  }
  return means;
}

Eigen::VectorXd voxel_consistency(const ConceptMeans& means)
{
  Eigen::VectorXd c(means.voxel_count());
#pragma omp parallel for schedule(static)
  for (Eigen::Index v = 0; v < means.voxel_count(); ++v) {
    try {
      c(v) = semantic_consistency(means.voxel(v));
    } catch (const UndefinedCorrelation&) {
      c(v) = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return c;
}

const std::array<std::uint8_t, 10>& three_three_partitions()
{
  static const std::array<std::uint8_t, 10> partitions = [] {
    std::array<std::uint8_t, 10> out{};
    std::size_t k = 0;
    for (int a = 1; a < 6; ++a) {
      for (int b = a + 1; b < 6; ++b) out[k++] = static_cast<std::uint8_t>(1U | (1U << a) | (1U << b));
    }
    return out;
  }();
  return partitions;
}

int split_imbalance(std::uint8_t half_a, std::span<const std::uint8_t> seen_by_participant)
{
  int imbalanced = 0;
  for (std::uint8_t seen : seen_by_participant) {
    const int a = std::popcount(static_cast<unsigned>(seen & half_a));
    const int b = std::popcount(static_cast<unsigned>(seen & ~half_a & 0x3FU));
    if (std::abs(a - b) >= 2) ++imbalanced;
  }
  return imbalanced;
}

SplitAssignment split_half_partition(const std::vector<std::vector<std::uint8_t>>& seen, int concept_count)
{
  SplitAssignment split;
  split.concept_count = concept_count;
  split.half_a.resize(static_cast<std::size_t>(concept_count) * 3);
  std::vector<std::uint8_t> column(seen.size());
  for (std::size_t cell = 0; cell < split.half_a.size(); ++cell) {
    for (std::size_t p = 0; p < seen.size(); ++p) column[p] = seen[p].at(cell);
    int best_score = std::numeric_limits<int>::max();
    std::uint8_t best = 0;
    // Strict improvement keeps the lexicographically first minimizer.
    for (std::uint8_t candidate : three_three_partitions()) {
      const int score = split_imbalance(candidate, column);
      if (score < best_score) {
        best_score = score;
        best = candidate;
      }
    }
    split.half_a[cell] = best;
  }
  return split;
}

SplitAssignment split_half_partition(const Manifest& m)
{
  const auto positions = m.stimulus_positions();
  std::vector<std::vector<std::uint8_t>> seen;
  for (const auto& p : m.participants) {
    std::vector<std::uint8_t> masks(static_cast<std::size_t>(m.concept_count()) * 3, 0);
    for (int id : p.stimuli) {
      auto it = positions.find(id);
      if (it == positions.end()) continue;
      const Stimulus& s = m.stimuli[static_cast<std::size_t>(it->second)];
      if (s.concept_id < 0 || s.concept_id >= m.concept_count() || s.repetition < 0 || s.repetition >= kMaxRepetitions) continue;
      masks[static_cast<std::size_t>(s.concept_id * 3 + index_of(s.paradigm))] |= static_cast<std::uint8_t>(1U << s.repetition);
    }
    seen.push_back(std::move(masks));
  }
  return split_half_partition(seen, m.concept_count());
}

PermutationResult permutation_pvalue(const ParadigmResponses& responses, int n_permutations, std::uint64_t seed)
{
  if (n_permutations < 1) throw std::invalid_argument("permutation_pvalue: need at least one permutation");
  PermutationKernel kernel(responses);
  const int count = kernel.count_at_least_observed(n_permutations, seed);
  PermutationResult result;
  result.c_observed = kernel.observed();
  result.p_value = (1.0 + count) / (n_permutations + 1.0);
  result.n_permutations = n_permutations;
  result.seed = seed;
  return result;
}

SignificanceResult significance_mask(const Eigen::Ref<const Eigen::MatrixXd>& beta, std::span<const Stimulus> rows,
                                     int concept_count, const SplitAssignment& split, const SignificanceOptions& options)
{
  const ConceptMeans half_a = concept_means(beta, rows, concept_count, Half::A, &split);
  const ConceptMeans half_b = concept_means(beta, rows, concept_count, Half::B, &split);

  const Eigen::Index n = beta.cols();
  SignificanceResult result;
  result.mask.assign(static_cast<std::size_t>(n), 0);
  result.c_a = Eigen::VectorXd::Zero(n);
  result.c_b = Eigen::VectorXd::Zero(n);
  result.p_a = Eigen::VectorXd::Ones(n);
  result.p_b = Eigen::VectorXd::Ones(n);
  std::vector<std::uint8_t> excluded(static_cast<std::size_t>(n), 0);

#pragma omp parallel for schedule(dynamic, 64)
  for (Eigen::Index v = 0; v < n; ++v) {
    const auto global = static_cast<std::uint64_t>(options.voxel_offset + v);
    try {
      const PermutationResult a =
          permutation_pvalue(half_a.voxel(v), options.n_permutations, derive_seed(options.seed, {global, tag::half_a}));
      const PermutationResult b =
          permutation_pvalue(half_b.voxel(v), options.n_permutations, derive_seed(options.seed, {global, tag::half_b}));
      result.c_a(v) = a.c_observed;
      result.c_b(v) = b.c_observed;
      result.p_a(v) = a.p_value;
      result.p_b(v) = b.p_value;
      result.mask[static_cast<std::size_t>(v)] = a.p_value < options.alpha && b.p_value < options.alpha;
    } catch (const UndefinedCorrelation&) {
      excluded[static_cast<std::size_t>(v)] = 1;
    }
  }
  for (Eigen::Index v = 0; v < n; ++v) {
    if (excluded[static_cast<std::size_t>(v)]) result.excluded.push_back(v);
  }
  return result;
}

MapVolume probabilistic_map(std::span<const MaskVolume> masks)
{
  if (masks.empty()) throw std::invalid_argument("probabilistic_map: no masks");
  MapVolume map(masks.front().dims, 0.0);
  for (const auto& m : masks) {
    if (!(m.dims == map.dims) || m.data.size() != map.data.size())
      throw std::invalid_argument("probabilistic_map: masks are on different grids");
    map.data += (m.data.array() != 0).cast<double>().matrix();
  }
  map.data /= static_cast<double>(masks.size());
  return map;
}

}  // namespace align
