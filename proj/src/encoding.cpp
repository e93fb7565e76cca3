#include "align/encoding.hpp"

#include "align/rng.hpp"
#include "align/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace align {
namespace {

constexpr double kTieTolerance = 1e-12;

struct CenteredDesign {
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
  Eigen::RowVectorXd x_mean;
  Eigen::RowVectorXd y_mean;
  double leverage_offset = 0.0;
};

CenteredDesign center(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& y,
                      bool fit_intercept)
{
  CenteredDesign d{x, y, Eigen::RowVectorXd::Zero(x.cols()), Eigen::RowVectorXd::Zero(y.cols()), 0.0};
  if (fit_intercept) {
    d.x_mean = x.colwise().mean();
    d.y_mean = y.colwise().mean();
    d.x.rowwise() -= d.x_mean;
    d.y.rowwise() -= d.y_mean;
    d.leverage_offset = 1.0 / static_cast<double>(x.rows());
  }
  return d;
}

// LOO scores for every (alpha, target) from one decomposition.
Eigen::MatrixXd loo_scores(const RidgeSvd<double>& solver, const Eigen::MatrixXd& yc, const Eigen::MatrixXd& uty,
                           double leverage_offset, const std::vector<double>& grid)
{
  Eigen::MatrixXd scores(static_cast<Eigen::Index>(grid.size()), yc.cols());
  const double unit = std::sqrt(std::numeric_limits<double>::epsilon());
  for (std::size_t a = 0; a < grid.size(); ++a) {
    const double alpha = grid[a];
    const Eigen::VectorXd one_minus_h = (1.0 - (solver.hat_diagonal(alpha).array() + leverage_offset)).matrix();
    if ((one_minus_h.array() <= unit).any()) {
      scores.row(static_cast<Eigen::Index>(a)).setConstant(std::numeric_limits<double>::infinity());
      continue;
    }
    const Eigen::MatrixXd resid = yc - solver.fitted_from_projection(uty, alpha);
    scores.row(static_cast<Eigen::Index>(a)) =
        (resid.array().colwise() / one_minus_h.array()).square().colwise().sum();
  }
  return scores;
}

AlphaSelection pick_alpha(const Eigen::Ref<const Eigen::VectorXd>& scores, const std::vector<double>& grid)
{
  AlphaSelection sel;
  sel.scores.assign(scores.data(), scores.data() + scores.size());
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (std::isfinite(scores(i))) best = std::min(best, scores(i));
  }
  if (!std::isfinite(best)) throw std::runtime_error("loocv_select_alpha: every alpha has a unit leverage");
  const double cutoff = best + kTieTolerance * std::abs(best);
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (scores(i) <= cutoff) {
      sel.grid_index = static_cast<std::size_t>(i);
      sel.alpha = grid[static_cast<std::size_t>(i)];
      break;
    }
  }
  return sel;
}

}  // namespace

std::vector<AlphaSelection> loocv_select_alpha(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                               const Eigen::Ref<const Eigen::MatrixXd>& y, const std::vector<double>& grid,
                                               bool fit_intercept)
{
  if (x.rows() != y.rows()) throw std::invalid_argument("loocv_select_alpha: row count mismatch");
  if (x.rows() < 3) throw std::invalid_argument("loocv_select_alpha: need at least 3 training rows");
  if (grid.empty()) throw std::invalid_argument("loocv_select_alpha: empty alpha grid");
  const CenteredDesign d = center(x, y, fit_intercept);
  const RidgeSvd<double> solver(d.x);
  const Eigen::MatrixXd scores = loo_scores(solver, d.y, solver.project(d.y), d.leverage_offset, grid);
  std::vector<AlphaSelection> out;
  for (Eigen::Index t = 0; t < y.cols(); ++t) out.push_back(pick_alpha(scores.col(t), grid));
  return out;
}

std::vector<std::vector<Eigen::Index>> make_folds(Eigen::Index n, int folds, std::uint64_t seed)
{
  if (folds < 2) throw std::invalid_argument("make_folds: need at least two folds");
  if (n < 2 * folds) throw std::invalid_argument("make_folds: need at least two rows per fold");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, {tag::folds}));
  rng.shuffle(std::span<Eigen::Index>(order));
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(folds));
  for (int f = 0; f < folds; ++f) {
    const auto begin = static_cast<std::size_t>(n * f / folds);
    const auto end = static_cast<std::size_t>(n * (f + 1) / folds);
    out[static_cast<std::size_t>(f)].assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                            order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<PredictivityResult> cv_predictivity(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                                const Eigen::Ref<const Eigen::MatrixXd>& y, const CvOptions& options)
{
  if (x.rows() != y.rows()) throw std::invalid_argument("cv_predictivity: row count mismatch");
  const Eigen::Index n = x.rows();
  const auto folds = make_folds(n, options.folds, options.seed);
  std::vector<PredictivityResult> results(static_cast<std::size_t>(y.cols()));

  for (const auto& held_out : folds) {
    std::vector<char> is_test(static_cast<std::size_t>(n), 0);
    for (auto i : held_out) is_test[static_cast<std::size_t>(i)] = 1;
    std::vector<Eigen::Index> train;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!is_test[static_cast<std::size_t>(i)]) train.push_back(i);
    }

    const CenteredDesign d = center(take_rows(x, train), take_rows(y, train), options.fit_intercept);
    const RidgeSvd<double> solver(d.x);
    const Eigen::MatrixXd uty = solver.project(d.y);
    const Eigen::MatrixXd scores = loo_scores(solver, d.y, uty, d.leverage_offset, options.grid);

    Eigen::MatrixXd x_test = take_rows(x, held_out);
    x_test.rowwise() -= d.x_mean;
    const Eigen::MatrixXd y_test = take_rows(y, held_out);

    for (Eigen::Index t = 0; t < y.cols(); ++t) {
      const AlphaSelection sel = pick_alpha(scores.col(t), options.grid);
      const Eigen::VectorXd w = solver.weights_from_projection(uty.col(t), sel.alpha);
      const Eigen::VectorXd pred = (x_test * w).array() + d.y_mean(t);
      auto& res = results[static_cast<std::size_t>(t)];
      double r = 0.0;
      bool degenerate = false;
      try {
        r = pearson(pred, y_test.col(t));
      } catch (const UndefinedCorrelation&) {
        degenerate = true;
      }
      res.fold_r.push_back(r);
      res.fold_alpha.push_back(sel.alpha);
      res.fold_degenerate.push_back(degenerate);
    }
  }
  for (auto& res : results) {
    res.r = std::accumulate(res.fold_r.begin(), res.fold_r.end(), 0.0) / static_cast<double>(res.fold_r.size());
  }
  return results;
}

std::vector<Eigen::Index> paradigm_rows(std::span<const Stimulus> rows, Paradigm p)
{
  std::vector<Eigen::Index> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].paradigm == p) out.push_back(static_cast<Eigen::Index>(i));
  }
  return out;
}

Eigen::MatrixXd take_rows(const Eigen::Ref<const Eigen::MatrixXd>& m, std::span<const Eigen::Index> rows)
{
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

Eigen::MatrixXd participant_features(const FeatureSet& f, const ParticipantData& p)
{
  std::vector<Eigen::Index> rows(p.stimulus_positions.begin(), p.stimulus_positions.end());
  for (auto r : rows) {
    if (r < 0 || r >= f.x.rows()) throw std::out_of_range("participant_features: stimulus beyond feature rows");
  }
  return take_rows(f.x, rows);
}

CollapsedRows word_cloud_collapse(const Eigen::Ref<const Eigen::MatrixXd>& values, std::span<const Stimulus> rows)
{
  if (static_cast<std::size_t>(values.rows()) != rows.size())
    throw std::invalid_argument("word_cloud_collapse: row count mismatch");
  std::map<int, std::size_t> slot_of_concept;
  std::vector<std::vector<Eigen::Index>> sources;
  CollapsedRows out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Stimulus& s = rows[i];
    if (s.paradigm != Paradigm::WordCloud) {
      sources.push_back({static_cast<Eigen::Index>(i)});
      out.stimuli.push_back(s);
      continue;
    }
    auto [it, inserted] = slot_of_concept.try_emplace(s.concept_id, sources.size());
    if (inserted) {
      sources.emplace_back();
      Stimulus merged = s;
      merged.repetition = -1;
      out.stimuli.push_back(merged);
    }
    sources[it->second].push_back(static_cast<Eigen::Index>(i));
  }
  out.values.resize(static_cast<Eigen::Index>(sources.size()), values.cols());
  for (std::size_t k = 0; k < sources.size(); ++k) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(values.cols());
    for (auto r : sources[k]) acc += values.row(r);
    out.values.row(static_cast<Eigen::Index>(k)) = acc / static_cast<double>(sources[k].size());
  }
  return out;
}

Eigen::MatrixXd sweep_predictivity(std::span<const FeatureCandidate> candidates, const Eigen::Ref<const Eigen::MatrixXd>& y,
                                   const CvOptions& options)
{
  Eigen::MatrixXd r(static_cast<Eigen::Index>(candidates.size()), y.cols());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto results = cv_predictivity(candidates[c].x, y, options);
    for (Eigen::Index t = 0; t < y.cols(); ++t) r(static_cast<Eigen::Index>(c), t) = results[static_cast<std::size_t>(t)].r;
  }
  return r;
}

std::size_t best_candidate(std::span<const FeatureCandidate> candidates, const Eigen::Ref<const Eigen::VectorXd>& r)
{
  if (candidates.empty()) throw std::invalid_argument("best_candidate: no candidates");
  if (r.size() != static_cast<Eigen::Index>(candidates.size()))
    throw std::invalid_argument("best_candidate: score count mismatch");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (candidates[a].layer != candidates[b].layer) return candidates[a].layer < candidates[b].layer;
    return candidates[a].pooling < candidates[b].pooling;
  });
  std::size_t best = order.front();
  double best_r = -std::numeric_limits<double>::infinity();
  for (std::size_t i : order) {
    const double v = std::isnan(r(static_cast<Eigen::Index>(i))) ? -std::numeric_limits<double>::infinity()
                                                                  : r(static_cast<Eigen::Index>(i));
    if (v > best_r) {
      best_r = v;
      best = i;
    }
  }
  return best;
}

FeatureSweep select_best_feature_config(std::span<const FeatureCandidate> candidates,
                                        const Eigen::Ref<const Eigen::VectorXd>& target, const CvOptions& options)
{
  const Eigen::MatrixXd r = sweep_predictivity(candidates, target, options);
  FeatureSweep sweep;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    sweep.entries.push_back({candidates[c].model, candidates[c].layer, candidates[c].pooling, r(static_cast<Eigen::Index>(c), 0)});
  }
  sweep.best = best_candidate(candidates, r.col(0));
  return sweep;
}

Eigen::VectorXd language_selectivity(const Eigen::Ref<const Eigen::VectorXd>& sentences,
                                     const Eigen::Ref<const Eigen::VectorXd>& nonwords)
{
  if (sentences.size() != nonwords.size()) throw std::invalid_argument("language_selectivity: grid mismatch");
  return sentences - nonwords;
}

std::vector<int> quartile_bins(const Eigen::Ref<const Eigen::VectorXd>& values)
{
  const Eigen::Index n = values.size();
  if (n < 4) throw std::invalid_argument("quartile_bins: need at least 4 values");
  if (!values.allFinite()) throw std::invalid_argument("quartile_bins: non-finite value");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return values(a) < values(b); });
  std::vector<int> bins(static_cast<std::size_t>(n));
  for (Eigen::Index rank = 0; rank < n; ++rank) bins[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] = static_cast<int>(4 * rank / n) + 1;
  return bins;
}

BinTable binned_predictivity(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& responses,
                             std::span<const int> consistency_bins, std::span<const int> selectivity_bins,
                             const CvOptions& options)
{
  const auto n_vox = static_cast<std::size_t>(responses.cols());
  if (consistency_bins.size() != n_vox || selectivity_bins.size() != n_vox)
    throw std::invalid_argument("binned_predictivity: bin labels do not match voxel count");
  if (x.rows() != responses.rows()) throw std::invalid_argument("binned_predictivity: row count mismatch");

  BinTable table;
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(responses.rows(), 16);
  for (std::size_t v = 0; v < n_vox; ++v) {
    const int bc = consistency_bins[v], bl = selectivity_bins[v];
    if (bc < 1 || bc > 4 || bl < 1 || bl > 4) throw std::invalid_argument("binned_predictivity: bin label outside 1..4");
    sums.col((bc - 1) * 4 + (bl - 1)) += responses.col(static_cast<Eigen::Index>(v));
    ++table.voxel_counts[static_cast<std::size_t>(bc - 1)][static_cast<std::size_t>(bl - 1)];
  }

  std::vector<int> occupied;
  for (int cell = 0; cell < 16; ++cell) {
    const int count = table.voxel_counts[static_cast<std::size_t>(cell / 4)][static_cast<std::size_t>(cell % 4)];
    if (count > 0) occupied.push_back(cell);
  }
  if (occupied.empty()) return table;
  Eigen::MatrixXd cell_means(responses.rows(), static_cast<Eigen::Index>(occupied.size()));
  for (std::size_t k = 0; k < occupied.size(); ++k) {
    const int cell = occupied[k];
    cell_means.col(static_cast<Eigen::Index>(k)) =
        sums.col(cell) / table.voxel_counts[static_cast<std::size_t>(cell / 4)][static_cast<std::size_t>(cell % 4)];
  }
  const auto results = cv_predictivity(x, cell_means, options);
  for (std::size_t k = 0; k < occupied.size(); ++k) {
    const int cell = occupied[k];
    table.cells[static_cast<std::size_t>(cell / 4)][static_cast<std::size_t>(cell % 4)] = results[k];
  }
  return table;
}

double area_predictivity_correlation(const Eigen::Ref<const Eigen::VectorXd>& predictivity,
                                     const Eigen::Ref<const Eigen::VectorXd>& consistency)
{
  if (predictivity.size() != consistency.size()) throw std::invalid_argument("area_predictivity_correlation: length mismatch");
  if (predictivity.size() < 3) throw std::invalid_argument("area_predictivity_correlation: need at least 3 areas");
  return pearson(predictivity, consistency);
}

}  // namespace align
