#ifndef ALIGN_ENCODING_HPP
#define ALIGN_ENCODING_HPP

#include "align/manifest.hpp"
#include "align/ridge.hpp"
#include "align/types.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace align {

// ---------------------------------------------------------------------------
// Hyperparameter search

struct AlphaSelection {
  double alpha = 0.0;
  std::size_t grid_index = 0;
  std::vector<double> scores;  ///< sum of squared LOO residuals per grid alpha
};

/// Picks, per target column, the grid alpha minimizing the closed-form LOO
/// error. Scores within a relative 1e-12 of the minimum count as ties and
/// resolve to the smallest alpha. Alphas with a unit leverage score +inf.
std::vector<AlphaSelection> loocv_select_alpha(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                               const Eigen::Ref<const Eigen::MatrixXd>& y,
                                               const std::vector<double>& grid = default_alpha_grid(),
                                               bool fit_intercept = false);


// ---------------------------------------------------------------------------
// Cross-validated predictivity

struct CvOptions {
  int folds = 5;
  std::uint64_t seed = 42;
  std::vector<double> grid = default_alpha_grid();
  /// Fit an unpenalized intercept (training means are removed per fold).
  bool fit_intercept = true;
};

struct PredictivityResult {
  double r = 0.0;                   ///< mean over folds
  std::vector<double> fold_r;
  std::vector<double> fold_alpha;
  std::vector<bool> fold_degenerate;  ///< held-out y or prediction had no variance; r recorded as 0
};

/// Fold assignment: seeded shuffle of the rows, then a contiguous split into
/// near-equal parts. Returns the held-out rows of each fold.
std::vector<std::vector<Eigen::Index>> make_folds(Eigen::Index n, int folds, std::uint64_t seed);

/// K-fold predictivity for every column of y. All targets share the folds and
/// the per-fold decomposition; alpha is selected per target and fold.
std::vector<PredictivityResult> cv_predictivity(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                                const Eigen::Ref<const Eigen::MatrixXd>& y,
                                                const CvOptions& options = {});

// ---------------------------------------------------------------------------
// Data selection

/// Rows of `rows` whose stimulus has the given paradigm.
std::vector<Eigen::Index> paradigm_rows(std::span<const Stimulus> rows, Paradigm p);

Eigen::MatrixXd take_rows(const Eigen::Ref<const Eigen::MatrixXd>& m, std::span<const Eigen::Index> rows);

/// Feature rows (manifest order) for a participant's activation rows.
Eigen::MatrixXd participant_features(const FeatureSet& f, const ParticipantData& p);

struct CollapsedRows {
  Eigen::MatrixXd values;
  std::vector<Stimulus> stimuli;  ///< collapsed word-cloud rows carry repetition -1
};

/// Averages the word-cloud rows of each concept into one row, placed at the
/// concept's first word-cloud position; other rows are kept in order. Apply
/// to activations and to features with the same stimulus list to keep them aligned.
CollapsedRows word_cloud_collapse(const Eigen::Ref<const Eigen::MatrixXd>& values, std::span<const Stimulus> rows);

// ---------------------------------------------------------------------------
// Layer and pooling sweep

struct SweepEntry {
  std::string model;
  int layer = 0;
  Pooling pooling = Pooling::Mean;
  double r = 0.0;
};

struct FeatureSweep {
  std::size_t best = 0;  ///< index into entries
  std::vector<SweepEntry> entries;
};

/// Candidate features already aligned to the target rows.
struct FeatureCandidate {
  std::string model;
  int layer = 0;
  Pooling pooling = Pooling::Mean;
  Eigen::MatrixXd x;
};

/// Mean predictivity of every candidate for every target column (candidates x targets).
Eigen::MatrixXd sweep_predictivity(std::span<const FeatureCandidate> candidates,
                                   const Eigen::Ref<const Eigen::MatrixXd>& y, const CvOptions& options = {});

/// Index of the best candidate for one column of sweep results; ties go to
/// the lower layer, then to the earlier pooling.
std::size_t best_candidate(std::span<const FeatureCandidate> candidates, const Eigen::Ref<const Eigen::VectorXd>& r);

FeatureSweep select_best_feature_config(std::span<const FeatureCandidate> candidates,
                                        const Eigen::Ref<const Eigen::VectorXd>& target, const CvOptions& options = {});

// ---------------------------------------------------------------------------
// Neural metrics and binning

/// Sentence minus non-word localizer response per voxel.
Eigen::VectorXd language_selectivity(const Eigen::Ref<const Eigen::VectorXd>& sentences,
                                     const Eigen::Ref<const Eigen::VectorXd>& nonwords);

/// Rank-based quartile bins in 1..4: stable sort by value (ties by position),
/// bin = floor(4 * rank / n) + 1.
std::vector<int> quartile_bins(const Eigen::Ref<const Eigen::VectorXd>& values);

/// 4 x 4 table indexed [consistency bin - 1][selectivity bin - 1].
struct BinTable {
  std::array<std::array<std::optional<PredictivityResult>, 4>, 4> cells;
  std::array<std::array<int, 4>, 4> voxel_counts{};
};

/// Predictivity of the mean signal of each (consistency, selectivity) bin cell.
/// `responses` holds one column per voxel, rows aligned with `x`.
BinTable binned_predictivity(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& responses,
                             std::span<const int> consistency_bins, std::span<const int> selectivity_bins,
                             const CvOptions& options = {});

/// Pearson correlation across areas between predictivity and a consistency measure.
double area_predictivity_correlation(const Eigen::Ref<const Eigen::VectorXd>& predictivity,
                                     const Eigen::Ref<const Eigen::VectorXd>& consistency);

}  // namespace align

#endif  // ALIGN_ENCODING_HPP
