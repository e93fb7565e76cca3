#include "align/encoding.hpp"
#include "align/synth.hpp"

#include "doctest.h"
#include "fixtures.hpp"
#include "reference.hpp"

#include <map>

using align::CvOptions;
using align::Paradigm;

namespace {

double mean_r(const std::vector<align::PredictivityResult>& res)
{
  double s = 0;
  for (const auto& r : res) s += r.r;
  return s / static_cast<double>(res.size());
}

}  // namespace

TEST_CASE("folds partition the rows")
{
  const auto folds = align::make_folds(103, 5, 9);
  REQUIRE(folds.size() == 5);
  std::vector<int> hits(103, 0);
  for (const auto& f : folds) {
    CHECK((f.size() == 20 || f.size() == 21));
    for (auto i : f) ++hits[static_cast<std::size_t>(i)];
  }
  for (int h : hits) CHECK(h == 1);
  CHECK(align::make_folds(103, 5, 9) == folds);
  CHECK(align::make_folds(103, 5, 10) != folds);
  CHECK_THROWS(align::make_folds(9, 5, 1));
  CHECK_THROWS(align::make_folds(10, 1, 1));
}

TEST_CASE("cross-validated predictivity")
{
  SUBCASE("noiseless linear targets")
  {
    const Eigen::MatrixXd x = ref::gaussian(100, 10, 1);
    const Eigen::VectorXd y = x * ref::gaussian_vector(10, 2);
    const auto res = align::cv_predictivity(x, y);
    REQUIRE(res.size() == 1);
    CHECK(res[0].r > 0.999);
    CHECK(res[0].fold_r.size() == 5);
  }
  SUBCASE("independent targets")
  {
    const Eigen::MatrixXd x = ref::gaussian(200, 10, 3);
    const Eigen::MatrixXd y = ref::gaussian(200, 100, 4);
    const auto res = align::cv_predictivity(x, y);
    const double m = mean_r(res);
    CHECK(m >= -0.15);
    CHECK(m <= 0.15);
  }
  SUBCASE("fold results are consistent")
  {
    const auto data = align::planted_linear_targets(200, 8, 3, 0.6, 5);
    const auto grid = align::default_alpha_grid();
    for (const auto& r : align::cv_predictivity(data.x, data.y)) {
      double s = 0;
      for (double f : r.fold_r) s += f;
      CHECK(r.r == doctest::Approx(s / 5.0));
      for (double a : r.fold_alpha) CHECK(std::find(grid.begin(), grid.end(), a) != grid.end());
      for (bool d : r.fold_degenerate) CHECK_FALSE(d);
    }
  }
  SUBCASE("determinism and column independence")
  {
    const auto data = align::planted_linear_targets(150, 6, 4, 0.5, 6);
    const auto all = align::cv_predictivity(data.x, data.y);
    const auto again = align::cv_predictivity(data.x, data.y);
    const auto single = align::cv_predictivity(data.x, data.y.col(2));
    CHECK(all[2].fold_r == again[2].fold_r);
    for (std::size_t f = 0; f < 5; ++f) CHECK(std::abs(all[2].fold_r[f] - single[0].fold_r[f]) < 1e-12);
  }
  SUBCASE("constant held-out targets are flagged and scored zero")
  {
    const Eigen::MatrixXd x = ref::gaussian(50, 3, 7);
    const auto res = align::cv_predictivity(x, Eigen::VectorXd::Constant(50, 2.0));
    for (bool d : res[0].fold_degenerate) CHECK(d);
    CHECK(res[0].r == 0.0);
    CHECK(res[0].fold_r.size() == 5);
  }
}

TEST_CASE("planted correlation of one half is recovered and matches an independent refit")
{
  const auto data = align::planted_linear_targets(1080, 8, 100, 0.5, 11);
  CvOptions opts;
  opts.seed = 12;
  const auto res = align::cv_predictivity(data.x, data.y, opts);
  CHECK(std::abs(mean_r(res) - 0.5) <= 0.05);

  const auto folds = align::make_folds(data.x.rows(), opts.folds, opts.seed);
  for (Eigen::Index t = 0; t < 10; ++t) {
    double total = 0;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      std::vector<char> test(static_cast<std::size_t>(data.x.rows()), 0);
      for (auto i : folds[f]) test[static_cast<std::size_t>(i)] = 1;
      std::vector<Eigen::Index> train;
      for (Eigen::Index i = 0; i < data.x.rows(); ++i)
        if (!test[static_cast<std::size_t>(i)]) train.push_back(i);
      const Eigen::MatrixXd xt = align::take_rows(data.x, train);
      const Eigen::VectorXd yt = align::take_rows(data.y.col(t), train);
      const Eigen::RowVectorXd xm = xt.colwise().mean();
      const double ym = yt.mean();
      const Eigen::VectorXd w = ref::ridge(xt.rowwise() - xm, yt.array() - ym, res[static_cast<std::size_t>(t)].fold_alpha[f]);
      const Eigen::MatrixXd xh = align::take_rows(data.x, folds[f]);
      const Eigen::VectorXd pred = ((xh.rowwise() - xm) * w).array() + ym;
      total += ref::pearson(pred, align::take_rows(data.y.col(t), folds[f]));
    }
    CHECK(res[static_cast<std::size_t>(t)].r == doctest::Approx(total / 5.0).epsilon(1e-9));
  }
}

TEST_CASE("word-cloud collapse")
{
  const auto design = fixture::full_design(180, 6);
  const auto n = static_cast<Eigen::Index>(design.size());
  REQUIRE(n == 3240);
  Eigen::MatrixXd values = ref::gaussian(n, 2, 13);
  for (Eigen::Index i = 0; i < n; ++i)
    if (design[static_cast<std::size_t>(i)].paradigm == Paradigm::WordCloud) values(i, 1) = design[static_cast<std::size_t>(i)].concept_id;
  const auto collapsed = align::word_cloud_collapse(values, design);
  CHECK(collapsed.values.rows() == 2340);
  CHECK(collapsed.stimuli.size() == 2340);
  CHECK(align::paradigm_rows(collapsed.stimuli, Paradigm::WordCloud).size() == 180);
  CHECK(align::paradigm_rows(collapsed.stimuli, Paradigm::Sentence).size() == 1080);

  std::map<int, double> wc_mean;
  for (Eigen::Index i = 0; i < n; ++i)
    if (design[static_cast<std::size_t>(i)].paradigm == Paradigm::WordCloud)
      wc_mean[design[static_cast<std::size_t>(i)].concept_id] += values(i, 0) / 6.0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < collapsed.stimuli.size(); ++i) {
    const auto& s = collapsed.stimuli[i];
    const auto row = static_cast<Eigen::Index>(i);
    if (s.paradigm == Paradigm::WordCloud) {
      CHECK(s.repetition == -1);
      CHECK(collapsed.values(row, 0) == doctest::Approx(wc_mean[s.concept_id]));
      CHECK(collapsed.values(row, 1) == s.concept_id);
    } else {
      while (design[kept].paradigm == Paradigm::WordCloud) ++kept;
      CHECK(s.id == design[kept].id);
      CHECK(collapsed.values.row(row) == values.row(static_cast<Eigen::Index>(kept)));
      ++kept;
    }
  }

  const auto wc_only = align::take_rows(values, align::paradigm_rows(design, Paradigm::WordCloud));
  std::vector<align::Stimulus> wc_rows;
  for (const auto& s : design)
    if (s.paradigm == Paradigm::WordCloud) wc_rows.push_back(s);
  CHECK(align::word_cloud_collapse(wc_only, wc_rows).values.rows() == 180);
}

TEST_CASE("layer and pooling sweep")
{
  const auto data = align::planted_linear_targets(300, 6, 1, 0.7, 21);
  std::vector<align::FeatureCandidate> candidates;
  candidates.push_back({"m", 0, align::Pooling::Mean, ref::gaussian(300, 6, 22)});
  candidates.push_back({"m", 1, align::Pooling::Mean, ref::gaussian(300, 6, 23)});
  candidates.push_back({"m", 2, align::Pooling::Mean, data.x});
  candidates.push_back({"m", 2, align::Pooling::Last, ref::gaussian(300, 6, 24)});

  SUBCASE("the planted layer wins")
  {
    const auto sweep = align::select_best_feature_config(candidates, data.y.col(0));
    REQUIRE(sweep.entries.size() == 4);
    CHECK(sweep.entries[sweep.best].layer == 2);
    CHECK(sweep.entries[sweep.best].pooling == align::Pooling::Mean);
    CHECK(sweep.entries[2].r > 0.6);
  }
  SUBCASE("a single configuration is returned as is")
  {
    const auto sweep = align::select_best_feature_config(std::span(candidates).first(1), data.y.col(0));
    CHECK(sweep.best == 0);
  }
  SUBCASE("identical sets tie to the lower layer, then the earlier pooling")
  {
    std::vector<align::FeatureCandidate> twins{{"m", 3, align::Pooling::Mean, data.x},
                                               {"m", 1, align::Pooling::Last, data.x},
                                               {"m", 1, align::Pooling::Mean, data.x}};
    const auto sweep = align::select_best_feature_config(twins, data.y.col(0));
    CHECK(sweep.best == 2);
    CHECK(sweep.entries[0].r == sweep.entries[2].r);
    Eigen::Vector3d r(0.5, 0.5, 0.4);
    CHECK(align::best_candidate(twins, r) == 1);
  }
  SUBCASE("the sweep table covers every target")
  {
    Eigen::MatrixXd targets(300, 2);
    targets.col(0) = data.y.col(0);
    targets.col(1) = ref::gaussian_vector(300, 25);
    const Eigen::MatrixXd table = align::sweep_predictivity(candidates, targets);
    CHECK(table.rows() == 4);
    CHECK(table.cols() == 2);
    CHECK(table(2, 0) == align::select_best_feature_config(candidates, data.y.col(0)).entries[2].r);
  }
}

TEST_CASE("language selectivity")
{
  const Eigen::VectorXd s = ref::gaussian_vector(20, 1);
  const Eigen::VectorXd nw = ref::gaussian_vector(20, 2);
  CHECK(align::language_selectivity(s, s).isZero(0.0));
  const Eigen::VectorXd d = align::language_selectivity(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Constant(1, 0.41));
  CHECK(d(0) == doctest::Approx(0.59));
  CHECK((align::language_selectivity(2.5 * s, 2.5 * nw) - 2.5 * align::language_selectivity(s, nw)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS(align::language_selectivity(s, nw.head(3)));
}

TEST_CASE("quartile bins")
{
  CHECK(align::quartile_bins(Eigen::Vector4d(10, 20, 30, 40)) == std::vector<int>{1, 2, 3, 4});
  CHECK(align::quartile_bins(Eigen::Vector4d(40, 10, 30, 20)) == std::vector<int>{4, 1, 3, 2});
  CHECK(align::quartile_bins(Eigen::VectorXd::Constant(8, 3.0)) == std::vector<int>{1, 1, 2, 2, 3, 3, 4, 4});
  CHECK_THROWS(align::quartile_bins(Eigen::Vector3d(1, 2, 3)));

  const auto bins = align::quartile_bins(ref::gaussian_vector(975, 3));
  std::array<int, 4> sizes{};
  for (int b : bins) ++sizes[static_cast<std::size_t>(b - 1)];
  CHECK(sizes == std::array<int, 4>{244, 244, 244, 243});

  for (int n = 4; n < 60; ++n) {
    const Eigen::VectorXd v = ref::gaussian_vector(n, 100 + static_cast<std::uint64_t>(n));
    const auto b = align::quartile_bins(v);
    std::array<int, 4> c{};
    for (int x : b) ++c[static_cast<std::size_t>(x - 1)];
    for (int k : c) CHECK(std::abs(4 * k - n) < 4);
    // Strictly increasing transforms keep the assignment.
    CHECK(align::quartile_bins(v.array().exp().matrix()) == b);
    CHECK(align::quartile_bins((3.0 * v.array() - 7.0).matrix()) == b);
    CHECK(align::quartile_bins(v.array().cube().matrix()) == b);
  }
}

TEST_CASE("binned predictivity")
{
  const auto data = align::planted_linear_targets(200, 5, 1, 0.8, 31);
  CvOptions opts;
  opts.seed = 3;

  SUBCASE("identical voxels give identical cells")
  {
    const Eigen::MatrixXd responses = data.y.col(0).replicate(1, 64);
    std::vector<int> bc(64), bl(64);
    for (int v = 0; v < 64; ++v) {
      bc[static_cast<std::size_t>(v)] = v % 4 + 1;
      bl[static_cast<std::size_t>(v)] = (v / 4) % 4 + 1;
    }
    const auto table = align::binned_predictivity(data.x, responses, bc, bl, opts);
    const double r0 = table.cells[0][0]->r;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        REQUIRE(table.cells[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].has_value());
        CHECK(std::abs(table.cells[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]->r - r0) < 1e-12);
        CHECK(table.voxel_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] == 4);
      }
  }
  SUBCASE("single-voxel cells reproduce the voxel's own predictivity")
  {
    const auto planted = align::planted_linear_targets(200, 5, 16, 0.5, 32);
    std::vector<int> bc(16), bl(16);
    for (int v = 0; v < 16; ++v) {
      bc[static_cast<std::size_t>(v)] = v / 4 + 1;
      bl[static_cast<std::size_t>(v)] = v % 4 + 1;
    }
    const auto table = align::binned_predictivity(planted.x, planted.y, bc, bl, opts);
    const auto direct = align::cv_predictivity(planted.x, planted.y, opts);
    for (int v = 0; v < 16; ++v)
      CHECK(table.cells[static_cast<std::size_t>(v / 4)][static_cast<std::size_t>(v % 4)]->r ==
            doctest::Approx(direct[static_cast<std::size_t>(v)].r).epsilon(1e-12));
  }
  SUBCASE("empty cells are missing")
  {
    const Eigen::MatrixXd responses = data.y.col(0).replicate(1, 2);
    const std::vector<int> bc{1, 2}, bl{1, 1};
    const auto table = align::binned_predictivity(data.x, responses, bc, bl, opts);
    CHECK(table.cells[0][0].has_value());
    CHECK_FALSE(table.cells[3][3].has_value());
    CHECK(table.voxel_counts[3][3] == 0);
  }
  SUBCASE("cell signals are voxel means")
  {
    const Eigen::MatrixXd responses = ref::gaussian(200, 3, 33) + data.y.col(0).replicate(1, 3);
    const std::vector<int> bc{2, 2, 2}, bl{3, 3, 3};
    const auto table = align::binned_predictivity(data.x, responses, bc, bl, opts);
    const auto direct = align::cv_predictivity(data.x, responses.rowwise().mean(), opts);
    CHECK(table.cells[1][2]->r == doctest::Approx(direct[0].r).epsilon(1e-12));
  }
}

TEST_CASE("area predictivity correlation")
{
  const Eigen::VectorXd c = ref::gaussian_vector(50, 1);
  CHECK(align::area_predictivity_correlation(c, c) == doctest::Approx(1.0));
  CHECK(align::area_predictivity_correlation((2.0 * c).array() + 1.0, c) == doctest::Approx(1.0));
  CHECK(align::area_predictivity_correlation(-c, c) == doctest::Approx(-1.0));
  CHECK_THROWS(align::area_predictivity_correlation(Eigen::VectorXd::Ones(50), c));
  CHECK_THROWS(align::area_predictivity_correlation(c.head(2), c.head(2)));

  // Planted monotone link plus noise over 360 areas.
  align::Rng rng(5);
  Eigen::VectorXd consistency(360), r(360);
  for (int a = 0; a < 360; ++a) {
    consistency(a) = rng.uniform();
    r(a) = 0.6 * std::sqrt(consistency(a)) + 0.1 * rng.normal();
  }
  CHECK(align::area_predictivity_correlation(r, consistency) > 0.6);
}

TEST_CASE("participant feature rows follow the manifest")
{
  const auto dir = fixture::tiny_dataset("encoding-features");
  const auto m = align::load_manifest(dir / "manifest.json");
  const auto index = align::load_feature_index(dir / "features");
  const auto f = align::load_feature_set(index, 0);
  const auto p = align::load_participant(m, 0);
  const auto x = align::participant_features(f, p);
  REQUIRE(x.rows() == p.beta.rows());
  for (Eigen::Index i = 0; i < x.rows(); i += 97) CHECK(x.row(i) == f.x.row(p.stimulus_positions[static_cast<std::size_t>(i)]));
}
