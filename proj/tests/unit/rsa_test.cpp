#include "align/roi.hpp"
#include "align/rsa.hpp"
#include "align/stats.hpp"
#include "align/synth.hpp"

#include "doctest.h"
#include "fixtures.hpp"
#include "reference.hpp"

#include <numeric>

using align::Paradigm;
using align::RsaCondition;

namespace {

Eigen::MatrixXd permute_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& perm)
{
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(perm[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<Eigen::Index> random_permutation(Eigen::Index n, std::uint64_t seed)
{
  std::vector<Eigen::Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Eigen::Index{0});
  align::Rng rng(seed);
  rng.shuffle(std::span<Eigen::Index>(p));
  return p;
}

}  // namespace

TEST_CASE("concept vectors")
{
  SUBCASE("one stimulus per concept")
  {
    std::vector<align::Stimulus> rows;
    for (int c = 0; c < 5; ++c) rows.push_back({c, c, Paradigm::Sentence, 0});
    const Eigen::MatrixXd v = ref::gaussian(5, 4, 1);
    CHECK(align::concept_vectors(v, rows, 5, RsaCondition::TextOnly) == v);
    CHECK(align::concept_vectors(v, rows, 5, RsaCondition::TextImage) == v);
  }
  SUBCASE("word clouds count once and pictures only with images")
  {
    const auto design = fixture::full_design(2, 4);
    Eigen::MatrixXd v(static_cast<Eigen::Index>(design.size()), 1);
    for (std::size_t i = 0; i < design.size(); ++i) {
      const auto& s = design[i];
      v(static_cast<Eigen::Index>(i), 0) = s.paradigm == Paradigm::Sentence ? 1.0 : s.paradigm == Paradigm::Picture ? 10.0 : 100.0 + s.repetition;
    }
    const auto to = align::concept_vectors(v, design, 2, RsaCondition::TextOnly);
    const auto ti = align::concept_vectors(v, design, 2, RsaCondition::TextImage);
    const double wc = 100.0 + 1.5;
    CHECK(to(0, 0) == doctest::Approx((4 * 1.0 + wc) / 5.0));
    CHECK(ti(1, 0) == doctest::Approx((4 * 1.0 + 4 * 10.0 + wc) / 9.0));
  }
  SUBCASE("pictures equal to sentences leave the vectors unchanged")
  {
    const auto design = fixture::full_design(6, 5);
    const Eigen::MatrixXd per_concept = ref::gaussian(6, 3, 2);
    Eigen::MatrixXd v(static_cast<Eigen::Index>(design.size()), 3);
    for (std::size_t i = 0; i < design.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = per_concept.row(design[i].concept_id);
    const auto to = align::concept_vectors(v, design, 6, RsaCondition::TextOnly);
    const auto ti = align::concept_vectors(v, design, 6, RsaCondition::TextImage);
    CHECK((to - ti).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((to - per_concept).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("noisy stimuli average toward their centroid")
  {
    const int concepts = 180, dim = 20;
    const double sigma = 0.5;
    const auto design = fixture::full_design(concepts, 6);
    const Eigen::MatrixXd centroid = ref::gaussian(concepts, dim, 3);
    Eigen::MatrixXd v = sigma * ref::gaussian(static_cast<Eigen::Index>(design.size()), dim, 4);
    for (std::size_t i = 0; i < design.size(); ++i) v.row(static_cast<Eigen::Index>(i)) += centroid.row(design[i].concept_id);
    const auto ti = align::concept_vectors(v, design, concepts, RsaCondition::TextImage);
    // 12 single-row terms plus one word-cloud mean of 6, out of 13 terms.
    const double sd = sigma * std::sqrt(12.0 + 1.0 / 6.0) / 13.0;
    int inside = 0;
    for (Eigen::Index c = 0; c < concepts; ++c)
      for (Eigen::Index d = 0; d < dim; ++d) inside += std::abs(ti(c, d) - centroid(c, d)) <= 1.96 * sd;
    const double frac = inside / static_cast<double>(concepts * dim);
    CHECK(frac > 0.93);
    CHECK(frac < 0.97);
  }
  SUBCASE("missing concepts are an error")
  {
    std::vector<align::Stimulus> rows{{0, 0, Paradigm::Picture, 0}, {1, 1, Paradigm::Sentence, 0}};
    CHECK_THROWS(align::concept_vectors(Eigen::MatrixXd::Ones(2, 2), rows, 2, RsaCondition::TextOnly));
    CHECK_NOTHROW(align::concept_vectors(Eigen::MatrixXd::Ones(2, 2), rows, 2, RsaCondition::TextImage));
  }
  CHECK(align::parse_condition(align::condition_name(RsaCondition::TextOnly)) == RsaCondition::TextOnly);
  CHECK(align::condition_name(RsaCondition::TextImage) == "text+image");
  CHECK(align::parse_restriction("significant") == align::VoxelRestriction::Significant);
  CHECK_THROWS(align::parse_condition("image-only"));
}

TEST_CASE("correlation-distance matrices")
{
  Eigen::MatrixXd v = ref::gaussian(4, 10, 5);
  v.row(1) = (2.0 * v.row(0)).array() + 3.0;
  v.row(2) = -v.row(0);
  const auto d = align::rdm(v);
  CHECK(std::abs(d(0, 1)) < 1e-12);
  CHECK(d(0, 2) == doctest::Approx(2.0));
  CHECK(d(1, 2) == doctest::Approx(2.0));

  const auto random = align::rdm(ref::gaussian(60, 100, 6));
  double sum = 0;
  for (Eigen::Index i = 0; i < 60; ++i) {
    CHECK(random(i, i) == 0.0);
    for (Eigen::Index j = 0; j < 60; ++j) {
      CHECK(random(i, j) == random(j, i));
      CHECK(random(i, j) >= 0.0);
      CHECK(random(i, j) <= 2.0);
      if (i != j) {
        CHECK(random(i, j) == doctest::Approx(1.0 - ref::pearson(ref::gaussian(60, 100, 6).row(i).transpose(),
                                                                  ref::gaussian(60, 100, 6).row(j).transpose())));
        sum += random(i, j);
      }
    }
  }
  const double mean = sum / (60.0 * 59.0);
  CHECK(mean > 0.9);
  CHECK(mean < 1.1);

  CHECK_THROWS(align::rdm(Eigen::MatrixXd::Ones(3, 4)));
}

TEST_CASE("lower triangle order")
{
  Eigen::Matrix3d m;
  m << 0, 1, 2, 3, 0, 4, 5, 6, 0;
  const Eigen::VectorXd t = align::lower_triangle(m);
  CHECK(t == Eigen::Vector3d(3, 5, 6));
  CHECK(align::lower_triangle(Eigen::MatrixXd::Zero(180, 180)).size() == 16110);
}

TEST_CASE("spearman")
{
  const Eigen::VectorXd x = ref::gaussian_vector(50, 7);
  CHECK(align::spearman(x, x.array().exp().matrix()) == doctest::Approx(1.0));
  CHECK(align::spearman(Eigen::Vector4d(1, 2, 3, 4), Eigen::Vector4d(4, 3, 2, 1)) == doctest::Approx(-1.0));
  CHECK(align::spearman(Eigen::Vector3d(1, 1, 2), Eigen::Vector3d(1, 2, 3)) == doctest::Approx(std::sqrt(3.0) / 2.0));
  const Eigen::VectorXd y = (x + ref::gaussian_vector(50, 8)).array().round().matrix();
  CHECK(align::spearman(x, y) == doctest::Approx(ref::spearman(x, y)).epsilon(1e-12));
  CHECK_THROWS(align::spearman(Eigen::Vector2d(1, 2), Eigen::Vector2d(1, 2)));
  CHECK_THROWS(align::spearman(Eigen::Vector3d(1, 1, 1), Eigen::Vector3d(1, 2, 3)));
}

TEST_CASE("RSA scores")
{
  const Eigen::MatrixXd model = ref::gaussian(180, 32, 9);
  const auto model_rdm = align::rdm(model);

  CHECK(align::rsa_score(model_rdm, model_rdm) == doctest::Approx(1.0));

  SUBCASE("planted geometry")
  {
    const Eigen::MatrixXd brain = model + 0.05 * ref::gaussian(180, 32, 11);
    CHECK(align::rsa_score(model_rdm, align::rdm(brain)) > 0.99);
  }
  SUBCASE("independent geometries")
  {
    double sum = 0;
    for (std::uint64_t k = 0; k < 100; ++k) sum += align::rsa_score(model_rdm, align::rdm(ref::gaussian(180, 32, 100 + k)));
    CHECK(std::abs(sum / 100.0) < 0.05);
  }
  SUBCASE("matches the reference rank correlation")
  {
    const auto other = align::rdm(model + ref::gaussian(180, 32, 12));
    CHECK(align::rsa_score(model_rdm, other) ==
          doctest::Approx(ref::spearman(align::lower_triangle(model_rdm), align::lower_triangle(other))).epsilon(1e-10));
  }
  SUBCASE("invariances")
  {
    const Eigen::MatrixXd brain = model + 1.5 * ref::gaussian(180, 32, 13);
    const double base = align::rsa_score(model_rdm, align::rdm(brain));
    Eigen::MatrixXd scaled = brain;
    align::Rng rng(14);
    for (Eigen::Index i = 0; i < scaled.rows(); ++i) scaled.row(i) = (scaled.row(i) * (0.1 + 5 * rng.uniform())).array() + rng.normal();
    CHECK(std::abs(align::rsa_score(model_rdm, align::rdm(scaled)) - base) < 1e-10);
    CHECK(std::abs(align::rsa_score(align::rdm(scaled), model_rdm) - base) < 1e-10);

    const auto perm = random_permutation(180, 15);
    const double both = align::rsa_score(align::rdm(permute_rows(model, perm)), align::rdm(permute_rows(brain, perm)));
    CHECK(std::abs(both - base) < 1e-10);
    const double one = align::rsa_score(model_rdm, align::rdm(permute_rows(brain, perm)));
    CHECK(std::abs(one) < 0.1);
  }
}

TEST_CASE("shuffled baselines")
{
  const Eigen::MatrixXd model = ref::gaussian(180, 32, 20);
  const Eigen::MatrixXd brain = model + 0.3 * ref::gaussian(180, 32, 21);
  const double matched = align::rsa_score(align::rdm(model), align::rdm(brain));

  const auto one = align::shuffled_baseline(model, brain, 1, 7);
  REQUIRE(one.scores.size() == 1);
  CHECK(one.scores[0] < matched);
  CHECK(one.sd == 0.0);

  const auto many = align::shuffled_baseline(model, brain, 100, 7);
  REQUIRE(many.scores.size() == 100);
  CHECK(std::abs(many.mean) < 0.05);
  CHECK(many.max < matched);
  double s = 0, ss = 0;
  for (double x : many.scores) s += x;
  const double mean = s / 100.0;
  for (double x : many.scores) ss += (x - mean) * (x - mean);
  CHECK(many.mean == doctest::Approx(mean));
  CHECK(many.sd == doctest::Approx(std::sqrt(ss / 99.0)));
  CHECK(many.max == *std::max_element(many.scores.begin(), many.scores.end()));

  const auto again = align::shuffled_baseline(model, brain, 100, 7);
  CHECK(again.scores == many.scores);
  CHECK(align::shuffled_baseline(model, brain, 100, 8).scores != many.scores);
  // The first shuffles do not depend on how many follow.
  const auto fewer = align::shuffled_baseline(model, brain, 10, 7);
  CHECK(std::equal(fewer.scores.begin(), fewer.scores.end(), many.scores.begin()));
}

TEST_CASE("full-coverage restriction reproduces the unrestricted score")
{
  const align::SynthModel synth(align::default_synth_config());
  const auto& atlas = synth.atlas();
  align::RoiDefinition roi;
  roi.areas = {1, 2};
  const align::MaskVolume full(atlas.dims, 1);
  const auto all = align::roi_voxels(roi, atlas);
  const auto restricted = align::roi_voxels(roi, atlas, &full);
  REQUIRE(all == restricted);

  const auto design = fixture::full_design(180, 4);
  const Eigen::MatrixXd grid_values = ref::gaussian(static_cast<Eigen::Index>(design.size()), atlas.dims.size(), 30);
  auto brain_for = [&](const std::vector<std::int64_t>& voxels) {
    Eigen::MatrixXd cols(grid_values.rows(), static_cast<Eigen::Index>(voxels.size()));
    for (std::size_t i = 0; i < voxels.size(); ++i) cols.col(static_cast<Eigen::Index>(i)) = grid_values.col(voxels[i]);
    return align::rdm(align::concept_vectors(cols, design, 180, RsaCondition::TextImage));
  };
  const auto model_rdm = align::rdm(ref::gaussian(180, 16, 31));
  const double a = align::rsa_score(model_rdm, brain_for(all));
  const double b = align::rsa_score(model_rdm, brain_for(restricted));
  CHECK(std::abs(a - b) <= 1e-12);
}
