#include "align/consistency.hpp"
#include "align/encoding.hpp"
#include "align/synth.hpp"

#include "doctest.h"
#include "reference.hpp"

#include <filesystem>

using align::Paradigm;
using align::VoxelClass;

namespace {

// One profiled area filling a small grid; every participant sees every repetition.
align::SynthConfig single_area(VoxelClass k, double noise, align::GridDims grid = {10, 10, 5})
{
  align::SynthConfig c;
  c.grid = grid;
  c.participants = 1;
  c.partial_rate = 0.0;
  c.noise = noise;
  c.localizer = false;
  c.areas = {{1, {0, 0, 0}, {grid.nx, grid.ny, grid.nz}}};
  align::AreaProfile p;
  p.name = "planted";
  p.areas = {1};
  p.classes = {k};
  c.profiles = {p};
  c.features.dim = 16;
  c.features.layer_alignment = {1.0};
  c.features.poolings = {{align::Pooling::Mean, 1.0}};
  c.features.noise = 0.5;
  c.seed = 11;
  return c;
}

// Variance of a concept mean: concept part, stimulus part (averaged over R
// distinct sentences or pictures, shared by word clouds), paradigm part, noise.
double expected_consistency(VoxelClass k, double sigma, double reps)
{
  const double a2 = k.concept_weight * k.concept_weight;
  const double b2 = k.stimulus_weight * k.stimulus_weight;
  const double e2 = k.paradigm_weight * k.paradigm_weight;
  const double n2 = sigma * sigma;
  const double sp = a2 + b2 / reps + e2 + n2 / reps;
  const double wc = a2 + b2 + e2 + n2 / reps;
  const double r_sp = a2 / sp;
  const double r_wc = a2 / std::sqrt(sp * wc);
  return (r_sp + 2 * r_wc) / 3;
}

Eigen::VectorXd consistency_of(const align::SynthModel& m, int participant)
{
  const auto beta = m.activations(participant, 0, m.atlas().dims.size());
  std::vector<align::Stimulus> rows;
  for (int i : m.participant_rows(participant)) rows.push_back(m.stimuli()[static_cast<std::size_t>(i)]);
  return align::voxel_consistency(align::concept_means(beta, rows, m.config().concepts));
}

std::vector<std::filesystem::path> sorted_files(const std::filesystem::path& dir)
{
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("oracle formulas")
{
  for (VoxelClass k : {VoxelClass{1, 0, 0}, VoxelClass{1, 0.5, 0.3}, VoxelClass{0.4, 1.2, 0}, VoxelClass{0.7, 0, 0.9}}) {
    for (double sigma : {0.0, 0.5, 2.0}) {
      for (double reps : {4.0, 6.0}) {
        CHECK(align::oracle::consistency(k, sigma, reps) == doctest::Approx(expected_consistency(k, sigma, reps)).epsilon(1e-12));
      }
    }
  }
  CHECK(align::oracle::consistency({1, 0, 0}, 0.0, 6) == doctest::Approx(1.0));

  // s2 / (s2 + 1) = 0.3125 makes the sentence readout correlation 0.5 at feature noise 0.5.
  const double s2 = 0.3125 / (1 - 0.3125);
  const VoxelClass k{std::sqrt(0.8 * s2), std::sqrt(0.2 * s2), 0};
  CHECK(align::oracle::encoding_r(k, 1.0, 1.0, 0.5, Paradigm::Sentence, 6) == doctest::Approx(0.5));
  CHECK(align::oracle::encoding_r(k, 1.0, 0.5, 0.5, Paradigm::Sentence, 6) == doctest::Approx(0.25));
  CHECK(align::oracle::encoding_r(k, 0.0, 1.0, 0.0, Paradigm::Picture, 6) == doctest::Approx(1.0));
  CHECK(align::oracle::encoding_r(k, 1.0, 1.0, 0.0, Paradigm::WordCloud, 6) ==
        doctest::Approx(std::sqrt(s2 / (s2 + 1.0 / 6.0))));
}

TEST_CASE("noiseless concept signal is perfectly consistent")
{
  const align::SynthModel m(single_area({1, 0, 0}, 0.0));
  const auto c = consistency_of(m, 0);
  CHECK((c.array() - 1.0).abs().maxCoeff() < 1e-9);
  const auto truth = m.ground_truth();
  CHECK((truth.expected_c.array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("null voxels have no consistency on average")
{
  const align::SynthModel m(align::null_synth_config({25, 20, 20}, 1, 5));
  std::vector<align::Stimulus> rows;
  for (int i : m.participant_rows(0)) rows.push_back(m.stimuli()[static_cast<std::size_t>(i)]);
  double sum = 0;
  std::int64_t count = 0;
  for (std::int64_t first = 0; first < 10000; first += 2500) {
    const auto c = align::voxel_consistency(align::concept_means(m.activations(0, first, first + 2500), rows, 180));
    sum += c.sum();
    count += c.size();
  }
  CHECK(count == 10000);
  CHECK(std::abs(sum / count) < 0.02);
}

TEST_CASE("planted consistency matches its oracle")
{
  for (VoxelClass k : {VoxelClass{1, 0.6, 0.4}, VoxelClass{0.5, 0.2, 0}, VoxelClass{std::sqrt(0.44), std::sqrt(0.11), std::sqrt(0.45)}}) {
    const double sigma = 1.0;
    const align::SynthModel m(single_area(k, sigma));
    const double mean = consistency_of(m, 0).mean();
    INFO("a = " << k.concept_weight << ", b = " << k.stimulus_weight << ", e = " << k.paradigm_weight);
    CHECK(std::abs(mean - expected_consistency(k, sigma, 6)) < 0.05);
    CHECK(m.ground_truth().expected_c(0) == doctest::Approx(expected_consistency(k, sigma, 6)));
  }
}

TEST_CASE("planted predictivity matches its oracle")
{
  const double s2 = 0.3125 / (1 - 0.3125);
  const VoxelClass k{std::sqrt(0.8 * s2), std::sqrt(0.2 * s2), 0};
  auto config = single_area(k, 1.0, {5, 4, 1});
  const align::SynthModel m(config);
  const auto feats = m.features();
  REQUIRE(feats.size() == 1);

  const auto rows_p = m.participant_rows(0);
  std::vector<align::Stimulus> rows;
  for (int i : rows_p) rows.push_back(m.stimuli()[static_cast<std::size_t>(i)]);
  const auto sentence = align::paradigm_rows(rows, Paradigm::Sentence);
  std::vector<Eigen::Index> manifest_rows;
  for (auto r : sentence) manifest_rows.push_back(rows_p[static_cast<std::size_t>(r)]);

  const Eigen::MatrixXd y = align::take_rows(m.activations(0, 0, 20), sentence);
  const Eigen::MatrixXd x = align::take_rows(feats[0].x, manifest_rows);
  const auto results = align::cv_predictivity(x, y);
  double mean = 0;
  for (const auto& r : results) mean += r.r / static_cast<double>(results.size());
  CHECK(std::abs(mean - 0.5) < 0.05);
  CHECK(std::abs(m.ground_truth().areas.at(0).expected_r[0] - 0.5) < 1e-12);
}

TEST_CASE("block activations match the full draw")
{
  const align::SynthModel m(single_area({1, 0.5, 0.5}, 1.0));
  const auto full = m.activations(0, 0, 500);
  CHECK(m.activations(0, 120, 377) == full.middleCols(120, 257));
  CHECK(m.activations(0, 499, 500) == full.rightCols(1));
  CHECK_THROWS(m.activations(0, 10, 501));
  CHECK_THROWS(m.activations(1, 0, 10));
}

TEST_CASE("default layout")
{
  const auto c = align::default_synth_config();
  CHECK_NOTHROW(align::validate_synth_config(c));
  const align::SynthModel m(c);
  const auto truth = m.ground_truth();
  REQUIRE(truth.clusters.size() == 2);
  CHECK(truth.clusters[0].voxel_count == 700);
  CHECK(truth.clusters[0].expected_roi);
  CHECK(truth.clusters[1].voxel_count == 400);
  CHECK(m.stimuli().size() == 3240);
  CHECK(truth.best_layer == 1);
  CHECK(truth.best_pooling == align::Pooling::Mean);
  CHECK(truth.voxel_class.size() == 8000);
}

TEST_CASE("config validation")
{
  auto bad = [](auto mutate) {
    auto c = align::default_synth_config();
    mutate(c);
    return c;
  };
  CHECK_THROWS_WITH(align::validate_synth_config(bad([](auto& c) { c.areas[1].lo = c.areas[0].lo; })),
                    doctest::Contains("overlap"));
  CHECK_THROWS_WITH(align::validate_synth_config(bad([](auto& c) { c.areas[0].lo[0] = 19; })),
                    doctest::Contains("does not fit"));
  CHECK_THROWS_WITH(align::validate_synth_config(bad([](auto& c) { c.profiles[0].classes[0].concept_weight = -1; })),
                    doctest::Contains("negative"));
  CHECK_THROWS_WITH(align::validate_synth_config(bad([](auto& c) { c.profiles[0].coherence = 1.5; })),
                    doctest::Contains("coherence"));
  CHECK_THROWS_WITH(align::validate_synth_config(bad([](auto& c) { c.features.dim = 15; c.features.latent_dim = 8; })),
                    doctest::Contains("twice"));
  CHECK_THROWS_WITH(align::validate_synth_config(bad([](auto& c) { c.features.poolings[0].alignment_scale = 1.5; })),
                    doctest::Contains("alignment"));
  CHECK_THROWS(align::validate_synth_config(bad([](auto& c) { c.min_repetitions = 7; })));
  CHECK_THROWS(align::SynthModel(bad([](auto& c) { c.participants = 0; })));
}

TEST_CASE("config JSON round trip")
{
  const auto c = align::default_synth_config();
  const auto j = align::synth_config_to_json(c);
  CHECK(align::synth_config_to_json(align::synth_config_from_json(j)) == j);
}

TEST_CASE("generation is byte-identical for a fixed seed")
{
  auto config = single_area({1, 0.5, 0.2}, 1.0, {4, 4, 2});
  config.participants = 2;
  config.partial_rate = 0.3;
  config.localizer = true;
  const auto a = ref::temp_dir("synth_a"), b = ref::temp_dir("synth_b");
  align::generate(config, a);
  align::generate(config, b);
  const auto files = sorted_files(a);
  REQUIRE(files == sorted_files(b));
  CHECK(std::find(files.begin(), files.end(), "manifest.json") != files.end());
  CHECK(std::find(files.begin(), files.end(), std::filesystem::path("features") / "features.json") != files.end());
  for (const auto& f : files) {
    INFO(f.string());
    CHECK(ref::slurp(a / f) == ref::slurp(b / f));
  }

  config.seed += 1;
  const auto c = ref::temp_dir("synth_c");
  align::generate(config, c);
  CHECK(ref::slurp(a / "P01_beta.btsr") != ref::slurp(c / "P01_beta.btsr"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
  std::filesystem::remove_all(c);
}
