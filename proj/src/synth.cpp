#include "align/synth.hpp"

#include "align/io.hpp"
#include "align/rng.hpp"
#include "align/roi.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <stdexcept>

namespace align {
namespace {

using nlohmann::json;

// Sub-stream keys under tag::synth.
enum Stream : std::uint64_t {
  kLatent = 1,
  kArea = 2,
  kVoxel = 3,
  kCoverage = 4,
  kNoise = 5,
  kLocalizer = 6,
  kFeatureNoise = 7,
  kFeatureBasis = 8,
  kSelectivity = 9,
  kPlanted = 10,
  kShared = 11,
};

std::uint64_t stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys)
{
  std::uint64_t s = derive_seed(seed, {tag::synth});
  for (auto k : keys) s = derive_seed(s, {k});
  return s;
}

Eigen::MatrixXd normals(Rng& rng, Eigen::Index rows, Eigen::Index cols)
{
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  }
  return m;
}

Eigen::VectorXd unit_vector(Rng& rng, Eigen::Index k)
{
  Eigen::VectorXd v(k);
  for (Eigen::Index i = 0; i < k; ++i) v(i) = rng.normal();
  return v / v.norm();
}

VoxelClass class_from_fraction(double s)
{
  return {std::sqrt(0.8 * s), std::sqrt(0.2 * s), std::sqrt(1.0 - s)};
}

std::string participant_id(int p)
{
  char buf[16];
  std::snprintf(buf, sizeof(buf), "P%02d", p + 1);
  return buf;
}

std::string concept_label(int c)
{
  char buf[24];
  std::snprintf(buf, sizeof(buf), "concept_%03d", c);
  return buf;
}

void write_json(const json& j, const std::filesystem::path& path)
{
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

SynthConfig default_synth_config()
{
  SynthConfig c;
  auto box = [&c](int id, std::array<int, 3> lo, std::array<int, 3> size) { c.areas.push_back({id, lo, size}); };
  box(1, {0, 0, 0}, {10, 10, 4});
  box(2, {0, 0, 4}, {10, 10, 3});
  box(3, {10, 10, 0}, {10, 10, 4});
  box(4, {10, 0, 0}, {10, 10, 7});
  box(5, {0, 10, 0}, {10, 10, 7});
  box(6, {10, 10, 4}, {10, 10, 3});
  box(7, {0, 0, 7}, {20, 20, 1});

  std::vector<int> graded;
  int id = 8;
  for (int bz = 0; bz < 3; ++bz) {
    for (int by = 0; by < 4; ++by) {
      for (int bx = 0; bx < 4; ++bx, ++id) {
        box(id, {5 * bx, 5 * by, 8 + 4 * bz}, {5, 5, 4});
        if ((bx + by + bz) % 2 == 0) graded.push_back(id);
      }
    }
  }

  AreaProfile roi_a;
  roi_a.name = "cluster-a";
  roi_a.areas = {1, 2};
  for (double s : {0.1, 0.3, 0.55, 0.8}) roi_a.classes.push_back(class_from_fraction(s));
  roi_a.selectivity_mean = 0.6;
  roi_a.selectivity_sd = 0.3;
  roi_a.planted_roi = true;
  c.profiles.push_back(roi_a);

  AreaProfile roi_b;
  roi_b.name = "cluster-b";
  roi_b.areas = {3};
  roi_b.classes = {class_from_fraction(0.6)};
  roi_b.selectivity_mean = 0.4;
  roi_b.selectivity_sd = 0.2;
  roi_b.planted_roi = true;
  c.profiles.push_back(roi_b);

  for (std::size_t i = 0; i < graded.size(); ++i) {
    AreaProfile g;
    g.name = "graded-" + std::to_string(i);
    g.areas = {graded[i]};
    g.classes = {class_from_fraction(0.75 * static_cast<double>(i) / static_cast<double>(graded.size() - 1))};
    g.selectivity_mean = 0.1;
    c.profiles.push_back(g);
  }
  return c;
}

SynthConfig null_synth_config(GridDims grid, int participants, std::uint64_t seed)
{
  SynthConfig c;
  c.grid = grid;
  c.participants = participants;
  c.partial_rate = 0.0;
  c.localizer = false;
  c.areas = {{1, {0, 0, 0}, {grid.nx, grid.ny, grid.nz}}};
  c.seed = seed;
  return c;
}

json synth_config_to_json(const SynthConfig& c)
{
  json areas = json::array();
  for (const auto& a : c.areas) areas.push_back({{"id", a.id}, {"lo", a.lo}, {"size", a.size}});
  json profiles = json::array();
  for (const auto& p : c.profiles) {
    json classes = json::array();
    for (const auto& k : p.classes) {
      classes.push_back({{"concept_weight", k.concept_weight},
                         {"stimulus_weight", k.stimulus_weight},
                         {"paradigm_weight", k.paradigm_weight}});
    }
    profiles.push_back({{"name", p.name},
                        {"areas", p.areas},
                        {"classes", std::move(classes)},
                        {"coherence", p.coherence},
                        {"selectivity_mean", p.selectivity_mean},
                        {"selectivity_sd", p.selectivity_sd},
                        {"planted_roi", p.planted_roi}});
  }
  json poolings = json::array();
  for (const auto& p : c.features.poolings) {
    poolings.push_back({{"pooling", std::string(pooling_name(p.pooling))}, {"alignment_scale", p.alignment_scale}});
  }
  return {{"grid", {c.grid.nx, c.grid.ny, c.grid.nz}},
          {"participants", c.participants},
          {"concepts", c.concepts},
          {"min_repetitions", c.min_repetitions},
          {"max_repetitions", c.max_repetitions},
          {"partial_rate", c.partial_rate},
          {"noise", c.noise},
          {"localizer", c.localizer},
          {"localizer_noise", c.localizer_noise},
          {"background_selectivity_mean", c.background_selectivity_mean},
          {"background_selectivity_sd", c.background_selectivity_sd},
          {"areas", std::move(areas)},
          {"profiles", std::move(profiles)},
          {"features",
           {{"model", c.features.model},
            {"dim", c.features.dim},
            {"latent_dim", c.features.latent_dim},
            {"layer_alignment", c.features.layer_alignment},
            {"poolings", std::move(poolings)},
            {"noise", c.features.noise}}},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j)
{
  // Missing keys keep the defaults, so a config may override a few fields only.
  SynthConfig c;
  const bool custom_layout = j.contains("areas");
  if (!custom_layout) c = default_synth_config();
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("grid")) {
    const auto g = j.at("grid").get<std::array<int, 3>>();
    c.grid = {g[0], g[1], g[2]};
  }
  get("participants", c.participants);
  get("concepts", c.concepts);
  get("min_repetitions", c.min_repetitions);
  get("max_repetitions", c.max_repetitions);
  get("partial_rate", c.partial_rate);
  get("noise", c.noise);
  get("localizer", c.localizer);
  get("localizer_noise", c.localizer_noise);
  get("background_selectivity_mean", c.background_selectivity_mean);
  get("background_selectivity_sd", c.background_selectivity_sd);
  get("seed", c.seed);
  if (custom_layout) {
    c.areas.clear();
    for (const auto& a : j.at("areas")) {
      c.areas.push_back({a.at("id").get<int>(), a.at("lo").get<std::array<int, 3>>(), a.at("size").get<std::array<int, 3>>()});
    }
    c.profiles.clear();
  }
  if (j.contains("profiles")) {
    c.profiles.clear();
    for (const auto& p : j.at("profiles")) {
      AreaProfile ap;
      ap.name = p.value("name", "");
      ap.areas = p.at("areas").get<std::vector<int>>();
      for (const auto& k : p.at("classes")) {
        ap.classes.push_back({k.value("concept_weight", 0.0), k.value("stimulus_weight", 0.0), k.value("paradigm_weight", 0.0)});
      }
      ap.coherence = p.value("coherence", ap.coherence);
      ap.selectivity_mean = p.value("selectivity_mean", ap.selectivity_mean);
      ap.selectivity_sd = p.value("selectivity_sd", ap.selectivity_sd);
      ap.planted_roi = p.value("planted_roi", false);
      c.profiles.push_back(std::move(ap));
    }
  }
  if (j.contains("features")) {
    const auto& f = j.at("features");
    c.features.model = f.value("model", c.features.model);
    c.features.dim = f.value("dim", c.features.dim);
    c.features.latent_dim = f.value("latent_dim", c.features.latent_dim);
    if (f.contains("layer_alignment")) c.features.layer_alignment = f.at("layer_alignment").get<std::vector<double>>();
    if (f.contains("poolings")) {
      c.features.poolings.clear();
      for (const auto& p : f.at("poolings")) {
        c.features.poolings.push_back({parse_pooling(p.at("pooling").get<std::string>()), p.value("alignment_scale", 1.0)});
      }
    }
    c.features.noise = f.value("noise", c.features.noise);
  }
  validate_synth_config(c);
  return c;
}

SynthConfig load_synth_config(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return synth_config_from_json(json::parse(in));
}

void validate_synth_config(const SynthConfig& c)
{
  auto fail = [](const std::string& msg) { throw std::invalid_argument("synth config: " + msg); };
  if (c.grid.nx < 1 || c.grid.ny < 1 || c.grid.nz < 1) fail("grid dimensions must be positive");
  if (c.participants < 1) fail("need at least one participant");
  if (c.concepts < 3) fail("need at least three concepts");
  if (c.min_repetitions < 1 || c.min_repetitions > c.max_repetitions || c.max_repetitions > kMaxRepetitions)
    fail("repetitions must satisfy 1 <= min <= max <= " + std::to_string(kMaxRepetitions));
  if (!(c.partial_rate >= 0.0 && c.partial_rate <= 1.0)) fail("partial_rate must lie in [0, 1]");
  if (!(c.noise >= 0.0) || !std::isfinite(c.noise)) fail("noise must be finite and non-negative");
  if (!(c.localizer_noise >= 0.0) || !std::isfinite(c.localizer_noise)) fail("localizer_noise must be finite and non-negative");

  std::set<int> ids;
  Volume<int> owner(c.grid, 0);
  for (const auto& a : c.areas) {
    if (a.id < 1 || a.id > kAreaCount) fail("area id " + std::to_string(a.id) + " outside [1, 360]");
    if (!ids.insert(a.id).second) fail("duplicate area id " + std::to_string(a.id));
    for (int d = 0; d < 3; ++d) {
      const int extent = d == 0 ? c.grid.nx : d == 1 ? c.grid.ny : c.grid.nz;
      if (a.size[d] < 1 || a.lo[d] < 0 || a.lo[d] + a.size[d] > extent)
        fail("area " + std::to_string(a.id) + " does not fit the grid");
    }
    for (int x = a.lo[0]; x < a.lo[0] + a.size[0]; ++x) {
      for (int y = a.lo[1]; y < a.lo[1] + a.size[1]; ++y) {
        for (int z = a.lo[2]; z < a.lo[2] + a.size[2]; ++z) {
          if (owner(x, y, z) != 0)
            fail("areas " + std::to_string(owner(x, y, z)) + " and " + std::to_string(a.id) + " overlap");
          owner(x, y, z) = a.id;
        }
      }
    }
  }

  std::set<int> profiled;
  for (const auto& p : c.profiles) {
    if (p.classes.empty()) fail("profile '" + p.name + "' has no voxel classes");
    for (int a : p.areas) {
      if (!ids.contains(a)) fail("profile '" + p.name + "' references unknown area " + std::to_string(a));
      if (!profiled.insert(a).second) fail("area " + std::to_string(a) + " appears in two profiles");
    }
    for (const auto& k : p.classes) {
      for (double w : {k.concept_weight, k.stimulus_weight, k.paradigm_weight}) {
        if (!std::isfinite(w) || w < 0.0) fail("profile '" + p.name + "' has a negative or non-finite weight");
      }
    }
    if (!(p.coherence >= 0.0 && p.coherence <= 1.0)) fail("profile '" + p.name + "' coherence must lie in [0, 1]");
    if (!std::isfinite(p.selectivity_mean) || !(p.selectivity_sd >= 0.0)) fail("profile '" + p.name + "' has invalid selectivity");
  }

  const auto& f = c.features;
  if (f.latent_dim < 1) fail("latent_dim must be positive");
  if (f.dim < 2 * f.latent_dim) fail("feature dim must be at least twice latent_dim");
  if (f.layer_alignment.empty()) fail("need at least one layer");
  if (f.poolings.empty()) fail("need at least one pooling");
  if (!(f.noise >= 0.0) || !std::isfinite(f.noise)) fail("feature noise must be finite and non-negative");
  for (double g : f.layer_alignment) {
    for (const auto& p : f.poolings) {
      const double a = g * p.alignment_scale;
      if (!(a >= 0.0 && a <= 1.0)) fail("layer alignment times pooling scale must lie in [0, 1]");
    }
  }
  std::set<int> pools;
  for (const auto& p : f.poolings) {
    if (!pools.insert(static_cast<int>(p.pooling)).second) fail("duplicate pooling");
  }
}

// ---------------------------------------------------------------------------
// Oracles

namespace oracle {

double consistency(const VoxelClass& k, double noise, double repetitions)
{
  const double a2 = k.concept_weight * k.concept_weight;
  const double b2 = k.stimulus_weight * k.stimulus_weight;
  const double e2 = k.paradigm_weight * k.paradigm_weight;
  const double n2 = noise * noise;
  const double v_sp = a2 + (b2 + n2) / repetitions + e2;
  const double v_wc = a2 + b2 + e2 + n2 / repetitions;
  if (!(v_sp > 0.0) || !(v_wc > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return (a2 / v_sp + 2.0 * a2 / std::sqrt(v_sp * v_wc)) / 3.0;
}

double encoding_r(const VoxelClass& k, double noise, double alignment, double feature_noise, Paradigm p,
                  double repetitions)
{
  const double s2 = k.concept_weight * k.concept_weight + k.stimulus_weight * k.stimulus_weight;
  const double e2 = k.paradigm_weight * k.paradigm_weight;
  const double n2 = noise * noise / (p == Paradigm::WordCloud ? repetitions : 1.0);
  const double total = s2 + e2 + n2;
  if (!(total > 0.0)) return 0.0;
  return alignment * std::sqrt(s2) / (std::sqrt(1.0 + feature_noise * feature_noise) * std::sqrt(total));
}

double noise_ceiling(double signal_var, double noise_var, int participants)
{
  const double m = participants - 1;
  return signal_var * std::sqrt(m) / (std::sqrt(signal_var + noise_var) * std::sqrt(m * signal_var + noise_var));
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Model

struct SynthModel::VoxelParams {
  int profile = -1;
  int cls = -1;
  VoxelClass weights;
  Eigen::VectorXd u, w, q;
  bool silent() const noexcept
  {
    return weights.concept_weight == 0.0 && weights.stimulus_weight == 0.0 && weights.paradigm_weight == 0.0;
  }
};

SynthModel::SynthModel(SynthConfig config) : config_(std::move(config))
{
  validate_synth_config(config_);
  const SynthConfig& c = config_;

  for (int concept_id = 0; concept_id < c.concepts; ++concept_id) {
    for (Paradigm p : kParadigms) {
      for (int r = 0; r < c.max_repetitions; ++r) {
        stimuli_.push_back({static_cast<int>(stimuli_.size()), concept_id, p, r});
      }
    }
  }

  atlas_ = LabelVolume(c.grid, 0);
  for (const auto& a : c.areas) {
    for (int x = a.lo[0]; x < a.lo[0] + a.size[0]; ++x) {
      for (int y = a.lo[1]; y < a.lo[1] + a.size[1]; ++y) {
        for (int z = a.lo[2]; z < a.lo[2] + a.size[2]; ++z) atlas_(x, y, z) = a.id;
      }
    }
  }
  area_profile_.assign(static_cast<std::size_t>(kAreaCount + 1), -1);
  for (std::size_t i = 0; i < c.profiles.size(); ++i) {
    for (int a : c.profiles[i].areas) area_profile_[static_cast<std::size_t>(a)] = static_cast<int>(i);
  }

  const Eigen::Index k = c.features.latent_dim;
  area_latent_.assign(static_cast<std::size_t>(kAreaCount + 1), {});
  for (const auto& p : c.profiles) {
    for (int a : p.areas) {
      Rng rng(stream(c.seed, {kArea, static_cast<std::uint64_t>(a)}));
      auto& l = area_latent_[static_cast<std::size_t>(a)];
      l.u = unit_vector(rng, k);
      l.w = unit_vector(rng, k);
      l.q = normals(rng, 3 * c.concepts, 1);
    }
  }

  const auto n = static_cast<Eigen::Index>(stimuli_.size());
  Rng latent(stream(c.seed, {kLatent}));
  concept_latent_ = normals(latent, c.concepts, k);
  stimulus_latent_ = normals(latent, n, k);
  const Eigen::MatrixXd word_cloud_latent = normals(latent, c.concepts, k);
  for (const auto& s : stimuli_) {
    if (s.paradigm == Paradigm::WordCloud) stimulus_latent_.row(s.id) = word_cloud_latent.row(s.concept_id);
  }

  seen_.assign(static_cast<std::size_t>(c.participants) * stimuli_.size(), 0);
  std::vector<int> reps(static_cast<std::size_t>(c.max_repetitions));
  for (int p = 0; p < c.participants; ++p) {
    Rng rng(stream(c.seed, {kCoverage, static_cast<std::uint64_t>(p)}));
    std::uint8_t* row = seen_.data() + static_cast<std::size_t>(p) * stimuli_.size();
    for (std::size_t block = 0; block < stimuli_.size(); block += static_cast<std::size_t>(c.max_repetitions)) {
      int count = c.max_repetitions;
      if (c.min_repetitions < c.max_repetitions && rng.uniform() < c.partial_rate) {
        count = c.min_repetitions + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.max_repetitions - c.min_repetitions)));
      }
      std::iota(reps.begin(), reps.end(), 0);
      rng.shuffle(std::span<int>(reps));
      for (int i = 0; i < count; ++i) row[block + static_cast<std::size_t>(reps[static_cast<std::size_t>(i)])] = 1;
    }
  }
}

std::vector<int> SynthModel::participant_rows(int p) const
{
  if (p < 0 || p >= config_.participants) throw std::out_of_range("participant index out of range");
  std::vector<int> rows;
  const std::uint8_t* row = seen_.data() + static_cast<std::size_t>(p) * stimuli_.size();
  for (std::size_t i = 0; i < stimuli_.size(); ++i) {
    if (row[i]) rows.push_back(static_cast<int>(i));
  }
  return rows;
}

SynthModel::VoxelParams SynthModel::voxel_params(std::int64_t v) const
{
  VoxelParams vp;
  const int area = atlas_.data(v);
  vp.profile = area > 0 ? area_profile_[static_cast<std::size_t>(area)] : -1;
  if (vp.profile < 0) return vp;
  const AreaProfile& prof = config_.profiles[static_cast<std::size_t>(vp.profile)];
  Rng rng(stream(config_.seed, {kVoxel, static_cast<std::uint64_t>(v)}));
  vp.cls = static_cast<int>(rng.below(prof.classes.size()));
  vp.weights = prof.classes[static_cast<std::size_t>(vp.cls)];
  if (vp.silent()) return vp;

  const Eigen::Index k = config_.features.latent_dim;
  const double coh = prof.coherence;
  const double rest = std::sqrt(std::max(0.0, 1.0 - coh * coh));
  const AreaLatent& al = area_latent_[static_cast<std::size_t>(area)];
  const Eigen::VectorXd gu = unit_vector(rng, k);
  const Eigen::VectorXd gw = unit_vector(rng, k);
  const Eigen::VectorXd u = coh * al.u + rest * gu;
  const Eigen::VectorXd w = coh * al.w + rest * gw;
  vp.u = u / u.norm();
  vp.w = w / w.norm();
  vp.q = coh * al.q + rest * normals(rng, 3 * config_.concepts, 1);
  return vp;
}

Eigen::MatrixXd SynthModel::activations(int p, std::int64_t first, std::int64_t last) const
{
  if (first < 0 || last > config_.grid.size() || first > last) throw std::out_of_range("activations: voxel range outside grid");
  const std::vector<int> rows = participant_rows(p);
  const auto n_rows = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd beta(n_rows, last - first);
  const double sigma = config_.noise;
  const int concepts = config_.concepts;

#pragma omp parallel for schedule(dynamic, 64)
  for (std::int64_t v = first; v < last; ++v) {
    const VoxelParams vp = voxel_params(v);
    Rng noise(stream(config_.seed, {kNoise, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(v)}));
    auto col = beta.col(v - first);
    if (vp.silent()) {
      for (Eigen::Index i = 0; i < n_rows; ++i) col(i) = sigma * noise.normal();
      continue;
    }
    const Eigen::VectorXd concept_part = vp.weights.concept_weight * (concept_latent_ * vp.u);
    const Eigen::VectorXd stimulus_part = vp.weights.stimulus_weight * (stimulus_latent_ * vp.w);
    for (Eigen::Index i = 0; i < n_rows; ++i) {
      const Stimulus& s = stimuli_[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
      col(i) = concept_part(s.concept_id) + stimulus_part(s.id) +
               vp.weights.paradigm_weight * vp.q(index_of(s.paradigm) * concepts + s.concept_id) + sigma * noise.normal();
    }
  }
  return beta;
}

namespace {

double true_selectivity(const SynthConfig& c, const std::vector<int>& area_profile, const LabelVolume& atlas, std::int64_t v)
{
  const int area = atlas.data(v);
  const int prof = area > 0 ? area_profile[static_cast<std::size_t>(area)] : -1;
  const double mean = prof >= 0 ? c.profiles[static_cast<std::size_t>(prof)].selectivity_mean : c.background_selectivity_mean;
  const double sd = prof >= 0 ? c.profiles[static_cast<std::size_t>(prof)].selectivity_sd : c.background_selectivity_sd;
  Rng rng(stream(c.seed, {kSelectivity, static_cast<std::uint64_t>(v)}));
  return mean + sd * rng.normal();
}

}  // namespace

std::pair<Eigen::VectorXd, Eigen::VectorXd> SynthModel::localizer(int p) const
{
  const std::int64_t n = config_.grid.size();
  Eigen::VectorXd sentences(n), nonwords(n);
  for (std::int64_t v = 0; v < n; ++v) {
    Rng rng(stream(config_.seed, {kLocalizer, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(v)}));
    const double base = rng.normal();
    sentences(v) = base + true_selectivity(config_, area_profile_, atlas_, v) + config_.localizer_noise * rng.normal();
    nonwords(v) = base + config_.localizer_noise * rng.normal();
  }
  return {sentences, nonwords};
}

std::vector<FeatureSet> SynthModel::features() const
{
  const FeatureConfig& fc = config_.features;
  const Eigen::Index k = fc.latent_dim;
  const auto n = static_cast<Eigen::Index>(stimuli_.size());
  Eigen::MatrixXd h(n, 2 * k);
  for (const auto& s : stimuli_) {
    h.row(s.id) << concept_latent_.row(s.concept_id), stimulus_latent_.row(s.id);
  }
  // Word clouds of a concept share one token sequence, hence one feature row.
  std::vector<int> source(stimuli_.size());
  std::map<int, int> first_word_cloud;
  for (const auto& s : stimuli_) {
    source[static_cast<std::size_t>(s.id)] = s.id;
    if (s.paradigm != Paradigm::WordCloud) continue;
    auto [it, inserted] = first_word_cloud.try_emplace(s.concept_id, s.id);
    source[static_cast<std::size_t>(s.id)] = it->second;
  }

  std::vector<PoolingSpec> poolings = fc.poolings;
  std::stable_sort(poolings.begin(), poolings.end(),
                   [](const PoolingSpec& a, const PoolingSpec& b) { return a.pooling < b.pooling; });

  std::vector<FeatureSet> out;
  for (std::size_t layer = 0; layer < fc.layer_alignment.size(); ++layer) {
    Rng basis_rng(stream(config_.seed, {kFeatureBasis, layer}));
    const Eigen::MatrixXd g = normals(basis_rng, fc.dim, 2 * k);
    const Eigen::MatrixXd basis = g.householderQr().householderQ() * Eigen::MatrixXd::Identity(fc.dim, 2 * k);
    for (const auto& pool : poolings) {
      Rng rng(stream(config_.seed, {kFeatureNoise, layer, static_cast<std::uint64_t>(pool.pooling)}));
      Eigen::MatrixXd chi = normals(rng, n, 2 * k);
      Eigen::MatrixXd xi = normals(rng, n, fc.dim);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int src = source[static_cast<std::size_t>(i)];
        if (src != i) {
          chi.row(i) = chi.row(src);
          xi.row(i) = xi.row(src);
        }
      }
      const double gamma = fc.layer_alignment[layer] * pool.alignment_scale;
      FeatureSet f;
      f.model = fc.model;
      f.layer = static_cast<int>(layer);
      f.pooling = pool.pooling;
      f.x = (gamma * h + std::sqrt(1.0 - gamma * gamma) * chi) * basis.transpose() + fc.noise * xi;
      out.push_back(std::move(f));
    }
  }
  return out;
}

GroundTruth SynthModel::ground_truth() const
{
  const SynthConfig& c = config_;
  const std::int64_t n = c.grid.size();
  GroundTruth t;
  t.voxel_class = Eigen::VectorXi::Constant(n, -1);
  t.voxel_profile = Eigen::VectorXi::Constant(n, -1);
  t.expected_c = Eigen::VectorXd::Zero(n);
  t.encodable_fraction = Eigen::VectorXd::Zero(n);
  t.selectivity.resize(n);

  double best_alignment = -1.0;
  for (std::size_t layer = 0; layer < c.features.layer_alignment.size(); ++layer) {
    std::vector<PoolingSpec> poolings = c.features.poolings;
    std::stable_sort(poolings.begin(), poolings.end(),
                     [](const PoolingSpec& a, const PoolingSpec& b) { return a.pooling < b.pooling; });
    for (const auto& p : poolings) {
      const double a = c.features.layer_alignment[layer] * p.alignment_scale;
      if (a > best_alignment) {
        best_alignment = a;
        t.best_layer = static_cast<int>(layer);
        t.best_pooling = p.pooling;
      }
    }
  }

  std::map<int, AreaTruth> areas;
  for (const auto& a : c.areas) areas[a.id].area = a.id;
  const double reps = c.max_repetitions;
  for (std::int64_t v = 0; v < n; ++v) {
    const int area = atlas_.data(v);
    t.selectivity(v) = true_selectivity(c, area_profile_, atlas_, v);
    VoxelClass k;
    int prof = -1;
    if (area > 0 && area_profile_[static_cast<std::size_t>(area)] >= 0) {
      prof = area_profile_[static_cast<std::size_t>(area)];
      const AreaProfile& ap = c.profiles[static_cast<std::size_t>(prof)];
      Rng rng(stream(c.seed, {kVoxel, static_cast<std::uint64_t>(v)}));
      const int cls = static_cast<int>(rng.below(ap.classes.size()));
      k = ap.classes[static_cast<std::size_t>(cls)];
      t.voxel_class(v) = cls;
      t.voxel_profile(v) = prof;
    }
    const double ec = oracle::consistency(k, c.noise, reps);
    t.expected_c(v) = std::isfinite(ec) ? ec : 0.0;
    const double s2 = k.concept_weight * k.concept_weight + k.stimulus_weight * k.stimulus_weight;
    const double total = s2 + k.paradigm_weight * k.paradigm_weight + c.noise * c.noise;
    t.encodable_fraction(v) = total > 0.0 ? s2 / total : 0.0;
    if (area == 0) continue;
    AreaTruth& at = areas[area];
    at.profile = prof;
    ++at.voxel_count;
    at.expected_c += t.expected_c(v);
    for (Paradigm p : kParadigms) {
      at.expected_r[static_cast<std::size_t>(index_of(p))] +=
          oracle::encoding_r(k, c.noise, best_alignment, c.features.noise, p, reps);
    }
  }
  for (auto& [id, at] : areas) {
    if (at.voxel_count == 0) continue;
    at.expected_c /= static_cast<double>(at.voxel_count);
    for (auto& r : at.expected_r) r /= static_cast<double>(at.voxel_count);
    t.areas.push_back(at);
  }

  std::set<int> planted;
  for (const auto& p : c.profiles) {
    if (p.planted_roi) planted.insert(p.areas.begin(), p.areas.end());
  }
  const auto adjacency = area_adjacency(atlas_);
  const auto counts = area_voxel_counts(atlas_);
  std::set<int> visited;
  for (int start : planted) {
    if (visited.contains(start)) continue;
    PlantedCluster cluster;
    std::queue<int> frontier;
    frontier.push(start);
    visited.insert(start);
    while (!frontier.empty()) {
      const int a = frontier.front();
      frontier.pop();
      cluster.areas.push_back(a);
      cluster.voxel_count += counts.contains(a) ? counts.at(a) : 0;
      auto it = adjacency.find(a);
      if (it == adjacency.end()) continue;
      for (int b : it->second) {
        if (planted.contains(b) && visited.insert(b).second) frontier.push(b);
      }
    }
    std::sort(cluster.areas.begin(), cluster.areas.end());
    cluster.expected_roi = cluster.voxel_count > RoiOptions{}.min_voxels;
    t.clusters.push_back(std::move(cluster));
  }
  return t;
}

json ground_truth_to_json(const GroundTruth& t)
{
  json areas = json::array();
  for (const auto& a : t.areas) {
    areas.push_back({{"area", a.area},
                     {"profile", a.profile},
                     {"voxel_count", a.voxel_count},
                     {"expected_c", a.expected_c},
                     {"expected_r", {{"S", a.expected_r[0]}, {"P", a.expected_r[1]}, {"WC", a.expected_r[2]}}}});
  }
  json clusters = json::array();
  for (const auto& c : t.clusters) {
    clusters.push_back({{"areas", c.areas}, {"voxel_count", c.voxel_count}, {"expected_roi", c.expected_roi}});
  }
  return {{"schema_version", 1},
          {"best_layer", t.best_layer},
          {"best_pooling", std::string(pooling_name(t.best_pooling))},
          {"areas", std::move(areas)},
          {"planted_clusters", std::move(clusters)},
          {"voxel_tensors",
           {{"class", "truth_class.btsr"},
            {"profile", "truth_profile.btsr"},
            {"expected_c", "truth_expected_c.btsr"},
            {"encodable_fraction", "truth_encodable_fraction.btsr"},
            {"selectivity", "truth_selectivity.btsr"}}}};
}

std::vector<std::filesystem::path> generate(const SynthConfig& config, const std::filesystem::path& out_dir)
{
  namespace fs = std::filesystem;
  const SynthModel model(config);
  const SynthConfig& c = model.config();
  fs::create_directories(out_dir);
  fs::create_directories(out_dir / "features");
  std::vector<fs::path> written;
  auto mark = [&](const fs::path& rel) {
    written.push_back(out_dir / rel);
    return out_dir / rel;
  };

  write_json(synth_config_to_json(c), mark("synth_config.json"));
  write_tensor(mark("atlas.btsr"), from_volume(model.atlas()));

  const std::int64_t n_vox = c.grid.size();
  Eigen::MatrixXd coords(n_vox, 3);
  for (std::int64_t v = 0; v < n_vox; ++v) {
    const auto xyz = c.grid.coords(v);
    coords.row(v) << xyz[0], xyz[1], xyz[2];
  }
  write_matrix(mark("coords.btsr"), coords);

  Manifest m;
  for (int i = 0; i < c.concepts; ++i) m.concepts.push_back(concept_label(i));
  m.stimuli = model.stimuli();
  m.grid = c.grid;
  m.atlas = "atlas.btsr";
  for (int p = 0; p < c.participants; ++p) {
    ParticipantEntry e;
    e.id = participant_id(p);
    e.activations = e.id + "_beta.btsr";
    e.coords = "coords.btsr";
    e.stimuli = model.participant_rows(p);
    write_matrix(mark(e.activations), model.activations(p, 0, n_vox));
    if (c.localizer) {
      const auto [sentences, nonwords] = model.localizer(p);
      e.localizer_sentences = e.id + "_localizer_sentences.btsr";
      e.localizer_nonwords = e.id + "_localizer_nonwords.btsr";
      write_tensor(mark(*e.localizer_sentences), from_vector(sentences));
      write_tensor(mark(*e.localizer_nonwords), from_vector(nonwords));
    }
    m.participants.push_back(std::move(e));
  }
  save_manifest(m, mark("manifest.json"));

  FeatureIndex index;
  for (const auto& f : model.features()) {
    const std::string name = f.model + "_L" + std::to_string(f.layer) + "_" + std::string(pooling_name(f.pooling)) + ".btsr";
    write_matrix(mark(fs::path("features") / name), f.x, DType::Float32);
    index.sets.push_back({f.model, f.layer, f.pooling, name});
  }
  save_feature_index(index, out_dir / "features");
  written.push_back(out_dir / "features" / "features.json");

  const GroundTruth truth = model.ground_truth();
  write_json(ground_truth_to_json(truth), mark("ground_truth.json"));
  auto volume = [&](const Eigen::VectorXd& values, const char* name) {
    MapVolume vol(c.grid, 0.0);
    vol.data = values;
    write_tensor(mark(name), from_volume(vol));
  };
  volume(truth.voxel_class.cast<double>(), "truth_class.btsr");
  volume(truth.voxel_profile.cast<double>(), "truth_profile.btsr");
  volume(truth.expected_c, "truth_expected_c.btsr");
  volume(truth.encodable_fraction, "truth_encodable_fraction.btsr");
  volume(truth.selectivity, "truth_selectivity.btsr");
  return written;
}

// ---------------------------------------------------------------------------
// Standalone fixtures

PlantedLinear planted_linear_targets(Eigen::Index n, Eigen::Index d, Eigen::Index targets, double rho, std::uint64_t seed)
{
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("planted_linear_targets: rho must lie in [0, 1]");
  Rng rng(stream(seed, {kPlanted}));
  PlantedLinear out;
  out.x = normals(rng, n, d);
  out.y.resize(n, targets);
  for (Eigen::Index t = 0; t < targets; ++t) {
    const Eigen::VectorXd w = unit_vector(rng, d);
    const Eigen::VectorXd signal = out.x * w;
    for (Eigen::Index i = 0; i < n; ++i) out.y(i, t) = rho * signal(i) + std::sqrt(1.0 - rho * rho) * rng.normal();
  }
  return out;
}

Eigen::MatrixXd shared_signal_participants(Eigen::Index n, int participants, double sigma_s, double sigma_n,
                                           std::uint64_t seed)
{
  Rng rng(stream(seed, {kShared}));
  Eigen::VectorXd signal(n);
  for (Eigen::Index i = 0; i < n; ++i) signal(i) = sigma_s * rng.normal();
  Eigen::MatrixXd out(n, participants);
  for (int p = 0; p < participants; ++p) {
    for (Eigen::Index i = 0; i < n; ++i) out(i, p) = signal(i) + sigma_n * rng.normal();
  }
  return out;
}

}  // namespace align
