#include "align/ceiling.hpp"
#include "align/consistency.hpp"
#include "align/encoding.hpp"
#include "align/pipeline.hpp"
#include "align/rng.hpp"
#include "align/roi.hpp"
#include "align/rsa.hpp"
#include "artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>

namespace align {

namespace fs = std::filesystem;
using nlohmann::json;
using detail::CsvWriter;
using detail::fmt;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream tags local to the pipeline stages.
constexpr std::uint64_t kConsistencyStream = 0xC0;

std::string join_violations(const ValidationReport& rep, std::size_t limit = 10)
{
  std::string s;
  for (std::size_t i = 0; i < rep.violations.size() && i < limit; ++i) s += (i ? "; " : "") + rep.violations[i];
  if (rep.violations.size() > limit) s += "; ... (" + std::to_string(rep.violations.size()) + " in total)";
  return s;
}

Manifest checked_manifest(const fs::path& path)
{
  Manifest m = load_manifest(path);
  const ValidationReport rep = validate_dataset(m);
  if (!rep.ok()) throw std::runtime_error("dataset fails validation: " + join_violations(rep));
  return m;
}

FeatureIndex checked_features(const Manifest& m, const fs::path& dir)
{
  FeatureIndex index = load_feature_index(dir);
  const ValidationReport rep = validate_features(m, index);
  if (!rep.ok()) throw std::runtime_error("features fail validation: " + join_violations(rep));
  if (index.sets.empty()) throw std::runtime_error("feature directory lists no feature sets");
  return index;
}

LabelVolume checked_atlas(const fs::path& path, GridDims grid)
{
  LabelVolume atlas = to_label_volume(read_tensor(path));
  const ValidationReport rep = validate_atlas(atlas);
  if (!rep.ok()) throw std::runtime_error("atlas fails validation: " + join_violations(rep));
  if (!(atlas.dims == grid)) throw std::runtime_error("atlas grid differs from the manifest grid");
  return atlas;
}

void require_file(const fs::path& p, const char* what)
{
  if (!fs::is_regular_file(p)) throw std::runtime_error(std::string(what) + " not found: " + p.string());
}

fs::path out_dir_of(const fs::path& out_file)
{
  const fs::path parent = out_file.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

std::string participant_name(const Manifest& m, std::size_t i) { return m.participants[i].id; }

/// Column lists of a participant's voxels grouped by a grid labeling; labels
/// outside [0, groups) are ignored.
std::vector<std::vector<Eigen::Index>> group_columns(const ParticipantData& p, const std::vector<int>& label_of_voxel,
                                                     std::size_t groups)
{
  std::vector<std::vector<Eigen::Index>> cols(groups);
  for (Eigen::Index c = 0; c < p.voxel_count(); ++c) {
    const int g = label_of_voxel[static_cast<std::size_t>(p.voxel_index[static_cast<std::size_t>(c)])];
    if (g >= 0 && static_cast<std::size_t>(g) < groups) cols[static_cast<std::size_t>(g)].push_back(c);
  }
  return cols;
}

/// Mean over the columns of each group; empty groups yield NaN columns.
Eigen::MatrixXd group_means(const Eigen::Ref<const Eigen::MatrixXd>& m, const std::vector<std::vector<Eigen::Index>>& groups)
{
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto gi = static_cast<Eigen::Index>(g);
    if (groups[g].empty()) {
      out.col(gi).setConstant(kNaN);
      continue;
    }
    out.col(gi).setZero();
    for (auto c : groups[g]) out.col(gi) += m.col(c);
    out.col(gi) /= static_cast<double>(groups[g].size());
  }
  return out;
}

Eigen::MatrixXd take_cols(const Eigen::Ref<const Eigen::MatrixXd>& m, std::span<const Eigen::Index> cols)
{
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(cols[i]);
  return out;
}

std::vector<Stimulus> take_stimuli(std::span<const Stimulus> s, std::span<const Eigen::Index> rows)
{
  std::vector<Stimulus> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(s[static_cast<std::size_t>(r)]);
  return out;
}

/// Rows of the given paradigm, with word clouds collapsed per concept.
Eigen::MatrixXd paradigm_view(const Eigen::Ref<const Eigen::MatrixXd>& values, std::span<const Stimulus> stimuli,
                              std::span<const Eigen::Index> rows, Paradigm p)
{
  Eigen::MatrixXd v = take_rows(values, rows);
  if (p != Paradigm::WordCloud) return v;
  const auto st = take_stimuli(stimuli, rows);
  return word_cloud_collapse(v, st).values;
}

/// Flat grid index -> ROI position in `rois`, or -1.
std::vector<int> roi_labels(const std::vector<RoiDefinition>& rois, GridDims grid)
{
  std::vector<int> label(static_cast<std::size_t>(grid.size()), -1);
  for (std::size_t r = 0; r < rois.size(); ++r)
    for (auto v : rois[r].voxels) label[static_cast<std::size_t>(v)] = static_cast<int>(r);
  return label;
}

std::string config_label(const FeatureSet& f) { return f.model + " layer " + std::to_string(f.layer) + " " + std::string(pooling_name(f.pooling)); }

json cv_parameters(const CvOptions& cv)
{
  return {{"folds", cv.folds},
          {"fit_intercept", cv.fit_intercept},
          {"alpha_grid", {{"count", cv.grid.size()}, {"min", cv.grid.front()}, {"max", cv.grid.back()}}}};
}

}  // namespace

// ---------------------------------------------------------------------------

void stage_synth(const SynthConfig& config, const fs::path& out_dir, const StageContext& ctx)
{
  detail::guarded("synth", out_dir, [&] {
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);
    validate_synth_config(config);
    log("generating " + std::to_string(config.participants) + " participants on a " + std::to_string(config.grid.nx) +
        "x" + std::to_string(config.grid.ny) + "x" + std::to_string(config.grid.nz) + " grid, seed " +
        std::to_string(config.seed));
    detail::Provenance prov;
    prov.stage = "synth";
    prov.seed = config.seed;
    prov.parameters = synth_config_to_json(config);
    prov.outputs = generate(config, out_dir);
    log("wrote " + std::to_string(prov.outputs.size()) + " files");
    (void)ctx;
    prov.write(out_dir);
  });
}

// ---------------------------------------------------------------------------

void stage_consistency(const fs::path& manifest_path, const fs::path& out_dir, const ConsistencyParams& params,
                       const StageContext& ctx)
{
  detail::guarded("consistency", out_dir, [&] {
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);
    require_file(manifest_path, "manifest");
    const Manifest m = checked_manifest(manifest_path);
    const SplitAssignment split = split_half_partition(m);
    const int cc = m.concept_count();

    detail::Provenance prov;
    prov.stage = "consistency";
    prov.seed = ctx.seed;
    prov.parameters = {{"permutations", params.permutations}, {"alpha", params.alpha}};
    prov.inputs = detail::dataset_files(manifest_path, m);

    std::vector<MaskVolume> masks;
    json per_participant = json::array();
    for (std::size_t i = 0; i < m.participants.size(); ++i) {
      const ParticipantData p = load_participant(m, i);
      const Eigen::VectorXd c = voxel_consistency(concept_means(p.beta, p.stimuli, cc));
      SignificanceOptions opts;
      opts.n_permutations = params.permutations;
      opts.alpha = params.alpha;
      opts.seed = derive_seed(ctx.seed, {kConsistencyStream, i});
      const SignificanceResult sig = significance_mask(p.beta, p.stimuli, cc, split, opts);

      Eigen::VectorXd c_out = c;
      std::int64_t excluded_full = 0;
      for (Eigen::Index v = 0; v < c_out.size(); ++v) {
        if (!std::isfinite(c_out(v))) {
          c_out(v) = 0.0;
          ++excluded_full;
        }
      }
      Eigen::VectorXd mask_values(p.voxel_count());
      std::int64_t significant = 0, sig_a = 0, sig_b = 0;
      for (Eigen::Index v = 0; v < p.voxel_count(); ++v) {
        mask_values(v) = sig.mask[static_cast<std::size_t>(v)];
        significant += sig.mask[static_cast<std::size_t>(v)];
        sig_a += sig.p_a(v) < params.alpha;
        sig_b += sig.p_b(v) < params.alpha;
      }

      const std::string id = participant_name(m, i);
      auto emit = [&](const Eigen::VectorXd& values, double fill, const std::string& suffix) {
        const fs::path f = out_dir / (id + suffix);
        write_tensor(f, from_volume(scatter_to_grid(p, m.grid, values, fill)));
        prov.outputs.push_back(f);
      };
      emit(c_out, 0.0, "_c.btsr");
      emit(sig.p_a, 1.0, "_p_a.btsr");
      emit(sig.p_b, 1.0, "_p_b.btsr");
      emit(mask_values, 0.0, "_mask.btsr");

      const MapVolume mv = scatter_to_grid(p, m.grid, mask_values, 0.0);
      MaskVolume mask(m.grid, 0);
      mask.data = (mv.data.array() != 0.0).cast<std::uint8_t>().matrix();
      masks.push_back(std::move(mask));

      const double n = static_cast<double>(p.voxel_count());
      per_participant.push_back({{"participant", id},
                                 {"voxels", p.voxel_count()},
                                 {"excluded", excluded_full},
                                 {"excluded_split", sig.excluded.size()},
                                 {"significant", significant},
                                 {"significant_fraction", significant / n},
                                 {"half_a_fraction", sig_a / n},
                                 {"half_b_fraction", sig_b / n}});
      log(id + ": " + std::to_string(significant) + " of " + std::to_string(p.voxel_count()) +
          " voxels significant, " + std::to_string(excluded_full) + " excluded");
    }

    const MapVolume prob = probabilistic_map(masks);
    const fs::path prob_path = out_dir / "probabilistic_map.btsr";
    write_tensor(prob_path, from_volume(prob));
    prov.outputs.push_back(prob_path);

    json half_a = json::array();
    for (int c = 0; c < cc; ++c) {
      for (Paradigm p : kParadigms) {
        std::vector<int> reps;
        for (int r = 0; r < kMaxRepetitions; ++r)
          if ((split.mask(c, p) >> r) & 1U) reps.push_back(r);
        half_a.push_back({{"concept", c}, {"paradigm", std::string(code(p))}, {"repetitions", reps}});
      }
    }
    const fs::path split_path = out_dir / "split.json";
    detail::write_json({{"schema_version", 1}, {"half_a", std::move(half_a)}}, split_path);
    prov.outputs.push_back(split_path);

    const fs::path diag_path = out_dir / "diagnostics.json";
    detail::write_json({{"schema_version", 1},
                        {"permutations", params.permutations},
                        {"alpha", params.alpha},
                        {"participants", std::move(per_participant)}},
                       diag_path);
    prov.outputs.push_back(diag_path);
    prov.write(out_dir);
  });
}

// ---------------------------------------------------------------------------

void stage_rois(const fs::path& prob_map, const fs::path& atlas_path, const fs::path& out_file, const RoiParams& params,
                const StageContext& ctx)
{
  const fs::path out_dir = out_dir_of(out_file);
  detail::guarded("rois", out_dir, [&] {
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);
    require_file(prob_map, "probabilistic map");
    require_file(atlas_path, "atlas");
    const MapVolume map = to_map_volume(read_tensor(prob_map));
    const LabelVolume atlas = checked_atlas(atlas_path, map.dims);

    const RoiOptions opts{params.threshold, params.min_voxels};
    const AreaValues values = area_average(map, atlas);
    const std::vector<RoiDefinition> rois = select_rois(values, atlas, opts);
    save_rois(rois, opts, out_file);

    std::map<int, int> roi_of_area;
    for (const auto& r : rois)
      for (int a : r.areas) roi_of_area[a] = r.id;
    const auto counts = area_voxel_counts(atlas);
    const fs::path table = out_dir / "area_values.csv";
    {
      CsvWriter csv(table, {"area", "voxels", "value", "above_threshold", "roi"});
      for (const auto& [area, v] : values) {
        const auto it = roi_of_area.find(area);
        csv.row({fmt(area), fmt(counts.at(area)), fmt(v), v >= params.threshold - 1e-12 ? "1" : "0",
                 it == roi_of_area.end() ? "" : fmt(it->second)});
      }
    }
    for (const auto& r : rois) {
      std::string areas;
      for (int a : r.areas) areas += (areas.empty() ? "" : " ") + std::to_string(a);
      log("roi " + std::to_string(r.id) + ": areas " + areas + ", " + std::to_string(r.voxel_count) + " voxels");
    }
    if (rois.empty()) log("no component passes the size filter");

    detail::Provenance prov;
    prov.stage = "rois";
    prov.seed = ctx.seed;
    prov.parameters = {{"threshold", params.threshold}, {"min_voxels", params.min_voxels}};
    prov.inputs = {prob_map, atlas_path};
    prov.outputs = {out_file, table};
    prov.write(out_dir);
  });
}

// ---------------------------------------------------------------------------

namespace {

struct Selected {
  std::size_t set = 0;
  double r = 0.0;
};

void emit_predictivity(CsvWriter& csv, const std::string& participant, int roi, Paradigm p, const FeatureSet& f, int bc,
                       int bl, const PredictivityResult* res)
{
  const std::vector<std::string> head{participant, fmt(roi), std::string(code(p)), f.model, fmt(f.layer),
                                      std::string(pooling_name(f.pooling)), fmt(bc), fmt(bl)};
  auto row = [&](const std::string& fold, const std::string& alpha, const std::string& r) {
    auto fields = head;
    fields.push_back(fold);
    fields.push_back(alpha);
    fields.push_back(r);
    csv.row(fields);
  };
  if (res == nullptr) {
    row("mean", "", "");
    return;
  }
  for (std::size_t k = 0; k < res->fold_r.size(); ++k) row(fmt(static_cast<int>(k + 1)), fmt(res->fold_alpha[k]), fmt(res->fold_r[k]));
  row("mean", "", fmt(res->r));
}

}  // namespace

void stage_encode(const fs::path& manifest_path, const fs::path& features_dir, const fs::path& rois_path,
                  const fs::path& consistency_dir, const fs::path& out_dir, const EncodeParams& params,
                  const StageContext& ctx)
{
  detail::guarded("encode", out_dir, [&] {
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);
    require_file(manifest_path, "manifest");
    require_file(rois_path, "roi file");
    if (!fs::is_directory(features_dir)) throw std::runtime_error("feature directory not found: " + features_dir.string());
    const Manifest m = checked_manifest(manifest_path);
    const FeatureIndex index = checked_features(m, features_dir);
    std::vector<FeatureSet> sets;
    for (std::size_t i = 0; i < index.sets.size(); ++i) sets.push_back(load_feature_set(index, i));
    const fs::path atlas_path = m.resolve(m.atlas);
    const LabelVolume atlas = checked_atlas(atlas_path, m.grid);
    const std::vector<RoiDefinition> rois = load_rois(rois_path, atlas);

    detail::Provenance prov;
    prov.stage = "encode";
    prov.seed = ctx.seed;
    prov.inputs = detail::dataset_files(manifest_path, m);
    for (const auto& f : detail::feature_files(index)) prov.inputs.push_back(f);
    prov.inputs.push_back(rois_path);

    CvOptions cv;
    cv.folds = params.folds;
    cv.seed = ctx.seed;
    json paradigm_names = json::array();
    for (Paradigm p : params.paradigms) paradigm_names.push_back(std::string(code(p)));
    prov.parameters = cv_parameters(cv);
    prov.parameters["paradigms"] = paradigm_names;

    // Targets: every ROI, or the whole atlas when none survived (reported as ROI 0).
    std::vector<int> target_ids;
    std::vector<int> target_of_voxel;
    if (rois.empty()) {
      target_ids = {0};
      target_of_voxel.assign(static_cast<std::size_t>(m.grid.size()), -1);
      for (Eigen::Index v = 0; v < atlas.data.size(); ++v)
        if (atlas.data(v) > 0) target_of_voxel[static_cast<std::size_t>(v)] = 0;
      log("no ROI available; selecting features on the whole-atlas mean (roi 0)");
    } else {
      for (const auto& r : rois) target_ids.push_back(r.id);
      target_of_voxel = roi_labels(rois, m.grid);
    }
    const std::size_t n_targets = target_ids.size();

    const auto area_counts = area_voxel_counts(atlas);
    std::vector<int> areas;
    for (const auto& [a, n] : area_counts) areas.push_back(a);
    std::vector<int> area_slot(static_cast<std::size_t>(m.grid.size()), -1);
    {
      std::map<int, int> slot;
      for (std::size_t k = 0; k < areas.size(); ++k) slot[areas[k]] = static_cast<int>(k);
      for (Eigen::Index v = 0; v < atlas.data.size(); ++v)
        if (atlas.data(v) > 0) area_slot[static_cast<std::size_t>(v)] = slot.at(atlas.data(v));
    }

    std::map<int, double> area_prob;
    if (!consistency_dir.empty()) {
      const fs::path pm = consistency_dir / "probabilistic_map.btsr";
      require_file(pm, "probabilistic map");
      prov.inputs.push_back(pm);
      area_prob = area_average(to_map_volume(read_tensor(pm)), atlas);
    }

    // Pass 1: participant-averaged target responses per manifest stimulus.
    const auto n_stim = static_cast<Eigen::Index>(m.stimuli.size());
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n_stim, static_cast<Eigen::Index>(n_targets));
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_stim, static_cast<Eigen::Index>(n_targets));
    for (std::size_t i = 0; i < m.participants.size(); ++i) {
      const ParticipantData p = load_participant(m, i);
      const auto groups = group_columns(p, target_of_voxel, n_targets);
      const Eigen::MatrixXd g = group_means(p.beta, groups);
      for (Eigen::Index k = 0; k < g.rows(); ++k) {
        const auto pos = p.stimulus_positions[static_cast<std::size_t>(k)];
        for (std::size_t t = 0; t < n_targets; ++t) {
          if (groups[t].empty()) continue;
          sums(pos, static_cast<Eigen::Index>(t)) += g(k, static_cast<Eigen::Index>(t));
          counts(pos, static_cast<Eigen::Index>(t)) += 1.0;
        }
      }
    }

    // Layer and pooling sweep per target and paradigm.
    std::vector<std::array<Selected, 3>> selected(n_targets);
    const fs::path sweep_path = out_dir / "sweep.csv";
    json selection = json::array();
    {
      CsvWriter csv(sweep_path, {"roi", "paradigm", "model", "layer", "pooling", "r", "selected"});
      for (std::size_t t = 0; t < n_targets; ++t) {
        for (Paradigm par : params.paradigms) {
          std::vector<Eigen::Index> pos;
          for (Eigen::Index s = 0; s < n_stim; ++s)
            if (m.stimuli[static_cast<std::size_t>(s)].paradigm == par && counts(s, static_cast<Eigen::Index>(t)) > 0) pos.push_back(s);
          if (pos.empty()) throw std::runtime_error("roi " + std::to_string(target_ids[t]) + " has no responses under " + std::string(code(par)));
          Eigen::MatrixXd y(static_cast<Eigen::Index>(pos.size()), 1);
          for (std::size_t k = 0; k < pos.size(); ++k)
            y(static_cast<Eigen::Index>(k), 0) = sums(pos[k], static_cast<Eigen::Index>(t)) / counts(pos[k], static_cast<Eigen::Index>(t));
          const auto st = take_stimuli(m.stimuli, pos);
          std::vector<Eigen::Index> all(pos.size());
          std::iota(all.begin(), all.end(), Eigen::Index{0});
          const Eigen::MatrixXd target = paradigm_view(y, st, all, par);
          std::vector<FeatureCandidate> cands;
          for (const auto& f : sets) cands.push_back({f.model, f.layer, f.pooling, paradigm_view(take_rows(f.x, pos), st, all, par)});
          const FeatureSweep sweep = select_best_feature_config(cands, target.col(0), cv);
          // Map the sweep's candidate back to its feature set.
          std::size_t best_set = 0;
          for (std::size_t s = 0; s < sets.size(); ++s) {
            const auto& e = sweep.entries[sweep.best];
            if (sets[s].model == e.model && sets[s].layer == e.layer && sets[s].pooling == e.pooling) best_set = s;
          }
          selected[t][static_cast<std::size_t>(index_of(par))] = {best_set, sweep.entries[sweep.best].r};
          for (std::size_t e = 0; e < sweep.entries.size(); ++e) {
            const auto& en = sweep.entries[e];
            csv.row({fmt(target_ids[t]), std::string(code(par)), en.model, fmt(en.layer), std::string(pooling_name(en.pooling)),
                     fmt(en.r), e == sweep.best ? "1" : "0"});
          }
          selection.push_back({{"roi", target_ids[t]},
                               {"paradigm", std::string(code(par))},
                               {"model", sets[best_set].model},
                               {"layer", sets[best_set].layer},
                               {"pooling", std::string(pooling_name(sets[best_set].pooling))},
                               {"r", sweep.entries[sweep.best].r}});
          log("roi " + std::to_string(target_ids[t]) + " " + std::string(code(par)) + ": selected " +
              config_label(sets[best_set]) + ", r = " + fmt(sweep.entries[sweep.best].r));
        }
      }
    }

    // Pass 2: per-participant predictivity at ROI, bin and area level.
    const fs::path pred_path = out_dir / "predictivity.csv";
    const fs::path bins_path = out_dir / "bin_counts.csv";
    const fs::path area_path = out_dir / "area_predictivity.csv";
    std::int64_t degenerate_folds = 0;
    {
      CsvWriter pred(pred_path, {"participant", "roi", "paradigm", "model", "layer", "pooling", "bC", "bL", "fold", "alpha", "r"});
      CsvWriter bins_csv(bins_path, {"participant", "roi", "bC", "bL", "voxels"});
      CsvWriter area_csv(area_path, {"participant", "area", "paradigm", "model", "layer", "pooling", "r", "mean_c", "prob_map"});
      for (std::size_t i = 0; i < m.participants.size(); ++i) {
        const ParticipantData p = load_participant(m, i);
        const std::string id = p.id;
        const Eigen::VectorXd c = voxel_consistency(concept_means(p.beta, p.stimuli, m.concept_count()));
        std::optional<Eigen::VectorXd> sel;
        if (p.localizer_sentences && p.localizer_nonwords) sel = language_selectivity(*p.localizer_sentences, *p.localizer_nonwords);
        else log(id + ": no localizer, bin tables skipped");

        const auto target_groups = group_columns(p, target_of_voxel, n_targets);
        const auto area_groups = group_columns(p, area_slot, areas.size());

        // Voxels eligible for binning, with their quartile bins.
        struct Binning {
          std::vector<Eigen::Index> cols;
          std::vector<int> bc, bl;
        };
        std::vector<std::optional<Binning>> binning(n_targets);
        if (sel && !rois.empty()) {
          for (std::size_t t = 0; t < n_targets; ++t) {
            Binning b;
            for (auto col : target_groups[t])
              if (std::isfinite(c(col))) b.cols.push_back(col);
            if (b.cols.size() < 4) {
              log(id + ": roi " + std::to_string(target_ids[t]) + " has fewer than four usable voxels, bins skipped");
              continue;
            }
            Eigen::VectorXd cv_vals(static_cast<Eigen::Index>(b.cols.size())), sv(static_cast<Eigen::Index>(b.cols.size()));
            for (std::size_t k = 0; k < b.cols.size(); ++k) {
              cv_vals(static_cast<Eigen::Index>(k)) = c(b.cols[k]);
              sv(static_cast<Eigen::Index>(k)) = (*sel)(b.cols[k]);
            }
            b.bc = quartile_bins(cv_vals);
            b.bl = quartile_bins(sv);
            std::array<std::array<int, 4>, 4> n{};
            for (std::size_t k = 0; k < b.cols.size(); ++k) ++n[static_cast<std::size_t>(b.bc[k] - 1)][static_cast<std::size_t>(b.bl[k] - 1)];
            for (int x = 0; x < 4; ++x)
              for (int y = 0; y < 4; ++y) bins_csv.row({id, fmt(target_ids[t]), fmt(x + 1), fmt(y + 1), fmt(n[x][y])});
            binning[t] = std::move(b);
          }
        }

        std::map<std::size_t, Eigen::MatrixXd> features_cache;
        auto participant_x = [&](std::size_t s) -> const Eigen::MatrixXd& {
          auto it = features_cache.find(s);
          if (it == features_cache.end()) it = features_cache.emplace(s, participant_features(sets[s], p)).first;
          return it->second;
        };

        for (Paradigm par : params.paradigms) {
          const std::vector<Eigen::Index> rows = paradigm_rows(p.stimuli, par);
          if (rows.empty()) throw std::runtime_error(id + " has no " + std::string(code(par)) + " rows");
          const Eigen::MatrixXd beta_p = take_rows(p.beta, rows);
          const auto st = take_stimuli(p.stimuli, rows);
          std::vector<Eigen::Index> all(rows.size());
          std::iota(all.begin(), all.end(), Eigen::Index{0});
          auto view = [&](const Eigen::MatrixXd& v) { return paradigm_view(v, st, all, par); };
          const Eigen::MatrixXd targets = view(group_means(beta_p, target_groups));

          for (std::size_t t = 0; t < n_targets; ++t) {
            if (target_groups[t].empty()) continue;
            const std::size_t s = selected[t][static_cast<std::size_t>(index_of(par))].set;
            const Eigen::MatrixXd x = paradigm_view(participant_x(s), p.stimuli, rows, par);
            const auto res = cv_predictivity(x, targets.col(static_cast<Eigen::Index>(t)), cv).front();
            degenerate_folds += std::count(res.fold_degenerate.begin(), res.fold_degenerate.end(), true);
            emit_predictivity(pred, id, target_ids[t], par, sets[s], 0, 0, &res);

            if (!binning[t]) continue;
            const Binning& b = *binning[t];
            const BinTable table = binned_predictivity(x, view(take_cols(beta_p, b.cols)), b.bc, b.bl, cv);
            for (int x_bin = 0; x_bin < 4; ++x_bin) {
              for (int y_bin = 0; y_bin < 4; ++y_bin) {
                const auto& cell = table.cells[static_cast<std::size_t>(x_bin)][static_cast<std::size_t>(y_bin)];
                if (cell) degenerate_folds += std::count(cell->fold_degenerate.begin(), cell->fold_degenerate.end(), true);
                emit_predictivity(pred, id, target_ids[t], par, sets[s], x_bin + 1, y_bin + 1, cell ? &*cell : nullptr);
              }
            }
          }

          // Area-level predictivity with the configuration chosen for the largest ROI.
          const std::size_t s = selected.front()[static_cast<std::size_t>(index_of(par))].set;
          const Eigen::MatrixXd x = paradigm_view(participant_x(s), p.stimuli, rows, par);
          const Eigen::MatrixXd area_targets = view(group_means(beta_p, area_groups));
          std::vector<Eigen::Index> present;
          for (std::size_t a = 0; a < areas.size(); ++a)
            if (!area_groups[a].empty()) present.push_back(static_cast<Eigen::Index>(a));
          const auto res = cv_predictivity(x, take_cols(area_targets, present), cv);
          for (std::size_t k = 0; k < present.size(); ++k) {
            const auto a = static_cast<std::size_t>(present[k]);
            double sum = 0.0;
            int n = 0;
            for (auto col : area_groups[a])
              if (std::isfinite(c(col))) {
                sum += c(col);
                ++n;
              }
            const auto prob = area_prob.find(areas[a]);
            degenerate_folds += std::count(res[k].fold_degenerate.begin(), res[k].fold_degenerate.end(), true);
            area_csv.row({id, fmt(areas[a]), std::string(code(par)), sets[s].model, fmt(sets[s].layer),
                          std::string(pooling_name(sets[s].pooling)), fmt(res[k].r), n ? fmt(sum / n) : "",
                          prob == area_prob.end() ? "" : fmt(prob->second)});
          }
        }
        log(id + ": done");
      }
    }
    if (degenerate_folds > 0) log(std::to_string(degenerate_folds) + " folds without variance recorded as r = 0");

    const fs::path selection_path = out_dir / "selection.json";
    detail::write_json({{"schema_version", 1}, {"selected", std::move(selection)}}, selection_path);
    prov.outputs = {sweep_path, pred_path, bins_path, area_path, selection_path};
    prov.write(out_dir);
  });
}

}  // namespace align

// ---------------------------------------------------------------------------

namespace align {

void stage_rsa(const fs::path& manifest_path, const fs::path& features_dir, const fs::path& rois_path,
               const fs::path& consistency_dir, const fs::path& out_file, const RsaParams& params,
               const StageContext& ctx)
{
  const fs::path out_dir = out_dir_of(out_file);
  detail::guarded("rsa", out_dir, [&] {
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);
    require_file(manifest_path, "manifest");
    require_file(rois_path, "roi file");
    if (!fs::is_directory(features_dir)) throw std::runtime_error("feature directory not found: " + features_dir.string());
    const Manifest m = checked_manifest(manifest_path);
    const FeatureIndex index = checked_features(m, features_dir);
    std::vector<FeatureSet> sets;
    for (std::size_t i = 0; i < index.sets.size(); ++i) sets.push_back(load_feature_set(index, i));
    const LabelVolume atlas = checked_atlas(m.resolve(m.atlas), m.grid);
    const std::vector<RoiDefinition> rois = load_rois(rois_path, atlas);
    const int cc = m.concept_count();

    const bool needs_masks = std::find(params.restrictions.begin(), params.restrictions.end(),
                                       VoxelRestriction::Significant) != params.restrictions.end();
    if (needs_masks && consistency_dir.empty())
      throw std::runtime_error("the significant-voxel restriction needs the consistency outputs");

    detail::Provenance prov;
    prov.stage = "rsa";
    prov.seed = ctx.seed;
    json conds = json::array(), restr = json::array();
    for (auto c : params.conditions) conds.push_back(std::string(condition_name(c)));
    for (auto r : params.restrictions) restr.push_back(std::string(restriction_name(r)));
    prov.parameters = {{"shuffles", params.shuffles}, {"conditions", conds}, {"restrictions", restr}};
    prov.inputs = detail::dataset_files(manifest_path, m);
    for (const auto& f : detail::feature_files(index)) prov.inputs.push_back(f);
    prov.inputs.push_back(rois_path);

    const std::size_t n_cond = params.conditions.size();
    std::vector<std::vector<Eigen::MatrixXd>> model_vectors(sets.size()), model_rdms(sets.size());
    for (std::size_t s = 0; s < sets.size(); ++s) {
      for (auto cond : params.conditions) {
        model_vectors[s].push_back(concept_vectors(sets[s].x, m.stimuli, cc, cond));
        model_rdms[s].push_back(rdm(model_vectors[s].back()));
      }
    }

    struct Accum {
      double rho = 0.0, mean = 0.0, sd = 0.0;
      int n = 0;
    };
    // Indexed [set][roi][condition][restriction].
    const std::size_t n_restr = params.restrictions.size();
    std::vector<Accum> accum(sets.size() * rois.size() * n_cond * n_restr);
    auto slot = [&](std::size_t s, std::size_t r, std::size_t c, std::size_t k) -> Accum& {
      return accum[((s * rois.size() + r) * n_cond + c) * n_restr + k];
    };

    const std::vector<int> label = roi_labels(rois, m.grid);
    const fs::path per_path = out_dir / "rsa_participants.csv";
    {
      CsvWriter per(per_path, {"participant", "model", "layer", "pooling", "roi", "condition", "restriction", "voxels",
                               "rho", "baseline_mean", "baseline_sd", "baseline_max"});
      for (std::size_t i = 0; i < m.participants.size(); ++i) {
        const ParticipantData p = load_participant(m, i);
        const auto groups = group_columns(p, label, rois.size());
        Eigen::VectorXd significant;
        if (needs_masks) {
          const fs::path mp = consistency_dir / (p.id + "_mask.btsr");
          require_file(mp, "significance mask");
          prov.inputs.push_back(mp);
          significant = gather_from_grid(p, to_map_volume(read_tensor(mp)));
        }
        for (std::size_t r = 0; r < rois.size(); ++r) {
          for (std::size_t k = 0; k < n_restr; ++k) {
            std::vector<Eigen::Index> cols;
            for (auto col : groups[r])
              if (params.restrictions[k] == VoxelRestriction::All || significant(col) != 0.0) cols.push_back(col);
            if (cols.size() < 2) {
              log(p.id + ": roi " + std::to_string(rois[r].id) + " has fewer than two " +
                  std::string(restriction_name(params.restrictions[k])) + " voxels, skipped");
              continue;
            }
            const Eigen::MatrixXd sub = take_cols(p.beta, cols);
            for (std::size_t c = 0; c < n_cond; ++c) {
              const Eigen::MatrixXd brain = concept_vectors(sub, p.stimuli, cc, params.conditions[c]);
              const Eigen::MatrixXd brain_rdm = rdm(brain);
              const std::uint64_t seed = derive_seed(ctx.seed, {tag::rsa_shuffle, i, r, c, k});
              for (std::size_t s = 0; s < sets.size(); ++s) {
                const double rho = rsa_score(model_rdms[s][c], brain_rdm);
                const BaselineDistribution base = shuffled_baseline(model_vectors[s][c], brain, params.shuffles, seed);
                Accum& a = slot(s, r, c, k);
                a.rho += rho;
                a.mean += base.mean;
                a.sd += base.sd;
                ++a.n;
                per.row({p.id, sets[s].model, fmt(sets[s].layer), std::string(pooling_name(sets[s].pooling)),
                         fmt(rois[r].id), std::string(condition_name(params.conditions[c])),
                         std::string(restriction_name(params.restrictions[k])), fmt(static_cast<std::int64_t>(cols.size())),
                         fmt(rho), fmt(base.mean), fmt(base.sd), fmt(base.max)});
              }
            }
          }
        }
        log(p.id + ": done");
      }
    }
    if (rois.empty()) log("no ROI available; rsa table is empty");

    {
      CsvWriter csv(out_file, {"model", "layer", "pooling", "roi", "condition", "restriction", "rho", "baseline_mean",
                               "baseline_sd"});
      for (std::size_t s = 0; s < sets.size(); ++s)
        for (std::size_t r = 0; r < rois.size(); ++r)
          for (std::size_t c = 0; c < n_cond; ++c)
            for (std::size_t k = 0; k < n_restr; ++k) {
              const Accum& a = slot(s, r, c, k);
              const double n = a.n;
              csv.row({sets[s].model, fmt(sets[s].layer), std::string(pooling_name(sets[s].pooling)), fmt(rois[r].id),
                       std::string(condition_name(params.conditions[c])),
                       std::string(restriction_name(params.restrictions[k])), a.n ? fmt(a.rho / n) : "",
                       a.n ? fmt(a.mean / n) : "", a.n ? fmt(a.sd / n) : ""});
            }
    }
    prov.outputs = {out_file, per_path};
    prov.write(out_dir);
  });
}

// ---------------------------------------------------------------------------

void stage_ceiling(const fs::path& manifest_path, const fs::path& atlas_path, const fs::path& area_predictivity,
                   const fs::path& out_file, const CeilingParams& params, const StageContext& ctx)
{
  const fs::path out_dir = out_dir_of(out_file);
  detail::guarded("ceiling", out_dir, [&] {
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);
    require_file(manifest_path, "manifest");
    require_file(atlas_path, "atlas");
    const Manifest m = checked_manifest(manifest_path);
    const LabelVolume atlas = checked_atlas(atlas_path, m.grid);
    const int cc = m.concept_count();

    detail::Provenance prov;
    prov.stage = "ceiling";
    prov.seed = ctx.seed;
    prov.parameters = {{"cutoff", params.cutoff}};
    prov.inputs = detail::dataset_files(manifest_path, m);
    if (atlas_path != m.resolve(m.atlas)) prov.inputs.push_back(atlas_path);

    std::vector<int> areas;
    for (const auto& [a, n] : area_voxel_counts(atlas)) areas.push_back(a);
    std::vector<int> area_slot(static_cast<std::size_t>(m.grid.size()), -1);
    {
      std::map<int, int> slot;
      for (std::size_t k = 0; k < areas.size(); ++k) slot[areas[k]] = static_cast<int>(k);
      for (Eigen::Index v = 0; v < atlas.data.size(); ++v)
        if (atlas.data(v) > 0) area_slot[static_cast<std::size_t>(v)] = slot.at(atlas.data(v));
    }

    // Area-mean responses per participant, keyed by manifest position; word
    // clouds averaged per concept.
    const std::size_t n_part = m.participants.size();
    const auto n_areas = static_cast<Eigen::Index>(areas.size());
    std::vector<Eigen::MatrixXd> stimulus_means(n_part);   // n_stimuli x areas, NaN rows when unseen
    std::vector<Eigen::MatrixXd> word_cloud_means(n_part); // concepts x areas
    for (std::size_t i = 0; i < n_part; ++i) {
      const ParticipantData p = load_participant(m, i);
      const Eigen::MatrixXd g = group_means(p.beta, group_columns(p, area_slot, areas.size()));
      Eigen::MatrixXd sm = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(m.stimuli.size()), n_areas, kNaN);
      Eigen::MatrixXd wc = Eigen::MatrixXd::Zero(cc, n_areas);
      Eigen::VectorXd wc_n = Eigen::VectorXd::Zero(cc);
      for (Eigen::Index k = 0; k < g.rows(); ++k) {
        const Stimulus& s = p.stimuli[static_cast<std::size_t>(k)];
        sm.row(p.stimulus_positions[static_cast<std::size_t>(k)]) = g.row(k);
        if (s.paradigm == Paradigm::WordCloud) {
          wc.row(s.concept_id) += g.row(k);
          wc_n(s.concept_id) += 1.0;
        }
      }
      for (int c = 0; c < cc; ++c) wc.row(c) = wc_n(c) > 0 ? Eigen::RowVectorXd(wc.row(c) / wc_n(c)) : Eigen::RowVectorXd::Constant(n_areas, kNaN);
      stimulus_means[i] = std::move(sm);
      word_cloud_means[i] = std::move(wc);
    }

    std::array<std::map<int, double>, 3> ceilings;
    {
      CsvWriter csv(out_file, {"area", "paradigm", "stimuli", "participants", "excluded", "ceiling"});
      for (Paradigm par : kParadigms) {
        for (Eigen::Index a = 0; a < n_areas; ++a) {
          std::vector<std::size_t> cols;
          for (std::size_t i = 0; i < n_part; ++i) {
            const Eigen::MatrixXd& src = par == Paradigm::WordCloud ? word_cloud_means[i] : stimulus_means[i];
            bool any = false;
            for (Eigen::Index r = 0; r < src.rows(); ++r) any = any || std::isfinite(src(r, a));
            if (any) cols.push_back(i);
          }
          // Rows every remaining participant has.
          std::vector<Eigen::Index> rows;
          const Eigen::Index n_rows = par == Paradigm::WordCloud ? cc : static_cast<Eigen::Index>(m.stimuli.size());
          for (Eigen::Index r = 0; r < n_rows; ++r) {
            if (par != Paradigm::WordCloud && m.stimuli[static_cast<std::size_t>(r)].paradigm != par) continue;
            bool all = !cols.empty();
            for (auto i : cols) {
              const Eigen::MatrixXd& src = par == Paradigm::WordCloud ? word_cloud_means[i] : stimulus_means[i];
              all = all && std::isfinite(src(r, a));
            }
            if (all) rows.push_back(r);
          }
          double ceiling = kNaN;
          std::size_t excluded = 0;
          if (cols.size() >= 2 && rows.size() >= 3) {
            Eigen::MatrixXd responses(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
            for (std::size_t j = 0; j < cols.size(); ++j) {
              const Eigen::MatrixXd& src = par == Paradigm::WordCloud ? word_cloud_means[cols[j]] : stimulus_means[cols[j]];
              for (std::size_t r = 0; r < rows.size(); ++r)
                responses(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = src(rows[r], a);
            }
            const CeilingEstimate est = noise_ceiling(responses);
            ceiling = est.ceiling;
            excluded = est.excluded.size();
          }
          if (std::isfinite(ceiling)) ceilings[static_cast<std::size_t>(index_of(par))][areas[static_cast<std::size_t>(a)]] = ceiling;
          csv.row({fmt(areas[static_cast<std::size_t>(a)]), std::string(code(par)), fmt(static_cast<std::int64_t>(rows.size())),
                   fmt(static_cast<std::int64_t>(cols.size())), fmt(static_cast<std::int64_t>(excluded)), fmt(ceiling)});
        }
      }
    }
    prov.outputs = {out_file};

    if (!area_predictivity.empty()) {
      require_file(area_predictivity, "area predictivity table");
      prov.inputs.push_back(area_predictivity);
      const detail::CsvTable t = detail::read_csv(area_predictivity);
      const auto ca = t.column("area"), cp = t.column("paradigm"), cr = t.column("r"), cm = t.column("mean_c");
      struct Sum {
        double r = 0.0, c = 0.0;
        int n = 0, nc = 0;
      };
      std::array<std::map<int, Sum>, 3> sums;
      for (const auto& row : t.rows) {
        const int area = static_cast<int>(detail::parse_number(row[ca]));
        Sum& s = sums[static_cast<std::size_t>(index_of(parse_paradigm(row[cp])))][area];
        const double r = detail::parse_number(row[cr]);
        const double c = detail::parse_number(row[cm]);
        if (std::isfinite(r)) {
          s.r += r;
          ++s.n;
        }
        if (std::isfinite(c)) {
          s.c += c;
          ++s.nc;
        }
      }
      const fs::path adj_path = out_dir / "adjusted.csv";
      json correlations = json::array();
      {
        CsvWriter csv(adj_path, {"area", "paradigm", "r", "mean_c", "ceiling", "adjusted", "reliable"});
        for (Paradigm par : kParadigms) {
          const auto pi = static_cast<std::size_t>(index_of(par));
          if (sums[pi].empty()) continue;
          std::map<int, double> pred;
          for (const auto& [area, s] : sums[pi]) pred[area] = s.n ? s.r / s.n : kNaN;
          const auto adjusted = ceiling_adjust(pred, ceilings[pi], params.cutoff);
          std::vector<double> raw_r, raw_c, adj_r, adj_c;
          for (const auto& [area, a] : adjusted) {
            const Sum& s = sums[pi].at(area);
            const double mc = s.nc ? s.c / s.nc : kNaN;
            csv.row({fmt(area), std::string(code(par)), fmt(a.r), fmt(mc), fmt(a.ceiling), fmt(a.adjusted),
                     a.reliable ? "1" : "0"});
            if (std::isfinite(mc) && std::isfinite(a.r)) {
              raw_r.push_back(a.r);
              raw_c.push_back(mc);
              if (a.reliable) {
                adj_r.push_back(a.adjusted);
                adj_c.push_back(mc);
              }
            }
          }
          auto corr = [](const std::vector<double>& x, const std::vector<double>& y) -> json {
            if (x.size() < 3) return nullptr;
            try {
              return area_predictivity_correlation(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())),
                                                   Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())));
            } catch (const std::exception&) {
              return nullptr;
            }
          };
          correlations.push_back({{"paradigm", std::string(code(par))},
                                  {"areas", raw_r.size()},
                                  {"reliable_areas", adj_r.size()},
                                  {"raw", corr(raw_r, raw_c)},
                                  {"adjusted", corr(adj_r, adj_c)}});
          log(std::string(code(par)) + ": " + std::to_string(adj_r.size()) + " of " + std::to_string(raw_r.size()) +
              " areas have a reliable ceiling");
        }
      }
      const fs::path diag = out_dir / "diagnostics.json";
      detail::write_json({{"schema_version", 1}, {"cutoff", params.cutoff}, {"consistency_correlation", correlations}}, diag);
      prov.outputs.push_back(adj_path);
      prov.outputs.push_back(diag);
    } else {
      log("no area predictivity table; adjustment skipped");
    }
    prov.write(out_dir);
  });
}

}  // namespace align
