// align: command-line front end for the analysis stages.
//
// Exit status: 0 success, 2 configuration error, 3 stage failure.

#include "align/manifest.hpp"
#include "align/pipeline.hpp"
#include "align/synth.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

std::vector<std::string> split_list(const std::vector<std::string>& items)
{
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::size_t start = 0;
    while (start <= item.size()) {
      const auto comma = item.find(',', start);
      const std::string part = item.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!part.empty()) out.push_back(part);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

int print_report(const align::ValidationReport& rep, const std::string& what)
{
  if (rep.ok()) {
    std::cout << what << ": ok\n";
    return 0;
  }
  for (const auto& v : rep.violations) std::cout << what << ": " << v << '\n';
  std::cout << what << ": " << rep.violations.size() << " violation(s)\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Model-brain alignment pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(align::kToolVersion));

  std::uint64_t seed = 42;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with ground truth");
  std::string synth_config;
  std::string synth_out;
  synth->add_option("--config", synth_config, "Synthetic config JSON (defaults to the built-in layout)")->check(CLI::ExistingFile);
  synth->add_option("--out-dir", synth_out, "Output directory")->required();
  synth->add_option("--seed", seed, "Seed, overriding the config's");

  // consistency
  auto* cons = app.add_subcommand("consistency", "Consistency maps, permutation tests and the probabilistic map");
  std::string manifest;
  std::string out_dir;
  align::ConsistencyParams cons_params;
  cons->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  cons->add_option("--permutations", cons_params.permutations, "Permutations per half")->capture_default_str()->check(CLI::PositiveNumber);
  cons->add_option("--alpha", cons_params.alpha, "Per-half significance level")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  cons->add_option("--seed", seed, "Master seed")->capture_default_str();
  cons->add_option("--out-dir", out_dir, "Output directory")->required();

  // rois
  auto* rois = app.add_subcommand("rois", "Threshold the probabilistic map and extract ROIs");
  std::string prob_map, atlas, out_file;
  align::RoiParams roi_params;
  rois->add_option("--prob-map", prob_map, "Probabilistic map tensor")->required()->check(CLI::ExistingFile);
  rois->add_option("--atlas", atlas, "Atlas tensor")->required()->check(CLI::ExistingFile);
  rois->add_option("--threshold", roi_params.threshold, "Area threshold")->capture_default_str();
  rois->add_option("--min-voxels", roi_params.min_voxels, "Components must be larger than this")->capture_default_str();
  rois->add_option("--out", out_file, "Output rois.json")->required();

  // encode
  auto* enc = app.add_subcommand("encode", "Ridge encoding with layer sweep, bin tables and area predictivity");
  std::string features, rois_file, consistency_dir;
  std::vector<std::string> paradigms{"s,p,wc"};
  align::EncodeParams enc_params;
  enc->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  enc->add_option("--features", features, "Feature directory")->required()->check(CLI::ExistingDirectory);
  enc->add_option("--rois", rois_file, "rois.json")->required()->check(CLI::ExistingFile);
  enc->add_option("--paradigms", paradigms, "Paradigms, comma separated")->capture_default_str();
  enc->add_option("--folds", enc_params.folds, "Cross-validation folds")->capture_default_str()->check(CLI::Range(2, 1000));
  enc->add_option("--seed", seed, "Master seed")->capture_default_str();
  enc->add_option("--consistency-dir", consistency_dir, "Consistency outputs, for probabilistic-map columns")->check(CLI::ExistingDirectory);
  enc->add_option("--out-dir", out_dir, "Output directory")->required();

  // rsa
  auto* rsa = app.add_subcommand("rsa", "Representational similarity with shuffled baselines");
  std::vector<std::string> conditions{"text+image"};
  std::vector<std::string> restrictions{"all"};
  align::RsaParams rsa_params;
  rsa->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  rsa->add_option("--features", features, "Feature directory")->required()->check(CLI::ExistingDirectory);
  rsa->add_option("--rois", rois_file, "rois.json")->required()->check(CLI::ExistingFile);
  rsa->add_option("--condition", conditions, "text-only and/or text+image")->capture_default_str();
  rsa->add_option("--restrict", restrictions, "all and/or significant")->capture_default_str();
  rsa->add_option("--shuffles", rsa_params.shuffles, "Baseline shuffles")->capture_default_str()->check(CLI::PositiveNumber);
  rsa->add_option("--seed", seed, "Master seed")->capture_default_str();
  rsa->add_option("--consistency-dir", consistency_dir, "Consistency outputs, needed for the significant restriction")->check(CLI::ExistingDirectory);
  rsa->add_option("--out", out_file, "Output rsa.csv")->required();

  // ceiling
  auto* ceil = app.add_subcommand("ceiling", "Noise ceilings per area and adjusted predictivity");
  std::string area_pred;
  align::CeilingParams ceil_params;
  ceil->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ceil->add_option("--atlas", atlas, "Atlas tensor")->required()->check(CLI::ExistingFile);
  ceil->add_option("--predictivity", area_pred, "area_predictivity.csv from encode")->check(CLI::ExistingFile);
  ceil->add_option("--cutoff", ceil_params.cutoff, "Ceilings at or below are unreliable")->capture_default_str();
  ceil->add_option("--out", out_file, "Output ceiling.csv")->required();

  // run
  auto* run = app.add_subcommand("run", "Run the configured stages");
  std::string run_config;
  run->add_option("--config", run_config, "Run config JSON")->required();

  // report
  auto* rep = app.add_subcommand("report", "Summary tables from a completed run");
  std::string run_dir;
  rep->add_option("--dir", run_dir, "Run output directory")->required()->check(CLI::ExistingDirectory);

  // validate
  auto* val = app.add_subcommand("validate", "Check a dataset, a feature directory or a run's provenance");
  std::string validate_run;
  val->add_option("--manifest", manifest, "Dataset manifest")->check(CLI::ExistingFile);
  val->add_option("--features", features, "Feature directory (needs --manifest)")->check(CLI::ExistingDirectory);
  val->add_option("--run", validate_run, "Run output directory")->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const align::StageContext ctx{seed};

  try {
    if (*synth) {
      align::SynthConfig config = synth_config.empty() ? align::default_synth_config() : align::load_synth_config(synth_config);
      if (synth->count("--seed") > 0) config.seed = seed;
      try {
        align::validate_synth_config(config);
      } catch (const std::exception& e) {
        throw align::ConfigError(e.what());
      }
      align::stage_synth(config, synth_out, {config.seed});
    } else if (*cons) {
      align::stage_consistency(manifest, out_dir, cons_params, ctx);
    } else if (*rois) {
      align::stage_rois(prob_map, atlas, out_file, roi_params, ctx);
    } else if (*enc) {
      enc_params.paradigms.clear();
      try {
        for (const auto& p : split_list(paradigms)) enc_params.paradigms.push_back(align::parse_paradigm(p));
      } catch (const std::exception& e) {
        throw align::ConfigError(e.what());
      }
      if (enc_params.paradigms.empty()) throw align::ConfigError("no paradigms given");
      align::stage_encode(manifest, features, rois_file, consistency_dir, out_dir, enc_params, ctx);
    } else if (*rsa) {
      rsa_params.conditions.clear();
      rsa_params.restrictions.clear();
      try {
        for (const auto& c : split_list(conditions)) rsa_params.conditions.push_back(align::parse_condition(c));
        for (const auto& r : split_list(restrictions)) rsa_params.restrictions.push_back(align::parse_restriction(r));
      } catch (const std::exception& e) {
        throw align::ConfigError(e.what());
      }
      if (rsa_params.conditions.empty() || rsa_params.restrictions.empty())
        throw align::ConfigError("need at least one condition and one restriction");
      for (auto r : rsa_params.restrictions)
        if (r == align::VoxelRestriction::Significant && consistency_dir.empty())
          throw align::ConfigError("--restrict significant needs --consistency-dir");
      align::stage_rsa(manifest, features, rois_file, consistency_dir, out_file, rsa_params, ctx);
    } else if (*ceil) {
      align::stage_ceiling(manifest, atlas, area_pred, out_file, ceil_params, ctx);
    } else if (*run) {
      const align::RunConfig config = align::load_run_config(run_config);
      align::run(config, std::cerr);
    } else if (*rep) {
      align::report(run_dir);
    } else if (*val) {
      if (manifest.empty() && validate_run.empty()) throw align::ConfigError("validate needs --manifest or --run");
      if (!features.empty() && manifest.empty()) throw align::ConfigError("--features needs --manifest");
      int status = 0;
      if (!manifest.empty()) {
        const align::Manifest m = align::load_manifest(manifest);
        status |= print_report(align::validate_dataset(m), "manifest");
        if (!features.empty()) status |= print_report(align::validate_features(m, align::load_feature_index(features)), "features");
      }
      if (!validate_run.empty()) status |= print_report(align::validate_provenance(validate_run), "provenance");
      return status == 0 ? 0 : kExitConfig;
    }
  } catch (const align::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const align::StageError& e) {
    std::cerr << e.what() << "\n  see " << e.log().string() << '\n';
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  }
  return 0;
}
