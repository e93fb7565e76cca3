#ifndef ALIGN_PIPELINE_HPP
#define ALIGN_PIPELINE_HPP

#include "align/manifest.hpp"
#include "align/rsa.hpp"
#include "align/synth.hpp"
#include "align/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace align {

inline constexpr const char* kToolVersion = "1.0.0";

/// Invalid run configuration; maps to exit status 2.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A stage failed; maps to exit status 3.
class StageError : public std::runtime_error {
public:
  StageError(std::string stage, const std::string& message, std::filesystem::path log)
      : std::runtime_error("stage '" + stage + "' failed: " + message), stage_(std::move(stage)), log_(std::move(log))
  {
  }
  const std::string& stage() const noexcept { return stage_; }
  const std::filesystem::path& log() const noexcept { return log_; }

private:
  std::string stage_;
  std::filesystem::path log_;
};

struct ConsistencyParams {
  int permutations = 1000;
  double alpha = 0.05;
};

struct RoiParams {
  double threshold = 1.0 / 17.0;
  std::int64_t min_voxels = 600;
};

struct EncodeParams {
  int folds = 5;
  std::vector<Paradigm> paradigms{Paradigm::Sentence, Paradigm::Picture, Paradigm::WordCloud};
};

struct RsaParams {
  int shuffles = 100;
  std::vector<RsaCondition> conditions{RsaCondition::TextOnly, RsaCondition::TextImage};
  std::vector<VoxelRestriction> restrictions{VoxelRestriction::All, VoxelRestriction::Significant};
};

struct CeilingParams {
  double cutoff = 0.05;
};

/// The stages in dependency order.
const std::vector<std::string>& stage_order();

struct RunConfig {
  std::filesystem::path output_dir;
  std::vector<std::string> stages = stage_order();
  std::uint64_t seed = 42;
  std::optional<SynthConfig> synth;     ///< used by the synth stage
  std::filesystem::path manifest;       ///< defaults to the synth output
  std::filesystem::path features;       ///< defaults to the synth output
  ConsistencyParams consistency;
  RoiParams rois;
  EncodeParams encode;
  RsaParams rsa;
  CeilingParams ceiling;
};

/// Reads a run config; relative paths resolve against the config's directory.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

/// Throws ConfigError for unknown or misordered stages and for inputs that
/// are neither present nor produced by an earlier stage of the run.
void check_run_config(const RunConfig& config);

/// Runs the configured stages into config.output_dir. Progress lines go to `log`.
void run(const RunConfig& config, std::ostream& log);

// ---------------------------------------------------------------------------
// Individual stages. Each writes provenance.json and log.txt into its output
// directory; recorded paths are relative to that directory's parent.

struct StageContext {
  std::uint64_t seed = 42;
};

void stage_synth(const SynthConfig& config, const std::filesystem::path& out_dir, const StageContext& ctx);

void stage_consistency(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                       const ConsistencyParams& params, const StageContext& ctx);

/// Writes rois.json to `out_file`, with area_values.csv beside it.
void stage_rois(const std::filesystem::path& prob_map, const std::filesystem::path& atlas,
                const std::filesystem::path& out_file, const RoiParams& params, const StageContext& ctx);

/// `consistency_dir` may be empty; probabilistic-map columns are then left blank.
void stage_encode(const std::filesystem::path& manifest, const std::filesystem::path& features,
                  const std::filesystem::path& rois, const std::filesystem::path& consistency_dir,
                  const std::filesystem::path& out_dir, const EncodeParams& params, const StageContext& ctx);

/// The significant-voxel restriction needs `consistency_dir`.
void stage_rsa(const std::filesystem::path& manifest, const std::filesystem::path& features,
               const std::filesystem::path& rois, const std::filesystem::path& consistency_dir,
               const std::filesystem::path& out_file, const RsaParams& params, const StageContext& ctx);

/// `area_predictivity` may be empty; otherwise adjusted.csv is written beside `out_file`.
void stage_ceiling(const std::filesystem::path& manifest, const std::filesystem::path& atlas,
                   const std::filesystem::path& area_predictivity, const std::filesystem::path& out_file,
                   const CeilingParams& params, const StageContext& ctx);

/// Summary tables from a completed run directory, written to run_dir/report.
void report(const std::filesystem::path& run_dir);

/// Re-hashes every recorded output and checks that each input produced by an
/// upstream stage carries the hash that stage recorded.
ValidationReport validate_provenance(const std::filesystem::path& run_dir);

}  // namespace align

#endif  // ALIGN_PIPELINE_HPP
