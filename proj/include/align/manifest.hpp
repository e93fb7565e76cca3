#ifndef ALIGN_MANIFEST_HPP
#define ALIGN_MANIFEST_HPP

#include "align/io.hpp"
#include "align/types.hpp"

#include <Eigen/Dense>
#include "json.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace align {

inline constexpr int kManifestSchemaVersion = 1;

struct ParticipantEntry {
  std::string id;
  std::filesystem::path activations;  ///< [n_rows, n_voxels] float64
  std::filesystem::path coords;       ///< [n_voxels, 3] grid coordinates
  std::vector<int> stimuli;           ///< stimulus id of each activation row
  std::optional<std::filesystem::path> localizer_sentences;  ///< [n_voxels]
  std::optional<std::filesystem::path> localizer_nonwords;   ///< [n_voxels]
};

/// Dataset description. Relative paths resolve against `base_dir`, the
/// directory holding the manifest file.
struct Manifest {
  int schema_version = kManifestSchemaVersion;
  std::vector<std::string> concepts;
  std::vector<Stimulus> stimuli;
  GridDims grid;
  std::filesystem::path atlas;
  std::vector<ParticipantEntry> participants;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : base_dir / p; }

  /// Map from stimulus id to its position in `stimuli`.
  std::unordered_map<int, int> stimulus_positions() const;
  int concept_count() const noexcept { return static_cast<int>(concepts.size()); }
};

Manifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json manifest_to_json(const Manifest& m);
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const noexcept { return violations.empty(); }
};

/// Tensor shapes of one participant, as read from file headers.
struct ParticipantShape {
  std::vector<std::uint64_t> activation_dims;
  std::vector<std::uint64_t> coord_dims;
};

/// Checks every dataset invariant; all violations are collected, none thrown.
ValidationReport validate_manifest(const Manifest& m, std::span<const ParticipantShape> shapes);
/// Reads tensor headers from disk, then validates.
ValidationReport validate_dataset(const Manifest& m);

/// One participant's activations joined with the stimulus table.
struct ParticipantData {
  std::string id;
  Eigen::MatrixXd beta;                   ///< rows = stimuli seen, cols = voxels
  std::vector<Stimulus> stimuli;          ///< row metadata
  std::vector<int> stimulus_positions;    ///< manifest position of each row
  std::vector<std::int64_t> voxel_index;  ///< flat grid index of each voxel
  std::optional<Eigen::VectorXd> localizer_sentences;
  std::optional<Eigen::VectorXd> localizer_nonwords;

  Eigen::Index voxel_count() const noexcept { return beta.cols(); }
};

ParticipantData load_participant(const Manifest& m, std::size_t index);

/// Per-voxel values scattered onto the full grid; voxels not measured get `fill`.
MapVolume scatter_to_grid(const ParticipantData& p, GridDims grid, const Eigen::Ref<const Eigen::VectorXd>& values,
                          double fill);
/// Gathers grid values at the participant's voxels.
Eigen::VectorXd gather_from_grid(const ParticipantData& p, const MapVolume& volume);

// ---------------------------------------------------------------------------
// Feature sets

/// Token pooling schemes, listed in tie-break order.
enum class Pooling : std::uint8_t { Mean = 0, Last = 1, Cls = 2, UnimodalMean = 3, Multimodal = 4 };

std::string_view pooling_name(Pooling p) noexcept;
Pooling parse_pooling(std::string_view s);

struct FeatureSetEntry {
  std::string model;
  int layer = 0;
  Pooling pooling = Pooling::Mean;
  std::filesystem::path path;
};

/// Contents of `features.json` in a feature directory.
struct FeatureIndex {
  int schema_version = 1;
  std::vector<FeatureSetEntry> sets;
  std::filesystem::path base_dir;
};

FeatureIndex load_feature_index(const std::filesystem::path& dir);
void save_feature_index(const FeatureIndex& index, const std::filesystem::path& dir);

struct FeatureSet {
  std::string model;
  int layer = 0;
  Pooling pooling = Pooling::Mean;
  Eigen::MatrixXd x;  ///< rows follow manifest stimulus order
};

FeatureSet load_feature_set(const FeatureIndex& index, std::size_t i);

/// Checks that every feature tensor is 2-D, finite, and has one row per manifest stimulus.
ValidationReport validate_features(const Manifest& m, const FeatureIndex& index);

}  // namespace align

#endif  // ALIGN_MANIFEST_HPP
