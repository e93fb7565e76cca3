#ifndef ALIGN_ROI_HPP
#define ALIGN_ROI_HPP

#include "align/manifest.hpp"
#include "align/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <vector>

namespace align {

using AreaValues = std::map<int, double>;

/// Atlas labels must be 0 (background) or an area id in [1, 360].
ValidationReport validate_atlas(const LabelVolume& atlas);

std::map<int, std::int64_t> area_voxel_counts(const LabelVolume& atlas);

/// Mean map value over the voxels of every labeled area present in the atlas.
AreaValues area_average(const MapVolume& map, const LabelVolume& atlas);
/// Same, restricted to the listed areas; throws if one of them has no voxels.
AreaValues area_average(const MapVolume& map, const LabelVolume& atlas, std::span<const int> areas);

/// Two areas are adjacent iff some voxel of one is face-adjacent to a voxel of the other.
std::map<int, std::set<int>> area_adjacency(const LabelVolume& atlas);

struct RoiDefinition {
  int id = 0;
  std::vector<int> areas;             ///< ascending
  std::vector<std::int64_t> voxels;   ///< flat grid indices, ascending
  std::int64_t voxel_count = 0;
};

struct RoiOptions {
  double threshold = 1.0 / 17.0;  ///< areas at or above are kept
  std::int64_t min_voxels = 600;  ///< components must be strictly larger
};

/// Threshold areas, cluster the survivors into contiguous components, and keep
/// components larger than `min_voxels`. ROIs are ordered by descending size
/// (ties by smallest member area) and numbered from 1.
std::vector<RoiDefinition> select_rois(const AreaValues& area_values, const LabelVolume& atlas, const RoiOptions& options = {});

/// All voxels of the ROI's areas, optionally intersected with a mask.
std::vector<std::int64_t> roi_voxels(const RoiDefinition& roi, const LabelVolume& atlas, const MaskVolume* restrict_to = nullptr);

void save_rois(const std::vector<RoiDefinition>& rois, const RoiOptions& options, const std::filesystem::path& path);
/// Reads ROI membership and resolves voxels against the atlas.
std::vector<RoiDefinition> load_rois(const std::filesystem::path& path, const LabelVolume& atlas);

}  // namespace align

#endif  // ALIGN_ROI_HPP
