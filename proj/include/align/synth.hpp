#ifndef ALIGN_SYNTH_HPP
#define ALIGN_SYNTH_HPP

// Additive Gaussian generator. For concept c, paradigm W and stimulus s,
// voxel v of participant p responds
//
//   beta = a_v u_v.z_c + b_v w_v.zeta_s + e_v q_v(W, c) + sigma eps_pvs
//
// with latent concept vectors z, stimulus vectors zeta (shared by all word
// clouds of a concept), a paradigm-specific component q and participant
// noise eps. Unit vectors u, w and the q values mix an area-wide draw with a
// voxel draw according to the area's coherence. Layer features are
//
//   f = A_l (g [z; zeta] + sqrt(1 - g^2) chi) + sigma_f xi
//
// with orthonormal A_l, so every oracle below has a closed form.

#include "align/manifest.hpp"
#include "align/types.hpp"

#include <Eigen/Dense>
#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace align {

struct VoxelClass {
  double concept_weight = 0.0;    ///< a
  double stimulus_weight = 0.0;   ///< b
  double paradigm_weight = 0.0;   ///< e
};

struct AreaBox {
  int id = 0;
  std::array<int, 3> lo{};
  std::array<int, 3> size{};
};

struct AreaProfile {
  std::string name;
  std::vector<int> areas;
  std::vector<VoxelClass> classes;  ///< each voxel draws one uniformly
  double coherence = 0.9;
  double selectivity_mean = 0.0;
  double selectivity_sd = 0.1;
  bool planted_roi = false;
};

struct PoolingSpec {
  Pooling pooling = Pooling::Mean;
  double alignment_scale = 1.0;  ///< multiplies the layer alignment g
};

struct FeatureConfig {
  std::string model = "synth";
  int dim = 64;
  int latent_dim = 8;
  std::vector<double> layer_alignment{0.3, 1.0, 0.6};
  std::vector<PoolingSpec> poolings{{Pooling::Mean, 1.0}, {Pooling::Last, 0.7}};
  double noise = 0.5;
};

struct SynthConfig {
  GridDims grid{20, 20, 20};
  int participants = 5;
  int concepts = kConceptCount;
  int min_repetitions = kMinRepetitions;
  int max_repetitions = kMaxRepetitions;
  double partial_rate = 0.1;  ///< chance a participant misses some repetitions of a (concept, paradigm)
  double noise = 1.0;
  bool localizer = true;
  double localizer_noise = 0.1;
  double background_selectivity_mean = 0.0;
  double background_selectivity_sd = 0.1;
  std::vector<AreaBox> areas;
  std::vector<AreaProfile> profiles;
  FeatureConfig features;
  std::uint64_t seed = 42;
};

/// 20x20x20 layout with a planted 700-voxel cluster of two areas carrying four
/// consistency classes, a planted 400-voxel cluster, isolated graded areas and
/// null spacers.
SynthConfig default_synth_config();
/// Single null profile over a grid fully covered by one area.
SynthConfig null_synth_config(GridDims grid, int participants, std::uint64_t seed);

nlohmann::json synth_config_to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);
SynthConfig load_synth_config(const std::filesystem::path& path);

/// Throws std::invalid_argument naming the first violated invariant.
void validate_synth_config(const SynthConfig& c);

namespace oracle {

/// Expected consistency with R repetitions per paradigm averaged per concept.
double consistency(const VoxelClass& k, double noise, double repetitions);

/// Population correlation of the best linear readout of one layer's features.
/// Word clouds are collapsed to one row per concept over R repetitions.
double encoding_r(const VoxelClass& k, double noise, double alignment, double feature_noise, Paradigm p,
                  double repetitions);

/// Leave-one-out ceiling for P participants sharing a signal of variance
/// signal_var and carrying independent noise of variance noise_var.
double noise_ceiling(double signal_var, double noise_var, int participants);

}  // namespace oracle

struct PlantedCluster {
  std::vector<int> areas;
  std::int64_t voxel_count = 0;
  bool expected_roi = false;
};

struct AreaTruth {
  int area = 0;
  int profile = -1;
  std::int64_t voxel_count = 0;
  double expected_c = 0.0;                 ///< mean over the area's voxels
  std::array<double, 3> expected_r{};      ///< per paradigm, best feature set
};

struct GroundTruth {
  Eigen::VectorXi voxel_class;           ///< -1 for voxels without signal
  Eigen::VectorXi voxel_profile;         ///< -1 outside profiles
  Eigen::VectorXd expected_c;            ///< at the maximum repetition count
  Eigen::VectorXd encodable_fraction;    ///< (a^2 + b^2) / total response variance
  Eigen::VectorXd selectivity;           ///< true sentence minus non-word contrast
  std::vector<AreaTruth> areas;
  std::vector<PlantedCluster> clusters;
  int best_layer = 0;
  Pooling best_pooling = Pooling::Mean;
};

/// Shared parameters of the generator, drawn once per config.
class SynthModel {
public:
  explicit SynthModel(SynthConfig config);

  const SynthConfig& config() const noexcept { return config_; }
  const std::vector<Stimulus>& stimuli() const noexcept { return stimuli_; }
  const LabelVolume& atlas() const noexcept { return atlas_; }

  /// Manifest positions of the stimuli participant p saw, in manifest order.
  std::vector<int> participant_rows(int p) const;

  /// Activations of participant p for voxels [first, last); identical to the
  /// corresponding columns of a full-volume draw.
  Eigen::MatrixXd activations(int p, std::int64_t first, std::int64_t last) const;

  /// Localizer responses (sentences, non-words) over the full grid.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> localizer(int p) const;

  /// Features in manifest stimulus order for every configured (layer, pooling).
  std::vector<FeatureSet> features() const;

  GroundTruth ground_truth() const;

private:
  struct VoxelParams;
  struct AreaLatent {
    Eigen::VectorXd u, w, q;
  };
  VoxelParams voxel_params(std::int64_t v) const;

  SynthConfig config_;
  std::vector<Stimulus> stimuli_;
  LabelVolume atlas_;
  std::vector<int> area_profile_;         ///< profile index per area id, -1 for null areas
  std::vector<AreaLatent> area_latent_;   ///< indexed by area id
  Eigen::MatrixXd concept_latent_;        ///< concepts x k
  Eigen::MatrixXd stimulus_latent_;       ///< stimuli x k
  std::vector<std::uint8_t> seen_;        ///< participant x stimulus
};

/// Writes manifest.json, participant tensors, atlas.btsr, features/,
/// ground_truth.json and truth tensors into out_dir. Returns written files.
std::vector<std::filesystem::path> generate(const SynthConfig& config, const std::filesystem::path& out_dir);

nlohmann::json ground_truth_to_json(const GroundTruth& t);

// Standalone oracle fixtures for the acceptance checks.

struct PlantedLinear {
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;  ///< one column per target
};

/// x ~ N(0, I_d); each target is rho * x.w / |w| + sqrt(1 - rho^2) noise,
/// so its population correlation with the best linear predictor is rho.
PlantedLinear planted_linear_targets(Eigen::Index n, Eigen::Index d, Eigen::Index targets, double rho,
                                     std::uint64_t seed);

/// n x P matrix: shared signal of sd sigma_s plus independent noise of sd sigma_n per column.
Eigen::MatrixXd shared_signal_participants(Eigen::Index n, int participants, double sigma_s, double sigma_n,
                                           std::uint64_t seed);

}  // namespace align

#endif  // ALIGN_SYNTH_HPP
