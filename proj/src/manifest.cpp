#include "align/manifest.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace align {
namespace {

using nlohmann::json;

std::runtime_error schema_error(const std::string& what) { return std::runtime_error("manifest: " + what); }

template <typename T>
T required(const json& j, const char* key)
{
  if (!j.contains(key)) throw schema_error(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw schema_error(std::string("field '") + key + "': " + e.what());
  }
}

json read_json_file(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const std::filesystem::path& path)
{
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

std::string shape_string(const std::vector<std::uint64_t>& dims)
{
  std::ostringstream s;
  s << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) s << (i ? ", " : "") << dims[i];
  s << ']';
  return s.str();
}

}  // namespace

std::unordered_map<int, int> Manifest::stimulus_positions() const
{
  std::unordered_map<int, int> pos;
  pos.reserve(stimuli.size());
  for (std::size_t i = 0; i < stimuli.size(); ++i) pos.emplace(stimuli[i].id, static_cast<int>(i));
  return pos;
}

Manifest manifest_from_json(const json& j, const std::filesystem::path& base_dir)
{
  Manifest m;
  m.base_dir = base_dir;
  m.schema_version = required<int>(j, "schema_version");
  if (m.schema_version != kManifestSchemaVersion)
    throw schema_error("unsupported schema_version " + std::to_string(m.schema_version));
  m.concepts = required<std::vector<std::string>>(j, "concepts");

  for (const auto& s : required<json>(j, "stimuli")) {
    Stimulus st;
    st.id = required<int>(s, "id");
    st.concept_id = required<int>(s, "concept");
    st.paradigm = parse_paradigm(required<std::string>(s, "paradigm"));
    st.repetition = required<int>(s, "repetition");
    m.stimuli.push_back(st);
  }

  const auto grid = required<std::vector<int>>(j, "grid");
  if (grid.size() != 3) throw schema_error("'grid' must have three entries");
  m.grid = {grid[0], grid[1], grid[2]};
  m.atlas = required<std::string>(j, "atlas");

  for (const auto& p : required<json>(j, "participants")) {
    ParticipantEntry e;
    e.id = required<std::string>(p, "id");
    e.activations = required<std::string>(p, "activations");
    e.coords = required<std::string>(p, "coords");
    e.stimuli = required<std::vector<int>>(p, "stimuli");
    if (p.contains("localizer")) {
      const auto& loc = p.at("localizer");
      e.localizer_sentences = required<std::string>(loc, "sentences");
      e.localizer_nonwords = required<std::string>(loc, "nonwords");
    }
    m.participants.push_back(std::move(e));
  }
  return m;
}

json manifest_to_json(const Manifest& m)
{
  json j;
  j["schema_version"] = m.schema_version;
  j["concepts"] = m.concepts;
  json stimuli = json::array();
  for (const auto& s : m.stimuli) {
    stimuli.push_back({{"id", s.id}, {"concept", s.concept_id}, {"paradigm", std::string(code(s.paradigm))},
                       {"repetition", s.repetition}});
  }
  j["stimuli"] = std::move(stimuli);
  j["grid"] = {m.grid.nx, m.grid.ny, m.grid.nz};
  j["atlas"] = m.atlas.generic_string();
  json participants = json::array();
  for (const auto& p : m.participants) {
    json e{{"id", p.id},
           {"activations", p.activations.generic_string()},
           {"coords", p.coords.generic_string()},
           {"stimuli", p.stimuli}};
    if (p.localizer_sentences && p.localizer_nonwords) {
      e["localizer"] = {{"sentences", p.localizer_sentences->generic_string()},
                        {"nonwords", p.localizer_nonwords->generic_string()}};
    }
    participants.push_back(std::move(e));
  }
  j["participants"] = std::move(participants);
  return j;
}

Manifest load_manifest(const std::filesystem::path& path)
{
  return manifest_from_json(read_json_file(path), path.parent_path());
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) { write_json_file(manifest_to_json(m), path); }

ValidationReport validate_manifest(const Manifest& m, std::span<const ParticipantShape> shapes)
{
  ValidationReport report;
  auto violation = [&](std::string s) { report.violations.push_back(std::move(s)); };

  if (m.concepts.size() != static_cast<std::size_t>(kConceptCount))
    violation("expected " + std::to_string(kConceptCount) + " concept labels, found " + std::to_string(m.concepts.size()));
  {
    std::set<std::string> seen;
    for (const auto& c : m.concepts) {
      if (!seen.insert(c).second) violation("duplicate concept label '" + c + "'");
    }
  }

  std::set<int> ids;
  std::set<std::tuple<int, int, int>> keys;
  for (const auto& s : m.stimuli) {
    const std::string where = "stimulus " + std::to_string(s.id);
    if (!ids.insert(s.id).second) violation(where + ": duplicate stimulus id");
    if (s.concept_id < 0 || s.concept_id >= kConceptCount || s.concept_id >= m.concept_count())
      violation(where + ": concept id " + std::to_string(s.concept_id) + " out of range [0, " +
                std::to_string(kConceptCount) + ")");
    if (s.repetition < 0 || s.repetition >= kMaxRepetitions)
      violation(where + ": repetition index " + std::to_string(s.repetition) + " out of range [0, " +
                std::to_string(kMaxRepetitions) + ")");
    if (!keys.emplace(s.concept_id, index_of(s.paradigm), s.repetition).second)
      violation(where + ": duplicates (concept, paradigm, repetition) of another stimulus");
  }

  if (m.grid.nx <= 0 || m.grid.ny <= 0 || m.grid.nz <= 0) violation("grid dimensions must be positive");

  if (shapes.size() != m.participants.size())
    violation("shape list covers " + std::to_string(shapes.size()) + " of " + std::to_string(m.participants.size()) +
              " participants");

  const auto positions = m.stimulus_positions();
  std::set<std::string> participant_ids;
  for (std::size_t pi = 0; pi < m.participants.size(); ++pi) {
    const auto& p = m.participants[pi];
    const std::string where = "participant " + p.id;
    if (!participant_ids.insert(p.id).second) violation(where + ": duplicate participant id");

    std::map<std::pair<int, int>, int> reps;
    std::set<int> row_ids;
    for (int id : p.stimuli) {
      if (!row_ids.insert(id).second) violation(where + ": stimulus " + std::to_string(id) + " appears twice");
      auto it = positions.find(id);
      if (it == positions.end()) {
        violation(where + ": row references unknown stimulus " + std::to_string(id));
        continue;
      }
      const auto& s = m.stimuli[static_cast<std::size_t>(it->second)];
      ++reps[{s.concept_id, index_of(s.paradigm)}];
    }
    for (int c = 0; c < m.concept_count(); ++c) {
      for (Paradigm pd : kParadigms) {
        auto it = reps.find({c, index_of(pd)});
        const int n = it == reps.end() ? 0 : it->second;
        if (n < kMinRepetitions || n > kMaxRepetitions)
          violation(where + ": concept " + std::to_string(c) + " paradigm " + std::string(code(pd)) + " has " +
                    std::to_string(n) + " repetitions (allowed " + std::to_string(kMinRepetitions) + "-" +
                    std::to_string(kMaxRepetitions) + ")");
      }
    }

    if (pi >= shapes.size()) continue;
    const auto& shape = shapes[pi];
    if (shape.activation_dims.size() != 2) {
      violation(where + ": activation tensor must be 2-D, got " + shape_string(shape.activation_dims));
      continue;
    }
    if (shape.activation_dims[0] != p.stimuli.size())
      violation(where + ": activation tensor has " + std::to_string(shape.activation_dims[0]) + " rows but " +
                std::to_string(p.stimuli.size()) + " stimuli are listed");
    if (shape.coord_dims.size() != 2 || shape.coord_dims[1] != 3 || shape.coord_dims[0] != shape.activation_dims[1])
      violation(where + ": coordinate tensor " + shape_string(shape.coord_dims) + " does not match " +
                std::to_string(shape.activation_dims[1]) + " voxels");
  }
  return report;
}

ValidationReport validate_dataset(const Manifest& m)
{
  std::vector<ParticipantShape> shapes;
  ValidationReport io_problems;
  for (const auto& p : m.participants) {
    ParticipantShape s;
    try {
      s.activation_dims = read_tensor_header(m.resolve(p.activations)).dims;
      s.coord_dims = read_tensor_header(m.resolve(p.coords)).dims;
    } catch (const TensorError& e) {
      io_problems.violations.push_back("participant " + p.id + ": " + e.what());
    }
    shapes.push_back(std::move(s));
  }
  ValidationReport report = validate_manifest(m, shapes);
  report.violations.insert(report.violations.begin(), io_problems.violations.begin(), io_problems.violations.end());

  try {
    const auto atlas = read_tensor_header(m.resolve(m.atlas));
    const std::vector<std::uint64_t> expect{static_cast<std::uint64_t>(m.grid.nx),
                                            static_cast<std::uint64_t>(m.grid.ny),
                                            static_cast<std::uint64_t>(m.grid.nz)};
    if (atlas.dims != expect)
      report.violations.push_back("atlas dims " + shape_string(atlas.dims) + " differ from grid " + shape_string(expect));
  } catch (const TensorError& e) {
    report.violations.push_back(std::string("atlas: ") + e.what());
  }

  // Coordinates must lie on the grid and be unique per participant.
  for (std::size_t pi = 0; pi < m.participants.size(); ++pi) {
    const auto& p = m.participants[pi];
    if (shapes[pi].coord_dims.size() != 2 || shapes[pi].coord_dims[1] != 3) continue;
    try {
      const Eigen::MatrixXd c = to_matrix(read_tensor(m.resolve(p.coords)));
      std::set<std::int64_t> seen;
      for (Eigen::Index v = 0; v < c.rows(); ++v) {
        const int x = static_cast<int>(c(v, 0)), y = static_cast<int>(c(v, 1)), z = static_cast<int>(c(v, 2));
        if (!m.grid.contains(x, y, z) || c(v, 0) != x || c(v, 1) != y || c(v, 2) != z) {
          report.violations.push_back("participant " + p.id + ": voxel " + std::to_string(v) + " lies off the grid");
          break;
        }
        if (!seen.insert(m.grid.index(x, y, z)).second) {
          report.violations.push_back("participant " + p.id + ": voxel " + std::to_string(v) + " repeats a grid position");
          break;
        }
      }
      if (p.localizer_sentences && p.localizer_nonwords) {
        for (const auto& path : {*p.localizer_sentences, *p.localizer_nonwords}) {
          const auto dims = read_tensor_header(m.resolve(path)).dims;
          if (dims.size() != 1 || dims[0] != static_cast<std::uint64_t>(c.rows()))
            report.violations.push_back("participant " + p.id + ": localizer " + path.string() + " has shape " +
                                        shape_string(dims));
        }
      }
    } catch (const TensorError& e) {
      report.violations.push_back("participant " + p.id + ": " + e.what());
    }
  }
  return report;
}

ParticipantData load_participant(const Manifest& m, std::size_t index)
{
  const auto& e = m.participants.at(index);
  ParticipantData p;
  p.id = e.id;
  p.beta = read_matrix(m.resolve(e.activations));
  if (static_cast<std::size_t>(p.beta.rows()) != e.stimuli.size())
    throw std::runtime_error("participant " + e.id + ": activation rows do not match stimulus list");

  const auto positions = m.stimulus_positions();
  for (int id : e.stimuli) {
    auto it = positions.find(id);
    if (it == positions.end()) throw std::runtime_error("participant " + e.id + ": unknown stimulus " + std::to_string(id));
    p.stimulus_positions.push_back(it->second);
    p.stimuli.push_back(m.stimuli[static_cast<std::size_t>(it->second)]);
  }

  const Eigen::MatrixXd coords = to_matrix(read_tensor(m.resolve(e.coords)));
  if (coords.rows() != p.beta.cols() || coords.cols() != 3)
    throw std::runtime_error("participant " + e.id + ": coordinate tensor does not match voxel count");
  p.voxel_index.resize(static_cast<std::size_t>(coords.rows()));
  for (Eigen::Index v = 0; v < coords.rows(); ++v) {
    const int x = static_cast<int>(coords(v, 0)), y = static_cast<int>(coords(v, 1)), z = static_cast<int>(coords(v, 2));
    if (!m.grid.contains(x, y, z)) throw std::runtime_error("participant " + e.id + ": voxel off grid");
    p.voxel_index[static_cast<std::size_t>(v)] = m.grid.index(x, y, z);
  }

  if (e.localizer_sentences && e.localizer_nonwords) {
    p.localizer_sentences = to_vector(read_tensor(m.resolve(*e.localizer_sentences)));
    p.localizer_nonwords = to_vector(read_tensor(m.resolve(*e.localizer_nonwords)));
    if (p.localizer_sentences->size() != p.beta.cols() || p.localizer_nonwords->size() != p.beta.cols())
      throw std::runtime_error("participant " + e.id + ": localizer length does not match voxel count");
  }
  return p;
}

MapVolume scatter_to_grid(const ParticipantData& p, GridDims grid, const Eigen::Ref<const Eigen::VectorXd>& values,
                          double fill)
{
  if (values.size() != static_cast<Eigen::Index>(p.voxel_index.size()))
    throw std::invalid_argument("scatter_to_grid: value count does not match voxel count");
  MapVolume v(grid, fill);
  for (std::size_t i = 0; i < p.voxel_index.size(); ++i) v.data(p.voxel_index[i]) = values(static_cast<Eigen::Index>(i));
  return v;
}

Eigen::VectorXd gather_from_grid(const ParticipantData& p, const MapVolume& volume)
{
  Eigen::VectorXd out(static_cast<Eigen::Index>(p.voxel_index.size()));
  for (std::size_t i = 0; i < p.voxel_index.size(); ++i) out(static_cast<Eigen::Index>(i)) = volume.data(p.voxel_index[i]);
  return out;
}

// ---------------------------------------------------------------------------

std::string_view pooling_name(Pooling p) noexcept
{
  switch (p) {
    case Pooling::Mean: return "mean";
    case Pooling::Last: return "last";
    case Pooling::Cls: return "cls";
    case Pooling::UnimodalMean: return "unimodal-mean";
    case Pooling::Multimodal: return "multimodal";
  }
  return "?";
}

Pooling parse_pooling(std::string_view s)
{
  for (Pooling p : {Pooling::Mean, Pooling::Last, Pooling::Cls, Pooling::UnimodalMean, Pooling::Multimodal}) {
    if (pooling_name(p) == s) return p;
  }
  throw std::invalid_argument("unknown pooling '" + std::string(s) + "'");
}

FeatureIndex load_feature_index(const std::filesystem::path& dir)
{
  const json j = read_json_file(dir / "features.json");
  FeatureIndex index;
  index.base_dir = dir;
  index.schema_version = required<int>(j, "schema_version");
  for (const auto& s : required<json>(j, "sets")) {
    FeatureSetEntry e;
    e.model = required<std::string>(s, "model");
    e.layer = required<int>(s, "layer");
    e.pooling = parse_pooling(required<std::string>(s, "pooling"));
    e.path = required<std::string>(s, "path");
    index.sets.push_back(std::move(e));
  }
  return index;
}

void save_feature_index(const FeatureIndex& index, const std::filesystem::path& dir)
{
  json sets = json::array();
  for (const auto& e : index.sets) {
    sets.push_back({{"model", e.model},
                    {"layer", e.layer},
                    {"pooling", std::string(pooling_name(e.pooling))},
                    {"path", e.path.generic_string()}});
  }
  write_json_file({{"schema_version", index.schema_version}, {"sets", std::move(sets)}}, dir / "features.json");
}

FeatureSet load_feature_set(const FeatureIndex& index, std::size_t i)
{
  const auto& e = index.sets.at(i);
  FeatureSet f;
  f.model = e.model;
  f.layer = e.layer;
  f.pooling = e.pooling;
  const auto path = e.path.is_absolute() ? e.path : index.base_dir / e.path;
  f.x = read_matrix(path);
  return f;
}

ValidationReport validate_features(const Manifest& m, const FeatureIndex& index)
{
  ValidationReport report;
  std::set<std::tuple<std::string, int, int>> seen;
  for (const auto& e : index.sets) {
    const std::string where = "feature set " + e.model + "/L" + std::to_string(e.layer) + "/" +
                              std::string(pooling_name(e.pooling));
    if (!seen.emplace(e.model, e.layer, static_cast<int>(e.pooling)).second) report.violations.push_back(where + ": duplicate entry");
    if (e.layer < 0) report.violations.push_back(where + ": negative layer index");
    try {
      const auto path = e.path.is_absolute() ? e.path : index.base_dir / e.path;
      const Tensor t = read_tensor(path);
      if (t.dims.size() != 2) {
        report.violations.push_back(where + ": tensor must be 2-D, got " + shape_string(t.dims));
      } else if (t.dims[0] != m.stimuli.size()) {
        report.violations.push_back(where + ": " + std::to_string(t.dims[0]) + " rows for " +
                                    std::to_string(m.stimuli.size()) + " manifest stimuli");
      }
    } catch (const TensorError& err) {
      report.violations.push_back(where + ": " + err.what());
    }
  }
  if (index.sets.empty()) report.violations.push_back("feature index lists no feature sets");
  return report;
}

}  // namespace align
