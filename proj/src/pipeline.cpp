#include "align/pipeline.hpp"

#include "align/hash.hpp"
#include "artifacts.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace align {

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

std::string fmt(double v)
{
  if (std::isnan(v)) return {};
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(const fs::path& path, std::vector<std::string> header)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path), width_(header.size())
{
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields)
{
  if (fields.size() != width_) throw std::logic_error("csv row width mismatch in " + path_.string());
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i].find_first_of(",\"\n") != std::string::npos)
      throw std::invalid_argument("csv field contains a separator: '" + fields[i] + "'");
    if (i) out_ << ',';
    out_ << fields[i];
  }
  out_ << '\n';
  if (!out_) throw std::runtime_error("write failed: " + path_.string());
}

std::size_t CsvTable::column(std::string_view name) const
{
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("csv column '" + std::string(name) + "' missing");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const fs::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (first) {
      t.header = std::move(fields);
      first = false;
    } else {
      if (fields.size() != t.header.size()) throw std::runtime_error("ragged csv row in " + path.string());
      t.rows.push_back(std::move(fields));
    }
  }
  if (first) throw std::runtime_error("empty csv " + path.string());
  return t;
}

double parse_number(const std::string& field)
{
  if (field.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc{} || res.ptr != field.data() + field.size())
    throw std::runtime_error("not a number: '" + field + "'");
  return v;
}

void write_json(const json& j, const fs::path& path)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json read_json(const fs::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string relative_to(const fs::path& p, const fs::path& root)
{
  const fs::path a = fs::weakly_canonical(fs::absolute(p));
  const fs::path r = fs::weakly_canonical(fs::absolute(root));
  const fs::path rel = a.lexically_relative(r);
  return (rel.empty() ? a : rel).generic_string();
}

StageLog::StageLog(const fs::path& dir) : out_(dir / "log.txt", std::ios::binary | std::ios::trunc)
{
  if (!out_) throw std::runtime_error("cannot write " + (dir / "log.txt").string());
}

void StageLog::operator()(const std::string& line) { out_ << line << '\n' << std::flush; }

void Provenance::write(const fs::path& dir) const
{
  const fs::path root = fs::absolute(dir).lexically_normal().parent_path();
  auto records = [&](const std::vector<fs::path>& files) {
    json arr = json::array();
    for (const auto& f : files) {
      arr.push_back({{"path", relative_to(f, root)},
                     {"bytes", static_cast<std::uint64_t>(fs::file_size(f))},
                     {"sha256", sha256_file(f)}});
    }
    return arr;
  };
  json j{{"schema_version", 1},
         {"stage", stage},
         {"tool", "align"},
         {"version", kToolVersion},
         {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                       std::to_string(EIGEN_MINOR_VERSION)},
         {"seed", seed},
         {"parameters", parameters},
         {"root", relative_to(root, dir)},
         {"inputs", records(inputs)},
         {"outputs", records(outputs)}};
  write_json(j, dir / "provenance.json");
}

std::vector<fs::path> dataset_files(const fs::path& manifest_path, const Manifest& m)
{
  std::vector<fs::path> files{manifest_path, m.resolve(m.atlas)};
  std::set<fs::path> seen(files.begin(), files.end());
  auto add = [&](const fs::path& p) {
    const fs::path r = m.resolve(p);
    if (seen.insert(r).second) files.push_back(r);
  };
  for (const auto& e : m.participants) {
    add(e.activations);
    add(e.coords);
    if (e.localizer_sentences) add(*e.localizer_sentences);
    if (e.localizer_nonwords) add(*e.localizer_nonwords);
  }
  return files;
}

std::vector<fs::path> feature_files(const FeatureIndex& index)
{
  std::vector<fs::path> files{index.base_dir / "features.json"};
  for (const auto& s : index.sets) files.push_back(s.path.is_absolute() ? s.path : index.base_dir / s.path);
  return files;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run configuration

const std::vector<std::string>& stage_order()
{
  static const std::vector<std::string> order{"synth", "consistency", "rois", "encode", "rsa", "ceiling", "report"};
  return order;
}

namespace {

template <typename T>
T get_or(const json& obj, const char* key, T fallback)
{
  return obj.contains(key) ? obj.at(key).get<T>() : fallback;
}

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where)
{
  for (const auto& [k, v] : obj.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* known) { return k == known; }))
      throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

std::vector<std::string> string_list(const json& v)
{
  std::vector<std::string> out;
  if (v.is_string()) {
    std::stringstream ss(v.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
  } else {
    for (const auto& item : v) out.push_back(item.get<std::string>());
  }
  return out;
}

fs::path resolve_against(const json& v, const fs::path& base)
{
  const fs::path p = v.get<std::string>();
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

bool has_stage(const RunConfig& c, std::string_view s)
{
  return std::find(c.stages.begin(), c.stages.end(), s) != c.stages.end();
}

fs::path manifest_path(const RunConfig& c)
{
  return c.manifest.empty() ? c.output_dir / "synth" / "manifest.json" : c.manifest;
}

fs::path features_path(const RunConfig& c)
{
  return c.features.empty() ? c.output_dir / "synth" / "features" : c.features;
}

}  // namespace

RunConfig run_config_from_json(const json& j, const fs::path& base_dir)
{
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  reject_unknown(j, {"output_dir", "seed", "stages", "manifest", "features", "synth", "consistency", "rois", "encode",
                     "rsa", "ceiling"},
                 "run config");
  RunConfig c;
  try {
    if (!j.contains("output_dir")) throw ConfigError("run config needs 'output_dir'");
    c.output_dir = resolve_against(j.at("output_dir"), base_dir);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
    if (j.contains("stages")) c.stages = string_list(j.at("stages"));
    if (j.contains("manifest")) c.manifest = resolve_against(j.at("manifest"), base_dir);
    if (j.contains("features")) c.features = resolve_against(j.at("features"), base_dir);

    if (j.contains("synth")) {
      const json& s = j.at("synth");
      json body = s.is_string() ? detail::read_json(resolve_against(s, base_dir)) : s;
      const bool explicit_seed = body.contains("seed");
      c.synth = synth_config_from_json(body);
      if (!explicit_seed) c.synth->seed = c.seed;
    }
    if (j.contains("consistency")) {
      const json& s = j.at("consistency");
      reject_unknown(s, {"permutations", "alpha"}, "consistency");
      c.consistency.permutations = get_or(s, "permutations", c.consistency.permutations);
      c.consistency.alpha = get_or(s, "alpha", c.consistency.alpha);
    }
    if (j.contains("rois")) {
      const json& s = j.at("rois");
      reject_unknown(s, {"threshold", "min_voxels"}, "rois");
      c.rois.threshold = get_or(s, "threshold", c.rois.threshold);
      c.rois.min_voxels = get_or(s, "min_voxels", c.rois.min_voxels);
    }
    if (j.contains("encode")) {
      const json& s = j.at("encode");
      reject_unknown(s, {"folds", "paradigms"}, "encode");
      c.encode.folds = get_or(s, "folds", c.encode.folds);
      if (s.contains("paradigms")) {
        c.encode.paradigms.clear();
        for (const auto& p : string_list(s.at("paradigms"))) c.encode.paradigms.push_back(parse_paradigm(p));
      }
    }
    if (j.contains("rsa")) {
      const json& s = j.at("rsa");
      reject_unknown(s, {"shuffles", "conditions", "restrictions"}, "rsa");
      c.rsa.shuffles = get_or(s, "shuffles", c.rsa.shuffles);
      if (s.contains("conditions")) {
        c.rsa.conditions.clear();
        for (const auto& v : string_list(s.at("conditions"))) c.rsa.conditions.push_back(parse_condition(v));
      }
      if (s.contains("restrictions")) {
        c.rsa.restrictions.clear();
        for (const auto& v : string_list(s.at("restrictions"))) c.rsa.restrictions.push_back(parse_restriction(v));
      }
    }
    if (j.contains("ceiling")) {
      const json& s = j.at("ceiling");
      reject_unknown(s, {"cutoff"}, "ceiling");
      c.ceiling.cutoff = get_or(s, "cutoff", c.ceiling.cutoff);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read run config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

void check_run_config(const RunConfig& c)
{
  if (c.output_dir.empty()) throw ConfigError("output_dir is empty");
  if (c.stages.empty()) throw ConfigError("no stages to run");
  const auto& order = stage_order();
  std::ptrdiff_t last = -1;
  for (const auto& s : c.stages) {
    const auto it = std::find(order.begin(), order.end(), s);
    if (it == order.end()) throw ConfigError("unknown stage '" + s + "'");
    const auto pos = it - order.begin();
    if (pos <= last) throw ConfigError("stage '" + s + "' is duplicated or out of dependency order");
    last = pos;
  }

  if (c.consistency.permutations < 1) throw ConfigError("consistency.permutations must be positive");
  if (!(c.consistency.alpha > 0.0 && c.consistency.alpha < 1.0)) throw ConfigError("consistency.alpha must lie in (0, 1)");
  if (!(c.rois.threshold >= 0.0 && c.rois.threshold <= 1.0)) throw ConfigError("rois.threshold must lie in [0, 1]");
  if (c.rois.min_voxels < 0) throw ConfigError("rois.min_voxels must be non-negative");
  if (c.encode.folds < 2) throw ConfigError("encode.folds must be at least 2");
  if (c.encode.paradigms.empty()) throw ConfigError("encode.paradigms is empty");
  if (c.rsa.shuffles < 1) throw ConfigError("rsa.shuffles must be positive");
  if (c.rsa.conditions.empty() || c.rsa.restrictions.empty()) throw ConfigError("rsa conditions and restrictions must be non-empty");
  if (!(c.ceiling.cutoff >= 0.0)) throw ConfigError("ceiling.cutoff must be non-negative");
  if (c.synth) {
    try {
      validate_synth_config(*c.synth);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("synth: ") + e.what());
    }
  }

  const bool synthesizes = has_stage(c, "synth");
  const bool needs_data = has_stage(c, "consistency") || has_stage(c, "rois") || has_stage(c, "encode") ||
                          has_stage(c, "rsa") || has_stage(c, "ceiling");
  const bool needs_features = has_stage(c, "encode") || has_stage(c, "rsa");
  if (needs_data && (!synthesizes || !c.manifest.empty()) && !fs::is_regular_file(manifest_path(c)))
    throw ConfigError("manifest not found: " + manifest_path(c).string());
  if (needs_features && (!synthesizes || !c.features.empty())) {
    const fs::path f = features_path(c);
    if (!fs::is_directory(f)) throw ConfigError("feature directory not found: " + f.string());
    if (!fs::is_regular_file(f / "features.json")) throw ConfigError("feature directory lacks features.json: " + f.string());
  }

  // Outputs of upstream stages that are not part of this run must already exist.
  auto require = [&](const std::string& stage, const std::string& producer, const fs::path& rel) {
    if (!has_stage(c, stage) || has_stage(c, producer)) return;
    if (!fs::exists(c.output_dir / rel))
      throw ConfigError("stage '" + stage + "' needs " + (c.output_dir / rel).string() + " from stage '" + producer + "'");
  };
  const bool significant = std::find(c.rsa.restrictions.begin(), c.rsa.restrictions.end(),
                                     VoxelRestriction::Significant) != c.rsa.restrictions.end();
  require("rois", "consistency", fs::path("consistency") / "probabilistic_map.btsr");
  require("encode", "rois", fs::path("rois") / "rois.json");
  require("rsa", "rois", fs::path("rois") / "rois.json");
  if (significant) require("rsa", "consistency", "consistency");
  for (const char* f : {"area_predictivity.csv", "predictivity.csv"}) require("report", "encode", fs::path("encode") / f);
  require("report", "rsa", fs::path("rsa") / "rsa.csv");
  require("report", "rois", fs::path("rois") / "rois.json");
}

void run(const RunConfig& c, std::ostream& log)
{
  check_run_config(c);
  fs::create_directories(c.output_dir);
  const fs::path out = c.output_dir;
  const fs::path manifest = manifest_path(c);
  const fs::path features = features_path(c);
  const StageContext ctx{c.seed};

  for (const auto& stage : c.stages) {
    const fs::path dir = out / stage;
    fs::remove_all(dir);
    log << "[" << stage << "] running\n" << std::flush;
    if (stage == "synth") {
      SynthConfig sc = c.synth ? *c.synth : default_synth_config();
      if (!c.synth) sc.seed = c.seed;
      stage_synth(sc, dir, ctx);
    } else if (stage == "consistency") {
      stage_consistency(manifest, dir, c.consistency, ctx);
    } else if (stage == "rois") {
      const Manifest m = [&] {
        try {
          return load_manifest(manifest);
        } catch (const std::exception& e) {
          throw StageError(stage, e.what(), dir / "log.txt");
        }
      }();
      stage_rois(out / "consistency" / "probabilistic_map.btsr", m.resolve(m.atlas), dir / "rois.json", c.rois, ctx);
    } else if (stage == "encode") {
      stage_encode(manifest, features, out / "rois" / "rois.json", out / "consistency", dir, c.encode, ctx);
    } else if (stage == "rsa") {
      stage_rsa(manifest, features, out / "rois" / "rois.json", out / "consistency", dir / "rsa.csv", c.rsa, ctx);
    } else if (stage == "ceiling") {
      const fs::path area = out / "encode" / "area_predictivity.csv";
      const Manifest m = [&] {
        try {
          return load_manifest(manifest);
        } catch (const std::exception& e) {
          throw StageError(stage, e.what(), dir / "log.txt");
        }
      }();
      stage_ceiling(manifest, m.resolve(m.atlas), fs::exists(area) ? area : fs::path{}, dir / "ceiling.csv", c.ceiling,
                    ctx);
    } else if (stage == "report") {
      report(out);
    }
    log << "[" << stage << "] done\n" << std::flush;
  }
}

// ---------------------------------------------------------------------------
// Provenance validation

ValidationReport validate_provenance(const fs::path& run_dir)
{
  ValidationReport rep;
  if (!fs::is_directory(run_dir)) {
    rep.violations.push_back("not a directory: " + run_dir.string());
    return rep;
  }
  std::vector<fs::path> records;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (e.is_regular_file() && e.path().filename() == "provenance.json") records.push_back(e.path());
  }
  std::sort(records.begin(), records.end());
  if (records.empty()) rep.violations.push_back("no provenance records under " + run_dir.string());

  struct Produced {
    std::string hash;
    std::string stage;
  };
  std::map<std::string, Produced> produced;  // absolute normalized path -> producer
  std::vector<std::pair<fs::path, json>> loaded;
  for (const auto& r : records) {
    json j;
    try {
      j = detail::read_json(r);
      const fs::path root = (r.parent_path() / j.at("root").get<std::string>()).lexically_normal();
      for (const auto& o : j.at("outputs")) {
        const fs::path f = fs::weakly_canonical(root / o.at("path").get<std::string>());
        produced[f.string()] = {o.at("sha256").get<std::string>(), j.at("stage").get<std::string>()};
      }
      loaded.emplace_back(r, std::move(j));
    } catch (const std::exception& e) {
      rep.violations.push_back(r.string() + ": malformed provenance (" + e.what() + ")");
    }
  }

  for (const auto& [r, j] : loaded) {
    const std::string stage = j.at("stage").get<std::string>();
    const fs::path root = (r.parent_path() / j.at("root").get<std::string>()).lexically_normal();
    for (const auto& o : j.at("outputs")) {
      const fs::path f = root / o.at("path").get<std::string>();
      if (!fs::is_regular_file(f)) {
        rep.violations.push_back(stage + ": output missing: " + o.at("path").get<std::string>());
      } else if (sha256_file(f) != o.at("sha256").get<std::string>()) {
        rep.violations.push_back(stage + ": output modified: " + o.at("path").get<std::string>());
      }
    }
    for (const auto& in : j.at("inputs")) {
      const std::string rel = in.at("path").get<std::string>();
      const std::string hash = in.at("sha256").get<std::string>();
      const fs::path f = fs::weakly_canonical(root / rel);
      const auto it = produced.find(f.string());
      if (it != produced.end() && it->second.hash != hash) {
        rep.violations.push_back(stage + ": input " + rel + " does not match the output recorded by " + it->second.stage);
      }
      if (!fs::is_regular_file(f)) {
        rep.violations.push_back(stage + ": input missing: " + rel);
      } else if (sha256_file(f) != hash) {
        rep.violations.push_back(stage + ": input changed since the stage ran: " + rel);
      }
    }
  }
  return rep;
}

}  // namespace align
