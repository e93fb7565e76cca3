#ifndef ALIGN_SRC_ARTIFACTS_HPP
#define ALIGN_SRC_ARTIFACTS_HPP

// Plumbing shared by the stage implementations: CSV tables, JSON files,
// stage logs and provenance records.

#include "align/pipeline.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace align::detail {

/// Shortest text that reads back to the same double; empty for NaN.
std::string fmt(double v);
inline std::string fmt(std::int64_t v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }

class CsvWriter {
public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  void row(const std::vector<std::string>& fields);

private:
  std::ofstream out_;
  std::filesystem::path path_;
  std::size_t width_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Throws if the column is absent.
  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
/// Parses a numeric CSV field; empty fields read as NaN.
double parse_number(const std::string& field);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

/// Generic-format path from `root` to `p`.
std::string relative_to(const std::filesystem::path& p, const std::filesystem::path& root);

/// Line-oriented log truncated when the stage starts.
class StageLog {
public:
  explicit StageLog(const std::filesystem::path& dir);
  void operator()(const std::string& line);

private:
  std::ofstream out_;
};

struct Provenance {
  std::string stage;
  nlohmann::json parameters = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;

  /// Hashes every file and writes dir/provenance.json, with paths relative to dir's parent.
  void write(const std::filesystem::path& dir) const;
};

/// Runs a stage body; any failure is appended to dir/log.txt and rethrown as a StageError.
template <typename F>
void guarded(const std::string& stage, const std::filesystem::path& dir, F&& body)
{
  try {
    body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::ofstream(dir / "log.txt", std::ios::app) << "error: " << e.what() << '\n';
    throw StageError(stage, e.what(), dir / "log.txt");
  }
}

/// Input files of a dataset: manifest, atlas and every participant tensor, deduplicated in manifest order.
std::vector<std::filesystem::path> dataset_files(const std::filesystem::path& manifest_path, const Manifest& m);
/// features.json and every listed tensor.
std::vector<std::filesystem::path> feature_files(const FeatureIndex& index);

}  // namespace align::detail

#endif  // ALIGN_SRC_ARTIFACTS_HPP
