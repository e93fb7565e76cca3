#include "align/encoding.hpp"
#include "align/pipeline.hpp"
#include "artifacts.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <tuple>

namespace align {

namespace fs = std::filesystem;
using nlohmann::json;
using detail::CsvWriter;
using detail::fmt;
using detail::parse_number;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Mean {
  double sum = 0.0;
  int n = 0;
  void add(double v)
  {
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  }
  double value() const { return n ? sum / n : kNaN; }
};

json number_or_null(double v)
{
  if (std::isfinite(v)) return v;
  return nullptr;
}

json correlation(const std::vector<double>& x, const std::vector<double>& y)
{
  std::vector<double> a, b;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::isfinite(x[i]) && std::isfinite(y[i])) {
      a.push_back(x[i]);
      b.push_back(y[i]);
    }
  if (a.size() < 3) return nullptr;
  try {
    return area_predictivity_correlation(Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size())),
                                         Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())));
  } catch (const std::exception&) {
    return nullptr;
  }
}

}  // namespace

void report(const fs::path& run_dir)
{
  const fs::path out_dir = run_dir / "report";
  detail::guarded("report", out_dir, [&] {
    const fs::path rois_path = run_dir / "rois" / "rois.json";
    const fs::path area_path = run_dir / "encode" / "area_predictivity.csv";
    const fs::path pred_path = run_dir / "encode" / "predictivity.csv";
    const fs::path rsa_path = run_dir / "rsa" / "rsa.csv";
    const fs::path adjusted_path = run_dir / "ceiling" / "adjusted.csv";
    const fs::path ceiling_diag = run_dir / "ceiling" / "diagnostics.json";
    for (const auto& p : {rois_path, area_path, pred_path, rsa_path})
      if (!fs::is_regular_file(p)) throw std::runtime_error("incomplete run: missing " + p.string());
    fs::create_directories(out_dir);
    detail::StageLog log(out_dir);

    detail::Provenance prov;
    prov.stage = "report";
    prov.inputs = {rois_path, area_path, pred_path, rsa_path};

    // Per-area table.
    struct AreaRow {
      Mean mean_c, prob;
      std::array<Mean, 3> r;
      std::array<double, 3> ceiling{kNaN, kNaN, kNaN};
      std::array<double, 3> adjusted{kNaN, kNaN, kNaN};
      int participants = 0;
    };
    std::map<int, AreaRow> area_rows;
    std::map<int, std::set<std::string>> area_participants;
    {
      const detail::CsvTable t = detail::read_csv(area_path);
      const auto ca = t.column("area"), cp = t.column("paradigm"), cr = t.column("r"), cm = t.column("mean_c"),
                 cpm = t.column("prob_map"), cid = t.column("participant");
      for (const auto& row : t.rows) {
        const int area = static_cast<int>(parse_number(row[ca]));
        AreaRow& a = area_rows[area];
        const auto pi = static_cast<std::size_t>(index_of(parse_paradigm(row[cp])));
        a.r[pi].add(parse_number(row[cr]));
        if (area_participants[area].insert(row[cid]).second) {
          a.mean_c.add(parse_number(row[cm]));
          a.prob.add(parse_number(row[cpm]));
        }
      }
      for (auto& [area, a] : area_rows) a.participants = static_cast<int>(area_participants[area].size());
    }
    const bool have_ceiling = fs::is_regular_file(adjusted_path);
    if (have_ceiling) {
      prov.inputs.push_back(adjusted_path);
      const detail::CsvTable t = detail::read_csv(adjusted_path);
      const auto ca = t.column("area"), cp = t.column("paradigm"), cc = t.column("ceiling"), cadj = t.column("adjusted");
      for (const auto& row : t.rows) {
        const auto it = area_rows.find(static_cast<int>(parse_number(row[ca])));
        if (it == area_rows.end()) continue;
        const auto pi = static_cast<std::size_t>(index_of(parse_paradigm(row[cp])));
        it->second.ceiling[pi] = parse_number(row[cc]);
        it->second.adjusted[pi] = parse_number(row[cadj]);
      }
    } else {
      log("no ceiling outputs; adjusted columns left empty");
    }
    const fs::path area_table = out_dir / "area_table.csv";
    {
      std::vector<std::string> header{"area", "participants", "mean_c", "prob_map"};
      for (const char* col : {"r_", "ceiling_", "adjusted_"})
        for (Paradigm p : kParadigms) header.push_back(col + std::string(code(p)));
      CsvWriter csv(area_table, header);
      for (const auto& [area, a] : area_rows) {
        std::vector<std::string> row{fmt(area), fmt(a.participants), fmt(a.mean_c.value()), fmt(a.prob.value())};
        for (const auto& m : a.r) row.push_back(fmt(m.value()));
        for (double v : a.ceiling) row.push_back(fmt(v));
        for (double v : a.adjusted) row.push_back(fmt(v));
        csv.row(row);
      }
    }
    log("area table: " + std::to_string(area_rows.size()) + " areas");

    json area_corr = json::array();
    for (Paradigm p : kParadigms) {
      const auto pi = static_cast<std::size_t>(index_of(p));
      std::vector<double> r, c, prob, adj;
      for (const auto& [area, a] : area_rows) {
        if (a.r[pi].n == 0) continue;
        r.push_back(a.r[pi].value());
        c.push_back(a.mean_c.value());
        prob.push_back(a.prob.value());
        adj.push_back(a.adjusted[pi]);
      }
      if (r.empty()) continue;
      area_corr.push_back({{"paradigm", std::string(code(p))},
                           {"areas", r.size()},
                           {"r_vs_mean_c", correlation(r, c)},
                           {"r_vs_prob_map", correlation(r, prob)},
                           {"adjusted_vs_mean_c", have_ceiling ? correlation(adj, c) : json(nullptr)}});
    }

    // ROI-level and bin tables.
    using Key = std::tuple<int, int, int, int>;  // roi, paradigm, bC, bL
    std::map<Key, Mean> cells;
    std::map<std::pair<int, int>, std::tuple<std::string, int, std::string>> roi_config;
    {
      const detail::CsvTable t = detail::read_csv(pred_path);
      const auto cr = t.column("roi"), cp = t.column("paradigm"), cbc = t.column("bC"), cbl = t.column("bL"),
                 cf = t.column("fold"), cv = t.column("r"), cm = t.column("model"), cl = t.column("layer"),
                 cpool = t.column("pooling");
      for (const auto& row : t.rows) {
        if (row[cf] != "mean") continue;
        const int roi = static_cast<int>(parse_number(row[cr]));
        const int par = index_of(parse_paradigm(row[cp]));
        cells[{roi, par, static_cast<int>(parse_number(row[cbc])), static_cast<int>(parse_number(row[cbl]))}].add(parse_number(row[cv]));
        roi_config[{roi, par}] = {row[cm], static_cast<int>(parse_number(row[cl])), row[cpool]};
      }
    }
    const fs::path roi_table = out_dir / "roi_table.csv";
    const fs::path bin_table = out_dir / "bin_table.csv";
    json bins_summary = json::array();
    {
      CsvWriter roi_csv(roi_table, {"roi", "paradigm", "model", "layer", "pooling", "participants", "r"});
      CsvWriter bin_csv(bin_table, {"roi", "paradigm", "bC", "bL", "participants", "r"});
      for (const auto& [key, config] : roi_config) {
        const auto [roi, par] = key;
        const std::string pname(code(kParadigms[static_cast<std::size_t>(par)]));
        const auto& whole = cells[{roi, par, 0, 0}];
        roi_csv.row({fmt(roi), pname, std::get<0>(config), fmt(std::get<1>(config)), std::get<2>(config), fmt(whole.n),
                     fmt(whole.value())});
        bool any_bins = false;
        for (int bc = 1; bc <= 4; ++bc)
          for (int bl = 1; bl <= 4; ++bl) any_bins = any_bins || cells.count({roi, par, bc, bl});
        if (!any_bins) continue;
        bool monotone = true;
        for (int bl = 1; bl <= 4; ++bl) {
          double prev = -std::numeric_limits<double>::infinity();
          for (int bc = 1; bc <= 4; ++bc) {
            const auto it = cells.find({roi, par, bc, bl});
            const double v = it == cells.end() ? kNaN : it->second.value();
            bin_csv.row({fmt(roi), pname, fmt(bc), fmt(bl), fmt(it == cells.end() ? 0 : it->second.n), fmt(v)});
            if (std::isfinite(v)) {
              monotone = monotone && v >= prev;
              prev = v;
            }
          }
        }
        bins_summary.push_back({{"roi", roi}, {"paradigm", pname}, {"nondecreasing_in_bC", monotone}});
      }
    }

    // RSA: matched and baseline rows.
    const fs::path rsa_table = out_dir / "rsa_table.csv";
    json rsa_best = json::array();
    {
      const detail::CsvTable t = detail::read_csv(rsa_path);
      const auto cm = t.column("model"), cl = t.column("layer"), cp = t.column("pooling"), cr = t.column("roi"),
                 cc = t.column("condition"), cs = t.column("restriction"), crho = t.column("rho"),
                 cbm = t.column("baseline_mean"), cbs = t.column("baseline_sd");
      CsvWriter csv(rsa_table, {"roi", "condition", "restriction", "kind", "model", "layer", "pooling", "rho", "sd"});
      std::map<std::tuple<std::string, std::string, std::string>, std::size_t> best;
      for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        csv.row({row[cr], row[cc], row[cs], "matched", row[cm], row[cl], row[cp], row[crho], ""});
        csv.row({row[cr], row[cc], row[cs], "baseline", row[cm], row[cl], row[cp], row[cbm], row[cbs]});
        const auto key = std::make_tuple(row[cr], row[cc], row[cs]);
        const double rho = parse_number(row[crho]);
        const auto it = best.find(key);
        if (std::isfinite(rho) && (it == best.end() || rho > parse_number(t.rows[it->second][crho]))) best[key] = i;
      }
      for (const auto& [key, i] : best) {
        const auto& row = t.rows[i];
        rsa_best.push_back({{"roi", static_cast<int>(parse_number(row[cr]))},
                            {"condition", row[cc]},
                            {"restriction", row[cs]},
                            {"model", row[cm]},
                            {"layer", static_cast<int>(parse_number(row[cl]))},
                            {"pooling", row[cp]},
                            {"rho", number_or_null(parse_number(row[crho]))},
                            {"baseline_mean", number_or_null(parse_number(row[cbm]))},
                            {"baseline_sd", number_or_null(parse_number(row[cbs]))}});
      }
    }

    json summary{{"schema_version", 1},
                 {"rois", detail::read_json(rois_path).at("rois")},
                 {"area_correlation", std::move(area_corr)},
                 {"bins", std::move(bins_summary)},
                 {"rsa_best", std::move(rsa_best)}};
    if (fs::is_regular_file(ceiling_diag)) {
      prov.inputs.push_back(ceiling_diag);
      summary["ceiling"] = detail::read_json(ceiling_diag).at("consistency_correlation");
    }
    const fs::path summary_path = out_dir / "summary.json";
    detail::write_json(summary, summary_path);

    prov.outputs = {area_table, roi_table, bin_table, rsa_table, summary_path};
    prov.write(out_dir);
  });
}

}  // namespace align
