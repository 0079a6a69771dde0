// Metrics output: JSONL append writer and a reader for tests and plotting.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gm/common.hpp"

namespace gm {

class JsonlWriter {
 public:
  JsonlWriter() = default;

  explicit JsonlWriter(const std::filesystem::path& path) { open(path); }

  void open(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    f_.open(path, std::ios::trunc);
    if (!f_) throw IoError("metrics: cannot write " + path.string());
  }

  bool is_open() const { return f_.is_open(); }

  void write(const nlohmann::json& row) {
    if (!f_.is_open()) return;
    f_ << row.dump() << "\n";
    f_.flush();
    if (!f_) throw IoError("metrics: write failed");
  }

 private:
  std::ofstream f_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("metrics: cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      throw InputError("metrics: parse error at " + path.filename().string() + " line " +
                       std::to_string(lineno));
    }
  }
  return rows;
}

// The (x, y) fields a metrics file plots: LEAP logs use the meta-step axis,
// training logs the step axis.
inline std::pair<std::string, std::string> plot_keys(const std::vector<nlohmann::json>& rows) {
  if (!rows.empty() && rows.front().contains("meta_step"))
    return {"meta_step", "expected_distance"};
  return {"step", "loss"};
}

inline std::string metrics_csv(const std::vector<nlohmann::json>& rows,
                               const std::string& x_key, const std::string& y_key) {
  std::string out = x_key + "," + y_key + "\n";
  for (const auto& r : rows) {
    out += r.at(x_key).dump();
    out += ",";
    out += r.at(y_key).dump();
    out += "\n";
  }
  return out;
}

// Standalone SVG line plot; empty series yields bare axes.
inline std::string line_plot_svg(const std::vector<double>& xs, const std::vector<double>& ys,
                                 const std::string& x_label, const std::string& y_label) {
  if (xs.size() != ys.size()) throw InputError("plot: x/y length mismatch");
  const double w = 640, h = 400, ml = 60, mr = 20, mt = 20, mb = 40;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
     << h - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (w / 2) << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\">"
     << x_label << "</text>\n";
  os << "<text x=\"14\" y=\"" << (h / 2)
     << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << (h / 2) << ")\">" << y_label
     << "</text>\n";
  if (!xs.empty()) {
    double x0 = xs[0], x1 = xs[0], y0 = ys[0], y1 = ys[0];
    for (std::size_t i = 0; i < xs.size(); ++i) {
      x0 = std::min(x0, xs[i]);
      x1 = std::max(x1, xs[i]);
      y0 = std::min(y0, ys[i]);
      y1 = std::max(y1, ys[i]);
    }
    const double xr = x1 > x0 ? x1 - x0 : 1.0;
    const double yr = y1 > y0 ? y1 - y0 : 1.0;
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double px = ml + (xs[i] - x0) / xr * (w - ml - mr);
      const double py = h - mb - (ys[i] - y0) / yr * (h - mt - mb);
      os << px << "," << py << (i + 1 < xs.size() ? " " : "");
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// For every metrics file, emit <stem>.svg and <stem>.csv next to out_dir.
inline void plot_metrics(const std::vector<std::filesystem::path>& files,
                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  for (const auto& file : files) {
    auto rows = read_jsonl(file);
    auto [xk, yk] = plot_keys(rows);
    std::vector<double> xs, ys;
    for (const auto& r : rows) {
      xs.push_back(r.at(xk).get<double>());
      ys.push_back(r.at(yk).get<double>());
    }
    const std::string stem = file.stem().string();
    std::ofstream svg(out_dir / (stem + ".svg"));
    svg << line_plot_svg(xs, ys, xk, yk);
    std::ofstream csv(out_dir / (stem + ".csv"));
    csv << metrics_csv(rows, xk, yk);
    if (!svg || !csv) throw IoError("plot: cannot write outputs for " + stem);
  }
}

}  // namespace gm
