#include "rankuda/manifest.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

namespace rankuda {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool Manifest::has_all_scores() const {
  for (const auto& e : entries) {
    if (!e.score) return false;
  }
  return !entries.empty();
}

std::map<std::string, double> Manifest::score_map() const {
  std::map<std::string, double> m;
  for (const auto& e : entries) {
    if (e.score) m[e.id] = *e.score;
  }
  return m;
}

std::vector<std::string> Manifest::ids() const {
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.id);
  return out;
}

Manifest load_manifest(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("manifest: cannot open " + csv.string());
  Manifest m;
  m.root = csv.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("manifest: empty file " + csv.string());
  const auto header = split_csv_line(line);
  if (header.size() != 2 || header[0] != "image_id" || header[1] != "score") {
    throw std::runtime_error("manifest " + csv.string() +
                             ": expected header 'image_id,score'");
  }
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 2) {
      throw std::runtime_error("manifest " + csv.string() + ": malformed row '" + line + "'");
    }
    ManifestEntry e;
    e.id = fields[0];
    if (e.id.empty()) throw std::runtime_error("manifest " + csv.string() + ": empty image id");
    if (!seen.insert(e.id).second) {
      throw std::runtime_error("manifest " + csv.string() + ": duplicate id '" + e.id + "'");
    }
    if (!fields[1].empty()) {
      std::size_t pos = 0;
      const double v = std::stod(fields[1], &pos);
      if (pos != fields[1].size() || !std::isfinite(v)) {
        throw std::runtime_error("manifest " + csv.string() + ": bad score '" + fields[1] + "'");
      }
      e.score = v;
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& csv) {
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw std::runtime_error("manifest: cannot write " + csv.string());
  out << "image_id,score\n";
  for (const auto& e : m.entries) {
    out << e.id << ",";
    if (e.score) out << format_double(*e.score);
    out << "\n";
  }
}

std::filesystem::path image_path(const Manifest& m, const std::string& id) {
  const auto ppm = m.root / (id + ".ppm");
  if (std::filesystem::exists(ppm)) return ppm;
  const auto pgm = m.root / (id + ".pgm");
  if (std::filesystem::exists(pgm)) return pgm;
  throw std::runtime_error("manifest: no image file for id '" + id + "' under " +
                           m.root.string());
}

Image load_manifest_image(const Manifest& m, const std::string& id) {
  return read_pnm(image_path(m, id));
}

}  // namespace rankuda
