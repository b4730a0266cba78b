#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rankuda/image.hpp"

namespace rankuda {

struct ManifestEntry {
  std::string id;
  std::optional<double> score;
};

// Score manifest: CSV with header `image_id,score`. Image files live next to
// the manifest and are found as `<root>/<id>.ppm` (then `.pgm`).
struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  bool has_all_scores() const;
  std::map<std::string, double> score_map() const;
  std::vector<std::string> ids() const;
};

Manifest load_manifest(const std::filesystem::path& csv);
void save_manifest(const Manifest& m, const std::filesystem::path& csv);

std::filesystem::path image_path(const Manifest& m, const std::string& id);
Image load_manifest_image(const Manifest& m, const std::string& id);

// Shared CSV helpers.
std::vector<std::string> split_csv_line(const std::string& line);
std::string format_double(double v);  // round-trip exact ("%.17g")

}  // namespace rankuda
