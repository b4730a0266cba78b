#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rankuda/image.hpp"
#include "rankuda/manifest.hpp"

namespace rankuda {

struct PairSample {
  std::string first;
  std::string second;
  std::optional<int> label;  // 1 when the first image has the higher score
};

struct PairSelectionConfig {
  double tau_source = 0.07;
  double tau_target = 0.6;  // 0.45 for compression-style target sets
  double ssim_threshold = 0.75;
  std::optional<long> max_pairs;  // uniform subsample of the ordered pair list
  std::uint64_t seed = 0;
};

// (s - min) / (max - min); errors on fewer than two distinct values.
std::vector<double> minmax_normalize(std::span<const double> scores);

// All ordered pairs whose score gap exceeds tau_source, labelled by which
// image scores higher. Scores must already be normalized.
std::vector<PairSample> select_source_pairs(const Manifest& manifest,
                                            const PairSelectionConfig& cfg);

// Unlabelled pairs: union of pseudo-score gaps above tau_target and
// same-content pairs with SSIM above the threshold.
std::vector<PairSample> select_target_pairs(
    std::span<const std::string> ids, const std::map<std::string, double>& pseudo_scores,
    const std::function<const Image&(const std::string&)>& image_lookup,
    const PairSelectionConfig& cfg);
std::vector<PairSample> select_target_pairs(const Manifest& images,
                                            const std::map<std::string, double>& pseudo_scores,
                                            const PairSelectionConfig& cfg);

// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), C1=(0.01)^2,
// C2=(0.03)^2 for unit dynamic range; inputs are grayscale in [0,1].
double ssim(const Image& a, const Image& b);

void save_pairs_csv(std::span<const PairSample> pairs, const std::filesystem::path& file);
std::vector<PairSample> load_pairs_csv(const std::filesystem::path& file);

}  // namespace rankuda
