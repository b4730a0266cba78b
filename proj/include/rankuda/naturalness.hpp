#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>

#include "rankuda/image.hpp"

namespace rankuda {

// Mean-subtracted contrast-normalized map psi = (I - mu) / (sigma + 1) with
// local statistics from a 7x7 Gaussian window (sigma 7/6, normalized to sum
// 1) and mirror-padded borders. Input is grayscale with pixel values in
// [0, 255] so the +1 stabilizer keeps its usual magnitude.
Image mscn_map(const Image& gray255);

// Pooled Distribution of Naturalness Values over [-3, 3], 101 uniform bins;
// out-of-range samples land in the end bins.
struct NaturalnessHistogram {
  static constexpr int kBins = 101;
  static constexpr double kLo = -3.0;
  static constexpr double kHi = 3.0;
  std::array<std::int64_t, kBins> counts{};
  std::array<double, kBins> density{};
  static double bin_center(int i) {
    const double width = (kHi - kLo) / kBins;
    return kLo + (i + 0.5) * width;
  }
};

NaturalnessHistogram dnv_histogram(std::span<const Image> psi_maps);
void save_histogram_csv(const NaturalnessHistogram& h, const std::filesystem::path& file);

// Sample statistics over raw values (population moments).
double sample_skewness(std::span<const double> v);
double sample_kurtosis(std::span<const double> v);

}  // namespace rankuda
