#include "rankuda/naturalness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace rankuda {

namespace {

constexpr int kHalf = 3;  // K = L = 3 -> 7x7 window

// Mirror index into [0, n).
int mirror(int i, int n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

}  // namespace

Image mscn_map(const Image& gray255) {
  if (gray255.channels != 1) {
    throw std::invalid_argument("mscn_map: expected a grayscale matrix");
  }
  const int w = gray255.width, h = gray255.height;
  if (w < 7 || h < 7) {
    throw std::invalid_argument("mscn_map: image must be at least 7x7, got " +
                                std::to_string(w) + "x" + std::to_string(h));
  }
  constexpr double kSigma = 7.0 / 6.0;
  double win[2 * kHalf + 1][2 * kHalf + 1];
  double wsum = 0.0;
  for (int ky = -kHalf; ky <= kHalf; ++ky) {
    for (int kx = -kHalf; kx <= kHalf; ++kx) {
      const double v = std::exp(-(kx * kx + ky * ky) / (2.0 * kSigma * kSigma));
      win[ky + kHalf][kx + kHalf] = v;
      wsum += v;
    }
  }
  for (auto& row : win) {
    for (double& v : row) v /= wsum;
  }
  Image psi = Image::filled(w, h, 1, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double mu = 0.0;
      for (int ky = -kHalf; ky <= kHalf; ++ky) {
        const int yy = mirror(y + ky, h);
        for (int kx = -kHalf; kx <= kHalf; ++kx) {
          mu += win[ky + kHalf][kx + kHalf] * gray255.at(0, yy, mirror(x + kx, w));
        }
      }
      double var = 0.0;
      for (int ky = -kHalf; ky <= kHalf; ++ky) {
        const int yy = mirror(y + ky, h);
        for (int kx = -kHalf; kx <= kHalf; ++kx) {
          const double d = gray255.at(0, yy, mirror(x + kx, w)) - mu;
          var += win[ky + kHalf][kx + kHalf] * d * d;
        }
      }
      const double sigma = std::sqrt(var);
      psi.at(0, y, x) = (gray255.at(0, y, x) - mu) / (sigma + 1.0);
    }
  }
  return psi;
}

NaturalnessHistogram dnv_histogram(std::span<const Image> psi_maps) {
  if (psi_maps.empty()) throw std::invalid_argument("dnv_histogram: no input maps");
  NaturalnessHistogram hist;
  const double width = (NaturalnessHistogram::kHi - NaturalnessHistogram::kLo) /
                       NaturalnessHistogram::kBins;
  std::int64_t total = 0;
  for (const Image& m : psi_maps) {
    for (double v : m.pix) {
      int bin = static_cast<int>(std::floor((v - NaturalnessHistogram::kLo) / width));
      bin = std::clamp(bin, 0, NaturalnessHistogram::kBins - 1);
      ++hist.counts[static_cast<std::size_t>(bin)];
      ++total;
    }
  }
  for (int i = 0; i < NaturalnessHistogram::kBins; ++i) {
    hist.density[static_cast<std::size_t>(i)] =
        static_cast<double>(hist.counts[static_cast<std::size_t>(i)]) /
        static_cast<double>(total);
  }
  return hist;
}

void save_histogram_csv(const NaturalnessHistogram& h, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("histogram: cannot write " + file.string());
  out << "bin_center,density\n";
  char buf[64];
  for (int i = 0; i < NaturalnessHistogram::kBins; ++i) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.12g\n", NaturalnessHistogram::bin_center(i),
                  h.density[static_cast<std::size_t>(i)]);
    out << buf;
  }
}

double sample_skewness(std::span<const double> v) {
  if (v.size() < 2) throw std::invalid_argument("sample_skewness: need at least 2 values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double m2 = 0.0, m3 = 0.0;
  for (double x : v) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(v.size());
  m3 /= static_cast<double>(v.size());
  return m3 / std::pow(m2, 1.5);
}

double sample_kurtosis(std::span<const double> v) {
  if (v.size() < 2) throw std::invalid_argument("sample_kurtosis: need at least 2 values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= static_cast<double>(v.size());
  m4 /= static_cast<double>(v.size());
  return m4 / (m2 * m2);
}

}  // namespace rankuda
