#include <cmath>
#include <vector>

#include "doctest.h"
#include "rankuda/naturalness.hpp"
#include "rankuda/rng.hpp"
#include "rankuda/synth.hpp"

using namespace rankuda;

namespace {

Image gray255_noise(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image im = Image::filled(size, size, 1, 0.0);
  for (double& v : im.pix) v = 128.0 + 40.0 * rng.normal();
  return im;
}

std::vector<double> all_values(const Image& im) {
  return std::vector<double>(im.pix.begin(), im.pix.end());
}

}  // namespace

TEST_CASE("mscn_map") {
  SUBCASE("constant image maps to exactly zero") {
    const Image c = Image::filled(12, 12, 1, 135.0);
    const Image psi = mscn_map(c);
    for (double v : psi.pix) CHECK(v == 0.0);
  }

  SUBCASE("single bright pixel matches a direct windowed oracle at the center") {
    const int n = 15;
    Image im = Image::filled(n, n, 1, 0.0);
    im.at(0, 7, 7) = 200.0;
    const Image psi = mscn_map(im);

    // Direct oracle at the center pixel: 7x7 Gaussian window, sigma 7/6.
    const double sg = 7.0 / 6.0;
    double wsum = 0.0, w00 = 0.0;
    for (int ky = -3; ky <= 3; ++ky) {
      for (int kx = -3; kx <= 3; ++kx) {
        wsum += std::exp(-(kx * kx + ky * ky) / (2.0 * sg * sg));
      }
    }
    w00 = 1.0 / wsum;  // normalized weight at the window center
    const double mu = w00 * 200.0;
    double var = 0.0;
    for (int ky = -3; ky <= 3; ++ky) {
      for (int kx = -3; kx <= 3; ++kx) {
        const double w = std::exp(-(kx * kx + ky * ky) / (2.0 * sg * sg)) / wsum;
        const double val = (kx == 0 && ky == 0) ? 200.0 : 0.0;
        var += w * (val - mu) * (val - mu);
      }
    }
    const double expected = (200.0 - mu) / (std::sqrt(var) + 1.0);
    CHECK(psi.at(0, 7, 7) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(psi.at(0, 7, 7) > 0.0);
  }

  SUBCASE("bounded for a smooth gradient image") {
    const int n = 24;
    Image im = Image::filled(n, n, 1, 0.0);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) im.at(0, y, x) = 255.0 * (x + y) / (2.0 * (n - 1));
    }
    const Image psi = mscn_map(im);
    for (double v : psi.pix) CHECK(std::abs(v) < 255.0);
  }

  SUBCASE("translation consistency in the interior") {
    const int n = 20, shift = 3;
    Image a = gray255_noise(n, 55);
    Image b = Image::filled(n, n, 1, 0.0);
    // b is a shifted right by `shift` columns, wrapped content irrelevant.
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        b.at(0, y, x) = a.at(0, y, (x - shift + n) % n);
      }
    }
    const Image pa = mscn_map(a);
    const Image pb = mscn_map(b);
    // Compare away from borders and the wrap seam.
    for (int y = 4; y < n - 4; ++y) {
      for (int x = 4 + shift; x < n - 4; ++x) {
        CHECK(pb.at(0, y, x) == doctest::Approx(pa.at(0, y, x - shift)).epsilon(1e-12));
      }
    }
  }

  SUBCASE("too-small image errors") {
    CHECK_THROWS(mscn_map(Image::filled(6, 6, 1, 0.0)));
  }
}

TEST_CASE("dnv_histogram") {
  SUBCASE("all-zero map concentrates in the bin containing zero") {
    const Image psi = Image::filled(10, 10, 1, 0.0);
    const auto h = dnv_histogram(std::vector<Image>{psi});
    int nonzero_bins = 0;
    for (int i = 0; i < NaturalnessHistogram::kBins; ++i) {
      if (h.counts[static_cast<std::size_t>(i)] > 0) {
        ++nonzero_bins;
        CHECK(std::abs(NaturalnessHistogram::bin_center(i)) < 0.06);
        CHECK(h.density[static_cast<std::size_t>(i)] == 1.0);
      }
    }
    CHECK(nonzero_bins == 1);
  }

  SUBCASE("additivity of counts before normalization") {
    Image a = gray255_noise(12, 7);
    Image b = gray255_noise(12, 8);
    for (double& v : a.pix) v = v / 100.0 - 1.2;  // bring values into histogram range
    for (double& v : b.pix) v = v / 80.0 - 1.0;
    const auto ha = dnv_histogram(std::vector<Image>{a});
    const auto hb = dnv_histogram(std::vector<Image>{b});
    const auto hab = dnv_histogram(std::vector<Image>{a, b});
    for (int i = 0; i < NaturalnessHistogram::kBins; ++i) {
      CHECK(hab.counts[static_cast<std::size_t>(i)] ==
            ha.counts[static_cast<std::size_t>(i)] + hb.counts[static_cast<std::size_t>(i)]);
    }
  }

  SUBCASE("bimodal sample matches brute-force counting and clips extremes") {
    Image m = Image::filled(8, 8, 1, 0.0);
    Rng rng(9);
    for (double& v : m.pix) v = (rng.below(2) == 0 ? -1.5 : 1.5) + 0.1 * rng.normal();
    m.pix[0] = 7.0;   // clipped into the top bin
    m.pix[1] = -9.0;  // clipped into the bottom bin
    const auto h = dnv_histogram(std::vector<Image>{m});
    const double width = 6.0 / NaturalnessHistogram::kBins;
    std::vector<std::int64_t> expected(NaturalnessHistogram::kBins, 0);
    for (double v : m.pix) {
      int bin = static_cast<int>(std::floor((v + 3.0) / width));
      bin = std::clamp(bin, 0, NaturalnessHistogram::kBins - 1);
      ++expected[static_cast<std::size_t>(bin)];
    }
    for (int i = 0; i < NaturalnessHistogram::kBins; ++i) {
      CHECK(h.counts[static_cast<std::size_t>(i)] == expected[static_cast<std::size_t>(i)]);
    }
    double total = 0.0;
    for (double d : h.density) total += d;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("empty input errors") {
    CHECK_THROWS(dnv_histogram(std::vector<Image>{}));
  }
}

TEST_CASE("naturalness statistics separate the two synthetic domains") {
  SUBCASE("gaussian-noise DNV is approximately symmetric") {
    const Image noise = gray255_noise(256, 1234);
    const Image psi = mscn_map(noise);
    CHECK(std::abs(sample_skewness(all_values(psi))) < 0.1);
  }

  SUBCASE("text-like DNV has markedly heavier tails than natural-like DNV") {
    Rng rng_n = stream_rng(77, 1);
    Rng rng_t = stream_rng(77, 2);
    std::vector<double> nat_vals, text_vals;
    for (int i = 0; i < 4; ++i) {
      Image nat = to_gray(synth_natural_base(48, rng_n));
      Image text = to_gray(synth_text_base(48, 1.0, rng_t));
      for (double& v : nat.pix) v *= 255.0;
      for (double& v : text.pix) v *= 255.0;
      const auto pn = all_values(mscn_map(nat));
      const auto pt = all_values(mscn_map(text));
      nat_vals.insert(nat_vals.end(), pn.begin(), pn.end());
      text_vals.insert(text_vals.end(), pt.begin(), pt.end());
    }
    const double kn = sample_kurtosis(nat_vals);
    const double kt = sample_kurtosis(text_vals);
    CHECK(kt > 1.5 * kn);
  }
}
