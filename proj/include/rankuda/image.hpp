#pragma once

#include <filesystem>
#include <vector>

namespace rankuda {

// Planar (channel-major) image with pixel values in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<double> pix;  // channels * height * width

  double at(int c, int y, int x) const {
    return pix[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double& at(int c, int y, int x) {
    return pix[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  static Image filled(int w, int h, int c, double v) {
    Image im;
    im.width = w;
    im.height = h;
    im.channels = c;
    im.pix.assign(static_cast<std::size_t>(c) * h * w, v);
    return im;
  }
};

// Plain-text PGM (P2) and PPM (P3), maxval 255. Writes are byte-stable for
// identical inputs.
Image read_pnm(const std::filesystem::path& file);
void write_pnm(const Image& im, const std::filesystem::path& file);

Image to_gray(const Image& im);  // 0.299/0.587/0.114 luminance
Image expand_channels(const Image& im, int channels);
Image resize_bilinear(const Image& im, int width, int height);

}  // namespace rankuda
