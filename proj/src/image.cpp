#include "rankuda/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rankuda {

namespace {

[[noreturn]] void fail(const std::filesystem::path& file, const std::string& msg) {
  throw std::runtime_error("pnm " + file.string() + ": " + msg);
}

// Reads the next integer token, skipping whitespace and '#' comments.
bool next_int(std::istream& in, int& out) {
  char c;
  while (in.get(c)) {
    if (c == '#') {
      while (in.get(c) && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(static_cast<unsigned char>(c))) {
      in.unget();
      break;
    }
  }
  return static_cast<bool>(in >> out);
}

}  // namespace

Image read_pnm(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(file, "cannot open");
  std::string magic;
  in >> magic;
  int channels;
  if (magic == "P2") {
    channels = 1;
  } else if (magic == "P3") {
    channels = 3;
  } else {
    fail(file, "unsupported magic '" + magic + "' (plain P2/P3 only)");
  }
  int w = 0, h = 0, maxval = 0;
  if (!next_int(in, w) || !next_int(in, h) || !next_int(in, maxval)) {
    fail(file, "truncated header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) fail(file, "bad header values");
  Image im;
  im.width = w;
  im.height = h;
  im.channels = channels;
  im.pix.resize(static_cast<std::size_t>(channels) * h * w);
  const double scale = 1.0 / static_cast<double>(maxval);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        int v = 0;
        if (!next_int(in, v)) fail(file, "truncated pixel data");
        if (v < 0 || v > maxval) fail(file, "pixel value out of range");
        im.at(c, y, x) = v * scale;
      }
    }
  }
  return im;
}

void write_pnm(const Image& im, const std::filesystem::path& file) {
  if (im.channels != 1 && im.channels != 3) {
    throw std::runtime_error("pnm write: unsupported channel count " +
                             std::to_string(im.channels));
  }
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("pnm write: cannot open " + file.string());
  out << (im.channels == 1 ? "P2" : "P3") << "\n";
  out << im.width << " " << im.height << "\n255\n";
  int per_line = 0;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < im.channels; ++c) {
        const double v = std::clamp(im.at(c, y, x), 0.0, 1.0);
        const int q = static_cast<int>(std::lround(v * 255.0));
        out << q;
        if (++per_line >= 16) {
          out << "\n";
          per_line = 0;
        } else {
          out << " ";
        }
      }
    }
  }
  if (per_line) out << "\n";
}

Image to_gray(const Image& im) {
  if (im.channels == 1) return im;
  if (im.channels != 3) {
    throw std::runtime_error("to_gray: unsupported channel count " +
                             std::to_string(im.channels));
  }
  Image g = Image::filled(im.width, im.height, 1, 0.0);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      g.at(0, y, x) =
          0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
    }
  }
  return g;
}

Image expand_channels(const Image& im, int channels) {
  if (im.channels == channels) return im;
  if (im.channels != 1) {
    throw std::runtime_error("expand_channels: expected grayscale input");
  }
  Image out = Image::filled(im.width, im.height, channels, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) out.at(c, y, x) = im.at(0, y, x);
    }
  }
  return out;
}

Image resize_bilinear(const Image& im, int width, int height) {
  if (im.width == width && im.height == height) return im;
  Image out = Image::filled(width, height, im.channels, 0.0);
  const double sx = static_cast<double>(im.width) / width;
  const double sy = static_cast<double>(im.height) / height;
  for (int c = 0; c < im.channels; ++c) {
    for (int y = 0; y < height; ++y) {
      const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
      const int y0 = std::min(static_cast<int>(fy), im.height - 1);
      const int y1 = std::min(y0 + 1, im.height - 1);
      const double wy = fy - y0;
      for (int x = 0; x < width; ++x) {
        const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
        const int x0 = std::min(static_cast<int>(fx), im.width - 1);
        const int x1 = std::min(x0 + 1, im.width - 1);
        const double wx = fx - x0;
        const double top = (1 - wx) * im.at(c, y0, x0) + wx * im.at(c, y0, x1);
        const double bot = (1 - wx) * im.at(c, y1, x0) + wx * im.at(c, y1, x1);
        out.at(c, y, x) = (1 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

}  // namespace rankuda
