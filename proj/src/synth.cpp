#include "rankuda/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "rankuda/manifest.hpp"

namespace rankuda {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Separable Gaussian blur with mirrored borders.
Image gaussian_blur(const Image& im, double sigma) {
  if (sigma <= 0.05) return im;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= sum;
  const auto mirror = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  Image tmp = im;
  for (int c = 0; c < im.channels; ++c) {
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[static_cast<std::size_t>(i + radius)] * im.at(c, y, mirror(x + i, im.width));
        }
        tmp.at(c, y, x) = acc;
      }
    }
  }
  Image out = tmp;
  for (int c = 0; c < im.channels; ++c) {
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(c, mirror(y + i, im.height), x);
        }
        out.at(c, y, x) = acc;
      }
    }
  }
  return out;
}

}  // namespace

std::string distortion_name(Distortion d) {
  switch (d) {
    case Distortion::kNoise:
      return "noise";
    case Distortion::kBlur:
      return "blur";
    case Distortion::kContrast:
      return "contrast";
  }
  return "unknown";
}

Image synth_natural_base(int size, Rng& rng) {
  Image im = Image::filled(size, size, 3, 0.0);
  // Camera-like content with diverse structure: low-frequency gratings,
  // band-limited noise texture, and a few soft-edged shapes. Diverse source
  // statistics keep the learned severity features from latching onto one
  // content cue.
  const int waves = 5;
  std::vector<double> amp(waves), fx(waves), fy(waves), ph(waves);
  for (int w = 0; w < waves; ++w) {
    amp[static_cast<std::size_t>(w)] = rng.uniform(0.4, 1.0) / (w + 1);
    fx[static_cast<std::size_t>(w)] = rng.uniform(-3.0, 3.0);
    fy[static_cast<std::size_t>(w)] = rng.uniform(-3.0, 3.0);
    ph[static_cast<std::size_t>(w)] = rng.uniform(0.0, 6.283185307179586);
  }
  const double tint[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                          rng.uniform(-0.05, 0.05)};
  Image texture = Image::filled(size, size, 1, 0.0);
  for (double& v : texture.pix) v = rng.normal();
  texture = gaussian_blur(texture, 0.8);
  const double texture_amp = rng.uniform(0.25, 0.8);

  // Piecewise-constant patches, softened so the statistics stay camera-like.
  Image shapes = Image::filled(size, size, 1, 0.0);
  const int n_shapes = 2 + static_cast<int>(rng.below(4));
  for (int s = 0; s < n_shapes; ++s) {
    const int w = 3 + static_cast<int>(rng.below(size / 2));
    const int h = 3 + static_cast<int>(rng.below(size / 2));
    const int x0 = static_cast<int>(rng.below(size - 2));
    const int y0 = static_cast<int>(rng.below(size - 2));
    const double v = rng.uniform(-1.0, 1.0);
    for (int y = y0; y < std::min(size, y0 + h); ++y) {
      for (int x = x0; x < std::min(size, x0 + w); ++x) shapes.at(0, y, x) += v;
    }
  }
  shapes = gaussian_blur(shapes, 0.9);
  const double shape_amp = rng.uniform(0.3, 1.1);

  double lo = 1e300, hi = -1e300;
  std::vector<double> field(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (int w = 0; w < waves; ++w) {
        v += amp[static_cast<std::size_t>(w)] *
             std::sin(2.0 * 3.14159265358979323846 *
                          (fx[static_cast<std::size_t>(w)] * x + fy[static_cast<std::size_t>(w)] * y) /
                          size +
                      ph[static_cast<std::size_t>(w)]);
      }
      v += texture_amp * texture.at(0, y, x);
      v += shape_amp * shapes.at(0, y, x);
      field[static_cast<std::size_t>(y) * size + x] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double span = std::max(hi - lo, 1e-9);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double v = 0.15 + 0.7 * (field[static_cast<std::size_t>(y) * size + x] - lo) / span;
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = clamp01(v + tint[c]);
    }
  }
  return im;
}

Image synth_text_base(int size, double shift, Rng& rng) {
  // Screen-content-like layout: bright page, dark glyph blocks arranged in
  // text lines, a title bar and a sidebar.
  const double page = 0.9;
  const double ink_contrast = 0.75 * shift;
  Image im = Image::filled(size, size, 3, page);
  const double tint[3] = {rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03),
                          rng.uniform(-0.03, 0.03)};
  auto fill_rect = [&](int x0, int y0, int w, int h, double v) {
    for (int y = std::max(0, y0); y < std::min(size, y0 + h); ++y) {
      for (int x = std::max(0, x0); x < std::min(size, x0 + w); ++x) {
        for (int c = 0; c < 3; ++c) im.at(c, y, x) = clamp01(v + tint[c]);
      }
    }
  };
  // Title bar.
  fill_rect(0, 0, size, std::max(2, size / 10), page - 0.5 * ink_contrast);
  // Optional sidebar.
  int left_margin = std::max(1, size / 16);
  if (rng.uniform() < 0.5) {
    const int sidebar = std::max(2, size / 8);
    fill_rect(0, 0, sidebar, size, page - 0.35 * ink_contrast);
    left_margin += sidebar;
  }
  // Sparse text lines: glyph runs with word gaps, blank lines in between so
  // flat page regions dominate (screen-content statistics).
  const int line_h = std::max(2, size / 12);
  int y = std::max(2, size / 10) + line_h;
  while (y + line_h < size) {
    if (rng.uniform() < 0.3) {
      y += line_h + 1;  // blank line
      continue;
    }
    int x = left_margin + static_cast<int>(rng.below(4));
    const int right = size - std::max(1, size / 16);
    while (x + 2 < right) {
      const int word = 2 + static_cast<int>(rng.below(4));
      const double ink = page - ink_contrast * rng.uniform(0.7, 1.0);
      fill_rect(x, y, std::min(word, right - x), line_h - 1, ink);
      x += word + 2 + static_cast<int>(rng.below(4));
    }
    y += 2 * line_h;
  }
  return im;
}

Image apply_distortion(const Image& im, Distortion family, double strength, Rng& rng) {
  Image out = im;
  switch (family) {
    case Distortion::kNoise: {
      const double sd = 0.22 * strength;
      for (double& v : out.pix) v = clamp01(v + rng.normal(0.0, sd));
      break;
    }
    case Distortion::kBlur: {
      out = gaussian_blur(out, 2.4 * strength);
      break;
    }
    case Distortion::kContrast: {
      const double gain = 1.0 - 0.85 * strength;
      const double bias = 0.08 * strength;
      for (double& v : out.pix) v = clamp01(0.5 + (v - 0.5) * gain + bias);
      break;
    }
  }
  return out;
}

SynthOutput generate_synthetic(const SyntheticSpec& spec,
                               const std::filesystem::path& out_dir) {
  if (spec.n_images < 2) throw std::invalid_argument("synth: need at least 2 images per domain");
  if (spec.image_size < 12) throw std::invalid_argument("synth: image_size must be at least 12");
  if (spec.quality_levels < 2) throw std::invalid_argument("synth: need at least 2 quality levels");
  if (spec.families.empty()) throw std::invalid_argument("synth: no distortion families");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("synth: cannot create output directory " + out_dir.string());
  }

  SynthOutput res;
  res.source_manifest = out_dir / "source.csv";
  res.target_manifest = out_dir / "target.csv";
  res.target_truth = out_dir / "target_truth.csv";
  res.pseudo_manifest = out_dir / "pseudo.csv";
  res.meta = out_dir / "meta.csv";

  std::ofstream meta(res.meta, std::ios::trunc);
  meta << "image_id,domain,family,level,score\n";

  const int fam_n = static_cast<int>(spec.families.size());
  // Target images reuse a pool of base layouts so same-content pairs exist.
  const int target_bases = std::max(4, spec.n_images / 6);

  Manifest source, target, truth, pseudo;
  source.root = target.root = truth.root = pseudo.root = out_dir;

  Rng src_rng = stream_rng(spec.seed, 0x736f7572);  // "sour"
  for (int i = 0; i < spec.n_images; ++i) {
    const Distortion fam = spec.families[static_cast<std::size_t>(i % fam_n)];
    const int level = (i / fam_n) % spec.quality_levels;
    const double strength = static_cast<double>(level) / (spec.quality_levels - 1);
    const double score = 1.0 - strength;
    Image base = synth_natural_base(spec.image_size, src_rng);
    Image img = apply_distortion(base, fam, strength, src_rng);
    char id[32];
    std::snprintf(id, sizeof(id), "src_%04d", i);
    write_pnm(img, out_dir / (std::string(id) + ".ppm"));
    source.entries.push_back({id, score});
    meta << id << ",source," << distortion_name(fam) << "," << level << ","
         << format_double(score) << "\n";
  }

  Rng tgt_rng = stream_rng(spec.seed, 0x74676574);  // "tget"
  std::vector<Image> bases;
  bases.reserve(static_cast<std::size_t>(target_bases));
  for (int b = 0; b < target_bases; ++b) {
    bases.push_back(synth_text_base(spec.image_size, spec.domain_shift, tgt_rng));
  }
  Rng pseudo_rng = stream_rng(spec.seed, 0x70736575);  // "pseu"
  for (int i = 0; i < spec.n_images; ++i) {
    const Distortion fam = spec.families[static_cast<std::size_t>(i % fam_n)];
    const int level = (i / fam_n) % spec.quality_levels;
    const double strength = static_cast<double>(level) / (spec.quality_levels - 1);
    const double score = 1.0 - strength;
    const Image& base = bases[static_cast<std::size_t>(i % target_bases)];
    Image img = apply_distortion(base, fam, strength, tgt_rng);
    char id[32];
    std::snprintf(id, sizeof(id), "tgt_%04d", i);
    write_pnm(img, out_dir / (std::string(id) + ".ppm"));
    target.entries.push_back({id, std::nullopt});
    truth.entries.push_back({id, score});
    // The external guidance scorer is deliberately noisy.
    pseudo.entries.push_back({id, score + pseudo_rng.normal(0.0, spec.pseudo_noise)});
    meta << id << ",target," << distortion_name(fam) << "," << level << ","
         << format_double(score) << "\n";
  }

  save_manifest(source, res.source_manifest);
  save_manifest(target, res.target_manifest);
  save_manifest(truth, res.target_truth);
  save_manifest(pseudo, res.pseudo_manifest);
  return res;
}

}  // namespace rankuda
