#include "rankuda/pairing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "rankuda/rng.hpp"

namespace rankuda {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Uniform subsample of the ordered pair list; output keeps enumeration order.
void apply_cap(std::vector<PairSample>& pairs, const PairSelectionConfig& cfg) {
  if (!cfg.max_pairs || static_cast<long>(pairs.size()) <= *cfg.max_pairs) return;
  const std::size_t want = static_cast<std::size_t>(*cfg.max_pairs);
  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = stream_rng(cfg.seed, 0x70616972);  // "pair"
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t j =
        i + static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(idx.size() - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(want);
  std::sort(idx.begin(), idx.end());
  std::vector<PairSample> kept;
  kept.reserve(want);
  for (std::size_t i : idx) kept.push_back(std::move(pairs[i]));
  pairs = std::move(kept);
}

}  // namespace

std::vector<double> minmax_normalize(std::span<const double> scores) {
  if (scores.size() < 2) fail("minmax_normalize: need at least two values");
  const auto [mn_it, mx_it] = std::minmax_element(scores.begin(), scores.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx == mn) fail("minmax_normalize: constant input has no defined normalization");
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - mn) / (mx - mn);
  return out;
}

std::vector<PairSample> select_source_pairs(const Manifest& manifest,
                                            const PairSelectionConfig& cfg) {
  if (manifest.entries.size() < 2) fail("select_source_pairs: need at least two images");
  for (const auto& e : manifest.entries) {
    if (!e.score) fail("select_source_pairs: missing score for id '" + e.id + "'");
  }
  std::vector<PairSample> pairs;
  const auto& es = manifest.entries;
  for (std::size_t i = 0; i < es.size(); ++i) {
    for (std::size_t j = i + 1; j < es.size(); ++j) {
      const double si = *es[i].score, sj = *es[j].score;
      if (std::abs(si - sj) > cfg.tau_source) {
        pairs.push_back({es[i].id, es[j].id, si > sj ? 1 : 0});
        pairs.push_back({es[j].id, es[i].id, sj > si ? 1 : 0});
      }
    }
  }
  apply_cap(pairs, cfg);
  return pairs;
}

std::vector<PairSample> select_target_pairs(
    std::span<const std::string> ids, const std::map<std::string, double>& pseudo_scores,
    const std::function<const Image&(const std::string&)>& image_lookup,
    const PairSelectionConfig& cfg) {
  if (ids.size() < 2) fail("select_target_pairs: need at least two images");
  std::vector<double> scores(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = pseudo_scores.find(ids[i]);
    if (it == pseudo_scores.end()) {
      fail("select_target_pairs: missing pseudo score for id '" + ids[i] + "'");
    }
    scores[i] = it->second;
  }
  std::vector<Image> gray;
  gray.reserve(ids.size());
  for (const auto& id : ids) gray.push_back(to_gray(image_lookup(id)));

  std::vector<PairSample> pairs;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      const bool gap = std::abs(scores[i] - scores[j]) > cfg.tau_target;
      const bool same_content = !gap && ssim(gray[i], gray[j]) > cfg.ssim_threshold;
      if (gap || same_content) {
        pairs.push_back({ids[i], ids[j], std::nullopt});
        pairs.push_back({ids[j], ids[i], std::nullopt});
      }
    }
  }
  apply_cap(pairs, cfg);
  return pairs;
}

std::vector<PairSample> select_target_pairs(const Manifest& images,
                                            const std::map<std::string, double>& pseudo_scores,
                                            const PairSelectionConfig& cfg) {
  std::map<std::string, Image> cache;
  const auto lookup = [&](const std::string& id) -> const Image& {
    auto it = cache.find(id);
    if (it == cache.end()) it = cache.emplace(id, load_manifest_image(images, id)).first;
    return it->second;
  };
  const auto ids = images.ids();
  return select_target_pairs(ids, pseudo_scores, lookup, cfg);
}

namespace {

constexpr int kSsimWin = 11;

// Valid-region weighted local sums with a separable normalized Gaussian.
std::vector<double> gauss_valid(const std::vector<double>& src, int w, int h,
                                const double* g, int& ow, int& oh) {
  ow = w - kSsimWin + 1;
  oh = h - kSsimWin + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWin; ++k) acc += g[k] * src[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWin; ++k) acc += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.channels != 1 || b.channels != 1) fail("ssim: expected grayscale inputs");
  if (a.width != b.width || a.height != b.height) {
    fail("ssim: dimension mismatch " + std::to_string(a.width) + "x" +
         std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
         std::to_string(b.height));
  }
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  if (a.width < kSsimWin || a.height < kSsimWin) fail("ssim: images must be at least 11x11");

  double g[kSsimWin];
  double gsum = 0.0;
  for (int k = 0; k < kSsimWin; ++k) {
    const double d = k - kSsimWin / 2;
    g[k] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    gsum += g[k];
  }
  for (double& v : g) v /= gsum;

  const std::size_t n = a.pix.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.pix[i] * a.pix[i];
    bb[i] = b.pix[i] * b.pix[i];
    ab[i] = a.pix[i] * b.pix[i];
  }
  int ow = 0, oh = 0;
  const auto mx = gauss_valid(a.pix, a.width, a.height, g, ow, oh);
  const auto my = gauss_valid(b.pix, b.width, b.height, g, ow, oh);
  const auto sxx = gauss_valid(aa, a.width, a.height, g, ow, oh);
  const auto syy = gauss_valid(bb, a.width, a.height, g, ow, oh);
  const auto sxy = gauss_valid(ab, a.width, a.height, g, ow, oh);

  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2);
    total += num / den;
  }
  return total / static_cast<double>(mx.size());
}

void save_pairs_csv(std::span<const PairSample> pairs, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("pairs: cannot write " + file.string());
  out << "first_id,second_id,label\n";
  for (const auto& p : pairs) {
    out << p.first << "," << p.second << ",";
    if (p.label) out << *p.label;
    out << "\n";
  }
}

std::vector<PairSample> load_pairs_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("pairs: cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("pairs: empty file " + file.string());
  const auto header = split_csv_line(line);
  if (header.size() != 3 || header[0] != "first_id" || header[1] != "second_id" ||
      header[2] != "label") {
    throw std::runtime_error("pairs " + file.string() +
                             ": expected header 'first_id,second_id,label'");
  }
  std::vector<PairSample> pairs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 3) {
      throw std::runtime_error("pairs " + file.string() + ": malformed row '" + line + "'");
    }
    PairSample p;
    p.first = fields[0];
    p.second = fields[1];
    if (!fields[2].empty()) p.label = std::stoi(fields[2]);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace rankuda
