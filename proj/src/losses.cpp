#include "rankuda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rankuda {

namespace {

constexpr double kProbEps = 1e-7;
constexpr double kVarianceGuard = 1e-12;
constexpr double kBandwidthFloor = 1e-8;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::vector<std::vector<double>> tensor_rows(const ad::Tensor& t) {
  const auto& s = t.shape();
  if (s.size() != 2) fail("expected a 2-D feature matrix, got " + ad::shape_str(s));
  const std::size_t rows = static_cast<std::size_t>(s[0]);
  const std::size_t cols = static_cast<std::size_t>(s[1]);
  const auto v = t.value();
  std::vector<std::vector<double>> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    out[i].assign(v.begin() + static_cast<std::ptrdiff_t>(i * cols),
                  v.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
  }
  return out;
}

}  // namespace

ad::Tensor mse_source(const ad::Tensor& predictions, std::span<const double> targets) {
  const std::size_t n = predictions.value().size();
  if (n == 0 || targets.empty()) fail("mse_source: empty input");
  if (n != targets.size()) {
    fail("mse_source: " + std::to_string(n) + " predictions vs " +
         std::to_string(targets.size()) + " targets");
  }
  ad::Tape& t = *predictions.tape();
  ad::Tensor tv = t.leaf(predictions.shape(),
                         std::vector<double>(targets.begin(), targets.end()));
  return ad::mul(ad::sum_squares(ad::sub(predictions, tv)), 1.0 / static_cast<double>(n));
}

ad::Tensor bce_rank(const ad::Tensor& probabilities, std::span<const int> labels) {
  const std::size_t n = probabilities.value().size();
  if (n == 0) fail("bce_rank: empty input");
  if (n != labels.size()) {
    fail("bce_rank: " + std::to_string(n) + " probabilities vs " +
         std::to_string(labels.size()) + " labels");
  }
  std::vector<double> y(n), ym(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      fail("bce_rank: label " + std::to_string(labels[i]) + " outside {0,1}");
    }
    y[i] = static_cast<double>(labels[i]);
    ym[i] = 1.0 - y[i];
  }
  ad::Tape& t = *probabilities.tape();
  ad::Tensor p = ad::clamp(probabilities, kProbEps, 1.0 - kProbEps);
  ad::Tensor yv = t.leaf(probabilities.shape(), std::move(y));
  ad::Tensor ymv = t.leaf(probabilities.shape(), std::move(ym));
  ad::Tensor ll = ad::add(ad::mul(yv, ad::log(p)), ad::mul(ymv, ad::log(ad::sub(1.0, p))));
  return ad::neg(ad::mean(ll));
}

ad::Tensor corr_penalty(const ad::Tensor& features, bool squared, CorrDiagnostics* diag) {
  const auto& s = features.shape();
  if (s.size() != 2) fail("corr_penalty: expected 2-D features, got " + ad::shape_str(s));
  const int n = s[0], d = s[1];
  if (n < 2) fail("corr_penalty: need at least 2 rows, got " + std::to_string(n));
  ad::Tape& t = *features.tape();

  ad::Tensor ones = t.full({1, n}, 1.0);
  ad::Tensor mean_row = ad::mul(ad::matmul(ones, features), 1.0 / n);
  ad::Tensor centered = ad::sub_rowvec(features, mean_row);
  ad::Tensor colsq = ad::matmul(ones, ad::square(centered));  // (1, d)

  // Dimensions with ~zero variance would divide by ~zero; their rows and
  // columns of C are masked to exact zeros instead.
  std::vector<bool> degenerate(static_cast<std::size_t>(d), false);
  {
    const auto ss = colsq.value();
    for (int j = 0; j < d; ++j) {
      const double var = ss[static_cast<std::size_t>(j)] / n;
      if (var < kVarianceGuard) {
        degenerate[static_cast<std::size_t>(j)] = true;
        if (diag) diag->degenerate_dims.push_back(j);
      }
    }
  }
  ad::Tensor denom_row = ad::sqrt(ad::add(colsq, 1e-24));
  ad::Tensor denom = ad::matmul(ad::transpose(denom_row), denom_row);  // (d, d)
  ad::Tensor corr = ad::div(ad::matmul(ad::transpose(centered), centered), denom);

  std::vector<double> mask(static_cast<std::size_t>(d) * d, 1.0);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      if (i == j || degenerate[static_cast<std::size_t>(i)] ||
          degenerate[static_cast<std::size_t>(j)]) {
        mask[static_cast<std::size_t>(i) * d + j] = 0.0;
      }
    }
  }
  ad::Tensor off = ad::mul(corr, t.leaf({d, d}, std::move(mask)));
  ad::Tensor norm = ad::sum_squares(off);
  if (!squared) norm = ad::sqrt(ad::add(norm, 1e-30));
  return ad::mul(norm, 1.0 / (static_cast<double>(d) * d));
}

double median_bandwidth(std::span<const std::vector<double>> rows) {
  if (rows.size() < 2) fail("median_bandwidth: need at least 2 points");
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      if (rows[i].size() != rows[j].size()) fail("median_bandwidth: ragged rows");
      double acc = 0.0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        const double diff = rows[i][k] - rows[j][k];
        acc += diff * diff;
      }
      dists.push_back(acc);
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  const double med = (m % 2 == 1) ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
  return std::max(med, kBandwidthFloor);
}

double median_bandwidth(const ad::Tensor& source_features,
                        const ad::Tensor& target_features) {
  auto rows = tensor_rows(source_features);
  auto trows = tensor_rows(target_features);
  if (!rows.empty() && !trows.empty() && rows[0].size() != trows[0].size()) {
    fail("median_bandwidth: feature dimension mismatch between " +
         ad::shape_str(source_features.shape()) + " and " +
         ad::shape_str(target_features.shape()));
  }
  rows.insert(rows.end(), trows.begin(), trows.end());
  return median_bandwidth(rows);
}

ad::Tensor mmd_loss(const ad::Tensor& source_features,
                    const ad::Tensor& target_features, double sigma2) {
  if (sigma2 <= 0.0) fail("mmd_loss: bandwidth must be positive");
  const auto& ss = source_features.shape();
  const auto& st = target_features.shape();
  if (ss.size() != 2 || st.size() != 2 || ss[1] != st[1]) {
    fail("mmd_loss: incompatible feature shapes " + ad::shape_str(ss) + " and " +
         ad::shape_str(st));
  }
  const int n = ss[0], k = st[0];
  const double gamma = -1.0 / (2.0 * sigma2);

  std::vector<ad::Tensor> srows, trows;
  srows.reserve(static_cast<std::size_t>(n));
  trows.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < n; ++i) srows.push_back(ad::slice(source_features, 0, i, i + 1));
  for (int j = 0; j < k; ++j) trows.push_back(ad::slice(target_features, 0, j, j + 1));

  auto kernel = [gamma](const ad::Tensor& a, const ad::Tensor& b) {
    return ad::exp(ad::mul(ad::sum_squares(ad::sub(a, b)), gamma));
  };
  auto mean_of = [](std::vector<ad::Tensor>& terms) {
    ad::Tensor stacked = ad::concat(terms, 0);
    return ad::mean(stacked);
  };

  std::vector<ad::Tensor> kss, ktt, kst;
  kss.reserve(static_cast<std::size_t>(n) * n);
  ktt.reserve(static_cast<std::size_t>(k) * k);
  kst.reserve(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) kss.push_back(kernel(srows[static_cast<std::size_t>(i)], srows[static_cast<std::size_t>(j)]));
  }
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) ktt.push_back(kernel(trows[static_cast<std::size_t>(i)], trows[static_cast<std::size_t>(j)]));
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) kst.push_back(kernel(srows[static_cast<std::size_t>(i)], trows[static_cast<std::size_t>(j)]));
  }
  return ad::add(ad::sub(mean_of(kss), ad::mul(mean_of(kst), 2.0)), mean_of(ktt));
}

namespace {

ad::Tensor center_rows_for_labels(ad::Tape& t, std::span<const int> labels,
                                  const ad::Tensor& center0, const ad::Tensor& center1) {
  const int d = static_cast<int>(center0.value().size());
  ad::Tensor c0r = ad::reshape(center0, {1, d});
  ad::Tensor c1r = ad::reshape(center1, {1, d});
  std::vector<ad::Tensor> rows;
  rows.reserve(labels.size());
  for (int y : labels) {
    if (y != 0 && y != 1) fail("center_loss: label " + std::to_string(y) + " outside {0,1}");
    rows.push_back(y == 0 ? c0r : c1r);
  }
  (void)t;
  return ad::concat(rows, 0);
}

}  // namespace

ad::Tensor center_loss(const ad::Tensor& features, std::span<const int> labels,
                       const ad::Tensor& center0, const ad::Tensor& center1) {
  const auto& s = features.shape();
  if (s.size() != 2) fail("center_loss: expected 2-D features, got " + ad::shape_str(s));
  const int n = s[0], d = s[1];
  if (static_cast<std::size_t>(n) != labels.size()) {
    fail("center_loss: " + std::to_string(n) + " rows vs " +
         std::to_string(labels.size()) + " labels");
  }
  if (center0.value().size() != static_cast<std::size_t>(d) ||
      center1.value().size() != static_cast<std::size_t>(d)) {
    fail("center_loss: center dimension does not match features " + ad::shape_str(s));
  }
  ad::Tensor cmat = center_rows_for_labels(*features.tape(), labels, center0, center1);
  return ad::mul(ad::sum_squares(ad::sub(features, cmat)), 1.0 / n);
}

ad::Tensor rectification_loss(const ad::Tensor& features,
                              const ad::Tensor& probabilities,
                              const ad::Tensor& center0, const ad::Tensor& center1) {
  const auto& s = features.shape();
  if (s.size() != 2) fail("rectification_loss: expected 2-D features, got " + ad::shape_str(s));
  const int k = s[0], d = s[1];
  if (probabilities.value().size() != static_cast<std::size_t>(k)) {
    fail("rectification_loss: " + std::to_string(k) + " rows vs " +
         std::to_string(probabilities.value().size()) + " probabilities");
  }
  for (double p : probabilities.value()) {
    if (!(p >= 0.0 && p <= 1.0)) {
      fail("rectification_loss: probability " + std::to_string(p) + " outside [0,1]");
    }
  }
  ad::Tensor c0r = ad::reshape(center0, {1, d});
  ad::Tensor c1r = ad::reshape(center1, {1, d});
  ad::Tensor total;
  for (int j = 0; j < k; ++j) {
    ad::Tensor fj = ad::slice(features, 0, j, j + 1);
    ad::Tensor pj = ad::reshape(ad::slice(probabilities, 0, j, j + 1), {1});
    ad::Tensor d0 = ad::sum_squares(ad::sub(fj, c0r));
    ad::Tensor d1 = ad::sum_squares(ad::sub(fj, c1r));
    ad::Tensor term = ad::add(ad::mul(ad::sub(1.0, pj), d0), ad::mul(pj, d1));
    total = j == 0 ? term : ad::add(total, term);
  }
  return ad::mul(total, 1.0 / k);
}

ad::Tensor mse_target(const ad::Tensor& predictions,
                      std::span<const double> pseudo_labels) {
  const std::size_t n = predictions.value().size();
  if (n != pseudo_labels.size()) {
    fail("mse_target: " + std::to_string(n) + " predictions vs " +
         std::to_string(pseudo_labels.size()) + " labels");
  }
  if (n == 0) fail("mse_target: empty input");
  ad::Tape& t = *predictions.tape();
  ad::Tensor tv = t.leaf(predictions.shape(),
                         std::vector<double>(pseudo_labels.begin(), pseudo_labels.end()));
  return ad::mul(ad::sum_squares(ad::sub(predictions, tv)), 1.0 / static_cast<double>(n));
}

ad::Tensor total_loss(const RankingBatch& batch, const BoundModel& model,
                      const LossWeights& weights, LossBreakdown* breakdown,
                      std::optional<double> fixed_bandwidth, bool corr_squared) {
  if (!batch.source_features.valid()) fail("total_loss: missing source features");
  const int n = batch.source_features.shape()[0];
  if (static_cast<std::size_t>(n) != batch.source_labels.size()) {
    fail("total_loss: source labels do not match features");
  }
  const bool needs_target = weights.mmd > 0.0 || weights.rectification > 0.0;
  if (needs_target && !batch.target_features.valid()) {
    fail("total_loss: target features required when mmd or rectification weights are nonzero");
  }
  if ((weights.mmd > 0.0 || weights.correlation > 0.0) && n < 2) {
    fail("total_loss: need at least 2 source pairs for mmd/correlation terms");
  }
  if (needs_target && batch.target_features.shape()[0] < 2 && weights.mmd > 0.0) {
    fail("total_loss: need at least 2 target pairs for the mmd term");
  }

  auto check_term = [](const char* name, const ad::Tensor& v) {
    if (!std::isfinite(v.item())) {
      throw std::runtime_error(std::string("total_loss: term ") + name + " is non-finite");
    }
  };

  ad::Tensor p_src = classify_rank(model, batch.source_features);
  ad::Tensor loss = bce_rank(p_src, batch.source_labels);
  check_term("L_pre", loss);
  LossBreakdown bd;
  bd.pre = loss.item();

  if (weights.mmd > 0.0) {
    const double sigma2 = fixed_bandwidth
                              ? *fixed_bandwidth
                              : median_bandwidth(batch.source_features, batch.target_features);
    ad::Tensor l = mmd_loss(batch.source_features, batch.target_features, sigma2);
    check_term("L_mmd", l);
    bd.mmd = l.item();
    loss = ad::add(loss, ad::mul(l, weights.mmd));
  }
  if (weights.center > 0.0) {
    ad::Tensor l = center_loss(batch.source_features, batch.source_labels,
                               model["center0"], model["center1"]);
    check_term("L_ct", l);
    bd.ct = l.item();
    loss = ad::add(loss, ad::mul(l, weights.center));
  }
  if (weights.rectification > 0.0) {
    ad::Tensor p_tgt = classify_rank(model, batch.target_features);
    ad::Tensor l = rectification_loss(batch.target_features, p_tgt, model["center0"],
                                      model["center1"]);
    check_term("L_rec", l);
    bd.rec = l.item();
    loss = ad::add(loss, ad::mul(l, weights.rectification));
  }
  if (weights.correlation > 0.0) {
    ad::Tensor l = corr_penalty(batch.source_features, corr_squared);
    check_term("L_cor", l);
    bd.cor = l.item();
    loss = ad::add(loss, ad::mul(l, weights.correlation));
  }
  if (weights.mse > 0.0) {
    if (!batch.source_single_features.valid()) {
      fail("total_loss: single-image features required for the mse term");
    }
    ad::Tensor preds = regress_source(model, batch.source_single_features);
    ad::Tensor l = mse_source(preds, batch.source_single_targets);
    check_term("L_mse", l);
    bd.mse = l.item();
    loss = ad::add(loss, ad::mul(l, weights.mse));
  }
  check_term("total", loss);
  bd.total = loss.item();
  if (breakdown) *breakdown = bd;
  return loss;
}

}  // namespace rankuda
