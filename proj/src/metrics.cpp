#include "rankuda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "rankuda/manifest.hpp"

namespace rankuda {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_lengths(const char* op, std::span<const double> a, std::span<const double> b,
                   std::size_t min_n) {
  if (a.size() != b.size()) {
    fail(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
         std::to_string(b.size()));
  }
  if (a.size() < min_n) {
    fail(std::string(op) + ": need at least " + std::to_string(min_n) + " samples");
  }
}

std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double clamped_exp(double x) { return std::exp(std::clamp(x, -500.0, 500.0)); }

double logistic_eval(const std::array<double, 5>& b, double s) {
  return b[0] * (0.5 - clamped_exp(-b[1] * (s - b[2]))) + b[3] * s + b[4];
}

double sse_of(const std::array<double, 5>& b, std::span<const double> pred,
              std::span<const double> truth) {
  double sse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = logistic_eval(b, pred[i]) - truth[i];
    sse += r * r;
  }
  return sse;
}

// Solve A x = rhs for a small dense system (partial pivoting). Returns false
// on a singular matrix.
bool solve_dense(std::vector<double> A, std::vector<double> rhs, int n,
                 std::vector<double>& x) {
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r) {
      if (std::abs(A[static_cast<std::size_t>(r) * n + col]) >
          std::abs(A[static_cast<std::size_t>(piv) * n + col])) {
        piv = r;
      }
    }
    if (std::abs(A[static_cast<std::size_t>(piv) * n + col]) < 1e-300) return false;
    if (piv != col) {
      for (int c = 0; c < n; ++c) {
        std::swap(A[static_cast<std::size_t>(col) * n + c],
                  A[static_cast<std::size_t>(piv) * n + c]);
      }
      std::swap(rhs[static_cast<std::size_t>(col)], rhs[static_cast<std::size_t>(piv)]);
    }
    const double d = A[static_cast<std::size_t>(col) * n + col];
    for (int r = col + 1; r < n; ++r) {
      const double f = A[static_cast<std::size_t>(r) * n + col] / d;
      if (f == 0.0) continue;
      for (int c = col; c < n; ++c) {
        A[static_cast<std::size_t>(r) * n + c] -= f * A[static_cast<std::size_t>(col) * n + c];
      }
      rhs[static_cast<std::size_t>(r)] -= f * rhs[static_cast<std::size_t>(col)];
    }
  }
  x.assign(static_cast<std::size_t>(n), 0.0);
  for (int r = n - 1; r >= 0; --r) {
    double acc = rhs[static_cast<std::size_t>(r)];
    for (int c = r + 1; c < n; ++c) {
      acc -= A[static_cast<std::size_t>(r) * n + c] * x[static_cast<std::size_t>(c)];
    }
    x[static_cast<std::size_t>(r)] = acc / A[static_cast<std::size_t>(r) * n + r];
  }
  for (double v : x) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// The model is linear in (b1, b4, b5) given (b2, b3): solving that inner
// least-squares problem exactly (variable projection) leaves a smooth
// two-parameter outer problem, which Levenberg-Marquardt handles without the
// slow compensation crawl the full five-parameter system exhibits.
bool project_linear(double b2, double b3, std::span<const double> pred,
                    std::span<const double> truth, std::array<double, 5>& beta_out,
                    double& sse_out) {
  const std::size_t n = pred.size();
  std::vector<double> ata(9, 0.0), atb(3, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double basis[3] = {0.5 - clamped_exp(-b2 * (pred[i] - b3)), pred[i], 1.0};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) ata[static_cast<std::size_t>(r) * 3 + c] += basis[r] * basis[c];
      atb[static_cast<std::size_t>(r)] += basis[r] * truth[i];
    }
  }
  for (int r = 0; r < 3; ++r) ata[static_cast<std::size_t>(r) * 3 + r] += 1e-12;
  std::vector<double> x;
  if (!solve_dense(ata, atb, 3, x)) return false;
  beta_out = {x[0], b2, b3, x[1], x[2]};
  sse_out = sse_of(beta_out, pred, truth);
  return std::isfinite(sse_out);
}

struct LmResult {
  std::array<double, 5> beta{};
  double sse = 0.0;
  bool plateaued = false;
};

LmResult levenberg_marquardt(double b2, double b3, std::span<const double> pred,
                             std::span<const double> truth, int max_iters) {
  const std::size_t n = pred.size();
  LmResult res;
  if (!project_linear(b2, b3, pred, truth, res.beta, res.sse)) {
    return res;
  }
  double lambda = 1e-3;
  for (int iter = 0; iter < max_iters; ++iter) {
    // Numerical Jacobian of the projected residual wrt (b2, b3).
    std::vector<double> r0(n);
    for (std::size_t i = 0; i < n; ++i) r0[i] = logistic_eval(res.beta, pred[i]) - truth[i];
    const double h2 = std::max(1e-7, 1e-7 * std::abs(b2));
    const double h3 = std::max(1e-7, 1e-7 * std::abs(b3));
    std::array<double, 5> bp{};
    double sp = 0.0;
    std::vector<double> j2(n, 0.0), j3(n, 0.0);
    if (project_linear(b2 + h2, b3, pred, truth, bp, sp)) {
      for (std::size_t i = 0; i < n; ++i) {
        j2[i] = (logistic_eval(bp, pred[i]) - truth[i] - r0[i]) / h2;
      }
    }
    if (project_linear(b2, b3 + h3, pred, truth, bp, sp)) {
      for (std::size_t i = 0; i < n; ++i) {
        j3[i] = (logistic_eval(bp, pred[i]) - truth[i] - r0[i]) / h3;
      }
    }
    double a11 = 0.0, a12 = 0.0, a22 = 0.0, g1 = 0.0, g2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      a11 += j2[i] * j2[i];
      a12 += j2[i] * j3[i];
      a22 += j3[i] * j3[i];
      g1 += j2[i] * r0[i];
      g2 += j3[i] * r0[i];
    }
    bool stepped = false;
    for (int attempt = 0; attempt < 24 && !stepped; ++attempt) {
      const double d11 = a11 + lambda * std::max(a11, 1e-12);
      const double d22 = a22 + lambda * std::max(a22, 1e-12);
      const double det = d11 * d22 - a12 * a12;
      if (std::abs(det) < 1e-300) {
        lambda *= 10.0;
        continue;
      }
      const double db2 = (-g1 * d22 + g2 * a12) / det;
      const double db3 = (-g2 * d11 + g1 * a12) / det;
      std::array<double, 5> cand_beta{};
      double cand_sse = 0.0;
      if (!std::isfinite(db2) || !std::isfinite(db3) ||
          !project_linear(b2 + db2, b3 + db3, pred, truth, cand_beta, cand_sse) ||
          cand_sse > res.sse) {
        lambda *= 10.0;
        continue;
      }
      const double rel_drop = (res.sse - cand_sse) / std::max(res.sse, 1e-300);
      b2 += db2;
      b3 += db3;
      res.beta = cand_beta;
      res.sse = cand_sse;
      lambda = std::max(lambda / 3.0, 1e-12);
      stepped = true;
      if (rel_drop < 1e-10 || res.sse < 1e-26) res.plateaued = true;
    }
    if (!stepped) res.plateaued = true;  // no descent direction left
    if (res.plateaued) break;
  }
  return res;
}

}  // namespace

double plcc(std::span<const double> a, std::span<const double> b) {
  check_lengths("plcc", a, b, 2);
  const double ma = mean_of(a), mb = mean_of(b);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa == 0.0 || sbb == 0.0) fail("plcc: correlation undefined for constant input");
  return sab / std::sqrt(saa * sbb);
}

double srcc(std::span<const double> pred, std::span<const double> truth) {
  check_lengths("srcc", pred, truth, 2);
  const auto rp = average_ranks(pred);
  const auto rt = average_ranks(truth);
  return plcc(rp, rt);
}

double krcc(std::span<const double> pred, std::span<const double> truth) {
  check_lengths("krcc", pred, truth, 2);
  const std::size_t n = pred.size();
  long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = pred[i] - pred[j];
      const double dy = truth[i] - truth[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0) {
        ++ties_x;
      } else if (dy == 0.0) {
        ++ties_y;
      } else if ((dx > 0.0) == (dy > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const double n0 = 0.5 * static_cast<double>(n) * (static_cast<double>(n) - 1.0);
  double tie_x_total = 0.0, tie_y_total = 0.0;
  {
    auto tie_count = [](std::span<const double> v) {
      std::vector<double> s(v.begin(), v.end());
      std::sort(s.begin(), s.end());
      double total = 0.0;
      std::size_t i = 0;
      while (i < s.size()) {
        std::size_t j = i;
        while (j + 1 < s.size() && s[j + 1] == s[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        total += 0.5 * t * (t - 1.0);
        i = j + 1;
      }
      return total;
    };
    tie_x_total = tie_count(pred);
    tie_y_total = tie_count(truth);
  }
  const double denom = std::sqrt((n0 - tie_x_total) * (n0 - tie_y_total));
  if (denom == 0.0) fail("krcc: correlation undefined for constant input");
  return (static_cast<double>(concordant) - static_cast<double>(discordant)) / denom;
}

LogisticFit logistic_fit(std::span<const double> pred_in, std::span<const double> truth_in) {
  check_lengths("logistic_fit", pred_in, truth_in, 5);
  // Fit on a canonical ordering so the result is exactly invariant to joint
  // permutations of the inputs.
  std::vector<std::size_t> order(pred_in.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pred_in[a] != pred_in[b]) return pred_in[a] < pred_in[b];
    return truth_in[a] < truth_in[b];
  });
  std::vector<double> pred_v(pred_in.size()), truth_v(truth_in.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    pred_v[i] = pred_in[order[i]];
    truth_v[i] = truth_in[order[i]];
  }
  const std::span<const double> pred(pred_v);
  const std::span<const double> truth(truth_v);

  const double mean_pred = mean_of(pred);
  double var_pred = 0.0;
  for (double p : pred) var_pred += (p - mean_pred) * (p - mean_pred);
  var_pred /= static_cast<double>(pred.size());
  const auto [tmin, tmax] = std::minmax_element(truth.begin(), truth.end());

  std::array<double, 5> init{};
  init[0] = *tmax - *tmin;
  init[1] = 1.0 / (std::sqrt(var_pred) + 1e-12);
  init[2] = mean_pred;
  init[3] = 0.0;
  init[4] = mean_of(truth);

  constexpr int kMaxIters = 1000;
  LmResult best{init, sse_of(init, pred, truth), false};
  bool any_plateaued = false;
  // Primary attempt from the documented initialization, then a few scaled
  // slopes in case the first basin is poor. The iteration budget is shared.
  const double scales[4] = {1.0, 0.25, 4.0, -1.0};
  int budget = kMaxIters;
  for (double sc : scales) {
    if (budget <= 0) break;
    LmResult r = levenberg_marquardt(init[1] * sc, init[2], pred, truth, budget);
    budget -= kMaxIters / 4;
    any_plateaued = any_plateaued || r.plateaued;
    if (r.sse < best.sse) best = r;
    if (any_plateaued && best.sse < 1e-20) break;
  }

  LogisticFit fit;
  fit.converged = any_plateaued;
  if (!fit.converged) {
    // Identity fallback.
    fit.beta = {0.0, 1.0, 0.0, 1.0, 0.0};
    fit.mapped.assign(pred_in.begin(), pred_in.end());
    return fit;
  }
  fit.beta = best.beta;
  fit.mapped.resize(pred_in.size());
  for (std::size_t i = 0; i < pred_in.size(); ++i) {
    fit.mapped[i] = logistic_eval(fit.beta, pred_in[i]);
  }
  return fit;
}

EvalReport evaluate(std::span<const double> pred, std::span<const double> truth) {
  check_lengths("evaluate", pred, truth, 5);
  EvalReport r;
  r.srcc = srcc(pred, truth);
  r.krcc = krcc(pred, truth);
  const LogisticFit fit = logistic_fit(pred, truth);
  r.beta = fit.beta;
  r.fit_converged = fit.converged;
  r.plcc = plcc(fit.mapped, truth);
  double mae = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = fit.mapped[i] - truth[i];
    mae += std::abs(e);
    mse += e * e;
  }
  r.mae = mae / static_cast<double>(pred.size());
  r.rmse = std::sqrt(mse / static_cast<double>(pred.size()));
  return r;
}

void save_report_csv(const EvalReport& r, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("report: cannot write " + file.string());
  out << "srcc,krcc,plcc,mae,rmse,beta1,beta2,beta3,beta4,beta5,fit_converged\n";
  out << format_double(r.srcc) << "," << format_double(r.krcc) << ","
      << format_double(r.plcc) << "," << format_double(r.mae) << ","
      << format_double(r.rmse);
  for (double b : r.beta) out << "," << format_double(b);
  out << "," << (r.fit_converged ? 1 : 0) << "\n";
}

std::string report_text(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "srcc  %8.4f\nkrcc  %8.4f\nplcc  %8.4f\nmae   %8.4f\nrmse  %8.4f\n"
                "beta  [%.6g, %.6g, %.6g, %.6g, %.6g]\nfit_converged %s\n",
                r.srcc, r.krcc, r.plcc, r.mae, r.rmse, r.beta[0], r.beta[1], r.beta[2],
                r.beta[3], r.beta[4], r.fit_converged ? "true" : "false");
  return buf;
}

}  // namespace rankuda
