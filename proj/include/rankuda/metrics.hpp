#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rankuda {

// Spearman rank correlation; ties get average ranks. Errors on constant input.
double srcc(std::span<const double> pred, std::span<const double> truth);

// Kendall tau-b (tie corrected). Errors on constant input.
double krcc(std::span<const double> pred, std::span<const double> truth);

// Pearson linear correlation.
double plcc(std::span<const double> a, std::span<const double> b);

// Five-parameter monotone logistic regression
//   s~ = b1*(1/2 - 1/exp(b2*(s - b3))) + b4*s + b5
// fitted by damped (Levenberg-Marquardt) nonlinear least squares. On
// non-convergence after 1000 iterations the mapping falls back to identity
// and `converged` is false.
struct LogisticFit {
  std::array<double, 5> beta{};
  bool converged = false;
  std::vector<double> mapped;
};
LogisticFit logistic_fit(std::span<const double> pred, std::span<const double> truth);

struct EvalReport {
  double srcc = 0.0, krcc = 0.0, plcc = 0.0, mae = 0.0, rmse = 0.0;
  std::array<double, 5> beta{};
  bool fit_converged = false;
};

// SRCC/KRCC on raw predictions; PLCC/MAE/RMSE on logistic-mapped predictions.
EvalReport evaluate(std::span<const double> pred, std::span<const double> truth);

void save_report_csv(const EvalReport& r, const std::filesystem::path& file);
std::string report_text(const EvalReport& r);

}  // namespace rankuda
