#include "rankuda/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rankuda/manifest.hpp"

namespace rankuda {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("config: " + msg); }

double parse_num(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    fail("bad value '" + value + "' for key '" + key + "'");
  }
  if (pos != value.size() || !std::isfinite(v)) {
    fail("bad value '" + value + "' for key '" + key + "'");
  }
  return v;
}

long parse_long(const std::string& key, const std::string& value) {
  const double v = parse_num(key, value);
  const long l = static_cast<long>(v);
  if (static_cast<double>(l) != v) fail("key '" + key + "' expects an integer, got '" + value + "'");
  return l;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail("key '" + key + "' expects a boolean, got '" + value + "'");
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

void PipelineConfig::validate() const {
  if (train.batch_size < 8 || train.batch_size % 4 != 0) {
    fail("batch_size must be a multiple of 4 and at least 8");
  }
  if (train.patience < 1) fail("patience must be at least 1");
  if (train.pipeline_iterations < 1) fail("pipeline_iterations must be at least 1");
  if (train.learning_rate <= 0.0) fail("learning_rate must be positive");
  if (train.rank_max_epochs < 1 || train.regression_max_epochs < 1) {
    fail("epoch limits must be at least 1");
  }
  if (pairs.tau_source < 0.0 || pairs.tau_source > 1.0 || pairs.tau_target < 0.0 ||
      pairs.tau_target > 1.0 || pairs.ssim_threshold < 0.0 || pairs.ssim_threshold > 1.0) {
    fail("pair-selection thresholds must lie in [0,1]");
  }
  if (weights.mmd < 0.0 || weights.center < 0.0 || weights.rectification < 0.0 ||
      weights.correlation < 0.0 || weights.mse < 0.0) {
    fail("loss weights must be nonnegative");
  }
  encoder.validate();
}

void apply_config_kv(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "batch_size") {
    cfg.train.batch_size = static_cast<int>(parse_long(key, value));
  } else if (key == "learning_rate") {
    cfg.train.learning_rate = parse_num(key, value);
  } else if (key == "weight_decay") {
    cfg.train.weight_decay = parse_num(key, value);
  } else if (key == "adam_beta1") {
    cfg.train.adam_beta1 = parse_num(key, value);
  } else if (key == "adam_beta2") {
    cfg.train.adam_beta2 = parse_num(key, value);
  } else if (key == "adam_eps") {
    cfg.train.adam_eps = parse_num(key, value);
  } else if (key == "patience") {
    cfg.train.patience = static_cast<int>(parse_long(key, value));
  } else if (key == "rank_max_epochs") {
    cfg.train.rank_max_epochs = static_cast<int>(parse_long(key, value));
  } else if (key == "regression_max_epochs") {
    cfg.train.regression_max_epochs = static_cast<int>(parse_long(key, value));
  } else if (key == "pipeline_iterations") {
    cfg.train.pipeline_iterations = static_cast<int>(parse_long(key, value));
  } else if (key == "seed") {
    cfg.train.seed = static_cast<std::uint64_t>(parse_long(key, value));
    cfg.pairs.seed = cfg.train.seed;
  } else if (key == "lambda_mmd") {
    cfg.weights.mmd = parse_num(key, value);
  } else if (key == "lambda_center") {
    cfg.weights.center = parse_num(key, value);
  } else if (key == "lambda_rec") {
    cfg.weights.rectification = parse_num(key, value);
  } else if (key == "lambda_cor") {
    cfg.weights.correlation = parse_num(key, value);
  } else if (key == "lambda_mse") {
    cfg.weights.mse = parse_num(key, value);
  } else if (key == "tau_source") {
    cfg.pairs.tau_source = parse_num(key, value);
  } else if (key == "tau_target") {
    cfg.pairs.tau_target = parse_num(key, value);
  } else if (key == "ssim_threshold") {
    cfg.pairs.ssim_threshold = parse_num(key, value);
  } else if (key == "max_pairs") {
    const long v = parse_long(key, value);
    if (v <= 0) {
      cfg.pairs.max_pairs.reset();
    } else {
      cfg.pairs.max_pairs = v;
    }
  } else if (key == "input_size") {
    cfg.encoder.input_size = static_cast<int>(parse_long(key, value));
  } else if (key == "scale_factor") {
    cfg.encoder.scale_factor = parse_num(key, value);
  } else if (key == "corr_squared") {
    cfg.corr_squared = parse_bool(key, value);
  } else if (key == "aggregate_sample") {
    const long v = parse_long(key, value);
    if (v <= 0) {
      cfg.aggregate_sample.reset();
    } else {
      cfg.aggregate_sample = v;
    }
  } else {
    fail("unknown key '" + key + "'");
  }
}

PipelineConfig parse_config_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail("cannot open " + file.string());
  PipelineConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(file.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    apply_config_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string render_config(const PipelineConfig& cfg) {
  std::ostringstream out;
  out << "batch_size = " << cfg.train.batch_size << "\n";
  out << "learning_rate = " << format_double(cfg.train.learning_rate) << "\n";
  out << "weight_decay = " << format_double(cfg.train.weight_decay) << "\n";
  out << "adam_beta1 = " << format_double(cfg.train.adam_beta1) << "\n";
  out << "adam_beta2 = " << format_double(cfg.train.adam_beta2) << "\n";
  out << "adam_eps = " << format_double(cfg.train.adam_eps) << "\n";
  out << "patience = " << cfg.train.patience << "\n";
  out << "rank_max_epochs = " << cfg.train.rank_max_epochs << "\n";
  out << "regression_max_epochs = " << cfg.train.regression_max_epochs << "\n";
  out << "pipeline_iterations = " << cfg.train.pipeline_iterations << "\n";
  out << "seed = " << cfg.train.seed << "\n";
  out << "lambda_mmd = " << format_double(cfg.weights.mmd) << "\n";
  out << "lambda_center = " << format_double(cfg.weights.center) << "\n";
  out << "lambda_rec = " << format_double(cfg.weights.rectification) << "\n";
  out << "lambda_cor = " << format_double(cfg.weights.correlation) << "\n";
  out << "lambda_mse = " << format_double(cfg.weights.mse) << "\n";
  out << "tau_source = " << format_double(cfg.pairs.tau_source) << "\n";
  out << "tau_target = " << format_double(cfg.pairs.tau_target) << "\n";
  out << "ssim_threshold = " << format_double(cfg.pairs.ssim_threshold) << "\n";
  out << "max_pairs = " << (cfg.pairs.max_pairs ? *cfg.pairs.max_pairs : 0) << "\n";
  out << "input_size = " << cfg.encoder.input_size << "\n";
  out << "scale_factor = " << format_double(cfg.encoder.scale_factor) << "\n";
  out << "corr_squared = " << (cfg.corr_squared ? "true" : "false") << "\n";
  out << "aggregate_sample = " << (cfg.aggregate_sample ? *cfg.aggregate_sample : 0) << "\n";
  return out.str();
}

}  // namespace rankuda
