#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "rankuda/encoder.hpp"
#include "rankuda/losses.hpp"
#include "rankuda/pairing.hpp"

namespace rankuda {

struct TrainConfig {
  int batch_size = 16;  // per step: batch_size/2 source pairs + batch_size/2 target pairs
  double learning_rate = 5e-5;
  double weight_decay = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int patience = 2;            // epochs without source-accuracy improvement
  int rank_max_epochs = 100;   // safety cap; early stopping normally triggers first
  int regression_max_epochs = 50;
  int pipeline_iterations = 2;
  std::uint64_t seed = 0;
};

struct PipelineConfig {
  TrainConfig train;
  LossWeights weights;
  PairSelectionConfig pairs;
  EncoderConfig encoder;
  bool corr_squared = true;
  // When set and the target set is larger, each tournament round compares
  // against a seeded sample of this size instead of every other image.
  std::optional<long> aggregate_sample;

  void validate() const;
};

// Flat `key = value` text; '#' starts a comment; unknown keys are rejected.
PipelineConfig parse_config_file(const std::filesystem::path& file);
void apply_config_kv(PipelineConfig& cfg, const std::string& key, const std::string& value);
std::string render_config(const PipelineConfig& cfg);

}  // namespace rankuda
