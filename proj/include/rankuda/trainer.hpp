#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rankuda/config.hpp"
#include "rankuda/encoder.hpp"
#include "rankuda/losses.hpp"
#include "rankuda/manifest.hpp"
#include "rankuda/pairing.hpp"
#include "rankuda/rng.hpp"

namespace rankuda {

struct AdamParams {
  double lr = 5e-5;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Classical Adam with weight decay added to the gradient, followed by the
// nonnegativity projection for constrained parameters. Errors on non-finite
// gradients, naming the parameter.
void adam_step(Parameter& p, std::span<const double> grad, const AdamParams& ap);

struct StepLossRow {
  long step = 0;
  LossBreakdown loss;
};

struct EpochRow {
  int iteration = 0;
  int epoch = 0;
  double source_accuracy = 0.0;
};

struct TrainLog {
  std::vector<StepLossRow> steps;
  std::vector<EpochRow> epochs;
  std::vector<std::string> checkpoints;
};

void save_loss_log(const TrainLog& log, const std::filesystem::path& file);
void save_accuracy_log(const TrainLog& log, const std::filesystem::path& file);

// Images loaded once: originals (for SSIM) plus encoder-ready versions
// (resized to input_size, 3 channels).
class ImageStore {
 public:
  static ImageStore load(const Manifest& manifest, int input_size);
  const Image& original(const std::string& id) const;
  const Image& network(const std::string& id) const;
  std::span<const std::string> ids() const { return ids_; }
  void merge(ImageStore other);

 private:
  std::vector<std::string> ids_;
  std::map<std::string, Image> original_;
  std::map<std::string, Image> network_;
};

// Evaluation-mode features for a set of images; parallel over images when
// threads > 1 (each worker uses an isolated graph).
std::vector<std::vector<double>> eval_features(const ImageStore& images,
                                               std::span<const std::string> ids,
                                               ModelState& state, int threads);

// Evaluation parallelism: RANKUDA_THREADS caps/overrides the default.
int eval_thread_count();

// Class-1 probability that image a ranks above image b, from cached features.
double rank_probability(const ModelState& state, std::span<const double> feature_a,
                        std::span<const double> feature_b);

struct RankTrainResult {
  ModelState state;
  double best_accuracy = 0.0;
  int best_epoch = 0;
};

// Ranking-model training: shuffled mixed batches, combined loss, Adam, and
// early stopping on source ranking accuracy (best checkpoint returned).
RankTrainResult train_ranking(const ImageStore& images,
                              std::span<const PairSample> source_pairs,
                              std::span<const PairSample> target_pairs,
                              const std::map<std::string, double>& source_scores,
                              const PipelineConfig& cfg, Rng& rng, TrainLog* log,
                              long* step_counter, int log_iteration = 1);

// Tournament scoring: S_i = (1/(n-1)) * sum_{j != i} [prob(i,j) > 0.5].
std::vector<double> tournament_scores(int n,
                                      const std::function<double(int, int)>& prob);

// Pseudo-quality for every id by exhaustive pairwise comparison (features
// are encoded once and cached). `sample` limits the comparison set per image
// for large target sets.
std::vector<double> aggregate_quality(const ImageStore& images,
                                      std::span<const std::string> ids,
                                      ModelState& state,
                                      std::optional<long> sample = std::nullopt,
                                      std::uint64_t seed = 0);

struct RegressionTrainResult {
  double best_loss = 0.0;
  int best_epoch = 0;
};

// Trains only the target regression head on pseudo-labels; the encoder stays
// frozen (features are cached once in evaluation mode).
RegressionTrainResult train_regression(const ImageStore& images,
                                       std::span<const std::string> ids,
                                       std::span<const double> pseudo_scores,
                                       ModelState& state, const PipelineConfig& cfg,
                                       Rng& rng, TrainLog* log, long* step_counter);

struct PipelineResult {
  ModelState state;
  std::vector<std::string> target_ids;
  std::vector<double> predictions;              // final iteration
  std::vector<std::vector<double>> per_iteration_predictions;
  TrainLog log;
};

// Full pipeline: pair selection, ranking training, tournament aggregation,
// regression training; repeated with refined pseudo-MOS for later
// iterations. Every stage writes its artifact under out_dir and is skipped
// (loaded) when the artifact already exists, so interrupted runs resume.
PipelineResult run_pipeline(const Manifest& source_manifest,
                            const Manifest& target_manifest,
                            const Manifest& pseudo_manifest, const PipelineConfig& cfg,
                            const std::filesystem::path& out_dir);

void save_predictions_csv(std::span<const std::string> ids,
                          std::span<const double> scores,
                          const std::filesystem::path& file);

}  // namespace rankuda
