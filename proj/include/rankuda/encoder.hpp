#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rankuda/ad.hpp"
#include "rankuda/image.hpp"
#include "rankuda/rng.hpp"

namespace rankuda {

// Seven 3x3 conv layers (BN+ReLU after the first six), global average
// pooling, then three FC layers down to the shared feature of dimension d.
// All widths scale with scale_factor so the same architecture runs at desk
// scale.
struct EncoderConfig {
  int input_size = 224;
  double scale_factor = 1.0;

  static constexpr std::array<int, 7> kBaseChannels{48, 48, 64, 64, 64, 64, 128};
  static constexpr std::array<int, 7> kStrides{1, 2, 2, 2, 1, 2, 1};

  int scaled(int base) const;
  std::array<int, 7> conv_channels() const;
  int fc_hidden() const { return scaled(256); }     // FC1 and FC2 width
  int feature_dim() const { return scaled(128); }   // d
  int target_hidden() const { return scaled(256); }

  void validate() const;
};

struct Parameter {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
  // Adam state
  std::vector<double> m, v;
  long step = 0;
  bool nonneg = false;  // projected to >= 0 after every optimizer step
};

struct ModelState {
  EncoderConfig cfg;
  std::vector<Parameter> params;
  std::vector<ad::BatchNormBuffer> bn;  // one per BN layer (6)

  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  bool has_param(std::string_view name) const;

  // Parameter groups per training phase.
  std::vector<std::string> ranking_param_names() const;     // encoder + heads + centers
  std::vector<std::string> regression_param_names() const;  // target head only
  std::vector<std::string> encoder_param_names() const;
};

ModelState init_model(const EncoderConfig& cfg, Rng& rng);

enum class Mode { kTrain, kEval };

// Parameters placed on a tape as leaves; only names in `trainable` get
// requires_grad.
struct BoundModel {
  ad::Tape* tape = nullptr;
  ModelState* state = nullptr;
  Mode mode = Mode::kEval;
  std::map<std::string, ad::Tensor, std::less<>> leaves;

  const ad::Tensor& operator[](std::string_view name) const;
};

BoundModel bind_model(ad::Tape& tape, ModelState& state, Mode mode,
                      std::span<const std::string> trainable);
BoundModel bind_model(ad::Tape& tape, ModelState& state, Mode mode);

// Images must already be input_size x input_size with 3 channels and finite
// pixels in [0,1]; returns the (B, d) feature matrix F_Reg.
ad::Tensor encode_batch(const BoundModel& m, std::span<const Image* const> images);

// Heads. Features are (B, d) rows.
ad::Tensor regress_source(const BoundModel& m, const ad::Tensor& features);  // (B,1)
ad::Tensor rank_feature(const ad::Tensor& fa, const ad::Tensor& fb);         // (B,d)
ad::Tensor classify_rank(const BoundModel& m, const ad::Tensor& rank_features);  // (B,1) P(first better)
ad::Tensor regress_target(const BoundModel& m, const ad::Tensor& features);  // (B,1)

// Single-image conveniences (evaluation mode, fresh tape).
std::vector<double> encode_eval(const Image& image, ModelState& state);
double regress_target_eval(std::span<const double> feature, ModelState& state);
double classify_rank_eval(std::span<const double> feature_a,
                          std::span<const double> feature_b, ModelState& state);

// Checkpoints: versioned text format, hexfloat values, bit-exact round-trip.
void save_checkpoint(const ModelState& state, const std::filesystem::path& file);
ModelState load_checkpoint(const std::filesystem::path& file);

}  // namespace rankuda
