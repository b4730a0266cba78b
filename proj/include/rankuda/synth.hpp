#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rankuda/image.hpp"
#include "rankuda/rng.hpp"

namespace rankuda {

enum class Distortion { kNoise, kBlur, kContrast };

// Two-domain synthetic task: smooth camera-like source content and sharp
// text-like target content, both degraded by the same distortion families at
// known levels. Ground-truth quality is 1 - level/(levels-1), so it is a
// known monotone function of distortion strength.
struct SyntheticSpec {
  int n_images = 64;  // per domain
  int image_size = 32;
  int quality_levels = 5;
  std::vector<Distortion> families{Distortion::kNoise, Distortion::kBlur,
                                   Distortion::kContrast};
  double domain_shift = 1.0;   // contrast of the text-like target structures
  double pseudo_noise = 0.15;  // sd of the noise injected into initial pseudo-MOS
  std::uint64_t seed = 0;
};

struct SynthOutput {
  std::filesystem::path source_manifest;  // image_id,score (normalized MOS)
  std::filesystem::path target_manifest;  // image_id, no scores
  std::filesystem::path target_truth;     // hidden ground truth, evaluation only
  std::filesystem::path pseudo_manifest;  // noisy external guidance scores
  std::filesystem::path meta;             // image_id,domain,family,level
};

SynthOutput generate_synthetic(const SyntheticSpec& spec,
                               const std::filesystem::path& out_dir);

// Exposed for tests: base content generators and distortion application.
Image synth_natural_base(int size, Rng& rng);
Image synth_text_base(int size, double shift, Rng& rng);
Image apply_distortion(const Image& im, Distortion family, double strength, Rng& rng);
std::string distortion_name(Distortion d);

}  // namespace rankuda
