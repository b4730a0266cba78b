#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rankuda/config.hpp"
#include "rankuda/encoder.hpp"
#include "rankuda/manifest.hpp"
#include "rankuda/metrics.hpp"
#include "rankuda/naturalness.hpp"
#include "rankuda/pairing.hpp"
#include "rankuda/synth.hpp"
#include "rankuda/trainer.hpp"

namespace fs = std::filesystem;
using namespace rankuda;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void apply_loss_selection(PipelineConfig& cfg, const std::string& losses) {
  bool has_rank = false;
  LossWeights w = cfg.weights;
  LossWeights selected;
  selected.mmd = 0.0;
  selected.center = 0.0;
  selected.rectification = 0.0;
  selected.correlation = 0.0;
  selected.mse = 0.0;
  for (const auto& name : split_list(losses)) {
    if (name == "rank") {
      has_rank = true;
    } else if (name == "mmd") {
      selected.mmd = w.mmd;
    } else if (name == "center") {
      selected.center = w.center;
    } else if (name == "rec") {
      selected.rectification = w.rectification;
    } else if (name == "cor") {
      selected.correlation = w.correlation;
    } else if (name == "mse") {
      selected.mse = w.mse;
    } else {
      throw std::runtime_error("unknown loss '" + name +
                               "' (expected rank,mmd,center,rec,cor,mse)");
    }
  }
  if (!has_rank) throw std::runtime_error("--losses must include 'rank'");
  cfg.weights = selected;
}

Manifest normalized_scores(const Manifest& in) {
  Manifest out = in;
  std::vector<double> raw;
  raw.reserve(in.entries.size());
  for (const auto& e : in.entries) {
    if (!e.score) throw std::runtime_error("manifest entry '" + e.id + "' has no score");
    raw.push_back(*e.score);
  }
  const auto norm = minmax_normalize(raw);
  for (std::size_t i = 0; i < norm.size(); ++i) out.entries[i].score = norm[i];
  return out;
}

int cmd_synth(const SyntheticSpec& spec, const fs::path& out) {
  const SynthOutput res = generate_synthetic(spec, out);
  std::cout << "source manifest: " << res.source_manifest.string() << "\n"
            << "target manifest: " << res.target_manifest.string() << "\n"
            << "pseudo manifest: " << res.pseudo_manifest.string() << "\n"
            << "hidden truth:    " << res.target_truth.string() << "\n";
  return 0;
}

int cmd_pairs(const std::string& role, const fs::path& manifest_path,
              const fs::path& pseudo_path, const fs::path& out,
              PairSelectionConfig cfg) {
  const Manifest manifest = load_manifest(manifest_path);
  std::vector<PairSample> pairs;
  if (role == "source") {
    pairs = select_source_pairs(normalized_scores(manifest), cfg);
  } else if (role == "target") {
    if (pseudo_path.empty()) throw std::runtime_error("target pairs need --pseudo");
    const Manifest pseudo = normalized_scores(load_manifest(pseudo_path));
    pairs = select_target_pairs(manifest, pseudo.score_map(), cfg);
  } else {
    throw std::runtime_error("--role must be 'source' or 'target'");
  }
  save_pairs_csv(pairs, out);
  std::cout << pairs.size() << " pairs -> " << out.string() << "\n";
  return 0;
}

int cmd_train(const fs::path& source, const fs::path& target, const fs::path& pseudo,
              const PipelineConfig& cfg, const fs::path& out) {
  const Manifest sm = load_manifest(source);
  const Manifest tm = load_manifest(target);
  const Manifest pm = load_manifest(pseudo);
  const PipelineResult res = run_pipeline(sm, tm, pm, cfg, out);
  std::cout << "predictions: " << (out / "pred.csv").string() << "\n"
            << "loss log:    " << (out / "log.csv").string() << "\n";
  return 0;
}

int cmd_predict(const fs::path& model_dir, const fs::path& target, const fs::path& out) {
  // Use the regression checkpoint of the last completed iteration.
  fs::path ckpt;
  for (int k = 1; k < 100; ++k) {
    const fs::path cand = model_dir / ("iter" + std::to_string(k)) / "reg.ckpt";
    if (fs::exists(cand)) {
      ckpt = cand;
    } else {
      break;
    }
  }
  if (ckpt.empty()) {
    throw std::runtime_error("no iter*/reg.ckpt under " + model_dir.string());
  }
  ModelState state = load_checkpoint(ckpt);
  const Manifest tm = load_manifest(target);
  const ImageStore images = ImageStore::load(tm, state.cfg.input_size);
  const auto ids = tm.ids();
  const auto features = eval_features(images, ids, state, eval_thread_count());
  std::vector<double> preds(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    preds[i] = regress_target_eval(features[i], state);
  }
  save_predictions_csv(ids, preds, out);
  std::cout << ids.size() << " predictions -> " << out.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& pred_path, const fs::path& truth_path, const fs::path& out) {
  const Manifest pred = load_manifest(pred_path);
  const Manifest truth = load_manifest(truth_path);
  const auto tmap = truth.score_map();
  std::vector<double> p, t;
  for (const auto& e : pred.entries) {
    if (!e.score) throw std::runtime_error("prediction '" + e.id + "' has no score");
    const auto it = tmap.find(e.id);
    if (it == tmap.end()) throw std::runtime_error("no ground truth for id '" + e.id + "'");
    p.push_back(*e.score);
    t.push_back(it->second);
  }
  const EvalReport report = evaluate(p, t);
  std::cout << report_text(report);
  if (!out.empty()) save_report_csv(report, out);
  return 0;
}

int cmd_naturalness(const fs::path& manifest_path, const fs::path& out) {
  const Manifest manifest = load_manifest(manifest_path);
  if (manifest.entries.empty()) throw std::runtime_error("empty manifest");
  std::vector<Image> maps;
  maps.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Image gray = to_gray(load_manifest_image(manifest, e.id));
    for (double& v : gray.pix) v *= 255.0;
    maps.push_back(mscn_map(gray));
  }
  const NaturalnessHistogram hist = dnv_histogram(maps);
  save_histogram_csv(hist, out);
  std::cout << "histogram -> " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pairwise-ranking domain adaptation for no-reference quality assessment"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the bundled synthetic two-domain task");
  SyntheticSpec spec;
  std::string synth_out;
  std::string families = "noise,blur,contrast";
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n-images", spec.n_images, "Images per domain");
  synth->add_option("--size", spec.image_size, "Image side length");
  synth->add_option("--levels", spec.quality_levels, "Distinct quality levels");
  synth->add_option("--families", families, "Distortion families (comma list)");
  synth->add_option("--shift", spec.domain_shift, "Target domain shift strength");
  synth->add_option("--pseudo-noise", spec.pseudo_noise, "Noise sd of the pseudo scorer");
  synth->add_option("--seed", spec.seed, "Random seed");

  // pairs
  auto* pairs = app.add_subcommand("pairs", "Select discriminable training pairs");
  std::string pairs_role, pairs_manifest, pairs_pseudo, pairs_out;
  PairSelectionConfig pair_cfg;
  double pairs_tau = -1.0;
  long pairs_cap = 0;
  pairs->add_option("--role", pairs_role, "source or target")->required();
  pairs->add_option("--manifest", pairs_manifest, "Image manifest CSV")->required();
  pairs->add_option("--pseudo", pairs_pseudo, "Pseudo-MOS manifest (target role)");
  pairs->add_option("--out", pairs_out, "Output pairs CSV")->required();
  pairs->add_option("--tau", pairs_tau, "Score-gap threshold (default 0.07 source, 0.6 target)");
  pairs->add_option("--ssim-threshold", pair_cfg.ssim_threshold, "Same-content SSIM threshold");
  pairs->add_option("--max-pairs", pairs_cap, "Cap on emitted pairs (0 = no cap)");
  pairs->add_option("--seed", pair_cfg.seed, "Random seed (subsampling)");

  // train
  auto* train = app.add_subcommand("train", "Run the full two-iteration pipeline");
  std::string tr_source, tr_target, tr_pseudo, tr_config, tr_out, tr_losses;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_scale;
  std::optional<int> tr_iters;
  train->add_option("--source", tr_source, "Source manifest (with scores)")->required();
  train->add_option("--target", tr_target, "Target manifest")->required();
  train->add_option("--pseudo", tr_pseudo, "Initial pseudo-MOS manifest")->required();
  train->add_option("--config", tr_config, "Config file (key = value)");
  train->add_option("--out", tr_out, "Output directory")->required();
  train->add_option("--seed", tr_seed, "Random seed (overrides config)");
  train->add_option("--scale-factor", tr_scale, "Width scale factor (overrides config)");
  train->add_option("--losses", tr_losses,
                    "Active losses, comma list from {rank,mmd,center,rec,cor,mse}");
  train->add_option("--iterations", tr_iters, "Pipeline iterations (overrides config)");

  // predict
  auto* predict = app.add_subcommand("predict", "Predict scores with a trained model");
  std::string pr_model, pr_target, pr_out;
  predict->add_option("--model", pr_model, "Training output directory")->required();
  predict->add_option("--target", pr_target, "Target manifest")->required();
  predict->add_option("--out", pr_out, "Output predictions CSV")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate predictions against ground truth");
  std::string ev_pred, ev_truth, ev_out;
  eval_cmd->add_option("--pred", ev_pred, "Predictions CSV")->required();
  eval_cmd->add_option("--truth", ev_truth, "Ground-truth CSV")->required();
  eval_cmd->add_option("--out", ev_out, "Report CSV (optional)");

  // naturalness
  auto* nat = app.add_subcommand("naturalness", "Pooled DNV histogram for a manifest");
  std::string nat_manifest, nat_out;
  nat->add_option("--manifest", nat_manifest, "Image manifest CSV")->required();
  nat->add_option("--out", nat_out, "Output histogram CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      spec.families.clear();
      for (const auto& f : split_list(families)) {
        if (f == "noise") {
          spec.families.push_back(Distortion::kNoise);
        } else if (f == "blur") {
          spec.families.push_back(Distortion::kBlur);
        } else if (f == "contrast") {
          spec.families.push_back(Distortion::kContrast);
        } else {
          throw std::runtime_error("unknown distortion family '" + f + "'");
        }
      }
      return cmd_synth(spec, synth_out);
    }
    if (pairs->parsed()) {
      if (pairs_tau >= 0.0) {
        pair_cfg.tau_source = pairs_tau;
        pair_cfg.tau_target = pairs_tau;
      }
      if (pairs_cap > 0) pair_cfg.max_pairs = pairs_cap;
      return cmd_pairs(pairs_role, pairs_manifest, pairs_pseudo, pairs_out, pair_cfg);
    }
    if (train->parsed()) {
      PipelineConfig cfg;
      if (!tr_config.empty()) cfg = parse_config_file(tr_config);
      if (tr_seed) {
        cfg.train.seed = *tr_seed;
        cfg.pairs.seed = *tr_seed;
      }
      if (tr_scale) cfg.encoder.scale_factor = *tr_scale;
      if (tr_iters) cfg.train.pipeline_iterations = *tr_iters;
      if (!tr_losses.empty()) apply_loss_selection(cfg, tr_losses);
      return cmd_train(tr_source, tr_target, tr_pseudo, cfg, tr_out);
    }
    if (predict->parsed()) return cmd_predict(pr_model, pr_target, pr_out);
    if (eval_cmd->parsed()) return cmd_eval(ev_pred, ev_truth, ev_out);
    if (nat->parsed()) return cmd_naturalness(nat_manifest, nat_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
