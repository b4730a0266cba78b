#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "rankuda/synth.hpp"
#include "rankuda/trainer.hpp"

using namespace rankuda;

namespace {

Image brightness_image(int size, double level, std::uint64_t seed) {
  Rng rng(seed);
  Image im = Image::filled(size, size, 3, 0.0);
  for (double& v : im.pix) v = std::clamp(level + 0.08 * rng.normal(), 0.0, 1.0);
  return im;
}

struct BrightnessFixture {
  // Quality equals brightness; pairs are linearly separable.
  std::map<std::string, Image> imgs;
  std::vector<std::string> ids;
  std::map<std::string, double> scores;
  std::vector<PairSample> pairs;

  explicit BrightnessFixture(int n, int size) {
    for (int i = 0; i < n; ++i) {
      const std::string id = "b" + std::to_string(i);
      const double level = static_cast<double>(i) / (n - 1);
      imgs[id] = brightness_image(size, 0.15 + 0.7 * level, 100 + static_cast<std::uint64_t>(i));
      ids.push_back(id);
      scores[id] = level;
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        if (std::abs(scores[ids[static_cast<std::size_t>(i)]] -
                     scores[ids[static_cast<std::size_t>(j)]]) > 0.25) {
          pairs.push_back({ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)],
                           scores[ids[static_cast<std::size_t>(i)]] >
                                   scores[ids[static_cast<std::size_t>(j)]]
                               ? 1
                               : 0});
        }
      }
    }
  }
};

// ImageStore built from in-memory images via a temporary directory.
ImageStore store_from(const std::map<std::string, Image>& imgs, int input_size,
                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.root = dir;
  for (const auto& [id, im] : imgs) {
    write_pnm(im, dir / (id + ".ppm"));
    m.entries.push_back({id, std::nullopt});
  }
  return ImageStore::load(m, input_size);
}

PipelineConfig fast_config(std::uint64_t seed) {
  PipelineConfig cfg;
  cfg.encoder.input_size = 16;
  cfg.encoder.scale_factor = 0.125;
  cfg.train.batch_size = 8;
  cfg.train.learning_rate = 5e-3;
  cfg.train.weight_decay = 1e-4;
  cfg.train.rank_max_epochs = 20;
  cfg.train.regression_max_epochs = 40;
  cfg.train.seed = seed;
  cfg.pairs.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("adam_step") {
  SUBCASE("zero gradient and zero weight decay leave parameters unchanged") {
    Parameter p;
    p.name = "w";
    p.shape = {3};
    p.value = {0.5, -0.25, 1.0};
    p.m.assign(3, 0.0);
    p.v.assign(3, 0.0);
    const auto before = p.value;
    adam_step(p, std::vector<double>{0.0, 0.0, 0.0}, {1e-3, 0.0, 0.9, 0.999, 1e-8});
    CHECK(p.value == before);
  }

  SUBCASE("the first step moves by about -lr * sign(g)") {
    Parameter p;
    p.name = "w";
    p.shape = {2};
    p.value = {1.0, -2.0};
    p.m.assign(2, 0.0);
    p.v.assign(2, 0.0);
    const AdamParams ap{1e-2, 0.0, 0.9, 0.999, 1e-8};
    adam_step(p, std::vector<double>{0.7, -0.3}, ap);
    // mhat = g, vhat = g^2 -> delta = -lr * g / (|g| + eps).
    CHECK(p.value[0] == doctest::Approx(1.0 - 1e-2).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(-2.0 + 1e-2).epsilon(1e-6));
  }

  SUBCASE("a nonneg parameter driven negative is projected to zero") {
    Parameter p;
    p.name = "sreg_w";
    p.shape = {1};
    p.value = {1e-4};
    p.m.assign(1, 0.0);
    p.v.assign(1, 0.0);
    p.nonneg = true;
    adam_step(p, std::vector<double>{2.0}, {1e-2, 0.0, 0.9, 0.999, 1e-8});
    CHECK(p.value[0] == 0.0);
  }

  SUBCASE("non-finite gradients are rejected by name") {
    Parameter p;
    p.name = "conv1_w";
    p.shape = {1};
    p.value = {0.1};
    p.m.assign(1, 0.0);
    p.v.assign(1, 0.0);
    try {
      adam_step(p, std::vector<double>{std::nan("")}, {1e-2, 0.0, 0.9, 0.999, 1e-8});
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("conv1_w") != std::string::npos);
    }
  }
}

TEST_CASE("train_ranking fits separable brightness data") {
  BrightnessFixture fx(8, 16);
  const auto dir = std::filesystem::temp_directory_path() / "rankuda_rank_test";
  const ImageStore store = store_from(fx.imgs, 16, dir);

  PipelineConfig cfg = fast_config(7);
  cfg.weights.mmd = cfg.weights.center = cfg.weights.rectification = 0.0;
  cfg.weights.correlation = cfg.weights.mse = 0.0;

  Rng rng = stream_rng(7, 1);
  TrainLog log;
  long steps = 0;
  const RankTrainResult res =
      train_ranking(store, fx.pairs, {}, fx.scores, cfg, rng, &log, &steps);
  CHECK(res.best_accuracy == doctest::Approx(1.0));
  CHECK(res.best_epoch <= 20);

  SUBCASE("early stopping never returns a worse checkpoint than any epoch seen") {
    double best_seen = 0.0;
    for (const auto& e : log.epochs) best_seen = std::max(best_seen, e.source_accuracy);
    CHECK(res.best_accuracy == doctest::Approx(best_seen));
  }

  SUBCASE("identical seeds give identical logs and states") {
    Rng rng2 = stream_rng(7, 1);
    TrainLog log2;
    long steps2 = 0;
    const RankTrainResult res2 =
        train_ranking(store, fx.pairs, {}, fx.scores, cfg, rng2, &log2, &steps2);
    REQUIRE(log2.steps.size() == log.steps.size());
    for (std::size_t i = 0; i < log.steps.size(); ++i) {
      CHECK(log.steps[i].loss.total == log2.steps[i].loss.total);  // bitwise
    }
    REQUIRE(res2.state.params.size() == res.state.params.size());
    for (std::size_t i = 0; i < res.state.params.size(); ++i) {
      CHECK(res.state.params[i].value == res2.state.params[i].value);
    }
  }

  SUBCASE("projection invariant holds after training") {
    for (double w : res.state.param("sreg_w").value) CHECK(w >= 0.0);
  }

  SUBCASE("target pairs are required when a target loss is active") {
    PipelineConfig cfg2 = cfg;
    cfg2.weights.mmd = 1.0;
    Rng rng3 = stream_rng(7, 2);
    CHECK_THROWS(train_ranking(store, fx.pairs, {}, fx.scores, cfg2, rng3, nullptr, nullptr));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("tournament_scores") {
  SUBCASE("boundary cases") {
    const auto win_all = tournament_scores(5, [](int i, int) { return i == 0 ? 1.0 : 0.0; });
    CHECK(win_all[0] == 1.0);
    const auto lose_all = tournament_scores(5, [](int i, int) { return i == 0 ? 0.0 : 1.0; });
    CHECK(lose_all[0] == 0.0);
    CHECK_THROWS(tournament_scores(1, [](int, int) { return 0.5; }));
  }

  SUBCASE("ties at exactly 0.5 count as losses") {
    const auto s = tournament_scores(3, [](int, int) { return 0.5; });
    for (double v : s) CHECK(v == 0.0);
  }

  SUBCASE("random fixtures match the exhaustive oracle") {
    Rng rng(31);
    for (int rep = 0; rep < 20; ++rep) {
      const int n = 2 + static_cast<int>(rng.below(11));  // up to 12
      std::vector<std::vector<double>> p(static_cast<std::size_t>(n),
                                         std::vector<double>(static_cast<std::size_t>(n)));
      for (auto& row : p) {
        for (double& v : row) v = rng.uniform(0, 1);
      }
      const auto fn = [&](int i, int j) { return p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; };
      const auto got = tournament_scores(n, fn);
      const auto want = oracle::tournament(n, fn);
      CHECK(got == want);
    }
  }

  SUBCASE("a perfect oracle classifier recovers the true order exactly") {
    Rng rng(37);
    const int n = 9;
    std::vector<double> truth(n);
    for (auto& v : truth) v = rng.uniform(0, 1);
    const auto fn = [&](int i, int j) {
      return truth[static_cast<std::size_t>(i)] > truth[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
    };
    const auto scores = tournament_scores(n, fn);
    CHECK(oracle::srcc(scores, truth) == doctest::Approx(1.0));
    for (double s : scores) {
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      // Granularity 1/(n-1).
      const double q = s * (n - 1);
      CHECK(q == doctest::Approx(std::round(q)).epsilon(1e-12));
    }
  }
}

TEST_CASE("aggregate_quality uses cached features consistently") {
  BrightnessFixture fx(6, 16);
  const auto dir = std::filesystem::temp_directory_path() / "rankuda_agg_test";
  const ImageStore store = store_from(fx.imgs, 16, dir);
  Rng rng(3);
  EncoderConfig ec;
  ec.input_size = 16;
  ec.scale_factor = 0.125;
  ModelState state = init_model(ec, rng);

  const auto scores = aggregate_quality(store, fx.ids, state);
  REQUIRE(scores.size() == fx.ids.size());

  // Must equal a manual tournament over eval features.
  const auto feats = eval_features(store, fx.ids, state, 1);
  const auto expected = oracle::tournament(static_cast<int>(fx.ids.size()), [&](int i, int j) {
    return rank_probability(state, feats[static_cast<std::size_t>(i)],
                            feats[static_cast<std::size_t>(j)]);
  });
  CHECK(scores == expected);
  CHECK_THROWS(aggregate_quality(store, std::vector<std::string>{"b0"}, state));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_regression") {
  BrightnessFixture fx(10, 16);
  const auto dir = std::filesystem::temp_directory_path() / "rankuda_reg_test";
  const ImageStore store = store_from(fx.imgs, 16, dir);
  PipelineConfig cfg = fast_config(11);
  cfg.train.learning_rate = 1e-2;

  Rng init_rng = stream_rng(11, 5);
  ModelState state = init_model(cfg.encoder, init_rng);

  // Pseudo-scores perfectly linear in one feature coordinate.
  const auto feats = eval_features(store, fx.ids, state, 1);
  std::vector<double> pseudo(fx.ids.size());
  for (std::size_t i = 0; i < pseudo.size(); ++i) pseudo[i] = 0.6 * feats[i][0] + 0.2;

  const auto encoder_before = [&] {
    std::vector<std::vector<double>> copy;
    for (const auto& name : state.encoder_param_names()) copy.push_back(state.param(name).value);
    return copy;
  }();

  Rng rng = stream_rng(11, 6);
  const RegressionTrainResult res =
      train_regression(store, fx.ids, pseudo, state, cfg, rng, nullptr, nullptr);
  CHECK(res.best_loss < 1e-4);

  SUBCASE("the frozen encoder is bitwise unchanged") {
    const auto names = state.encoder_param_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
      CHECK(state.param(names[i]).value == encoder_before[i]);
    }
  }

  SUBCASE("degenerate pseudo-scores are rejected") {
    std::vector<double> flat(fx.ids.size(), 0.5);
    Rng rng2 = stream_rng(11, 7);
    CHECK_THROWS(train_regression(store, fx.ids, flat, state, cfg, rng2, nullptr, nullptr));
  }

  SUBCASE("deterministic under a fixed seed") {
    Rng a_rng = stream_rng(11, 8);
    Rng b_rng = stream_rng(11, 8);
    ModelState sa = init_model(cfg.encoder, a_rng);
    ModelState sb = sa;
    Rng ta = stream_rng(11, 9), tb = stream_rng(11, 9);
    train_regression(store, fx.ids, pseudo, sa, cfg, ta, nullptr, nullptr);
    train_regression(store, fx.ids, pseudo, sb, cfg, tb, nullptr, nullptr);
    for (const auto& name : sa.regression_param_names()) {
      CHECK(sa.param(name).value == sb.param(name).value);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_pipeline contracts") {
  const auto base = std::filesystem::temp_directory_path() / "rankuda_pipe_test";
  std::filesystem::remove_all(base);
  std::filesystem::create_directories(base);

  SyntheticSpec spec;
  spec.n_images = 16;
  spec.image_size = 16;
  spec.quality_levels = 4;
  spec.seed = 21;
  const SynthOutput data = generate_synthetic(spec, base / "data");
  const Manifest sm = load_manifest(data.source_manifest);
  const Manifest tm = load_manifest(data.target_manifest);
  const Manifest pm = load_manifest(data.pseudo_manifest);

  PipelineConfig cfg = fast_config(21);
  cfg.train.rank_max_epochs = 8;
  cfg.train.regression_max_epochs = 5;
  cfg.train.pipeline_iterations = 1;
  cfg.pairs.max_pairs = 40;
  cfg.pairs.tau_target = 0.4;

  SUBCASE("one iteration produces exactly one artifact cycle") {
    const auto out = base / "run1";
    const PipelineResult res = run_pipeline(sm, tm, pm, cfg, out);
    CHECK(std::filesystem::exists(out / "iter1" / "rank.ckpt"));
    CHECK(std::filesystem::exists(out / "iter1" / "reg.ckpt"));
    CHECK(std::filesystem::exists(out / "iter1" / "pseudo.csv"));
    CHECK(std::filesystem::exists(out / "pred.csv"));
    CHECK(std::filesystem::exists(out / "log.csv"));
    CHECK_FALSE(std::filesystem::exists(out / "iter2"));
    CHECK(res.per_iteration_predictions.size() == 1);
    CHECK_FALSE(std::filesystem::exists(out / ".lock"));  // released
  }

  SUBCASE("reruns and resumed runs reproduce outputs byte-for-byte") {
    cfg.train.pipeline_iterations = 2;
    const auto out_a = base / "run_a";
    const auto out_b = base / "run_b";
    run_pipeline(sm, tm, pm, cfg, out_a);
    run_pipeline(sm, tm, pm, cfg, out_b);
    auto slurp = [](const std::filesystem::path& p) {
      std::ifstream in(p);
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    };
    CHECK(slurp(out_a / "pred.csv") == slurp(out_b / "pred.csv"));

    // Resume: keep only iteration 1 artifacts and rerun.
    const auto out_c = base / "run_c";
    std::filesystem::create_directories(out_c);
    std::filesystem::copy(out_a / "iter1", out_c / "iter1",
                          std::filesystem::copy_options::recursive);
    run_pipeline(sm, tm, pm, cfg, out_c);
    CHECK(slurp(out_c / "pred.csv") == slurp(out_a / "pred.csv"));
  }

  SUBCASE("a locked directory is refused") {
    const auto out = base / "locked";
    std::filesystem::create_directories(out);
    std::ofstream(out / ".lock") << "held\n";
    CHECK_THROWS(run_pipeline(sm, tm, pm, cfg, out));
  }

  std::filesystem::remove_all(base);
}
