#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "rankuda/encoder.hpp"
#include "rankuda/rng.hpp"

using namespace rankuda;
using rankuda::ad::Tape;
using rankuda::ad::Tensor;

namespace {

ModelState tiny_state(int input_size = 16, double scale = 0.125, std::uint64_t seed = 3) {
  EncoderConfig cfg;
  cfg.input_size = input_size;
  cfg.scale_factor = scale;
  Rng rng(seed);
  return init_model(cfg, rng);
}

Image noise_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image im = Image::filled(size, size, 3, 0.0);
  for (double& v : im.pix) v = rng.uniform(0.0, 1.0);
  return im;
}

}  // namespace

TEST_CASE("encode handles degenerate input and is deterministic") {
  ModelState state = tiny_state();
  const Image zero = Image::filled(16, 16, 3, 0.0);
  const auto f = encode_eval(zero, state);
  CHECK(f.size() == static_cast<std::size_t>(state.cfg.feature_dim()));
  for (double v : f) CHECK(std::isfinite(v));

  const Image img = noise_image(16, 10);
  const auto f1 = encode_eval(img, state);
  const auto f2 = encode_eval(img, state);
  CHECK(f1 == f2);  // bitwise

  SUBCASE("identical images in one batch give identical feature rows") {
    Tape t;
    BoundModel m = bind_model(t, state, Mode::kTrain);
    const Image* ptrs[2] = {&img, &img};
    Tensor feats = encode_batch(m, ptrs);
    const auto v = feats.value();
    const std::size_t d = static_cast<std::size_t>(state.cfg.feature_dim());
    for (std::size_t i = 0; i < d; ++i) CHECK(v[i] == v[d + i]);
  }
}

TEST_CASE("encode validates its input") {
  ModelState state = tiny_state();
  Tape t;
  BoundModel m = bind_model(t, state, Mode::kEval);
  const Image gray = Image::filled(16, 16, 1, 0.5);
  const Image* gp = &gray;
  CHECK_THROWS(encode_batch(m, std::span<const Image* const>(&gp, 1)));
  Image bad = Image::filled(16, 16, 3, 0.5);
  bad.pix[7] = std::nan("");
  const Image* bp = &bad;
  CHECK_THROWS(encode_batch(m, std::span<const Image* const>(&bp, 1)));
}

TEST_CASE("full-scale configuration matches the published architecture") {
  EncoderConfig cfg;  // input 224, scale 1
  Rng rng(1);
  ModelState state = init_model(cfg, rng);
  CHECK(state.cfg.feature_dim() == 128);
  CHECK(state.param("fc1_w").shape == ad::Shape{128, 256});
  CHECK(state.param("fc2_w").shape == ad::Shape{256, 256});
  CHECK(state.param("fc3_w").shape == ad::Shape{256, 128});
  CHECK(state.param("sreg_w").shape == ad::Shape{128, 1});
  CHECK(state.param("cls_w").shape == ad::Shape{128, 2});
  CHECK(state.param("treg1_w").shape == ad::Shape{128, 256});
  CHECK(state.param("treg2_w").shape == ad::Shape{256, 1});
  const auto ch = cfg.conv_channels();
  CHECK(ch == std::array<int, 7>{48, 48, 64, 64, 64, 64, 128});

  // One full-size forward: the feature really is 128-dimensional.
  const Image img = noise_image(224, 5);
  const auto f = encode_eval(img, state);
  CHECK(f.size() == 128);
}

TEST_CASE("regress_source") {
  ModelState state = tiny_state();
  const int d = state.cfg.feature_dim();
  Tape t;
  BoundModel m = bind_model(t, state, Mode::kEval);

  SUBCASE("zero feature with zero bias maps to zero") {
    Tensor f = t.full({1, d}, 0.0);
    CHECK(regress_source(m, f).value()[0] == 0.0);
  }
  SUBCASE("ones map to the weight sum") {
    Tensor f = t.full({1, d}, 1.0);
    double expected = state.param("sreg_b").value[0];
    for (double w : state.param("sreg_w").value) expected += w;
    CHECK(regress_source(m, f).value()[0] == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("monotone nondecreasing in every coordinate") {
    Rng rng(8);
    std::vector<double> base(static_cast<std::size_t>(d));
    for (auto& v : base) v = rng.uniform(-1, 1);
    Tensor f0 = t.leaf({1, d}, base);
    const double y0 = regress_source(m, f0).value()[0];
    for (int i = 0; i < d; ++i) {
      auto bumped = base;
      bumped[static_cast<std::size_t>(i)] += 0.5;
      Tensor f1 = t.leaf({1, d}, bumped);
      CHECK(regress_source(m, f1).value()[0] >= y0 - 1e-15);
    }
  }
  SUBCASE("negative weight violates the projection contract") {
    state.param("sreg_w").value[0] = -0.1;
    Tape t2;
    BoundModel m2 = bind_model(t2, state, Mode::kEval);
    Tensor f = t2.full({1, d}, 0.0);
    CHECK_THROWS(regress_source(m2, f));
  }
}

TEST_CASE("rank_feature") {
  Tape t;
  SUBCASE("identical features cancel") {
    Tensor a = t.leaf({1, 3}, {1.0, 2.0, 3.0});
    Tensor b = t.leaf({1, 3}, {1.0, 2.0, 3.0});
    for (double v : rank_feature(a, b).value()) CHECK(v == 0.0);
  }
  SUBCASE("antisymmetry") {
    Tensor a = t.leaf({1, 2}, {3.0, 1.0});
    Tensor b = t.leaf({1, 2}, {1.0, 2.0});
    const auto ab = rank_feature(a, b).value();
    const auto ba = rank_feature(b, a).value();
    CHECK(ab[0] == 2.0);
    CHECK(ab[1] == -1.0);
    CHECK(ba[0] == -ab[0]);
    CHECK(ba[1] == -ab[1]);
  }
  SUBCASE("dimension mismatch errors") {
    Tensor a = t.leaf({1, 2}, {1.0, 2.0});
    Tensor b = t.leaf({1, 3}, {1.0, 2.0, 3.0});
    CHECK_THROWS(rank_feature(a, b));
  }
}

TEST_CASE("classify_rank") {
  ModelState state = tiny_state();
  const int d = state.cfg.feature_dim();

  SUBCASE("equal logits give probability one half") {
    state.param("cls_w").value.assign(static_cast<std::size_t>(d) * 2, 0.0);
    state.param("cls_b").value = {0.0, 0.0};
    Tape t;
    BoundModel m = bind_model(t, state, Mode::kEval);
    Tensor f = t.full({1, d}, 0.7);
    CHECK(classify_rank(m, f).value()[0] == doctest::Approx(0.5).epsilon(1e-15));
  }

  SUBCASE("constructed logits (10,-10) match the softmax closed form") {
    state.param("cls_w").value.assign(static_cast<std::size_t>(d) * 2, 0.0);
    state.param("cls_w").value[0] = 10.0;   // W[0][0]
    state.param("cls_w").value[1] = -10.0;  // W[0][1]
    state.param("cls_b").value = {0.0, 0.0};
    Tape t;
    BoundModel m = bind_model(t, state, Mode::kEval);
    std::vector<double> fv(static_cast<std::size_t>(d), 0.0);
    fv[0] = 1.0;
    Tensor f = t.leaf({1, d}, fv);
    const double expected = std::exp(-10.0) / (std::exp(10.0) + std::exp(-10.0));
    CHECK(classify_rank(m, f).value()[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(2.0611536181902037e-09).epsilon(1e-12));
  }

  SUBCASE("with zero bias, P(F) + P(-F) = 1") {
    state.param("cls_b").value = {0.0, 0.0};
    Tape t;
    BoundModel m = bind_model(t, state, Mode::kEval);
    Rng rng(9);
    std::vector<double> fv(static_cast<std::size_t>(d));
    for (auto& v : fv) v = rng.uniform(-1, 1);
    std::vector<double> nfv(fv.size());
    for (std::size_t i = 0; i < fv.size(); ++i) nfv[i] = -fv[i];
    const double p = classify_rank(m, t.leaf({1, d}, fv)).value()[0];
    const double q = classify_rank(m, t.leaf({1, d}, nfv)).value()[0];
    CHECK(p + q == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("non-finite logits are rejected") {
    state.param("cls_w").value.assign(static_cast<std::size_t>(d) * 2, 1.0);
    Tape t;
    BoundModel m = bind_model(t, state, Mode::kEval);
    std::vector<double> fv(static_cast<std::size_t>(d), 1e308);  // logits overflow
    CHECK_THROWS(classify_rank(m, t.leaf({1, d}, fv)));
  }
}

TEST_CASE("regress_target") {
  ModelState state = tiny_state();
  const int d = state.cfg.feature_dim();
  SUBCASE("zero feature and zero weights map to zero") {
    for (const char* name : {"treg1_w", "treg1_b", "treg2_w", "treg2_b"}) {
      auto& p = state.param(name);
      p.value.assign(p.value.size(), 0.0);
    }
    Tape t;
    BoundModel m = bind_model(t, state, Mode::kEval);
    CHECK(regress_target(m, t.full({1, d}, 0.0)).value()[0] == 0.0);
  }
  SUBCASE("deterministic for a fixed state") {
    Rng rng(30);
    std::vector<double> fv(static_cast<std::size_t>(d));
    for (auto& v : fv) v = rng.uniform(-1, 1);
    const double a = regress_target_eval(fv, state);
    const double b = regress_target_eval(fv, state);
    CHECK(a == b);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ModelState state = tiny_state(16, 0.125, 42);
  // Dirty the running statistics so buffers are exercised too.
  state.bn[0].running_mean[0] = 0.123456789123456789;
  state.bn[2].running_var[1] = 3.9999999999999996;

  const auto dir = std::filesystem::temp_directory_path() / "rankuda_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "model.ckpt";
  save_checkpoint(state, file);
  ModelState loaded = load_checkpoint(file);

  REQUIRE(loaded.params.size() == state.params.size());
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    CHECK(loaded.params[i].name == state.params[i].name);
    CHECK(loaded.params[i].value == state.params[i].value);  // bitwise
  }
  REQUIRE(loaded.bn.size() == state.bn.size());
  for (std::size_t i = 0; i < state.bn.size(); ++i) {
    CHECK(loaded.bn[i].running_mean == state.bn[i].running_mean);
    CHECK(loaded.bn[i].running_var == state.bn[i].running_var);
  }

  const auto file2 = dir / "model2.ckpt";
  save_checkpoint(loaded, file2);
  std::ifstream a(file), b(file2);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());  // byte-identical re-export
  std::filesystem::remove_all(dir);
}
