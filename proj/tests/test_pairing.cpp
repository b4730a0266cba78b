#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "rankuda/pairing.hpp"
#include "rankuda/rng.hpp"

using namespace rankuda;

namespace {

Manifest scored_manifest(const std::vector<double>& scores) {
  Manifest m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    m.entries.push_back({"img_" + std::to_string(i), scores[i]});
  }
  return m;
}

std::set<std::pair<std::string, std::string>> pair_set(const std::vector<PairSample>& ps) {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& p : ps) out.emplace(p.first, p.second);
  return out;
}

Image noise_image(int size, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Image im = Image::filled(size, size, 1, 0.0);
  for (double& v : im.pix) v = rng.uniform(lo, hi);
  return im;
}

}  // namespace

TEST_CASE("minmax_normalize") {
  SUBCASE("simple triple") {
    const auto out = minmax_normalize(std::vector<double>{2, 4, 6});
    CHECK(out[0] == 0.0);
    CHECK(out[1] == doctest::Approx(0.5));
    CHECK(out[2] == 1.0);
  }
  SUBCASE("idempotent when endpoints are attained") {
    const std::vector<double> v{0.0, 0.25, 0.75, 1.0};
    CHECK(minmax_normalize(v) == v);
  }
  SUBCASE("order preserved, endpoints mapped") {
    Rng rng(4);
    std::vector<double> v(17);
    for (auto& x : v) x = rng.uniform(-5, 9);
    const auto out = minmax_normalize(v);
    CHECK(*std::min_element(out.begin(), out.end()) == 0.0);
    CHECK(*std::max_element(out.begin(), out.end()) == 1.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t j = 0; j < v.size(); ++j) {
        CHECK((v[i] < v[j]) == (out[i] < out[j]));
      }
    }
  }
  SUBCASE("constant input errors") {
    CHECK_THROWS(minmax_normalize(std::vector<double>{3, 3, 3}));
    CHECK_THROWS(minmax_normalize(std::vector<double>{3}));
  }
}

TEST_CASE("select_source_pairs") {
  PairSelectionConfig cfg;

  SUBCASE("threshold enumeration on three scores") {
    const Manifest m = scored_manifest({0.0, 0.05, 1.0});
    const auto pairs = select_source_pairs(m, cfg);  // tau = 0.07
    const auto got = pair_set(pairs);
    CHECK(got.size() == 4);
    CHECK(got.count({"img_0", "img_2"}));
    CHECK(got.count({"img_2", "img_0"}));
    CHECK(got.count({"img_1", "img_2"}));
    CHECK(got.count({"img_2", "img_1"}));
    for (const auto& p : pairs) {
      REQUIRE(p.label.has_value());
      CHECK(*p.label == (p.first == "img_2" ? 1 : 0));
    }
  }

  SUBCASE("tau = 1 yields nothing") {
    cfg.tau_source = 1.0;
    const Manifest m = scored_manifest({0.0, 0.5, 1.0});
    CHECK(select_source_pairs(m, cfg).empty());
  }

  SUBCASE("matches the brute-force double loop on random scores") {
    Rng rng(6);
    std::vector<double> scores(10);
    for (auto& s : scores) s = rng.uniform(0, 1);
    const Manifest m = scored_manifest(scores);
    const auto pairs = select_source_pairs(m, cfg);
    std::vector<PairSample> expected;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      for (std::size_t j = i + 1; j < scores.size(); ++j) {
        if (std::abs(scores[i] - scores[j]) > cfg.tau_source) {
          expected.push_back({m.entries[i].id, m.entries[j].id, scores[i] > scores[j] ? 1 : 0});
          expected.push_back({m.entries[j].id, m.entries[i].id, scores[j] > scores[i] ? 1 : 0});
        }
      }
    }
    REQUIRE(pairs.size() == expected.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      CHECK(pairs[i].first == expected[i].first);
      CHECK(pairs[i].second == expected[i].second);
      CHECK(pairs[i].label == expected[i].label);
    }
  }

  SUBCASE("label consistency and reversal flip") {
    Rng rng(7);
    std::vector<double> scores(8);
    for (auto& s : scores) s = rng.uniform(0, 1);
    const Manifest m = scored_manifest(scores);
    const auto sm = m.score_map();
    const auto pairs = select_source_pairs(m, cfg);
    std::map<std::pair<std::string, std::string>, int> labels;
    for (const auto& p : pairs) {
      CHECK(std::abs(sm.at(p.first) - sm.at(p.second)) > cfg.tau_source);
      CHECK(*p.label == (sm.at(p.first) > sm.at(p.second) ? 1 : 0));
      labels[{p.first, p.second}] = *p.label;
    }
    for (const auto& [key, label] : labels) {
      const auto rev = labels.find({key.second, key.first});
      REQUIRE(rev != labels.end());
      CHECK(rev->second == 1 - label);
    }
  }

  SUBCASE("max_pairs cap is deterministic under a fixed seed") {
    Rng rng(8);
    std::vector<double> scores(12);
    for (auto& s : scores) s = rng.uniform(0, 1);
    const Manifest m = scored_manifest(scores);
    cfg.max_pairs = 10;
    cfg.seed = 99;
    const auto a = select_source_pairs(m, cfg);
    const auto b = select_source_pairs(m, cfg);
    REQUIRE(a.size() == 10);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].first == b[i].first);
      CHECK(a[i].second == b[i].second);
    }
  }

  SUBCASE("fewer than two images errors") {
    const Manifest m = scored_manifest({0.5});
    CHECK_THROWS(select_source_pairs(m, cfg));
  }
}

TEST_CASE("select_target_pairs") {
  PairSelectionConfig cfg;
  std::vector<std::string> ids{"a", "b", "c"};
  std::map<std::string, Image> imgs;
  imgs["a"] = noise_image(16, 1);
  imgs["b"] = noise_image(16, 2);
  imgs["c"] = noise_image(16, 3);
  const auto lookup = [&](const std::string& id) -> const Image& { return imgs.at(id); };

  SUBCASE("no gaps and no similar content yields the empty set") {
    const std::map<std::string, double> pseudo{{"a", 0.5}, {"b", 0.6}, {"c", 0.4}};
    CHECK(select_target_pairs(ids, pseudo, lookup, cfg).empty());
  }

  SUBCASE("duplicated image enters through the SSIM rule") {
    imgs["b"] = imgs["a"];  // identical content, SSIM = 1
    const std::map<std::string, double> pseudo{{"a", 0.5}, {"b", 0.55}, {"c", 0.45}};
    const auto pairs = select_target_pairs(ids, pseudo, lookup, cfg);
    const auto got = pair_set(pairs);
    CHECK(got.count({"a", "b"}));
    CHECK(got.count({"b", "a"}));
    CHECK(got.size() == 2);
    for (const auto& p : pairs) CHECK_FALSE(p.label.has_value());
  }

  SUBCASE("gap rule plus SSIM rule match a brute-force evaluation") {
    std::vector<std::string> many;
    std::map<std::string, Image> pool;
    std::map<std::string, double> pseudo;
    Rng rng(10);
    for (int i = 0; i < 8; ++i) {
      const std::string id = "t" + std::to_string(i);
      many.push_back(id);
      // A few images share content to trigger the similarity rule.
      pool[id] = noise_image(16, 100 + static_cast<std::uint64_t>(i % 3));
      pseudo[id] = rng.uniform(0, 1);
    }
    const auto lk = [&](const std::string& id) -> const Image& { return pool.at(id); };
    const auto pairs = select_target_pairs(many, pseudo, lk, cfg);
    std::set<std::pair<std::string, std::string>> expected;
    for (std::size_t i = 0; i < many.size(); ++i) {
      for (std::size_t j = i + 1; j < many.size(); ++j) {
        const bool gap = std::abs(pseudo[many[i]] - pseudo[many[j]]) > cfg.tau_target;
        const bool similar =
            ssim(to_gray(pool[many[i]]), to_gray(pool[many[j]])) > cfg.ssim_threshold;
        if (gap || similar) {
          expected.emplace(many[i], many[j]);
          expected.emplace(many[j], many[i]);
        }
      }
    }
    CHECK(pair_set(pairs) == expected);
  }

  SUBCASE("missing pseudo score names the id") {
    const std::map<std::string, double> pseudo{{"a", 0.5}, {"b", 0.6}};
    try {
      select_target_pairs(ids, pseudo, lookup, cfg);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("'c'") != std::string::npos);
    }
  }
}

TEST_CASE("ssim") {
  SUBCASE("self-similarity is exactly one") {
    const Image a = noise_image(20, 77);
    CHECK(ssim(a, a) == 1.0);
  }
  SUBCASE("symmetry") {
    const Image a = noise_image(16, 5);
    const Image b = noise_image(16, 6);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-15));
  }
  SUBCASE("constant images match the closed-form reference") {
    const Image a = Image::filled(16, 16, 1, 0.25);
    const Image b = Image::filled(16, 16, 1, 0.75);
    // mu_x = 0.25, mu_y = 0.75, all variances zero:
    // SSIM = (2*mu_x*mu_y + C1) / (mu_x^2 + mu_y^2 + C1).
    const double c1 = 0.01 * 0.01;
    const double expected = (2.0 * 0.25 * 0.75 + c1) / (0.25 * 0.25 + 0.75 * 0.75 + c1);
    CHECK(ssim(a, b) == doctest::Approx(expected).epsilon(1e-6));
  }
  SUBCASE("bounded and strictly below one for perturbed copies") {
    const Image a = noise_image(16, 8);
    Image b = a;
    b.pix[40] = std::min(1.0, b.pix[40] + 0.3);
    const double v = ssim(a, b);
    CHECK(v < 1.0);
    CHECK(v >= -1.0);
  }
  SUBCASE("dimension mismatch errors") {
    const Image a = noise_image(16, 1);
    const Image b = noise_image(20, 1);
    CHECK_THROWS(ssim(a, b));
  }
}

TEST_CASE("pairs CSV round-trips") {
  std::vector<PairSample> pairs{{"x", "y", 1}, {"y", "x", 0}, {"p", "q", std::nullopt}};
  const auto dir = std::filesystem::temp_directory_path() / "rankuda_pairs_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "pairs.csv";
  save_pairs_csv(pairs, file);
  const auto loaded = load_pairs_csv(file);
  REQUIRE(loaded.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(loaded[i].first == pairs[i].first);
    CHECK(loaded[i].second == pairs[i].second);
    CHECK(loaded[i].label == pairs[i].label);
  }
  std::filesystem::remove_all(dir);
}
