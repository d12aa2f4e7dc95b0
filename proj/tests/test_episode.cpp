#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>
#include <vector>

#include "taft/episode.hpp"
#include "taft/rng.hpp"
#include "taft/taft.hpp"

namespace {

using taft::ClassSpec;
using taft::Phase;
using taft::Rng;
using taft::SplitConfig;

double area_fraction(const taft::Instance& inst) {
  int64_t fg = 0;
  for (const uint8_t v : inst.mask) fg += v;
  return static_cast<double>(fg) / static_cast<double>(inst.mask.size());
}

}  // namespace

TEST_CASE("class table is a bijection over family and texture") {
  std::set<std::pair<int, int>> seen;
  for (int cid = 0; cid < taft::kNumClasses; ++cid) {
    const ClassSpec spec = taft::class_spec(cid);
    CHECK(spec.class_id == cid);
    seen.insert({static_cast<int>(spec.family), static_cast<int>(spec.texture)});
  }
  CHECK(seen.size() == 12);
  CHECK_THROWS_AS(taft::class_spec(12), taft::ConfigError);
  CHECK_THROWS_AS(taft::class_spec(-1), taft::ConfigError);
}

TEST_CASE("splits partition the class set") {
  for (int s = 0; s < 4; ++s) {
    const SplitConfig split = SplitConfig::make(s);
    std::set<int> all;
    for (int c : split.test_class_ids) {
      CHECK(c == 3 * s + static_cast<int>(all.size()));
      CHECK(split.is_test(c));
      all.insert(c);
    }
    for (int c : split.train_class_ids) {
      CHECK_FALSE(split.is_test(c));
      all.insert(c);
    }
    CHECK(all.size() == 12);
  }
  CHECK_THROWS_AS(SplitConfig::make(4), taft::ConfigError);
}

TEST_CASE("rendering is deterministic in the seed") {
  for (int cid : {0, 5, 11}) {
    Rng a(taft::mix64(42, static_cast<uint64_t>(cid)));
    Rng b(taft::mix64(42, static_cast<uint64_t>(cid)));
    auto inst1 = taft::render_instance(taft::class_spec(cid), a);
    auto inst2 = taft::render_instance(taft::class_spec(cid), b);
    CHECK(inst1.mask == inst2.mask);
    CHECK(inst1.image == inst2.image);
  }
}

TEST_CASE("mask area stays inside the configured bounds") {
  int draws = 0;
  for (int cid = 0; cid < 12; ++cid) {
    for (int rep = 0; rep < 84; ++rep) {
      Rng rng(taft::mix64(7000 + cid, static_cast<uint64_t>(rep)));
      auto inst = taft::render_instance(taft::class_spec(cid), rng);
      const double f = area_fraction(inst);
      CHECK(f >= taft::kMinAreaFraction);
      CHECK(f <= taft::kMaxAreaFraction);
      ++draws;
    }
  }
  CHECK(draws == 1008);
}

TEST_CASE("image values stay in the unit interval") {
  for (int cid : {1, 6, 10}) {
    Rng rng(taft::mix64(8000, static_cast<uint64_t>(cid)));
    auto inst = taft::render_instance(taft::class_spec(cid), rng);
    for (const double v : inst.image) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("disk masks are symmetric under quarter turns about their center") {
  int tested = 0;
  for (int rep = 0; rep < 40 && tested < 5; ++rep) {
    Rng rng(taft::mix64(9000, static_cast<uint64_t>(rep)));
    auto inst = taft::render_instance(taft::class_spec(0), rng);
    const int n = inst.w;
    int min_x = n, max_x = -1, min_y = n, max_y = -1;
    double cx = 0, cy = 0;
    int64_t count = 0;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!inst.mask[static_cast<size_t>(y) * n + x]) continue;
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
        cx += x;
        cy += y;
        ++count;
      }
    }
    if (min_x <= 0 || min_y <= 0 || max_x >= n - 1 || max_y >= n - 1) continue;
    cx /= static_cast<double>(count);
    cy /= static_cast<double>(count);
    ++tested;

    auto fg_near = [&](double x, double y) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int ix = static_cast<int>(std::lround(x)) + dx;
          const int iy = static_cast<int>(std::lround(y)) + dy;
          if (ix >= 0 && ix < n && iy >= 0 && iy < n &&
              inst.mask[static_cast<size_t>(iy) * n + ix]) {
            return true;
          }
        }
      }
      return false;
    };
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!inst.mask[static_cast<size_t>(y) * n + x]) continue;
        const double rx = cx - (y - cy);
        const double ry = cy + (x - cx);
        CHECK(fg_near(rx, ry));
      }
    }
  }
  CHECK(tested == 5);
}

TEST_CASE("test-phase episodes never draw training classes") {
  for (int s = 0; s < 4; ++s) {
    const SplitConfig split = SplitConfig::make(s);
    for (int i = 0; i < 10000; ++i) {
      const int cid = taft::sample_episode_class(split, Phase::test, taft::mix64(31, i));
      CHECK(split.is_test(cid));
    }
    for (int i = 0; i < 10000; ++i) {
      const int cid = taft::sample_episode_class(split, Phase::train, taft::mix64(32, i));
      CHECK_FALSE(split.is_test(cid));
    }
  }
}

TEST_CASE("episode structure and determinism") {
  const SplitConfig split = SplitConfig::make(1);
  auto ep = taft::sample_episode(split, Phase::train, 5, 3, 77);
  CHECK(ep.support.size() == 5);
  CHECK(ep.query.size() == 3);
  CHECK(ep.canvas == 64);
  CHECK_FALSE(split.is_test(ep.class_id));

  auto again = taft::sample_episode(split, Phase::train, 5, 3, 77);
  CHECK(again.class_id == ep.class_id);
  for (size_t i = 0; i < ep.support.size(); ++i) {
    CHECK(again.support[i].image == ep.support[i].image);
    CHECK(again.support[i].mask == ep.support[i].mask);
  }
  CHECK_THROWS_AS(taft::sample_episode(split, Phase::train, 0, 3, 77), taft::ConfigError);
}

TEST_CASE("query set does not depend on the shot count") {
  const SplitConfig split = SplitConfig::make(2);
  auto one = taft::sample_episode(split, Phase::test, 1, 4, 123);
  auto five = taft::sample_episode(split, Phase::test, 5, 4, 123);
  CHECK(one.class_id == five.class_id);
  REQUIRE(one.query.size() == five.query.size());
  for (size_t i = 0; i < one.query.size(); ++i) {
    CHECK(one.query[i].image == five.query[i].image);
    CHECK(one.query[i].mask == five.query[i].mask);
  }
}

TEST_CASE("generated masks produce well-posed soft labels") {
  for (int rep = 0; rep < 30; ++rep) {
    Rng rng(taft::mix64(11000, static_cast<uint64_t>(rep)));
    const int cid = static_cast<int>(rng.uniform_index(12));
    auto inst = taft::render_instance(taft::class_spec(cid), rng);
    auto sl = taft::downsample_soft_label<double>(inst.mask, inst.h, inst.w, 16);
    double fg_sum = 0, bg_sum = 0;
    for (size_t i = 0; i < sl.fg.size(); ++i) {
      fg_sum += sl.fg[i];
      bg_sum += sl.bg[i];
      CHECK(sl.fg[i] + sl.bg[i] == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(fg_sum > taft::kWeightSumEps);
    CHECK(bg_sum > taft::kWeightSumEps);
  }
}
