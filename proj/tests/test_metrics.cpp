#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <random>
#include <vector>

#include "taft/metrics.hpp"
#include "taft/segnet.hpp"

namespace fs = std::filesystem;

namespace {

using Grid = std::vector<uint8_t>;

Grid random_grid(taft::Rng& rng, size_t n, double fg_prob) {
  Grid g(n);
  for (auto& x : g) x = rng.uniform() < fg_prob ? 1 : 0;
  return g;
}

// Independent recount over stored grids, one class at a time.
double brute_miou(const std::vector<std::tuple<Grid, Grid, int>>& pairs,
                  const std::vector<int>& class_set) {
  double sum = 0.0;
  for (const int id : class_set) {
    uint64_t i = 0, u = 0;
    for (const auto& [pred, gt, cid] : pairs) {
      if (cid != id) continue;
      for (size_t k = 0; k < pred.size(); ++k) {
        i += pred[k] && gt[k];
        u += pred[k] || gt[k];
      }
    }
    sum += static_cast<double>(i) / static_cast<double>(u);
  }
  return sum / static_cast<double>(class_set.size());
}

double brute_binary(const std::vector<std::tuple<Grid, Grid, int>>& pairs) {
  uint64_t fi = 0, fu = 0, bi = 0, bu = 0;
  for (const auto& [pred, gt, cid] : pairs) {
    for (size_t k = 0; k < pred.size(); ++k) {
      fi += pred[k] && gt[k];
      fu += pred[k] || gt[k];
      bi += !pred[k] && !gt[k];
      bu += !pred[k] || !gt[k];
    }
  }
  return 0.5 * (static_cast<double>(fi) / fu + static_cast<double>(bi) / bu);
}

taft::SegNet<float> tiny_net(uint64_t seed) {
  return taft::SegNet<float>(taft::ModelConfig::tiny(), seed);
}

}  // namespace

TEST_CASE("accumulate counts intersections and unions for both roles") {
  taft::IoUCounts c;
  SUBCASE("identical non-empty masks give i equal to u") {
    taft::accumulate(c, {1, 0, 1, 0}, {1, 0, 1, 0}, 3);
    CHECK(c.per_class.at(3).i == 2);
    CHECK(c.per_class.at(3).u == 2);
    CHECK(c.bg_i == 2);
    CHECK(c.bg_u == 2);
  }
  SUBCASE("disjoint non-empty masks give zero intersection") {
    taft::accumulate(c, {1, 0}, {0, 1}, 0);
    CHECK(c.per_class.at(0).i == 0);
    CHECK(c.per_class.at(0).u == 2);
  }
  SUBCASE("top row against left column on a 2x2 grid") {
    taft::accumulate(c, {1, 1, 0, 0}, {1, 0, 1, 0}, 7);
    CHECK(c.per_class.at(7).i == 1);
    CHECK(c.per_class.at(7).u == 3);
    CHECK(c.fg_i == 1);
    CHECK(c.fg_u == 3);
    CHECK(c.bg_i == 1);
    CHECK(c.bg_u == 3);
  }
  SUBCASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(taft::accumulate(c, {1, 0}, {1, 0, 0}, 0), taft::DimensionError);
  }
}

TEST_CASE("miou averages per-class pooled ratios") {
  taft::IoUCounts c;
  taft::accumulate(c, {1, 1, 0, 0}, {1, 1, 0, 0}, 0);
  taft::accumulate(c, {1, 1, 0, 0}, {1, 0, 1, 0}, 1);
  CHECK(taft::miou(c, {0}) == 1.0);
  CHECK(taft::miou(c, {1}) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(taft::miou(c, {0, 1}) == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK_THROWS_AS(taft::miou(c, {0, 5}), taft::EvalError);
  CHECK_THROWS_AS(taft::miou(c, {}), taft::EvalError);
}

TEST_CASE("binary iou pools globally before averaging fg with bg") {
  SUBCASE("perfect predictions") {
    taft::IoUCounts c;
    taft::accumulate(c, {1, 0, 1, 0}, {1, 0, 1, 0}, 0);
    CHECK(taft::binary_iou(c) == 1.0);
  }
  SUBCASE("all-foreground prediction on a half-foreground image") {
    taft::IoUCounts c;
    taft::accumulate(c, {1, 1, 1, 1}, {1, 1, 0, 0}, 0);
    CHECK(taft::binary_iou(c) == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("swapping fg and bg roles leaves the value unchanged") {
    taft::IoUCounts a, b;
    const Grid pred{1, 1, 0, 1, 0, 0}, gt{1, 0, 0, 1, 1, 0};
    Grid pred_inv(pred.size()), gt_inv(gt.size());
    for (size_t i = 0; i < pred.size(); ++i) {
      pred_inv[i] = 1 - pred[i];
      gt_inv[i] = 1 - gt[i];
    }
    taft::accumulate(a, pred, gt, 0);
    taft::accumulate(b, pred_inv, gt_inv, 0);
    CHECK(taft::binary_iou(a) == taft::binary_iou(b));
  }
  SUBCASE("zero union is rejected") {
    taft::IoUCounts c;
    taft::accumulate(c, {1, 1}, {1, 1}, 0);
    CHECK_THROWS_AS(taft::binary_iou(c), taft::EvalError);
  }
}

TEST_CASE("counts match a brute-force recount on random grids") {
  taft::Rng rng(404);
  std::vector<std::tuple<Grid, Grid, int>> pairs;
  taft::IoUCounts counts;
  for (int k = 0; k < 100; ++k) {
    const int class_id = static_cast<int>(rng.uniform_index(4));
    Grid pred = random_grid(rng, 64, 0.3 + 0.4 * rng.uniform());
    Grid gt = random_grid(rng, 64, 0.3 + 0.4 * rng.uniform());
    gt[0] = pred[0] = 1;
    taft::accumulate(counts, pred, gt, class_id);
    pairs.emplace_back(pred, gt, class_id);
  }
  const std::vector<int> classes{0, 1, 2, 3};
  CHECK(taft::miou(counts, classes) == brute_miou(pairs, classes));
  CHECK(taft::binary_iou(counts) == brute_binary(pairs));
  CHECK(taft::miou(counts, classes) >= 0.0);
  CHECK(taft::miou(counts, classes) <= 1.0);
  CHECK(taft::binary_iou(counts) >= 0.0);
  CHECK(taft::binary_iou(counts) <= 1.0);
}

TEST_CASE("per-class pooling and global pooling provably differ") {
  taft::IoUCounts c;
  Grid small_pred(4, 0), small_gt(4, 0);
  small_pred[0] = small_gt[0] = 1;
  taft::accumulate(c, small_pred, small_gt, 0);
  Grid big_pred(4, 0), big_gt(4, 0);
  big_pred[0] = big_pred[1] = big_pred[2] = 1;
  big_gt[3] = 1;
  taft::accumulate(c, big_pred, big_gt, 1);

  CHECK(taft::miou(c, {0, 1}) == doctest::Approx(0.5).epsilon(1e-12));
  const double global_fg = 1.0 / 5.0;
  CHECK(static_cast<double>(c.fg_i) / c.fg_u == doctest::Approx(global_fg).epsilon(1e-12));
  CHECK(taft::miou(c, {0, 1}) != static_cast<double>(c.fg_i) / c.fg_u);
}

TEST_CASE("merge is field-wise addition and order-invariant") {
  taft::Rng rng(17);
  std::vector<std::tuple<Grid, Grid, int>> pairs;
  for (int k = 0; k < 30; ++k) {
    pairs.emplace_back(random_grid(rng, 25, 0.5), random_grid(rng, 25, 0.5),
                       static_cast<int>(rng.uniform_index(3)));
  }
  taft::IoUCounts seq;
  for (const auto& [p, g, id] : pairs) taft::accumulate(seq, p, g, id);

  taft::IoUCounts w0, w1, w2;
  taft::IoUCounts* shards[3] = {&w0, &w1, &w2};
  for (size_t k = 0; k < pairs.size(); ++k) {
    const auto& [p, g, id] = pairs[k];
    taft::accumulate(*shards[k % 3], p, g, id);
  }
  taft::IoUCounts forward;
  forward.merge(w0);
  forward.merge(w1);
  forward.merge(w2);
  taft::IoUCounts reversed;
  reversed.merge(w2);
  reversed.merge(w1);
  reversed.merge(w0);

  for (auto* m : {&forward, &reversed}) {
    CHECK(m->fg_i == seq.fg_i);
    CHECK(m->fg_u == seq.fg_u);
    CHECK(m->bg_i == seq.bg_i);
    CHECK(m->bg_u == seq.bg_u);
    for (const auto& [id, pu] : seq.per_class) {
      CHECK(m->per_class.at(id).i == pu.i);
      CHECK(m->per_class.at(id).u == pu.u);
    }
  }
}

TEST_CASE("scaled extents snap to multiples of 16 with a floor") {
  CHECK(taft::scaled_extent(64, 0.7) == 48);
  CHECK(taft::scaled_extent(64, 1.0) == 64);
  CHECK(taft::scaled_extent(64, 1.3) == 80);
  CHECK(taft::scaled_extent(64, 0.05) == 16);
  CHECK(taft::scaled_extent(64, 0.375) == 32);
  CHECK(taft::scaled_extent(32, 0.7) == 16);
  CHECK(taft::scaled_extent(32, 1.3) == 48);
}

TEST_CASE("multi-scale prediction degenerates to single scale as expected") {
  auto net = tiny_net(5);
  const auto ep = taft::sample_class_episode(2, 1, 1, 99, 32);
  taft::NoGradGuard guard;
  const auto p = taft::fit_episode_transform(net, ep, 1e-6);
  const auto& q = ep.query[0];

  const auto feats = net.encoder_forward(taft::image_tensor<float>(q));
  const auto h_a = taft::apply_transform(p, feats.high_level);
  const auto logits = net.decoder_forward(net.aspp_forward(h_a), feats.low_level);
  const auto direct = taft::predict_mask(logits);

  CHECK(taft::multi_scale_predict(net, p, q, {1.0}) == direct);
  CHECK(taft::multi_scale_predict(net, p, q, {1.0, 1.0}) == direct);

  const auto abc = taft::multi_scale_predict(net, p, q, {0.7, 1.0, 1.3});
  const auto cba = taft::multi_scale_predict(net, p, q, {1.3, 0.7, 1.0});
  CHECK(abc == cba);
  CHECK(abc.size() == direct.size());
  CHECK_THROWS_AS(taft::multi_scale_predict(net, p, q, {}), taft::EvalError);
}

TEST_CASE("evaluate produces a deterministic structured report") {
  auto net = tiny_net(9);
  taft::EvalConfig cfg;
  cfg.split = 1;
  cfg.episodes_per_class = 2;
  cfg.queries = 2;
  cfg.seed = 77;
  const auto a = taft::evaluate(net, cfg, 32);
  const auto b = taft::evaluate(net, cfg, 32);

  CHECK(a["episodes"] == 6);
  CHECK(a["per_class"].size() == 3);
  CHECK(a["per_class"][0]["id"] == 3);
  CHECK(a["per_class"][2]["id"] == 5);
  const double m = a["miou"].get<double>();
  const double bi = a["binary_iou"].get<double>();
  CHECK(m >= 0.0);
  CHECK(m <= 1.0);
  CHECK(bi >= 0.0);
  CHECK(bi <= 1.0);
  CHECK(a["config"]["split"] == 1);

  auto ja = a, jb = b;
  ja.erase("wall_ms");
  jb.erase("wall_ms");
  CHECK(ja == jb);
}

TEST_CASE("worker count does not change the metrics") {
  auto net = tiny_net(21);
  taft::EvalConfig cfg;
  cfg.split = 0;
  cfg.episodes_per_class = 3;
  cfg.queries = 2;
  cfg.seed = 5;
  auto one = taft::evaluate(net, cfg, 32);
  cfg.workers = 3;
  auto three = taft::evaluate(net, cfg, 32);
  CHECK(one["miou"] == three["miou"]);
  CHECK(one["binary_iou"] == three["binary_iou"]);
  CHECK(one["per_class"] == three["per_class"]);
}

TEST_CASE("evaluate rejects invalid configs") {
  auto net = tiny_net(3);
  taft::EvalConfig cfg;
  cfg.episodes_per_class = 0;
  CHECK_THROWS_AS(taft::evaluate(net, cfg, 32), taft::ConfigError);
  cfg = taft::EvalConfig{};
  cfg.split = 4;
  CHECK_THROWS_AS(taft::evaluate(net, cfg, 32), taft::ConfigError);
  cfg = taft::EvalConfig{};
  cfg.scales = {1.0, -0.5};
  CHECK_THROWS_AS(taft::evaluate(net, cfg, 32), taft::ConfigError);
}

TEST_CASE("mask dumps are written as binary pgm pairs") {
  auto net = tiny_net(2);
  const auto dir = fs::temp_directory_path() / "taft_test_dump";
  fs::remove_all(dir);
  fs::create_directories(dir);
  taft::EvalConfig cfg;
  cfg.split = 0;
  cfg.episodes_per_class = 1;
  cfg.queries = 2;
  cfg.dump_masks_dir = dir.string();
  taft::evaluate(net, cfg, 32);

  size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    int w = 0, h = 0;
    const auto px = taft::read_pgm(entry.path().string(), w, h);
    CHECK(w == 32);
    CHECK(h == 32);
    CHECK(std::all_of(px.begin(), px.end(), [](uint8_t v) { return v == 0 || v == 255; }));
    ++files;
  }
  CHECK(files == 12);
  fs::remove_all(dir);
}
