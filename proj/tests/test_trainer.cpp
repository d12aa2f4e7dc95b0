#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "taft/checkpoint.hpp"
#include "taft/optim.hpp"
#include "taft/trainer.hpp"

namespace fs = std::filesystem;

namespace {

taft::TrainConfig tiny_config() {
  taft::TrainConfig cfg;
  cfg.canvas = 32;
  cfg.shots = 1;
  cfg.queries = 2;
  cfg.episodes = 6;
  cfg.decay_at_episode = 4;
  cfg.checkpoint_every = 3;
  cfg.seed = 11;
  return cfg;
}

taft::Trainer<float> tiny_trainer(const taft::TrainConfig& cfg) {
  return taft::Trainer<float>(cfg, taft::ModelConfig::tiny());
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("taft_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

template <class T>
std::vector<std::vector<T>> snapshot_values(const taft::ParameterStore<T>& store) {
  std::vector<std::vector<T>> out;
  for (const auto& p : store.items()) out.push_back(p.value.data());
  return out;
}

template <class T>
std::vector<std::vector<T>> snapshot_grads(const taft::ParameterStore<T>& store,
                                           taft::ParamGroup group) {
  std::vector<std::vector<T>> out;
  for (const auto& p : store.items()) {
    if (p.group == group) out.push_back(p.value.grad());
  }
  return out;
}

template <class T>
bool any_nonzero(const std::vector<std::vector<T>>& grads) {
  for (const auto& g : grads) {
    for (const T x : g) {
      if (x != T(0)) return true;
    }
  }
  return false;
}

}  // namespace

TEST_CASE("adam first step matches the bias-corrected closed form") {
  taft::ParameterStore<double> store;
  auto& p = store.add("w", taft::ParamGroup::decoder, taft::Shape{1}, {0.5});
  p.value.zero_grad();
  p.value.grad()[0] = 1.0;
  taft::adam_step(p, 0.1, 0.0);
  const double expect = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
  CHECK(std::abs(p.value.data()[0] - expect) < 1e-12);
  CHECK(p.step_count == 1);

  p.value.grad()[0] = 1.0;
  taft::adam_step(p, 0.1, 0.0);
  const double m = 0.9 * 0.1 + 0.1;
  const double v = 0.999 * 0.001 + 0.001;
  const double mh = m / (1.0 - 0.9 * 0.9);
  const double vh = v / (1.0 - 0.999 * 0.999);
  const double expect2 = expect - 0.1 * mh / (std::sqrt(vh) + 1e-8);
  CHECK(std::abs(p.value.data()[0] - expect2) < 1e-12);
}

TEST_CASE("decoupled weight decay shrinks weights independently of the gradient") {
  taft::ParameterStore<double> store;
  auto& p = store.add("w", taft::ParamGroup::encoder, taft::Shape{1}, {1.0});
  p.value.zero_grad();
  taft::adam_step(p, 0.1, 0.01);
  CHECK(p.value.data()[0] == doctest::Approx(0.999).epsilon(1e-14));
}

TEST_CASE("zero gradients leave parameters unchanged without weight decay") {
  auto cfg = tiny_config();
  cfg.weight_decay = 0.0;
  auto trainer = tiny_trainer(cfg);
  const auto before = snapshot_values(trainer.model().params());
  trainer.model().params().zero_grad();
  trainer.apply_step(0);
  const auto after = snapshot_values(trainer.model().params());
  CHECK(before == after);
}

TEST_CASE("config validation rejects out-of-range fields") {
  auto bad = tiny_config();
  bad.split = 4;
  CHECK_THROWS_AS(taft::Trainer<float>(bad, taft::ModelConfig::tiny()), taft::ConfigError);
  bad = tiny_config();
  bad.precision = 16;
  CHECK_THROWS_AS(taft::Trainer<float>(bad, taft::ModelConfig::tiny()), taft::ConfigError);
  bad = tiny_config();
  bad.decay_at_episode = 0;
  CHECK_THROWS_AS(taft::Trainer<float>(bad, taft::ModelConfig::tiny()), taft::ConfigError);
  bad = tiny_config();
  bad.decay_at_episode = bad.episodes + 1;
  CHECK_THROWS_AS(taft::Trainer<float>(bad, taft::ModelConfig::tiny()), taft::ConfigError);
  bad = tiny_config();
  bad.canvas = 40;
  CHECK_THROWS_AS(taft::Trainer<float>(bad, taft::ModelConfig::tiny()), taft::ConfigError);
}

TEST_CASE("learning rate schedule decays per group at the configured episode") {
  const auto cfg = tiny_config();
  auto trainer = tiny_trainer(cfg);
  using G = taft::ParamGroup;
  CHECK(trainer.lr_for(G::encoder, 0) == cfg.base_lr * cfg.encoder_lr_mult);
  CHECK(trainer.lr_for(G::encoder, 3) == cfg.base_lr * cfg.encoder_lr_mult);
  CHECK(trainer.lr_for(G::encoder, 4) == cfg.base_lr * cfg.encoder_lr_mult * cfg.decay_factor);
  CHECK(trainer.lr_for(G::decoder, 0) == cfg.base_lr);
  CHECK(trainer.lr_for(G::decoder, 5) == cfg.base_lr * cfg.decay_factor);
  CHECK(trainer.lr_for(G::references, 4) == cfg.base_lr * cfg.decay_factor);
}

TEST_CASE("segmentation backward reaches the references only until masked") {
  auto trainer = tiny_trainer(tiny_config());
  auto ep = trainer.episode_for(0);
  auto losses = trainer.run_episode(ep);
  auto& store = trainer.model().params();
  store.zero_grad();
  taft::backward(losses.seg);
  CHECK(any_nonzero(snapshot_grads(store, taft::ParamGroup::references)));
  CHECK(any_nonzero(snapshot_grads(store, taft::ParamGroup::encoder)));
  CHECK(any_nonzero(snapshot_grads(store, taft::ParamGroup::decoder)));

  store.zero_grad(taft::ParamGroup::references);
  CHECK_FALSE(any_nonzero(snapshot_grads(store, taft::ParamGroup::references)));

  const auto decoder_before = snapshot_grads(store, taft::ParamGroup::decoder);
  const auto encoder_before = snapshot_grads(store, taft::ParamGroup::encoder);
  taft::backward(losses.aux);
  CHECK(snapshot_grads(store, taft::ParamGroup::decoder) == decoder_before);
  CHECK(any_nonzero(snapshot_grads(store, taft::ParamGroup::references)));
  CHECK(snapshot_grads(store, taft::ParamGroup::encoder) != encoder_before);
}

TEST_CASE("detached transform still routes auxiliary gradients to the references") {
  auto cfg = tiny_config();
  cfg.differentiate_through_p = false;
  auto trainer = tiny_trainer(cfg);
  auto losses = trainer.run_episode(trainer.episode_for(0));
  trainer.route_gradients(losses);
  auto& store = trainer.model().params();
  CHECK(any_nonzero(snapshot_grads(store, taft::ParamGroup::references)));
  CHECK(any_nonzero(snapshot_grads(store, taft::ParamGroup::encoder)));
}

TEST_CASE("episode loss is deterministic for frozen parameters") {
  auto trainer = tiny_trainer(tiny_config());
  auto ep = trainer.episode_for(3);
  auto a = trainer.run_episode(ep);
  auto b = trainer.run_episode(ep);
  CHECK(a.seg.item() == b.seg.item());
  CHECK(a.aux.item() == b.aux.item());
  CHECK(a.query_count == 2);
}

TEST_CASE("zero-episode training checkpoints the initialization") {
  auto cfg = tiny_config();
  cfg.episodes = 0;
  const auto dir = fresh_dir("zero_episodes");
  auto trainer = tiny_trainer(cfg);
  const auto init = snapshot_values(trainer.model().params());
  trainer.train(dir);
  auto other = tiny_trainer(cfg);
  other.resume((dir / "ckpt_final.taft").string());
  CHECK(snapshot_values(other.model().params()) == init);
  CHECK(other.episode_index() == 0);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip restores values, moments, and counters") {
  auto trainer = tiny_trainer(tiny_config());
  trainer.train_one();
  const auto dir = fresh_dir("roundtrip");
  const auto path = (dir / "ckpt.taft").string();
  trainer.save(path);

  auto other = tiny_trainer(tiny_config());
  other.resume(path);
  CHECK(other.episode_index() == 1);
  const auto& a = trainer.model().params();
  const auto& b = other.model().params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].value.data() == b[i].value.data());
    CHECK(a[i].adam_m == b[i].adam_m);
    CHECK(a[i].adam_v == b[i].adam_v);
    CHECK(a[i].step_count == b[i].step_count);
  }
  fs::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects bad files with typed errors") {
  auto trainer = tiny_trainer(tiny_config());
  const auto dir = fresh_dir("badfiles");
  const auto path = (dir / "ckpt.taft").string();
  trainer.save(path);

  SUBCASE("version mismatch") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char bytes[4] = {99, 0, 0, 0};
    f.write(bytes, 4);
    f.close();
    auto other = tiny_trainer(tiny_config());
    try {
      other.resume(path);
      FAIL("expected CheckpointVersionError");
    } catch (const taft::CheckpointVersionError& e) {
      CHECK(e.found_version() == 99);
    }
  }

  SUBCASE("architecture mismatch") {
    taft::Trainer<float> other(tiny_config());
    CHECK_THROWS_AS(other.resume(path), taft::CheckpointError);
  }

  SUBCASE("seed mismatch") {
    auto cfg = tiny_config();
    cfg.seed = 12;
    auto other = tiny_trainer(cfg);
    CHECK_THROWS_AS(other.resume(path), taft::CheckpointError);
  }

  SUBCASE("truncated payload") {
    fs::resize_file(path, 100);
    auto other = tiny_trainer(tiny_config());
    CHECK_THROWS_AS(other.resume(path), taft::CheckpointError);
  }

  SUBCASE("trailing bytes") {
    std::ofstream f(path, std::ios::app | std::ios::binary);
    f.put('x');
    f.close();
    auto other = tiny_trainer(tiny_config());
    CHECK_THROWS_AS(other.resume(path), taft::CheckpointError);
  }

  SUBCASE("missing file") {
    auto other = tiny_trainer(tiny_config());
    CHECK_THROWS_AS(other.resume((dir / "nope.taft").string()), taft::CheckpointError);
  }
  fs::remove_all(dir);
}

TEST_CASE("mid-run save and resume reproduces the uninterrupted run bit-exactly") {
  const auto cfg = tiny_config();
  auto full = tiny_trainer(cfg);
  for (int i = 0; i < 6; ++i) full.train_one();

  auto first = tiny_trainer(cfg);
  for (int i = 0; i < 3; ++i) first.train_one();
  const auto dir = fresh_dir("resume");
  const auto path = (dir / "mid.taft").string();
  first.save(path);

  auto second = tiny_trainer(cfg);
  second.resume(path);
  CHECK(second.episode_index() == 3);
  for (int i = 0; i < 3; ++i) second.train_one();

  const auto& a = full.model().params();
  const auto& b = second.model().params();
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].value.data() == b[i].value.data());
    CHECK(a[i].adam_m == b[i].adam_m);
    CHECK(a[i].adam_v == b[i].adam_v);
  }
  CHECK(second.episode_index() == 6);
  fs::remove_all(dir);
}

TEST_CASE("train writes a complete log and periodic checkpoints") {
  const auto dir = fresh_dir("trainlog");
  auto trainer = tiny_trainer(tiny_config());
  trainer.train(dir);
  CHECK(fs::exists(dir / "ckpt_000003.taft"));
  CHECK(fs::exists(dir / "ckpt_000006.taft"));
  CHECK(fs::exists(dir / "ckpt_final.taft"));

  std::ifstream log(dir / "train_log.jsonl");
  REQUIRE(log.good());
  std::string line;
  int count = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["episode"] == count);
    for (const char* key : {"seg_loss", "aux_loss", "lr_encoder", "lr_decoder", "lr_refs",
                            "wall_ms"}) {
      CHECK(j.contains(key));
      CHECK(j[key].is_number());
    }
    CHECK(std::isfinite(j["seg_loss"].get<double>()));
    ++count;
  }
  CHECK(count == 6);
  fs::remove_all(dir);
}

TEST_CASE("training logs are bit-identical across reruns apart from timing") {
  const auto dir_a = fresh_dir("log_a");
  const auto dir_b = fresh_dir("log_b");
  auto cfg = tiny_config();
  cfg.episodes = 3;
  cfg.decay_at_episode = 2;
  tiny_trainer(cfg).train(dir_a);
  tiny_trainer(cfg).train(dir_b);
  std::ifstream a(dir_a / "train_log.jsonl"), b(dir_b / "train_log.jsonl");
  std::string la, lb;
  while (std::getline(a, la) && std::getline(b, lb)) {
    auto ja = nlohmann::json::parse(la);
    auto jb = nlohmann::json::parse(lb);
    ja.erase("wall_ms");
    jb.erase("wall_ms");
    CHECK(ja == jb);
  }
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}
