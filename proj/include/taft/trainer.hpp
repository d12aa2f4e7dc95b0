#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "taft/checkpoint.hpp"
#include "taft/episode.hpp"
#include "taft/optim.hpp"
#include "taft/pipeline.hpp"
#include "taft/segnet.hpp"

namespace taft {

struct TrainConfig {
  int episodes = 3000;
  double base_lr = 1e-4;
  double encoder_lr_mult = 0.1;
  double decay_factor = 0.1;
  int decay_at_episode = 2000;
  double weight_decay = 1e-4;
  int shots = 1;
  int queries = 0;
  int split = 0;
  uint64_t seed = 0;
  double ridge = 1e-6;
  bool differentiate_through_p = true;
  bool average_query_losses = true;
  int precision = 32;
  int canvas = 64;
  int checkpoint_every = 500;

  int resolved_queries() const { return queries > 0 ? queries : (shots == 1 ? 12 : 10); }

  void validate() const {
    if (episodes < 0) throw ConfigError("episodes must be non-negative");
    if (base_lr <= 0 || encoder_lr_mult <= 0 || decay_factor <= 0) {
      throw ConfigError("learning rates and multipliers must be positive");
    }
    if (decay_at_episode <= 0 || (episodes > 0 && decay_at_episode > episodes)) {
      throw ConfigError("decay_at_episode must lie in (0, episodes]");
    }
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (shots < 1) throw ConfigError("shots must be at least 1");
    if (queries < 0) throw ConfigError("queries must be non-negative");
    if (split < 0 || split > 3) throw ConfigError("split must be in 0..3");
    if (ridge < 0) throw ConfigError("ridge must be non-negative");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (canvas < 16 || canvas % 16 != 0) {
      throw ConfigError("canvas must be a positive multiple of 16");
    }
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  }
};

struct LossRecord {
  int64_t episode = 0;
  double seg_loss = 0;
  double aux_loss = 0;
  double lr_encoder = 0;
  double lr_decoder = 0;
  double lr_refs = 0;
  double wall_ms = 0;
};

inline uint64_t init_seed(uint64_t master) { return mix64(master, 0x494E4954ULL); }

inline uint64_t train_episode_seed(uint64_t master, uint64_t index) {
  return mix64(mix64(master, 0x455053ULL), index);
}

// Episodic meta-training with the asymmetric group update: the encoder
// minimizes seg + aux, the decoder seg only, the references aux only.
// Realized as two backward passes with the reference gradients zero-masked
// after the segmentation pass.
template <class T>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const ModelConfig& mc)
      : cfg_(cfg),
        split_(SplitConfig::make(cfg.split)),
        model_(mc, init_seed(cfg.seed)) {
    cfg_.validate();
  }

  explicit Trainer(const TrainConfig& cfg) : Trainer(cfg, ModelConfig::for_canvas(cfg.canvas)) {}

  Episode episode_for(uint64_t index) const {
    return sample_episode(split_, Phase::train, cfg_.shots, cfg_.resolved_queries(),
                          train_episode_seed(cfg_.seed, index), cfg_.canvas);
  }

  EpisodeLosses<T> run_episode(const Episode& ep) const {
    return episode_losses(model_, ep, cfg_.ridge, cfg_.differentiate_through_p,
                          cfg_.average_query_losses);
  }

  void route_gradients(EpisodeLosses<T>& losses) {
    model_.params().zero_grad();
    backward(losses.seg);
    model_.params().zero_grad(ParamGroup::references);
    backward(losses.aux);
  }

  double lr_for(ParamGroup group, uint64_t episode) const {
    const double decay = episode >= static_cast<uint64_t>(cfg_.decay_at_episode)
                             ? cfg_.decay_factor
                             : 1.0;
    const double mult = group == ParamGroup::encoder ? cfg_.encoder_lr_mult : 1.0;
    return cfg_.base_lr * mult * decay;
  }

  void apply_step(uint64_t episode) {
    for (auto& p : model_.params().items()) {
      const bool enc = p.group == ParamGroup::encoder;
      adam_step(p, lr_for(p.group, episode), enc ? cfg_.weight_decay : 0.0);
    }
  }

  LossRecord train_one() {
    const auto t0 = std::chrono::steady_clock::now();
    const uint64_t e = episode_index_;
    Episode ep = episode_for(e);
    EpisodeLosses<T> losses = run_episode(ep);
    LossRecord rec;
    rec.episode = static_cast<int64_t>(e);
    rec.seg_loss = static_cast<double>(losses.seg.item());
    rec.aux_loss = static_cast<double>(losses.aux.item());
    rec.lr_encoder = lr_for(ParamGroup::encoder, e);
    rec.lr_decoder = lr_for(ParamGroup::decoder, e);
    rec.lr_refs = lr_for(ParamGroup::references, e);
    route_gradients(losses);
    apply_step(e);
    episode_index_ = e + 1;
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    return rec;
  }

  // Runs the remaining episode budget, appending one JSON line per episode
  // to train_log.jsonl and checkpointing periodically plus at completion.
  // Progress diagnostics go to `diag` when given.
  void train(const std::filesystem::path& out_dir, std::ostream* diag = nullptr) {
    std::filesystem::create_directories(out_dir);
    const auto log_path = out_dir / "train_log.jsonl";
    std::ofstream log(log_path, episode_index_ == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw Error("cannot open training log: " + log_path.string());
    while (episode_index_ < static_cast<uint64_t>(cfg_.episodes)) {
      const LossRecord rec = train_one();
      if (diag != nullptr && (rec.episode % 100 == 0 || episode_index_ ==
                              static_cast<uint64_t>(cfg_.episodes))) {
        *diag << "episode " << rec.episode << " seg=" << rec.seg_loss << " aux=" << rec.aux_loss
              << "\n";
      }
      nlohmann::ordered_json line;
      line["episode"] = rec.episode;
      line["seg_loss"] = rec.seg_loss;
      line["aux_loss"] = rec.aux_loss;
      line["lr_encoder"] = rec.lr_encoder;
      line["lr_decoder"] = rec.lr_decoder;
      line["lr_refs"] = rec.lr_refs;
      line["wall_ms"] = rec.wall_ms;
      log << line.dump() << '\n';
      log.flush();
      if (episode_index_ % static_cast<uint64_t>(cfg_.checkpoint_every) == 0) {
        save((out_dir / checkpoint_name(episode_index_)).string());
      }
    }
    save((out_dir / "ckpt_final.taft").string());
  }

  void save(const std::string& path) const {
    save_checkpoint(path, model_.params(), CheckpointMeta{cfg_.seed, episode_index_});
  }

  void resume(const std::string& path) {
    const CheckpointMeta meta = load_checkpoint(path, model_.params());
    if (meta.master_seed != cfg_.seed) {
      throw CheckpointError("checkpoint was trained with seed " +
                            std::to_string(meta.master_seed) + ", config says " +
                            std::to_string(cfg_.seed));
    }
    episode_index_ = meta.episode_index;
  }

  static std::string checkpoint_name(uint64_t episode) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06llu.taft",
                  static_cast<unsigned long long>(episode));
    return buf;
  }

  SegNet<T>& model() { return model_; }
  const SegNet<T>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const SplitConfig& split() const { return split_; }
  uint64_t episode_index() const { return episode_index_; }

 private:
  TrainConfig cfg_;
  SplitConfig split_;
  SegNet<T> model_;
  uint64_t episode_index_ = 0;
};

}  // namespace taft
