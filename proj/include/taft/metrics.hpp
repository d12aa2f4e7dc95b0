#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "taft/pgm.hpp"
#include "taft/pipeline.hpp"

namespace taft {

// Pooled intersection/union pixel tallies: per class for the foreground mIoU
// and global fg/bg for the binary IoU. Merging is field-wise addition.
struct IoUCounts {
  struct Pair {
    uint64_t i = 0;
    uint64_t u = 0;
  };
  std::map<int, Pair> per_class;
  uint64_t fg_i = 0, fg_u = 0, bg_i = 0, bg_u = 0;

  void merge(const IoUCounts& other) {
    for (const auto& [id, pu] : other.per_class) {
      auto& mine = per_class[id];
      mine.i += pu.i;
      mine.u += pu.u;
    }
    fg_i += other.fg_i;
    fg_u += other.fg_u;
    bg_i += other.bg_i;
    bg_u += other.bg_u;
  }
};

inline void accumulate(IoUCounts& counts, const std::vector<uint8_t>& pred,
                       const std::vector<uint8_t>& gt, int class_id) {
  if (pred.size() != gt.size()) {
    throw DimensionError("accumulate: prediction and ground truth sizes differ");
  }
  uint64_t i = 0, u = 0, bi = 0, bu = 0;
  for (size_t k = 0; k < pred.size(); ++k) {
    const bool p = pred[k] != 0;
    const bool g = gt[k] != 0;
    i += p && g;
    u += p || g;
    bi += !p && !g;
    bu += !p || !g;
  }
  auto& pc = counts.per_class[class_id];
  pc.i += i;
  pc.u += u;
  counts.fg_i += i;
  counts.fg_u += u;
  counts.bg_i += bi;
  counts.bg_u += bu;
}

inline double miou(const IoUCounts& counts, const std::vector<int>& class_set) {
  if (class_set.empty()) throw EvalError("miou over an empty class set");
  double sum = 0.0;
  for (const int id : class_set) {
    const auto it = counts.per_class.find(id);
    if (it == counts.per_class.end() || it->second.u == 0) {
      throw EvalError("miou: class " + std::to_string(id) + " has zero union");
    }
    sum += static_cast<double>(it->second.i) / static_cast<double>(it->second.u);
  }
  return sum / static_cast<double>(class_set.size());
}

inline double binary_iou(const IoUCounts& counts) {
  if (counts.fg_u == 0 || counts.bg_u == 0) {
    throw EvalError("binary_iou: zero union tally");
  }
  const double fg = static_cast<double>(counts.fg_i) / static_cast<double>(counts.fg_u);
  const double bg = static_cast<double>(counts.bg_i) / static_cast<double>(counts.bg_u);
  return 0.5 * (fg + bg);
}

// Nearest multiple of 16 with ties rounding up, floored at 16.
inline int scaled_extent(int extent, double factor) {
  const long long units = std::llround(factor * extent / 16.0);
  return static_cast<int>(16 * std::max(1LL, units));
}

// Averages post-softmax probability maps over the given scale factors, with
// the task transform fixed from the original-resolution support set. Each
// query is resized, pushed through the pipeline, and the class probabilities
// are resized back before averaging; exact probability ties go to background.
template <class T>
std::vector<uint8_t> multi_scale_predict(const SegNet<T>& model, const Tensor<T>& p,
                                         const Instance& query,
                                         const std::vector<double>& scales) {
  if (scales.empty()) throw EvalError("multi_scale_predict: empty scale list");
  NoGradGuard guard;
  const Tensor<T> image = image_tensor<T>(query);
  std::vector<double> acc(2 * static_cast<size_t>(query.h) * query.w, 0.0);
  for (const double s : scales) {
    const int sh = scaled_extent(query.h, s);
    const int sw = scaled_extent(query.w, s);
    Tensor<T> input = (sh == query.h && sw == query.w) ? image : bilinear_resize(image, sh, sw);
    auto feats = model.encoder_forward(input);
    auto h_a = apply_transform(p, feats.high_level);
    auto logits = model.decoder_forward(model.aspp_forward(h_a), feats.low_level);
    Tensor<T> probs = softmax_channel(logits);
    if (sh != query.h || sw != query.w) probs = bilinear_resize(probs, query.h, query.w);
    const auto& v = probs.data();
    for (size_t k = 0; k < acc.size(); ++k) acc[k] += static_cast<double>(v[k]);
  }
  const size_t plane = static_cast<size_t>(query.h) * query.w;
  std::vector<uint8_t> mask(plane);
  for (size_t k = 0; k < plane; ++k) mask[k] = acc[k] > acc[plane + k] ? 1 : 0;
  return mask;
}

struct EvalConfig {
  int split = 0;
  int shots = 1;
  int queries = 5;
  int episodes_per_class = 500;
  std::vector<double> scales = {1.0};
  uint64_t seed = 0;
  double ridge = 1e-6;
  int workers = 1;
  std::string dump_masks_dir;

  void validate() const {
    if (split < 0 || split > 3) throw ConfigError("split must be in 0..3");
    if (shots < 1 || queries < 1) throw ConfigError("shots and queries must be positive");
    if (episodes_per_class < 1) throw ConfigError("episodes_per_class must be positive");
    if (scales.empty()) throw ConfigError("scales must be non-empty");
    for (const double s : scales) {
      if (!(s > 0)) throw ConfigError("scale factors must be positive");
    }
    if (ridge < 0) throw ConfigError("ridge must be non-negative");
    if (workers < 1) throw ConfigError("workers must be positive");
  }
};

inline uint64_t eval_episode_seed(uint64_t master, int class_id, int index) {
  return mix64(mix64(mix64(master, 0x4556ULL), static_cast<uint64_t>(class_id)),
               static_cast<uint64_t>(index));
}

// Accumulates one evaluation episode: fits the transform on the support set
// and scores every query with the multi-scale prediction.
template <class T>
void evaluate_episode(const SegNet<T>& model, const Episode& ep, const EvalConfig& cfg,
                      IoUCounts& counts,
                      std::vector<std::pair<std::vector<uint8_t>, std::vector<uint8_t>>>* dump =
                          nullptr) {
  NoGradGuard guard;
  const Tensor<T> p = fit_episode_transform(model, ep, cfg.ridge);
  for (const Instance& q : ep.query) {
    const auto pred = multi_scale_predict(model, p, q, cfg.scales);
    accumulate(counts, pred, q.mask, ep.class_id);
    if (dump != nullptr) dump->emplace_back(pred, q.mask);
  }
}

// Runs the full split evaluation: episodes_per_class fixed-class episodes for
// each test class, parallel across workers with a single merge at the end.
template <class T>
nlohmann::ordered_json evaluate(const SegNet<T>& model, const EvalConfig& cfg, int canvas = 64) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const SplitConfig split = SplitConfig::make(cfg.split);

  struct Job {
    int class_id;
    int index;
  };
  std::vector<Job> jobs;
  for (const int class_id : split.test_class_ids) {
    for (int i = 0; i < cfg.episodes_per_class; ++i) jobs.push_back(Job{class_id, i});
  }

  const int workers = std::min<int>(cfg.workers, static_cast<int>(jobs.size()));
  std::vector<IoUCounts> partial(static_cast<size_t>(workers));
  std::vector<std::string> failures(static_cast<size_t>(workers));
  auto run_range = [&](int w) {
    try {
      for (size_t k = static_cast<size_t>(w); k < jobs.size(); k += static_cast<size_t>(workers)) {
        const Job& job = jobs[k];
        const Episode ep =
            sample_class_episode(job.class_id, cfg.shots, cfg.queries,
                                 eval_episode_seed(cfg.seed, job.class_id, job.index), canvas);
        std::vector<std::pair<std::vector<uint8_t>, std::vector<uint8_t>>> dump;
        evaluate_episode(model, ep, cfg, partial[static_cast<size_t>(w)],
                         cfg.dump_masks_dir.empty() ? nullptr : &dump);
        for (size_t q = 0; q < dump.size(); ++q) {
          const std::string base = cfg.dump_masks_dir + "/class" + std::to_string(job.class_id) +
                                   "_ep" + std::to_string(job.index) + "_q" + std::to_string(q);
          std::vector<uint8_t> px(dump[q].first.size());
          for (size_t j = 0; j < px.size(); ++j) px[j] = dump[q].first[j] ? 255 : 0;
          write_pgm(base + "_pred.pgm", ep.canvas, ep.canvas, px);
          for (size_t j = 0; j < px.size(); ++j) px[j] = dump[q].second[j] ? 255 : 0;
          write_pgm(base + "_gt.pgm", ep.canvas, ep.canvas, px);
        }
      }
    } catch (const std::exception& e) {
      failures[static_cast<size_t>(w)] = e.what();
    }
  };

  if (workers == 1) {
    run_range(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run_range, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& msg : failures) {
    if (!msg.empty()) throw EvalError("evaluation worker failed: " + msg);
  }

  IoUCounts counts;
  for (const auto& part : partial) counts.merge(part);

  nlohmann::ordered_json report;
  nlohmann::ordered_json config;
  config["split"] = cfg.split;
  config["shots"] = cfg.shots;
  config["queries"] = cfg.queries;
  config["episodes_per_class"] = cfg.episodes_per_class;
  config["scales"] = cfg.scales;
  config["seed"] = cfg.seed;
  config["ridge"] = cfg.ridge;
  config["canvas"] = canvas;
  config["workers"] = cfg.workers;
  config["scale_rounding"] = "nearest multiple of 16, ties up, minimum 16";
  report["config"] = config;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
  for (const int class_id : split.test_class_ids) {
    const auto& pc = counts.per_class.at(class_id);
    nlohmann::ordered_json entry;
    entry["id"] = class_id;
    entry["fg_iou"] = static_cast<double>(pc.i) / static_cast<double>(pc.u);
    per_class.push_back(entry);
  }
  report["per_class"] = per_class;
  report["miou"] =
      miou(counts, std::vector<int>(split.test_class_ids.begin(), split.test_class_ids.end()));
  report["binary_iou"] = binary_iou(counts);
  report["episodes"] = static_cast<int64_t>(jobs.size());
  report["wall_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace taft
