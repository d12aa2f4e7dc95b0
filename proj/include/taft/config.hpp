#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "taft/errors.hpp"
#include "taft/metrics.hpp"
#include "taft/trainer.hpp"

namespace taft {

// Union of training, generator, and evaluation settings. Every field has a
// default; unknown keys in a config document are a hard error.
struct RunConfig {
  TrainConfig train;
  int episodes_per_class = 500;
  int eval_queries = 5;
  std::vector<double> scales = {1.0};
  int workers = 1;

  EvalConfig eval(int shots) const {
    EvalConfig cfg;
    cfg.split = train.split;
    cfg.shots = shots;
    cfg.queries = eval_queries;
    cfg.episodes_per_class = episodes_per_class;
    cfg.scales = scales;
    cfg.seed = train.seed;
    cfg.ridge = train.ridge;
    cfg.workers = workers;
    return cfg;
  }
};

namespace detail {

template <class V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  static const std::set<std::string> known = {
      "episodes",       "base_lr",          "encoder_lr_mult",
      "decay_factor",   "decay_at_episode", "weight_decay",
      "shots",          "queries",          "split",
      "seed",           "ridge",            "differentiate_through_p",
      "average_query_losses",               "precision",
      "canvas",         "checkpoint_every", "episodes_per_class",
      "eval_queries",   "scales",           "workers"};
  for (const auto& [key, value] : j.items()) {
    if (known.find(key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  RunConfig cfg;
  detail::read_key(j, "episodes", cfg.train.episodes);
  detail::read_key(j, "base_lr", cfg.train.base_lr);
  detail::read_key(j, "encoder_lr_mult", cfg.train.encoder_lr_mult);
  detail::read_key(j, "decay_factor", cfg.train.decay_factor);
  detail::read_key(j, "decay_at_episode", cfg.train.decay_at_episode);
  detail::read_key(j, "weight_decay", cfg.train.weight_decay);
  detail::read_key(j, "shots", cfg.train.shots);
  detail::read_key(j, "queries", cfg.train.queries);
  detail::read_key(j, "split", cfg.train.split);
  detail::read_key(j, "seed", cfg.train.seed);
  detail::read_key(j, "ridge", cfg.train.ridge);
  detail::read_key(j, "differentiate_through_p", cfg.train.differentiate_through_p);
  detail::read_key(j, "average_query_losses", cfg.train.average_query_losses);
  detail::read_key(j, "precision", cfg.train.precision);
  detail::read_key(j, "canvas", cfg.train.canvas);
  detail::read_key(j, "checkpoint_every", cfg.train.checkpoint_every);
  detail::read_key(j, "episodes_per_class", cfg.episodes_per_class);
  detail::read_key(j, "eval_queries", cfg.eval_queries);
  detail::read_key(j, "scales", cfg.scales);
  detail::read_key(j, "workers", cfg.workers);
  cfg.train.validate();
  if (cfg.episodes_per_class < 1) throw ConfigError("episodes_per_class must be positive");
  if (cfg.eval_queries < 1) throw ConfigError("eval_queries must be positive");
  if (cfg.workers < 1) throw ConfigError("workers must be positive");
  if (cfg.scales.empty()) throw ConfigError("scales must be non-empty");
  for (const double s : cfg.scales) {
    if (!(s > 0)) throw ConfigError("scale factors must be positive");
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

// Fully materialized echo; feeding it back reproduces the run.
inline nlohmann::ordered_json dump_run_config(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["episodes"] = cfg.train.episodes;
  j["base_lr"] = cfg.train.base_lr;
  j["encoder_lr_mult"] = cfg.train.encoder_lr_mult;
  j["decay_factor"] = cfg.train.decay_factor;
  j["decay_at_episode"] = cfg.train.decay_at_episode;
  j["weight_decay"] = cfg.train.weight_decay;
  j["shots"] = cfg.train.shots;
  j["queries"] = cfg.train.resolved_queries();
  j["split"] = cfg.train.split;
  j["seed"] = cfg.train.seed;
  j["ridge"] = cfg.train.ridge;
  j["differentiate_through_p"] = cfg.train.differentiate_through_p;
  j["average_query_losses"] = cfg.train.average_query_losses;
  j["precision"] = cfg.train.precision;
  j["canvas"] = cfg.train.canvas;
  j["checkpoint_every"] = cfg.train.checkpoint_every;
  j["episodes_per_class"] = cfg.episodes_per_class;
  j["eval_queries"] = cfg.eval_queries;
  j["scales"] = cfg.scales;
  j["workers"] = cfg.workers;
  return j;
}

}  // namespace taft
