#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "taft/config.hpp"
#include "taft/metrics.hpp"
#include "taft/pgm.hpp"
#include "taft/pipeline.hpp"
#include "taft/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckpointVersion = 3;
constexpr int kExitGradcheck = 4;

template <class F>
int guarded(F&& fn) {
  try {
    return fn();
  } catch (const taft::CheckpointVersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckpointVersion;
  } catch (const taft::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

std::vector<uint8_t> grayscale_bytes(const taft::Instance& inst) {
  const size_t plane = static_cast<size_t>(inst.h) * inst.w;
  std::vector<uint8_t> px(plane);
  for (size_t i = 0; i < plane; ++i) {
    const double mean =
        (inst.image[i] + inst.image[plane + i] + inst.image[2 * plane + i]) / 3.0;
    const long v = std::lround(255.0 * mean);
    px[i] = static_cast<uint8_t>(std::min(255L, std::max(0L, v)));
  }
  return px;
}

std::vector<uint8_t> mask_bytes(const std::vector<uint8_t>& mask) {
  std::vector<uint8_t> px(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) px[i] = mask[i] ? 255 : 0;
  return px;
}

template <class T>
int run_train(const taft::RunConfig& cfg, const std::string& out_dir,
              const std::string& resume_path) {
  taft::Trainer<T> trainer(cfg.train);
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "config.json");
    if (!os) throw taft::Error("cannot write resolved config in " + out_dir);
    os << taft::dump_run_config(cfg).dump(2) << "\n";
  }
  if (!resume_path.empty()) {
    trainer.resume(resume_path);
    std::cerr << "resumed from " << resume_path << " at episode " << trainer.episode_index()
              << "\n";
  }
  trainer.train(out_dir, &std::cerr);
  std::cerr << "final checkpoint: " << (fs::path(out_dir) / "ckpt_final.taft").string() << "\n";
  return 0;
}

template <class T>
int run_eval(const std::string& checkpoint, const taft::EvalConfig& ecfg, int canvas) {
  taft::SegNet<T> net(taft::ModelConfig::for_canvas(canvas), 0);
  taft::load_checkpoint(checkpoint, net.params());
  const auto report = taft::evaluate(net, ecfg, canvas);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_gradcheck(int64_t coords, uint64_t seed, bool inject_sign_error) {
  taft::SegNet<double> net(taft::ModelConfig::tiny(), seed);
  // Move every parameter off its init point so no activation sits exactly on
  // a kink, where one-sided analytic rules and central differences must part.
  taft::Rng jitter(taft::mix64(seed, 0xB1A5));
  for (auto& p : net.params().items())
    for (auto& v : p.value.data()) v += jitter.uniform(-0.05, 0.05);
  const auto split = taft::SplitConfig::make(0);
  const taft::Episode ep =
      taft::sample_episode(split, taft::Phase::train, 1, 1, taft::mix64(seed, 0x6C05), 32);
  taft::Rng rng(taft::mix64(seed, 0xFD));
  std::function<void(taft::ParameterStore<double>&)> hook;
  if (inject_sign_error) {
    hook = [](taft::ParameterStore<double>& params) {
      for (auto& g : params[0].value.grad()) g = -g;
    };
  }
  const auto checks = taft::episode_gradient_check(net, ep, 1e-6, 1e-5, coords, rng, 1e-3, hook);
  constexpr double kTol = 1e-4;
  bool ok = true;
  for (const auto& check : checks) {
    const auto& r = check.report;
    std::cout << taft::group_name(check.group) << ": max_rel_err=" << r.max_rel_err
              << " coords=" << r.coords_checked << " worst=" << r.worst_param << "["
              << r.worst_coord << "]"
              << " analytic=" << r.analytic << " numeric=" << r.numeric << "\n";
    ok = ok && r.max_rel_err < kTol;
  }
  if (!ok) {
    for (const auto& check : checks) {
      if (check.report.max_rel_err >= kTol) {
        std::cerr << "gradient check failed for " << check.report.worst_param << " (group "
                  << taft::group_name(check.group) << ")\n";
      }
    }
    return kExitGradcheck;
  }
  std::cout << "all groups below " << kTol << "\n";
  return 0;
}

int run_render(int split, const std::string& phase, int shots, int queries, uint64_t seed,
               int canvas, const std::string& out_dir) {
  const auto split_cfg = taft::SplitConfig::make(split);
  const auto phase_val = phase == "train" ? taft::Phase::train : taft::Phase::test;
  const taft::Episode ep = taft::sample_episode(split_cfg, phase_val, shots, queries, seed, canvas);
  fs::create_directories(out_dir);

  nlohmann::ordered_json manifest;
  manifest["class_id"] = ep.class_id;
  manifest["seed"] = ep.seed;
  manifest["canvas"] = ep.canvas;
  manifest["split"] = split;
  manifest["phase"] = phase;
  manifest["shots"] = shots;
  manifest["queries"] = queries;
  auto files = nlohmann::ordered_json::array();
  const auto emit = [&](const taft::Instance& inst, const std::string& role, int index) {
    const std::string image_name = role + "_" + std::to_string(index) + ".pgm";
    const std::string mask_name = role + "_" + std::to_string(index) + "_mask.pgm";
    taft::write_pgm((fs::path(out_dir) / image_name).string(), inst.w, inst.h,
                    grayscale_bytes(inst));
    taft::write_pgm((fs::path(out_dir) / mask_name).string(), inst.w, inst.h,
                    mask_bytes(inst.mask));
    nlohmann::ordered_json entry;
    entry["role"] = role;
    entry["index"] = index;
    entry["image"] = image_name;
    entry["mask"] = mask_name;
    files.push_back(entry);
  };
  for (size_t i = 0; i < ep.support.size(); ++i) {
    emit(ep.support[i], "support", static_cast<int>(i));
  }
  for (size_t i = 0; i < ep.query.size(); ++i) {
    emit(ep.query[i], "query", static_cast<int>(i));
  }
  manifest["files"] = files;
  std::ofstream os(fs::path(out_dir) / "manifest.json");
  if (!os) throw taft::Error("cannot write manifest in " + out_dir);
  os << manifest.dump(2) << "\n";
  std::cout << manifest.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation with a task-adaptive feature transform"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume_path;
  auto* train = app.add_subcommand("train", "Meta-train on a split's training classes");
  train->add_option("--config", config_path, "JSON run config (defaults apply if omitted)");
  train->add_option("--out", out_dir, "Output directory for checkpoints and logs")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  std::string eval_checkpoint, dump_masks;
  int eval_split = 0, eval_shots = 1, eval_queries = 5, eval_epc = 500, eval_workers = 1;
  int eval_canvas = 64, eval_precision = 32;
  uint64_t eval_seed = 0;
  double eval_ridge = 1e-6;
  std::vector<double> eval_scales{1.0};
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split's test classes");
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", eval_split, "Split index")->check(CLI::Range(0, 3));
  eval->add_option("--shots", eval_shots, "Support shots per episode")
      ->check(CLI::PositiveNumber);
  eval->add_option("--queries", eval_queries, "Queries per episode")->check(CLI::PositiveNumber);
  eval->add_option("--episodes-per-class", eval_epc, "Episodes per test class")
      ->check(CLI::PositiveNumber);
  eval->add_option("--scales", eval_scales, "Multi-scale factors")->delimiter(',');
  eval->add_option("--seed", eval_seed, "Evaluation stream seed");
  eval->add_option("--ridge", eval_ridge, "Gram regularizer used when fitting the transform");
  eval->add_option("--canvas", eval_canvas, "Canvas size the checkpoint was trained for");
  eval->add_option("--precision", eval_precision, "Float width")->check(CLI::IsMember({32, 64}));
  eval->add_option("--workers", eval_workers, "Parallel evaluation workers")
      ->check(CLI::PositiveNumber);
  eval->add_option("--dump-masks", dump_masks, "Directory for per-query pred/gt PGM pairs");

  std::string gc_size = "tiny";
  int64_t gc_coords = 0;
  uint64_t gc_seed = 1;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "Finite-difference audit of the routed gradients");
  gradcheck->add_option("--size", gc_size, "Model preset")->check(CLI::IsMember({"tiny"}));
  gradcheck->add_option("--coords", gc_coords, "Coordinates per parameter (0 checks all)");
  gradcheck->add_option("--seed", gc_seed, "Seed for the audited episode");
  bool gc_inject = false;
  gradcheck->add_flag("--inject-sign-error", gc_inject, "Fault injection for audit tests")
      ->group("");

  int r_split = 0, r_shots = 1, r_queries = 1, r_canvas = 64;
  uint64_t r_seed = 0;
  std::string r_phase = "train", r_out;
  auto* render = app.add_subcommand("render-episode", "Write one episode as PGM files");
  render->add_option("--split", r_split, "Split index")->check(CLI::Range(0, 3));
  render->add_option("--phase", r_phase, "Class pool")->check(CLI::IsMember({"train", "test"}));
  render->add_option("--shots", r_shots, "Support instances")->check(CLI::PositiveNumber);
  render->add_option("--queries", r_queries, "Query instances")->check(CLI::PositiveNumber);
  render->add_option("--seed", r_seed, "Episode seed");
  render->add_option("--canvas", r_canvas, "Canvas size");
  render->add_option("--out", r_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  if (train->parsed()) {
    return guarded([&] {
      taft::RunConfig cfg;
      if (!config_path.empty()) cfg = taft::load_run_config(config_path);
      return cfg.train.precision == 64 ? run_train<double>(cfg, out_dir, resume_path)
                                       : run_train<float>(cfg, out_dir, resume_path);
    });
  }
  if (eval->parsed()) {
    return guarded([&] {
      taft::EvalConfig ecfg;
      ecfg.split = eval_split;
      ecfg.shots = eval_shots;
      ecfg.queries = eval_queries;
      ecfg.episodes_per_class = eval_epc;
      ecfg.scales = eval_scales;
      ecfg.seed = eval_seed;
      ecfg.ridge = eval_ridge;
      ecfg.workers = eval_workers;
      ecfg.dump_masks_dir = dump_masks;
      if (!dump_masks.empty()) fs::create_directories(dump_masks);
      ecfg.validate();
      if (eval_canvas < 16 || eval_canvas % 16 != 0) {
        throw taft::ConfigError("canvas must be a positive multiple of 16");
      }
      return eval_precision == 64 ? run_eval<double>(eval_checkpoint, ecfg, eval_canvas)
                                  : run_eval<float>(eval_checkpoint, ecfg, eval_canvas);
    });
  }
  if (gradcheck->parsed()) {
    return guarded([&] { return run_gradcheck(gc_coords, gc_seed, gc_inject); });
  }
  return guarded(
      [&] { return run_render(r_split, r_phase, r_shots, r_queries, r_seed, r_canvas, r_out); });
}
