#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prompthash/gradsuite.hpp"
#include "prompthash/harness.hpp"

namespace {

using namespace prompthash;

struct CommonFlags {
  std::string config_path;
  std::int64_t seed = -1;
  std::size_t k = 0;
  std::string variant;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_variant = true) {
  cmd->add_option("--config", f.config_path, "experiment config JSON");
  cmd->add_option("--seed", f.seed, "seed override");
  cmd->add_option("--k", f.k, "code width override")->check(CLI::IsMember({16, 32, 64}));
  if (with_variant) cmd->add_option("--variant", f.variant, "ablation variant");
  cmd->add_option("--out", f.out, "output directory");
}

ExperimentConfig make_config(const CommonFlags& f) {
  ExperimentConfig cfg = f.config_path.empty() ? ExperimentConfig::toy()
                                               : load_config(f.config_path);
  if (f.seed >= 0) cfg.seed = std::uint64_t(f.seed);
  if (f.k != 0) cfg.k = f.k;
  if (!f.variant.empty()) cfg.variant = variant_from_string(f.variant);
  cfg.validate();
  return cfg;
}

void write_file(const std::string& path, const std::string& text) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path);
  out << text;
}

std::string run_dir_for(const ExperimentConfig& cfg, const std::string& out_root) {
  return out_root + "/" + variant_name(cfg.variant) + "_k" + std::to_string(cfg.k) + "_seed" +
         std::to_string(cfg.seed);
}

int cmd_gen_data(const CommonFlags& f) {
  ExperimentConfig cfg = make_config(f);
  DatasetConfig dc = cfg.dataset;
  dc.seed = cfg.seed;
  Dataset ds = generate_synthetic_dataset(dc);
  const std::string dir = resolve_out_dir(f.out) + "/dataset";
  save_dataset(ds, dir);
  std::printf("wrote dataset (%zu samples, %zu classes) to %s\n", dc.pool_size(),
              dc.num_classes, dir.c_str());
  return 0;
}

int cmd_train(const CommonFlags& f) {
  ExperimentConfig cfg = make_config(f);
  const std::string dir = run_dir_for(cfg, resolve_out_dir(f.out));
  TrainResult tr = train(cfg, dir);
  tr.report.eval = evaluate(tr.model, cfg, tr.dataset);
  write_file(dir + "/report.json", report_to_json(tr.report) + "\n");
  write_file(dir + "/trajectory.csv", trajectory_to_csv(tr.report));
  for (const auto& e : tr.report.eval) {
    write_file(dir + "/pr_" + (e.direction == "I2T" ? "i2t" : "t2i") + ".csv", pr_to_csv(e.pr));
  }
  save_checkpoint(dir + "/checkpoint", cfg, tr.model);
  std::printf("%s k=%zu seed=%llu: final total %.6f, mAP I2T %.4f, T2I %.4f\n",
              variant_name(cfg.variant).c_str(), cfg.k,
              static_cast<unsigned long long>(cfg.seed), tr.report.trajectory.back().total,
              tr.report.eval[0].map, tr.report.eval[1].map);
  std::printf("artifacts in %s\n", dir.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_dir, const CommonFlags& f) {
  LoadedCheckpoint ck = load_checkpoint(ckpt_dir);
  if (f.k != 0) ck.config.k = f.k;  // mismatch surfaces as an error below
  DatasetConfig dc = ck.config.dataset;
  dc.seed = ck.config.seed;
  Dataset ds = generate_synthetic_dataset(dc);
  std::vector<DirectionEval> evals = evaluate(ck.model, ck.config, ds);
  const std::string dir = resolve_out_dir(f.out) + "/eval";
  write_file(dir + "/metrics.json", evals_to_json(evals) + "\n");
  for (const auto& e : evals) {
    write_file(dir + "/pr_" + (e.direction == "I2T" ? "i2t" : "t2i") + ".csv", pr_to_csv(e.pr));
  }
  for (const auto& e : evals) {
    std::printf("%s k=%zu mAP %.4f (%zu queries excluded)\n", e.direction.c_str(), e.k, e.map,
                e.excluded);
  }
  std::printf("metrics in %s\n", dir.c_str());
  return 0;
}

int cmd_ablate(const CommonFlags& f) {
  ExperimentConfig cfg = make_config(f);
  const std::vector<std::size_t> ks =
      f.k != 0 ? std::vector<std::size_t>{f.k} : std::vector<std::size_t>{16, 32, 64};
  AblationResult res = run_ablation(cfg, ks, resolve_out_dir(f.out) + "/ablation");
  std::printf("%-14s %4s %10s %10s  %s\n", "variant", "k", "mAP I2T", "mAP T2I", "status");
  for (const auto& r : res.rows) {
    std::printf("%-14s %4zu %10.4f %10.4f  %s\n", r.variant.c_str(), r.k, r.map_i2t, r.map_t2i,
                r.status.c_str());
  }
  std::printf("table in %s and %s\n", res.json_path.c_str(), res.csv_path.c_str());
  return 0;
}

int cmd_sweep(const CommonFlags& f, const std::string& weight) {
  ExperimentConfig cfg = make_config(f);
  auto grids = default_sweep_grids(cfg.weights);
  if (!weight.empty()) {
    auto it = grids.find(weight);
    if (it == grids.end()) throw ConfigError("unknown loss weight: " + weight);
    auto one = std::map<std::string, std::vector<double>>{{it->first, it->second}};
    grids = std::move(one);
  }
  const std::string dir = resolve_out_dir(f.out) + "/sweep";
  std::vector<SweepSeries> series = run_sweep(cfg, grids, dir);
  for (const auto& s : series) {
    std::printf("%s:", s.weight.c_str());
    for (const auto& p : s.points) {
      std::printf("  %g -> I2T %.4f / T2I %.4f", p.value, p.map_i2t, p.map_t2i);
    }
    std::printf("\n");
  }
  std::printf("series in %s\n", dir.c_str());
  return 0;
}

int cmd_gradcheck(std::size_t seeds) {
  bool all_pass = true;
  for (const auto& c : gradsuite::cases()) {
    gradsuite::SuiteResult r = gradsuite::run_case(c, seeds);
    std::printf("%-18s %s  max_rel_err %.3e over %zu seeds%s%s\n", r.name.c_str(),
                r.pass ? "pass" : "FAIL", r.max_rel_err, r.seeds, r.worst.empty() ? "" : " at ",
                r.worst.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic cross-modal hashing experiments"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, ablate_f, sweep_f;
  std::string ckpt_dir, sweep_weight;
  std::size_t gradcheck_seeds = 5;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_f, false);

  CLI::App* tr = app.add_subcommand("train", "train one variant and evaluate it");
  add_common(tr, train_f);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a saved checkpoint");
  ev->add_option("checkpoint", ckpt_dir, "checkpoint directory")->required();
  add_common(ev, eval_f, false);

  CLI::App* ab = app.add_subcommand("ablate", "train and evaluate all six variants");
  add_common(ab, ablate_f);

  CLI::App* sw = app.add_subcommand("sweep", "sweep loss weights one at a time");
  add_common(sw, sweep_f);
  sw->add_option("--weight", sweep_weight, "restrict to one weight");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seeds", gradcheck_seeds, "seeds per case")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_f);
    if (tr->parsed()) return cmd_train(train_f);
    if (ev->parsed()) return cmd_eval(ckpt_dir, eval_f);
    if (ab->parsed()) return cmd_ablate(ablate_f);
    if (sw->parsed()) return cmd_sweep(sweep_f, sweep_weight);
    if (gc->parsed()) return cmd_gradcheck(gradcheck_seeds);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
