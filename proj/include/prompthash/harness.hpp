#pragma once

#include <map>
#include <string>
#include <vector>

#include "prompthash/checkpoint.hpp"
#include "prompthash/config.hpp"
#include "prompthash/data.hpp"
#include "prompthash/model.hpp"
#include "prompthash/retrieval.hpp"

// Experiment orchestration: the training loop, retrieval evaluation, the
// six-variant ablation table, and one-weight-at-a-time sweeps.

namespace prompthash {

// non-finite loss: training aborts the step it appears
struct TrainDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::size_t step = 0;
  double gpa = 0, lpa = 0, inter = 0, intra = 0, quan = 0, recon = 0;
  double total = 0;
  double tau2 = 0;

  bool operator==(const StepRecord&) const = default;
};

struct DirectionEval {
  std::string direction;  // "I2T" or "T2I"
  std::size_t k = 0;
  double map = 0;
  std::size_t excluded = 0;
  std::vector<PrPoint> pr;

  bool operator==(const DirectionEval&) const = default;
};

struct RunReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t k = 0;
  std::string optimizer = "adam";
  double wall_clock_sec = 0;
  std::vector<StepRecord> trajectory;
  std::vector<DirectionEval> eval;

  bool operator==(const RunReport&) const = default;
};

std::string report_to_json(const RunReport& rep);
RunReport report_from_json(const std::string& text);
std::string trajectory_to_csv(const RunReport& rep);
std::string evals_to_json(const std::vector<DirectionEval>& evals);

struct TrainResult {
  ModelParams<double> model;
  RunReport report;
  Dataset dataset;
};

// Trains per the variant wiring. snapshot_dir, when nonempty, receives
// divergence.json if the loss goes non-finite.
TrainResult train(const ExperimentConfig& cfg, const std::string& snapshot_dir = "");

// Encodes query and retrieval splits, binarizes, and scores both directions.
std::vector<DirectionEval> evaluate(ModelParams<double>& model, const ExperimentConfig& cfg,
                                    const Dataset& ds);

struct AblationRow {
  std::string variant;
  std::size_t k = 0;
  double map_i2t = 0;
  double map_t2i = 0;
  std::string status;  // "ok" or the failure message
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string json_path;
  std::string csv_path;
};

// Six variants x requested code widths, shared seed. Per-variant failures are
// recorded in the table and the run continues.
AblationResult run_ablation(const ExperimentConfig& base, const std::vector<std::size_t>& ks,
                            const std::string& out_dir);

struct SweepPoint {
  double value = 0;
  double map_i2t = 0;
  double map_t2i = 0;
};

struct SweepSeries {
  std::string weight;  // alpha, beta, gamma, mu, sigma, zeta
  std::vector<SweepPoint> points;
};

// One weight varied per series, the others at their configured values.
std::map<std::string, std::vector<double>> default_sweep_grids(const LossWeights& w);
std::vector<SweepSeries> run_sweep(const ExperimentConfig& base,
                                   const std::map<std::string, std::vector<double>>& grids,
                                   const std::string& out_dir);

// output root: PROMPTHASH_OUT env var wins, then the flag, then ./out
std::string resolve_out_dir(const std::string& flag_value);

}  // namespace prompthash
