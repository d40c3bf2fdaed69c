#include "prompthash/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "prompthash/train.hpp"

namespace prompthash {

namespace {

using nlohmann::json;

void write_text(const std::string& path, const std::string& text) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw ContractError("harness: cannot write " + path);
  out << text;
}

json step_to_json(const StepRecord& r) {
  return json{{"step", r.step},   {"gpa", r.gpa},     {"lpa", r.lpa},
              {"inter", r.inter}, {"intra", r.intra}, {"quan", r.quan},
              {"recon", r.recon}, {"total", r.total}, {"tau2", r.tau2}};
}

StepRecord step_from_json(const json& j) {
  StepRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.gpa = j.at("gpa").get<double>();
  r.lpa = j.at("lpa").get<double>();
  r.inter = j.at("inter").get<double>();
  r.intra = j.at("intra").get<double>();
  r.quan = j.at("quan").get<double>();
  r.recon = j.at("recon").get<double>();
  r.total = j.at("total").get<double>();
  r.tau2 = j.at("tau2").get<double>();
  return r;
}

json eval_to_json(const DirectionEval& e) {
  json pr = json::array();
  for (const auto& p : e.pr) {
    pr.push_back({{"radius", p.radius}, {"precision", p.precision}, {"recall", p.recall}});
  }
  return json{{"direction", e.direction}, {"k", e.k},        {"mAP", e.map},
              {"excluded_queries", e.excluded}, {"pr_points", pr}};
}

DirectionEval eval_from_json(const json& j) {
  DirectionEval e;
  e.direction = j.at("direction").get<std::string>();
  e.k = j.at("k").get<std::size_t>();
  e.map = j.at("mAP").get<double>();
  e.excluded = j.at("excluded_queries").get<std::size_t>();
  for (const auto& p : j.at("pr_points")) {
    e.pr.push_back({p.at("radius").get<std::size_t>(), p.at("precision").get<double>(),
                    p.at("recall").get<double>()});
  }
  return e;
}

// one batch forward; returns the binarized codes for both modalities
std::pair<Tensor<double>, Tensor<double>> encode_batch(ModelParams<double>& model,
                                                       const Dataset& ds,
                                                       const std::vector<std::size_t>& ids) {
  Graph<double> g;
  BoundModel<double> bound = model.bind(g);
  Batch<double> batch;
  batch.fv = gather_sequences<double>(ds.fv, ids);
  batch.ft = gather_sequences<double>(ds.ft, ids);
  batch.prompt = gather_prompts(ds.prompt_ids, ds.cfg.prompt_tokens, ids);
  batch.m = ids.size();
  ModelOut<double> out = model_forward(g, bound, batch);
  return {binarize(g.value(out.hash_v.h)), binarize(g.value(out.hash_t.h))};
}

std::pair<CodeMatrix, CodeMatrix> encode_split(ModelParams<double>& model, const Dataset& ds,
                                               const std::vector<std::size_t>& ids,
                                               std::size_t k) {
  CodeMatrix cv, ct;
  cv.k = ct.k = k;
  const std::size_t chunk = 128;
  for (std::size_t at = 0; at < ids.size(); at += chunk) {
    const std::size_t n = std::min(chunk, ids.size() - at);
    std::vector<std::size_t> part(ids.begin() + std::ptrdiff_t(at),
                                  ids.begin() + std::ptrdiff_t(at + n));
    auto [bv, bt] = encode_batch(model, ds, part);
    for (std::size_t i = 0; i < bv.numel(); ++i) cv.rows.push_back(std::int8_t(bv[i]));
    for (std::size_t i = 0; i < bt.numel(); ++i) ct.rows.push_back(std::int8_t(bt[i]));
  }
  return {cv, ct};
}

std::string sanitize_message(std::string msg) {
  for (char& c : msg) {
    if (c == '\n' || c == '\r' || c == ',') c = ' ';
  }
  return msg;
}

double get_weight(const LossWeights& w, const std::string& name) {
  if (name == "alpha") return w.alpha;
  if (name == "beta") return w.beta;
  if (name == "gamma") return w.gamma;
  if (name == "mu") return w.mu;
  if (name == "sigma") return w.sigma;
  if (name == "zeta") return w.zeta;
  throw ConfigError("unknown loss weight: " + name);
}

void set_weight(LossWeights& w, const std::string& name, double value) {
  if (name == "alpha") w.alpha = value;
  else if (name == "beta") w.beta = value;
  else if (name == "gamma") w.gamma = value;
  else if (name == "mu") w.mu = value;
  else if (name == "sigma") w.sigma = value;
  else if (name == "zeta") w.zeta = value;
  else throw ConfigError("unknown loss weight: " + name);
}

const std::vector<std::string>& weight_names() {
  static const std::vector<std::string> names = {"alpha", "beta", "gamma",
                                                 "mu",    "sigma", "zeta"};
  return names;
}

}  // namespace

std::string report_to_json(const RunReport& rep) {
  json steps = json::array();
  for (const auto& r : rep.trajectory) steps.push_back(step_to_json(r));
  json evals = json::array();
  for (const auto& e : rep.eval) evals.push_back(eval_to_json(e));
  json j{{"variant", rep.variant},
         {"seed", rep.seed},
         {"config_hash", rep.config_hash},
         {"k", rep.k},
         {"optimizer", rep.optimizer},
         {"wall_clock_sec", rep.wall_clock_sec},
         {"trajectory", steps},
         {"eval", evals}};
  return j.dump(2);
}

RunReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("report: invalid JSON: ") + e.what());
  }
  RunReport rep;
  rep.variant = j.at("variant").get<std::string>();
  rep.seed = j.at("seed").get<std::uint64_t>();
  rep.config_hash = j.at("config_hash").get<std::string>();
  rep.k = j.at("k").get<std::size_t>();
  rep.optimizer = j.at("optimizer").get<std::string>();
  rep.wall_clock_sec = j.at("wall_clock_sec").get<double>();
  for (const auto& s : j.at("trajectory")) rep.trajectory.push_back(step_from_json(s));
  for (const auto& e : j.at("eval")) rep.eval.push_back(eval_from_json(e));
  return rep;
}

std::string evals_to_json(const std::vector<DirectionEval>& evals) {
  json arr = json::array();
  for (const auto& e : evals) arr.push_back(eval_to_json(e));
  return arr.dump(2);
}

std::string trajectory_to_csv(const RunReport& rep) {
  std::ostringstream out;
  out.precision(17);
  out << "step,gpa,lpa,inter,intra,quan,recon,total,tau2\n";
  for (const auto& r : rep.trajectory) {
    out << r.step << ',' << r.gpa << ',' << r.lpa << ',' << r.inter << ',' << r.intra << ','
        << r.quan << ',' << r.recon << ',' << r.total << ',' << r.tau2 << "\n";
  }
  return out.str();
}

TrainResult train(const ExperimentConfig& cfg, const std::string& snapshot_dir) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  DatasetConfig dc = cfg.dataset;
  dc.seed = cfg.seed;  // shared seed keys the splits, so all variants see the same data
  Dataset ds = generate_synthetic_dataset(dc);

  RngStream init_rng(RngStream::mix(cfg.seed, 0x5eed0001ull));
  ModelParams<double> model =
      ModelParams<double>::make(cfg.model_dims(config_vocab_size(dc)), cfg.variant, init_rng);

  Adam<double> opt({cfg.lr_heads, cfg.lr_modules});
  const LossWeights ew = effective_weights(cfg.weights, cfg.variant);

  RunReport rep;
  rep.variant = variant_name(cfg.variant);
  rep.seed = cfg.seed;
  rep.config_hash = config_hash(cfg);
  rep.k = cfg.k;

  RngStream order_rng(RngStream::mix(cfg.seed, 0x5eed0002ull));
  const std::vector<std::size_t> train_ids = ds.train_ids();
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_batch = [&]() {
    std::vector<std::size_t> ids;
    ids.reserve(cfg.batch_size);
    while (ids.size() < cfg.batch_size) {
      if (cursor >= order.size()) {
        order = train_ids;
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[order_rng.uniform_index(i)]);
        }
        cursor = 0;
      }
      ids.push_back(order[cursor++]);
    }
    return ids;
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<std::size_t> ids = next_batch();

    Graph<double> g;
    BoundModel<double> bound = model.bind(g);
    Batch<double> batch;
    batch.fv = gather_sequences<double>(ds.fv, ids);
    batch.ft = gather_sequences<double>(ds.ft, ids);
    batch.prompt = gather_prompts(ds.prompt_ids, dc.prompt_tokens, ids);
    batch.m = ids.size();

    ModelOut<double> out = model_forward(g, bound, batch);
    const Tensor<double> s = build_similarity_matrix(ds.labels_for(ids), ds.labels_for(ids))
                                 .cast<double>();
    LossBundle<double> lb = model_losses(g, out, s, cfg.pacl);
    Var<double> total = total_loss(g, lb.parts, ew);

    StepRecord rec;
    rec.step = step;
    rec.gpa = g.value(lb.parts.gpa)[0];
    rec.lpa = g.value(lb.parts.lpa)[0];
    rec.inter = g.value(lb.parts.inter)[0];
    rec.intra = g.value(lb.parts.intra)[0];
    rec.quan = g.value(lb.parts.quan)[0];
    rec.recon = g.value(lb.parts.recon)[0];
    rec.total = g.value(total)[0];
    rec.tau2 = lb.tau2;

    const bool finite = std::isfinite(rec.total) && std::isfinite(rec.gpa) &&
                        std::isfinite(rec.lpa) && std::isfinite(rec.inter) &&
                        std::isfinite(rec.intra) && std::isfinite(rec.quan) &&
                        std::isfinite(rec.recon);
    if (!finite) {
      json snap{{"step", step},
                {"variant", rep.variant},
                {"seed", rep.seed},
                {"components", step_to_json(rec)},
                {"batch_ids", ids}};
      if (!snapshot_dir.empty()) {
        write_text(snapshot_dir + "/divergence.json", snap.dump(2) + "\n");
      }
      throw TrainDivergence("non-finite loss at step " + std::to_string(step) + ": " +
                            snap.dump());
    }
    rep.trajectory.push_back(rec);

    g.backward(total);
    opt.step(g);
  }

  rep.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(model), std::move(rep), std::move(ds)};
}

std::vector<DirectionEval> evaluate(ModelParams<double>& model, const ExperimentConfig& cfg,
                                    const Dataset& ds) {
  if (model.dims.k != cfg.k) {
    throw ConfigError("evaluate: checkpoint code width does not match config k");
  }
  const std::vector<std::size_t> query = ds.query_ids();
  const std::vector<std::size_t> retrieval = ds.retrieval_ids();
  auto [qv, qt] = encode_split(model, ds, query, cfg.k);
  auto [rv, rt] = encode_split(model, ds, retrieval, cfg.k);
  const Tensor<float> rel =
      build_similarity_matrix(ds.labels_for(query), ds.labels_for(retrieval));

  std::vector<DirectionEval> out;
  {
    DirectionEval e;
    e.direction = "I2T";
    e.k = cfg.k;
    const MapResult m = map_at_all(qv, rt, rel);
    e.map = m.map;
    e.excluded = m.excluded;
    e.pr = pr_curve(qv, rt, rel);
    out.push_back(std::move(e));
  }
  {
    DirectionEval e;
    e.direction = "T2I";
    e.k = cfg.k;
    const MapResult m = map_at_all(qt, rv, rel);
    e.map = m.map;
    e.excluded = m.excluded;
    e.pr = pr_curve(qt, rv, rel);
    out.push_back(std::move(e));
  }
  return out;
}

AblationResult run_ablation(const ExperimentConfig& base, const std::vector<std::size_t>& ks,
                            const std::string& out_dir) {
  if (ks.empty()) throw ConfigError("ablate: need at least one code width");
  AblationResult result;
  std::filesystem::create_directories(out_dir);

  for (Variant variant : all_variants()) {
    for (std::size_t k : ks) {
      ExperimentConfig cfg = base;
      cfg.variant = variant;
      cfg.k = k;
      AblationRow row;
      row.variant = variant_name(variant);
      row.k = k;
      const std::string run_dir = out_dir + "/" + row.variant + "_k" + std::to_string(k);
      try {
        TrainResult tr = train(cfg, run_dir);
        tr.report.eval = evaluate(tr.model, cfg, tr.dataset);
        row.map_i2t = tr.report.eval[0].map;
        row.map_t2i = tr.report.eval[1].map;
        row.status = "ok";
        write_text(run_dir + "/report.json", report_to_json(tr.report) + "\n");
        save_checkpoint(run_dir + "/checkpoint", cfg, tr.model);
      } catch (const std::exception& e) {
        row.status = sanitize_message(e.what());
      }
      result.rows.push_back(std::move(row));
    }
  }

  json rows = json::array();
  std::ostringstream csv;
  csv.precision(17);
  csv << "variant,k,map_i2t,map_t2i,status\n";
  for (const auto& r : result.rows) {
    rows.push_back({{"variant", r.variant},
                    {"k", r.k},
                    {"map_i2t", r.map_i2t},
                    {"map_t2i", r.map_t2i},
                    {"status", r.status}});
    csv << r.variant << ',' << r.k << ',' << r.map_i2t << ',' << r.map_t2i << ',' << r.status
        << "\n";
  }
  result.json_path = out_dir + "/ablation.json";
  result.csv_path = out_dir + "/ablation.csv";
  write_text(result.json_path, rows.dump(2) + "\n");
  write_text(result.csv_path, csv.str());
  return result;
}

std::map<std::string, std::vector<double>> default_sweep_grids(const LossWeights& w) {
  std::map<std::string, std::vector<double>> grids;
  for (const auto& name : weight_names()) {
    if (name == "sigma") {
      grids[name] = {0.05, 0.1, 1.0};
    } else {
      const double d = get_weight(w, name);
      grids[name] = {0.1 * d, d, 10.0 * d};
    }
  }
  return grids;
}

std::vector<SweepSeries> run_sweep(const ExperimentConfig& base,
                                   const std::map<std::string, std::vector<double>>& grids,
                                   const std::string& out_dir) {
  if (grids.empty()) throw ConfigError("sweep: grid must be nonempty");
  for (const auto& [name, values] : grids) {
    get_weight(base.weights, name);  // validates the name
    if (values.empty()) throw ConfigError("sweep: empty grid for " + name);
  }
  std::filesystem::create_directories(out_dir);

  std::vector<SweepSeries> series;
  for (const auto& [name, values] : grids) {
    SweepSeries s;
    s.weight = name;
    for (double value : values) {
      ExperimentConfig cfg = base;
      set_weight(cfg.weights, name, value);
      TrainResult tr = train(cfg, out_dir + "/" + name);
      std::vector<DirectionEval> ev = evaluate(tr.model, cfg, tr.dataset);
      s.points.push_back({value, ev[0].map, ev[1].map});
    }
    series.push_back(std::move(s));
  }

  json all = json::array();
  for (const auto& s : series) {
    std::ostringstream csv;
    csv.precision(17);
    csv << "value,map_i2t,map_t2i\n";
    json points = json::array();
    for (const auto& p : s.points) {
      csv << p.value << ',' << p.map_i2t << ',' << p.map_t2i << "\n";
      points.push_back({{"value", p.value}, {"map_i2t", p.map_i2t}, {"map_t2i", p.map_t2i}});
    }
    write_text(out_dir + "/sweep_" + s.weight + ".csv", csv.str());
    all.push_back({{"weight", s.weight}, {"points", points}});
  }
  write_text(out_dir + "/sweep.json", all.dump(2) + "\n");
  return series;
}

std::string resolve_out_dir(const std::string& flag_value) {
  // the environment override wins so batch drivers can redirect whole runs
  if (const char* env = std::getenv("PROMPTHASH_OUT"); env && *env) return env;
  if (!flag_value.empty()) return flag_value;
  return "out";
}

}  // namespace prompthash
