#include "prompthash/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace prompthash {

namespace {

using nlohmann::json;

json dataset_to_json(const DatasetConfig& d) {
  return json{{"num_classes", d.num_classes},
              {"labels_min", d.labels_min},
              {"labels_max", d.labels_max},
              {"train_size", d.train_size},
              {"query_size", d.query_size},
              {"retrieval_size", d.retrieval_size},
              {"visual_tokens", d.visual_tokens},
              {"text_tokens", d.text_tokens},
              {"prompt_tokens", d.prompt_tokens},
              {"embed_dim", d.embed_dim},
              {"noise_sigma", d.noise_sigma},
              {"seed", d.seed}};
}

DatasetConfig dataset_from_json(const json& j) {
  DatasetConfig d;
  d.num_classes = j.at("num_classes").get<std::size_t>();
  d.labels_min = j.at("labels_min").get<std::size_t>();
  d.labels_max = j.at("labels_max").get<std::size_t>();
  d.train_size = j.at("train_size").get<std::size_t>();
  d.query_size = j.at("query_size").get<std::size_t>();
  d.retrieval_size = j.at("retrieval_size").get<std::size_t>();
  d.visual_tokens = j.at("visual_tokens").get<std::size_t>();
  d.text_tokens = j.at("text_tokens").get<std::size_t>();
  d.prompt_tokens = j.at("prompt_tokens").get<std::size_t>();
  d.embed_dim = j.at("embed_dim").get<std::size_t>();
  d.noise_sigma = j.at("noise_sigma").get<double>();
  d.seed = j.at("seed").get<std::uint64_t>();
  return d;
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  weights.validate();
  if (k != 16 && k != 32 && k != 64) throw ConfigError("config: k must be one of 16, 32, 64");
  if (heads == 0 || dataset.embed_dim % heads != 0) {
    throw ConfigError("config: heads must divide embed_dim");
  }
  if (taap_depth == 0) throw ConfigError("config: taap_depth must be >= 1");
  if (n_state == 0) throw ConfigError("config: n_state must be >= 1");
  if (!(pacl.tau > 0.0) || !(pacl.tau1 > 0.0)) {
    throw ConfigError("config: temperatures must be positive");
  }
  if (!(lr_heads > 0.0) || !(lr_modules > 0.0)) {
    throw ConfigError("config: learning rates must be positive");
  }
  if (batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
  if (batch_size > dataset.train_size) {
    throw ConfigError("config: batch_size exceeds train split");
  }
  if (steps == 0) throw ConfigError("config: steps must be >= 1");
}

ExperimentConfig ExperimentConfig::toy() { return {}; }

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig cfg;
  cfg.lr_heads = 1e-6;
  cfg.lr_modules = 1e-5;
  cfg.batch_size = 128;
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j{{"dataset", dataset_to_json(cfg.dataset)},
         {"heads", cfg.heads},
         {"taap_depth", cfg.taap_depth},
         {"n_state", cfg.n_state},
         {"k", cfg.k},
         {"per_feature_mix", cfg.per_feature_mix},
         {"weights",
          {{"alpha", cfg.weights.alpha},
           {"beta", cfg.weights.beta},
           {"gamma", cfg.weights.gamma},
           {"mu", cfg.weights.mu},
           {"sigma", cfg.weights.sigma},
           {"zeta", cfg.weights.zeta}}},
         {"tau", cfg.pacl.tau},
         {"tau1", cfg.pacl.tau1},
         {"lr_heads", cfg.lr_heads},
         {"lr_modules", cfg.lr_modules},
         {"batch_size", cfg.batch_size},
         {"steps", cfg.steps},
         {"seed", cfg.seed},
         {"variant", variant_name(cfg.variant)}};
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    cfg.dataset = dataset_from_json(j.at("dataset"));
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.taap_depth = j.at("taap_depth").get<std::size_t>();
    cfg.n_state = j.at("n_state").get<std::size_t>();
    cfg.k = j.at("k").get<std::size_t>();
    cfg.per_feature_mix = j.at("per_feature_mix").get<bool>();
    const json& w = j.at("weights");
    cfg.weights.alpha = w.at("alpha").get<double>();
    cfg.weights.beta = w.at("beta").get<double>();
    cfg.weights.gamma = w.at("gamma").get<double>();
    cfg.weights.mu = w.at("mu").get<double>();
    cfg.weights.sigma = w.at("sigma").get<double>();
    cfg.weights.zeta = w.at("zeta").get<double>();
    cfg.pacl.tau = j.at("tau").get<double>();
    cfg.pacl.tau1 = j.at("tau1").get<double>();
    cfg.lr_heads = j.at("lr_heads").get<double>();
    cfg.lr_modules = j.at("lr_modules").get<double>();
    cfg.batch_size = j.at("batch_size").get<std::size_t>();
    cfg.steps = j.at("steps").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.variant = variant_from_string(j.at("variant").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: missing or mistyped field: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("config: cannot write " + path);
  out << config_to_json(cfg) << "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
  // nlohmann keeps object keys sorted, so dump() is canonical
  const std::string text = config_to_json(cfg);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace prompthash
