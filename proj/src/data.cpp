#include "prompthash/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "prompthash/rng.hpp"

namespace prompthash {

namespace {

constexpr std::uint64_t kAnchorTag = 0x616e63686f72;   // "anchor"
constexpr std::uint64_t kEncoderTag = 0x656e63;        // "enc"
constexpr std::uint64_t kSampleTag = 0x73616d70;       // "samp"
constexpr std::uint64_t kVisualTag = 1;
constexpr std::uint64_t kTextTag = 2;

const char* kTemplateWords[] = {"This", "is", "an", "image", "containing"};

const char* kBuiltinNames[] = {
    "dog",   "cat",   "car",    "tree",  "boat",   "bird",  "house", "person",
    "sky",   "water", "road",   "flower", "horse", "plane", "train", "beach",
    "night", "snow",  "food",   "street", "cloud", "grass", "bridge", "mountain"};

}  // namespace

void DatasetConfig::validate() const {
  if (num_classes == 0) throw ConfigError("dataset: num_classes must be positive");
  if (labels_min < 1 || labels_min > labels_max || labels_max > num_classes) {
    throw ConfigError("dataset: labels_per_sample range must satisfy 1 <= min <= max <= C");
  }
  if (train_size == 0 || query_size == 0 || retrieval_size == 0) {
    throw ConfigError("dataset: all split sizes must be positive");
  }
  if (train_size > retrieval_size) {
    throw ConfigError("dataset: train split cannot exceed the retrieval pool");
  }
  if (visual_tokens == 0 || text_tokens == 0 || prompt_tokens == 0 || embed_dim == 0) {
    throw ConfigError("dataset: token counts and embed_dim must be positive");
  }
  if (noise_sigma < 0.0) throw ConfigError("dataset: noise_sigma must be nonnegative");
}

Vocab::Vocab(const std::vector<std::string>& class_names) {
  words_.push_back("<pad>");
  words_.push_back("<unk>");
  for (const char* w : kTemplateWords) words_.push_back(w);
  words_.push_back(",");
  for (const auto& name : class_names) words_.push_back(name);
  for (std::size_t i = 0; i < words_.size(); ++i) {
    index_.emplace(words_[i], std::int32_t(i));
  }
}

std::int32_t Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> default_class_names(std::size_t num_classes) {
  std::vector<std::string> names;
  names.reserve(num_classes);
  const std::size_t builtin = sizeof(kBuiltinNames) / sizeof(kBuiltinNames[0]);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (c < builtin) {
      names.push_back(kBuiltinNames[c]);
    } else {
      names.push_back("class" + std::to_string(c));
    }
  }
  return names;
}

std::string render_prompt_text(const std::vector<std::size_t>& active_classes,
                               const std::vector<std::string>& class_names) {
  if (active_classes.empty()) throw ContractError("prompt: at least one active label required");
  std::string text = "This is an image containing";
  bool first = true;
  for (std::size_t c : active_classes) {
    if (!first) text += " ,";
    text += " " + class_names.at(c);
    first = false;
  }
  return text;
}

std::vector<std::int32_t> render_prompt_tokens(const std::vector<std::size_t>& active_classes,
                                               const std::vector<std::string>& class_names,
                                               const Vocab& vocab, std::size_t prompt_len) {
  const std::string text = render_prompt_text(active_classes, class_names);
  std::vector<std::int32_t> ids;
  std::istringstream words(text);
  std::string w;
  while (words >> w) ids.push_back(vocab.id(w));
  ids.resize(prompt_len, Vocab::kPad);  // truncates or pads to the fixed length
  return ids;
}

SurrogateEncoder SurrogateEncoder::make(const DatasetConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  SurrogateEncoder enc;
  enc.embed_dim = d;
  RngStream rng(RngStream::mix(cfg.seed, kEncoderTag));
  const double scale = 1.0 / std::sqrt(double(d));
  auto fill_proj = [&](Tensor<float>& proj, Tensor<float>& bias, std::size_t tokens) {
    proj = Tensor<float>({tokens, d, d});
    bias = Tensor<float>({tokens, d});
    for (std::size_t i = 0; i < proj.numel(); ++i) proj[i] = float(rng.normal() * scale);
    for (std::size_t i = 0; i < bias.numel(); ++i) bias[i] = float(rng.normal() * 0.1);
  };
  fill_proj(enc.visual_proj, enc.visual_bias, cfg.visual_tokens);
  fill_proj(enc.text_proj, enc.text_bias, cfg.text_tokens);
  return enc;
}

namespace {

void project_sequence(const Tensor<float>& proj, const Tensor<float>& bias,
                      const std::vector<double>& z, float* out) {
  const std::size_t tokens = proj.dim(0), d = proj.dim(1);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t r = 0; r < d; ++r) {
      double acc = bias.at2(t, r);
      for (std::size_t c = 0; c < d; ++c) acc += proj.at3(t, r, c) * z[c];
      out[t * d + r] = float(acc);
    }
  }
}

}  // namespace

Dataset generate_synthetic_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  const std::size_t pool = cfg.pool_size();
  const std::size_t c = cfg.num_classes, d = cfg.embed_dim;

  Dataset ds;
  ds.cfg = cfg;
  ds.class_names = default_class_names(c);
  ds.vocab = Vocab(ds.class_names);

  RngStream anchor_rng(RngStream::mix(cfg.seed, kAnchorTag));
  Tensor<double> anchors({c, d});
  for (std::size_t i = 0; i < anchors.numel(); ++i) anchors[i] = anchor_rng.normal();

  SurrogateEncoder enc = SurrogateEncoder::make(cfg);

  ds.labels = Tensor<float>({pool, c});
  ds.fv = Tensor<float>({pool, cfg.visual_tokens, d});
  ds.ft = Tensor<float>({pool, cfg.text_tokens, d});
  ds.prompt_ids.resize(pool * cfg.prompt_tokens);

  std::vector<std::size_t> class_order(c);
  for (std::size_t id = 0; id < pool; ++id) {
    const std::uint64_t sample_seed = RngStream::mix(RngStream::mix(cfg.seed, kSampleTag), id);
    RngStream rng(sample_seed);

    const std::size_t k =
        cfg.labels_min + rng.uniform_index(cfg.labels_max - cfg.labels_min + 1);
    for (std::size_t i = 0; i < c; ++i) class_order[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.uniform_index(c - i);
      std::swap(class_order[i], class_order[j]);
    }
    std::vector<std::size_t> active(class_order.begin(), class_order.begin() + k);
    std::sort(active.begin(), active.end());
    for (std::size_t cls : active) ds.labels.at2(id, cls) = 1.0f;

    std::vector<double> z(d, 0.0);
    for (std::size_t cls : active)
      for (std::size_t j = 0; j < d; ++j) z[j] += anchors.at2(cls, j);
    for (std::size_t j = 0; j < d; ++j) z[j] += cfg.noise_sigma * rng.normal();

    std::vector<double> zv(d), zt(d);
    RngStream rng_v(RngStream::mix(sample_seed, kVisualTag));
    RngStream rng_t(RngStream::mix(sample_seed, kTextTag));
    for (std::size_t j = 0; j < d; ++j) {
      zv[j] = z[j] + cfg.noise_sigma * rng_v.normal();
      zt[j] = z[j] + cfg.noise_sigma * rng_t.normal();
    }
    project_sequence(enc.visual_proj, enc.visual_bias, zv, ds.fv.data() + id * cfg.visual_tokens * d);
    project_sequence(enc.text_proj, enc.text_bias, zt, ds.ft.data() + id * cfg.text_tokens * d);

    auto tokens = render_prompt_tokens(active, ds.class_names, ds.vocab, cfg.prompt_tokens);
    std::copy(tokens.begin(), tokens.end(), ds.prompt_ids.begin() + id * cfg.prompt_tokens);
  }
  return ds;
}

std::vector<std::size_t> Dataset::query_ids() const {
  std::vector<std::size_t> ids(cfg.query_size);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

std::vector<std::size_t> Dataset::retrieval_ids() const {
  std::vector<std::size_t> ids(cfg.retrieval_size);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = cfg.query_size + i;
  return ids;
}

std::vector<std::size_t> Dataset::train_ids() const {
  std::vector<std::size_t> ids(cfg.train_size);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = cfg.query_size + i;
  return ids;
}

Tensor<float> Dataset::labels_for(const std::vector<std::size_t>& ids) const {
  const std::size_t c = cfg.num_classes;
  Tensor<float> out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(labels.data() + ids[i] * c, labels.data() + (ids[i] + 1) * c, out.data() + i * c);
  }
  return out;
}

Tensor<float> build_similarity_matrix(const Tensor<float>& labels_a,
                                      const Tensor<float>& labels_b) {
  if (labels_a.rank() != 2 || labels_b.rank() != 2 || labels_a.dim(1) != labels_b.dim(1)) {
    throw ShapeError("similarity: label matrices must share the class dimension");
  }
  const std::size_t m = labels_a.dim(0), n = labels_b.dim(0), c = labels_a.dim(1);
  Tensor<float> s({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float dot = 0.0f;
      for (std::size_t k = 0; k < c; ++k) dot += labels_a.at2(i, k) * labels_b.at2(j, k);
      s.at2(i, j) = dot >= 1.0f ? 1.0f : 0.0f;
    }
  }
  return s;
}

namespace {

void write_exact(std::ofstream& out, const void* data, std::size_t bytes) {
  out.write(static_cast<const char*>(data), std::streamsize(bytes));
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["C"] = ds.cfg.num_classes;
  manifest["D"] = ds.cfg.embed_dim;
  manifest["L_v"] = ds.cfg.visual_tokens;
  manifest["L_t"] = ds.cfg.text_tokens;
  manifest["L_p"] = ds.cfg.prompt_tokens;
  manifest["train_size"] = ds.cfg.train_size;
  manifest["query_size"] = ds.cfg.query_size;
  manifest["retrieval_size"] = ds.cfg.retrieval_size;
  manifest["seed"] = ds.cfg.seed;
  manifest["class_names"] = ds.class_names;
  manifest["noise_sigma"] = ds.cfg.noise_sigma;
  manifest["labels_min"] = ds.cfg.labels_min;
  manifest["labels_max"] = ds.cfg.labels_max;
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";

  std::ofstream ff(fs::path(dir) / "features.bin", std::ios::binary);
  write_exact(ff, "PHDF", 4);
  const std::size_t pool = ds.cfg.pool_size();
  const std::size_t vlen = ds.cfg.visual_tokens * ds.cfg.embed_dim;
  const std::size_t tlen = ds.cfg.text_tokens * ds.cfg.embed_dim;
  for (std::size_t id = 0; id < pool; ++id) {
    write_exact(ff, ds.fv.data() + id * vlen, vlen * sizeof(float));
    write_exact(ff, ds.ft.data() + id * tlen, tlen * sizeof(float));
  }

  std::ofstream lf(fs::path(dir) / "labels.csv");
  for (std::size_t id = 0; id < pool; ++id) {
    lf << id;
    for (std::size_t cls = 0; cls < ds.cfg.num_classes; ++cls) {
      if (ds.labels.at2(id, cls) > 0.5f) lf << "," << cls;
    }
    lf << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ConfigError("dataset: cannot open manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);

  Dataset ds;
  ds.cfg.num_classes = manifest.at("C").get<std::size_t>();
  ds.cfg.embed_dim = manifest.at("D").get<std::size_t>();
  ds.cfg.visual_tokens = manifest.at("L_v").get<std::size_t>();
  ds.cfg.text_tokens = manifest.at("L_t").get<std::size_t>();
  ds.cfg.prompt_tokens = manifest.at("L_p").get<std::size_t>();
  ds.cfg.train_size = manifest.at("train_size").get<std::size_t>();
  ds.cfg.query_size = manifest.at("query_size").get<std::size_t>();
  ds.cfg.retrieval_size = manifest.at("retrieval_size").get<std::size_t>();
  ds.cfg.seed = manifest.at("seed").get<std::uint64_t>();
  ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  if (manifest.contains("noise_sigma")) ds.cfg.noise_sigma = manifest["noise_sigma"].get<double>();
  if (manifest.contains("labels_min")) ds.cfg.labels_min = manifest["labels_min"].get<std::size_t>();
  if (manifest.contains("labels_max")) ds.cfg.labels_max = manifest["labels_max"].get<std::size_t>();
  ds.vocab = Vocab(ds.class_names);
  ds.cfg.validate();

  const std::size_t pool = ds.cfg.pool_size();
  const std::size_t d = ds.cfg.embed_dim;
  std::ifstream ff(fs::path(dir) / "features.bin", std::ios::binary);
  if (!ff) throw ConfigError("dataset: cannot open features.bin in " + dir);
  char magic[4];
  ff.read(magic, 4);
  if (!ff || std::string(magic, 4) != "PHDF") {
    throw ContractError("dataset: bad feature file magic");
  }
  ds.fv = Tensor<float>({pool, ds.cfg.visual_tokens, d});
  ds.ft = Tensor<float>({pool, ds.cfg.text_tokens, d});
  const std::size_t vlen = ds.cfg.visual_tokens * d;
  const std::size_t tlen = ds.cfg.text_tokens * d;
  for (std::size_t id = 0; id < pool; ++id) {
    ff.read(reinterpret_cast<char*>(ds.fv.data() + id * vlen), std::streamsize(vlen * sizeof(float)));
    ff.read(reinterpret_cast<char*>(ds.ft.data() + id * tlen), std::streamsize(tlen * sizeof(float)));
  }
  if (!ff) throw ContractError("dataset: feature file truncated");

  ds.labels = Tensor<float>({pool, ds.cfg.num_classes});
  ds.prompt_ids.assign(pool * ds.cfg.prompt_tokens, Vocab::kPad);
  std::ifstream lf(fs::path(dir) / "labels.csv");
  if (!lf) throw ConfigError("dataset: cannot open labels.csv in " + dir);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(lf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    const std::size_t id = std::stoul(cell);
    if (id >= pool) throw ContractError("dataset: label row id out of range");
    std::vector<std::size_t> active;
    while (std::getline(ls, cell, ',')) active.push_back(std::stoul(cell));
    if (active.empty()) throw ContractError("dataset: sample without labels");
    for (std::size_t cls : active) ds.labels.at2(id, cls) = 1.0f;
    auto tokens = render_prompt_tokens(active, ds.class_names, ds.vocab, ds.cfg.prompt_tokens);
    std::copy(tokens.begin(), tokens.end(), ds.prompt_ids.begin() + id * ds.cfg.prompt_tokens);
    ++rows;
  }
  if (rows != pool) throw ContractError("dataset: labels.csv row count mismatch");
  return ds;
}

}  // namespace prompthash
