#include "prompthash/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace prompthash {

namespace {

using nlohmann::json;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8);
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(out, bits);
}

double get_f64(const unsigned char* p) {
  const std::uint64_t bits = get_u64(p);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

constexpr char kMagic[4] = {'P', 'H', 'C', 'P'};
constexpr std::uint8_t kVersion = 1;

}  // namespace

void save_tensor_file(const std::string& dir,
                      const std::vector<std::pair<std::string, const Tensor<double>*>>& tensors) {
  std::filesystem::create_directories(dir);
  std::string buf(kMagic, sizeof(kMagic));
  buf.push_back(char(kVersion));
  put_u64(buf, tensors.size());

  json index = json::array();
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", buf.size()}});
    put_u16(buf, std::uint16_t(name.size()));
    buf.append(name);
    buf.push_back(char(t->rank()));
    for (std::size_t d = 0; d < t->rank(); ++d) put_u64(buf, t->dim(d));
    for (std::size_t i = 0; i < t->numel(); ++i) put_f64(buf, (*t)[i]);
  }

  std::ofstream bin(dir + "/params.bin", std::ios::binary);
  if (!bin) throw ContractError("checkpoint: cannot write " + dir + "/params.bin");
  bin.write(buf.data(), std::streamsize(buf.size()));

  std::ofstream idx(dir + "/params.json");
  if (!idx) throw ContractError("checkpoint: cannot write " + dir + "/params.json");
  idx << index.dump(2) << "\n";
}

std::map<std::string, Tensor<double>> load_tensor_file(const std::string& dir) {
  std::ifstream in(dir + "/params.bin", std::ios::binary);
  if (!in) throw ContractError("checkpoint: cannot open " + dir + "/params.bin");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::size_t n = buf.size();

  if (n < 13 || std::memcmp(p, kMagic, 4) != 0) {
    throw ContractError("checkpoint: bad magic in params.bin");
  }
  if (p[4] != kVersion) throw ContractError("checkpoint: unsupported version");
  const std::uint64_t count = get_u64(p + 5);

  std::map<std::string, Tensor<double>> out;
  std::size_t off = 13;
  for (std::uint64_t t = 0; t < count; ++t) {
    if (off + 2 > n) throw ContractError("checkpoint: truncated params.bin");
    const std::size_t name_len = get_u16(p + off);
    off += 2;
    if (off + name_len + 1 > n) throw ContractError("checkpoint: truncated params.bin");
    std::string name(buf.data() + off, name_len);
    off += name_len;
    const std::size_t rank = p[off++];
    if (off + 8 * rank > n) throw ContractError("checkpoint: truncated params.bin");
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      shape[d] = get_u64(p + off);
      off += 8;
      numel *= shape[d];
    }
    if (off + 8 * numel > n) throw ContractError("checkpoint: truncated params.bin");
    Tensor<double> tensor(shape);
    for (std::size_t i = 0; i < numel; ++i) {
      tensor[i] = get_f64(p + off);
      off += 8;
    }
    if (!out.emplace(std::move(name), std::move(tensor)).second) {
      throw ContractError("checkpoint: duplicate tensor name in params.bin");
    }
  }
  if (off != n) throw ContractError("checkpoint: trailing bytes in params.bin");
  return out;
}

void save_checkpoint(const std::string& dir, const ExperimentConfig& cfg,
                     ModelParams<double>& model) {
  std::filesystem::create_directories(dir);
  save_config(cfg, dir + "/config.json");
  std::vector<std::pair<std::string, const Tensor<double>*>> views;
  for (const auto& [name, t] : named_parameters(model)) views.push_back({name, t});
  save_tensor_file(dir, views);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  LoadedCheckpoint ck;
  ck.config = load_config(dir + "/config.json");
  ck.config.validate();

  RngStream rng(0);  // shapes only; values come from the file
  ck.model = ModelParams<double>::make(
      ck.config.model_dims(config_vocab_size(ck.config.dataset)), ck.config.variant, rng);

  auto stored = load_tensor_file(dir);
  std::size_t used = 0;
  for (auto& [name, dst] : named_parameters(ck.model)) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ContractError("checkpoint: missing tensor " + name);
    if (it->second.shape() != dst->shape()) {
      throw ContractError("checkpoint: shape mismatch for " + name);
    }
    *dst = it->second;
    ++used;
  }
  if (used != stored.size()) {
    throw ContractError("checkpoint: params.bin contains tensors the config does not declare");
  }
  return ck;
}

std::size_t config_vocab_size(const DatasetConfig& dc) {
  return Vocab(default_class_names(dc.num_classes)).size();
}

}  // namespace prompthash
