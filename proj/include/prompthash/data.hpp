#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "prompthash/tensor.hpp"

// Synthetic multimodal dataset: latent class anchors, per-sample labels,
// frozen surrogate encoders for both modalities, prompt text rendered from
// labels, and the label-overlap similarity matrix. Pure functions of
// (config, seed).

namespace prompthash {

struct DatasetConfig {
  std::size_t num_classes = 8;
  std::size_t labels_min = 1;
  std::size_t labels_max = 2;
  std::size_t train_size = 512;
  std::size_t query_size = 128;
  std::size_t retrieval_size = 512;
  std::size_t visual_tokens = 9;
  std::size_t text_tokens = 16;
  std::size_t prompt_tokens = 16;
  std::size_t embed_dim = 32;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t pool_size() const { return query_size + retrieval_size; }
};

// Closed vocabulary over the prompt template and class names. Ids 0 and 1 are
// reserved for padding and unknown words.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;

  Vocab() = default;
  explicit Vocab(const std::vector<std::string>& class_names);

  std::int32_t id(const std::string& word) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

std::vector<std::string> default_class_names(std::size_t num_classes);

// "This is an image containing {names}", names comma-joined in ascending
// class order, whitespace-tokenized, padded/truncated to length.
std::string render_prompt_text(const std::vector<std::size_t>& active_classes,
                               const std::vector<std::string>& class_names);
std::vector<std::int32_t> render_prompt_tokens(const std::vector<std::size_t>& active_classes,
                                               const std::vector<std::string>& class_names,
                                               const Vocab& vocab, std::size_t prompt_len);

// Frozen affine projections from the latent space into token sequences.
// Deterministic given the dataset seed; never trained.
struct SurrogateEncoder {
  std::size_t embed_dim = 0;
  Tensor<float> visual_proj;   // L^v × D × D
  Tensor<float> visual_bias;   // L^v × D
  Tensor<float> text_proj;     // L^t × D × D
  Tensor<float> text_bias;     // L^t × D

  static SurrogateEncoder make(const DatasetConfig& cfg);
};

// Pool layout: ids [0, query_size) are queries, [query_size, pool) is the
// retrieval set; the train split is the first train_size retrieval samples.
struct Dataset {
  DatasetConfig cfg;
  std::vector<std::string> class_names;
  Vocab vocab;
  Tensor<float> labels;                  // pool × C
  Tensor<float> fv;                      // pool × L^v × D
  Tensor<float> ft;                      // pool × L^t × D
  std::vector<std::int32_t> prompt_ids;  // pool × L^p

  std::vector<std::size_t> query_ids() const;
  std::vector<std::size_t> retrieval_ids() const;
  std::vector<std::size_t> train_ids() const;

  Tensor<float> labels_for(const std::vector<std::size_t>& ids) const;
};

Dataset generate_synthetic_dataset(const DatasetConfig& cfg);

// S_ij = 1 iff label rows i (from a) and j (from b) share a class.
Tensor<float> build_similarity_matrix(const Tensor<float>& labels_a,
                                      const Tensor<float>& labels_b);

// On-disk layout under dir: manifest.json, features.bin ("PHDF" magic, f^v
// then f^t per sample, float32 little-endian), labels.csv (id, class ids).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Gather per-sample token features for a batch, casting to the compute type.
template <typename T>
Tensor<T> gather_sequences(const Tensor<float>& store, const std::vector<std::size_t>& ids) {
  const std::size_t l = store.dim(1), d = store.dim(2);
  Tensor<T> out({ids.size(), l, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float* src = store.data() + ids[i] * l * d;
    T* dst = out.data() + i * l * d;
    for (std::size_t j = 0; j < l * d; ++j) dst[j] = T(src[j]);
  }
  return out;
}

inline std::vector<std::int32_t> gather_prompts(const std::vector<std::int32_t>& ids_store,
                                                std::size_t prompt_len,
                                                const std::vector<std::size_t>& ids) {
  std::vector<std::int32_t> out(ids.size() * prompt_len);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(ids_store.begin() + ids[i] * prompt_len,
              ids_store.begin() + (ids[i] + 1) * prompt_len, out.begin() + i * prompt_len);
  }
  return out;
}

}  // namespace prompthash
