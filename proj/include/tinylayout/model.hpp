#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tinylayout/tensor.hpp"

namespace tinylayout {

// Cross-attention blocks of the U-Net, in evaluation order.
enum class LayerId { Down1 = 0, Down2, Down3, Mid1, Up1, Up2, Up3 };
inline constexpr std::array<LayerId, 7> kAllLayers{LayerId::Down1, LayerId::Down2, LayerId::Down3, LayerId::Mid1,
                                                    LayerId::Up1,   LayerId::Up2,   LayerId::Up3};
std::string_view layer_name(LayerId id);  // "down-1" ... "up-3"
LayerId parse_layer(std::string_view name);
inline std::size_t layer_index(LayerId id) { return static_cast<std::size_t>(id); }

class Vocabulary {
 public:
  static constexpr int kSot = 0;
  static constexpr int kEot = 1;

  // [SoT], [EoT] and the words of the synthetic caption grammar.
  static Vocabulary base();
  // Rejects lists that do not start with [SoT], [EoT] or contain duplicates.
  static Vocabulary from_words(std::vector<std::string> words);

  int id(std::string_view word) const;  // throws std::invalid_argument naming the word
  std::optional<int> find(std::string_view word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int add(std::string word);
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
};

// [SoT] + words + [EoT] padding; spans are half-open index ranges.
struct TokenSequence {
  std::vector<int> ids;
  std::size_t word_begin = 1;
  std::size_t word_end = 1;
  std::size_t eot_begin = 1;
  std::size_t eot_end = 1;

  std::size_t size() const { return ids.size(); }
  std::size_t word_count() const { return word_end - word_begin; }
  std::vector<std::size_t> word_indices() const;
  std::vector<std::size_t> eot_indices() const;
};

TokenSequence tokenize(std::string_view caption, const Vocabulary& vocab, std::size_t context_length);

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t image_channels = 3;
  std::size_t context_length = 16;  // N
  std::size_t embed_dim = 32;       // M
  std::size_t vocab_capacity = 64;
  std::size_t text_layers = 2;
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t down_repeats = 2;
  std::size_t mid_repeats = 1;
  std::size_t up_repeats = 3;
  std::size_t norm_groups = 8;
  std::size_t time_dim = 64;
  // Self-attention runs only on grids with at most this many cells.
  std::size_t self_attention_max_cells = 64;

  void validate() const;
  std::size_t grid_size(LayerId id) const;  // side length of the block's attention grid
};

// Head-averaged cross-attention map of one block: rows are grid cells, columns tokens.
struct CrossAttnRecord {
  LayerId layer = LayerId::Down1;
  int timestep = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Tensor map;
};

// Invoked for every cross-attention layer; returning a tensor replaces the map
// before values are aggregated.
using AttnIntervention = std::function<std::optional<Tensor>(LayerId layer, int timestep, const Tensor& map)>;

struct CrossAttnWeights {
  Tensor wq;  // [C, C]
  Tensor wk;  // [M, C]
  Tensor wv;  // [M, C]
  Tensor wo;  // [C, C]
};

struct CrossAttnOutput {
  Tensor features;  // [cells, C]
  Tensor map;       // [cells, N], post-intervention
};

// features: [cells, C]; context: [N, M].
CrossAttnOutput cross_attention(const Tensor& features, const Tensor& context, const CrossAttnWeights& weights,
                                LayerId layer, int timestep, const AttnIntervention* intervention);

// Named parameter tensors in a fixed order.
class Parameters {
 public:
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  void set_requires_grad(bool on);
  Parameters clone() const;
  std::uint64_t checksum() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct DenoiseOptions {
  const AttnIntervention* intervention = nullptr;
  // Stop right after this block's record is produced (eps left undefined).
  std::optional<LayerId> stop_after;
};

struct DenoiseResult {
  Tensor eps;
  std::vector<CrossAttnRecord> records;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, Vocabulary vocab, Parameters params);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  Vocabulary& vocab() { return vocab_; }
  const Parameters& params() const { return params_; }
  Parameters& params() { return params_; }

  TokenSequence tokenize(std::string_view caption) const {
    return tinylayout::tokenize(caption, vocab_, config_.context_length);
  }
  Tensor encode_text(const TokenSequence& tokens) const;  // [N, M]
  DenoiseResult denoise(const Tensor& z, int timestep, const Tensor& context, const DenoiseOptions& options = {}) const;

  Model clone() const { return Model(config_, vocab_, params_.clone()); }

 private:
  Tensor res_block(const std::string& prefix, const Tensor& x, const Tensor& temb_act) const;
  Tensor self_attention(const std::string& prefix, const Tensor& x) const;
  Tensor cross_attention_block(const std::string& prefix, const Tensor& x, const Tensor& context, LayerId layer,
                               int timestep, const AttnIntervention* intervention, Tensor& map_out) const;

  ModelConfig config_;
  Vocabulary vocab_;
  Parameters params_;
};

// Rows in the word span take the value of the first [EoT] row.
Tensor substitute_word_embeddings(const Tensor& context, const TokenSequence& tokens);

std::vector<double> timestep_embedding(int timestep, std::size_t dim);

}  // namespace tinylayout
