#include "tinylayout/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace tinylayout {

namespace {

constexpr std::array<std::string_view, 7> kLayerNames{"down-1", "down-2", "down-3", "mid-1", "up-1", "up-2", "up-3"};

struct ResSpec {
  std::string prefix;
  std::size_t cin;
  std::size_t cout;
};

struct BlockPlan {
  LayerId id;
  std::size_t level;  // 0 = full resolution
  std::size_t channels;
  std::vector<ResSpec> res;
};

std::vector<BlockPlan> plan_blocks(const ModelConfig& c) {
  std::vector<BlockPlan> plan;
  std::vector<std::size_t> skips{c.widths[0]};
  std::size_t cur = c.widths[0];
  for (std::size_t level = 0; level < 3; ++level) {
    BlockPlan b{static_cast<LayerId>(level), level, c.widths[level], {}};
    for (std::size_t r = 0; r < c.down_repeats; ++r) {
      b.res.push_back({"down" + std::to_string(level + 1) + ".r" + std::to_string(r), cur, c.widths[level]});
      cur = c.widths[level];
      skips.push_back(cur);
    }
    if (level < 2) skips.push_back(cur);
    plan.push_back(std::move(b));
  }
  BlockPlan mid{LayerId::Mid1, 2, c.widths[2], {}};
  for (std::size_t r = 0; r < c.mid_repeats; ++r) {
    mid.res.push_back({"mid1.r" + std::to_string(r), cur, c.widths[2]});
    cur = c.widths[2];
  }
  plan.push_back(std::move(mid));
  for (std::size_t u = 0; u < 3; ++u) {
    const std::size_t level = 2 - u;
    BlockPlan b{static_cast<LayerId>(layer_index(LayerId::Up1) + u), level, c.widths[level], {}};
    for (std::size_t r = 0; r < c.up_repeats; ++r) {
      const std::size_t skip = skips.back();
      skips.pop_back();
      b.res.push_back({"up" + std::to_string(u + 1) + ".r" + std::to_string(r), cur + skip, c.widths[level]});
      cur = c.widths[level];
    }
    plan.push_back(std::move(b));
  }
  return plan;
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = d(rng_);
    return Tensor(std::move(shape), std::move(v));
  }

 private:
  std::mt19937_64 rng_;
};

std::size_t groups_for(const ModelConfig& c, std::size_t channels) {
  return std::min(c.norm_groups, channels);
}

}  // namespace

std::string_view layer_name(LayerId id) { return kLayerNames.at(layer_index(id)); }

LayerId parse_layer(std::string_view name) {
  for (std::size_t i = 0; i < kLayerNames.size(); ++i)
    if (kLayerNames[i] == name) return static_cast<LayerId>(i);
  throw std::invalid_argument("unknown layer id '" + std::string(name) + "'");
}

// ---- vocabulary / tokens -------------------------------------------------------------

Vocabulary Vocabulary::base() {
  Vocabulary v;
  v.words_ = {"[SoT]", "[EoT]",  "a",      "red", "green", "blue", "yellow", "circle", "square",
              "triangle", "to", "the", "left", "right", "of",    "above", "below",  "photo"};
  return v;
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  if (words.size() < 2 || words[0] != "[SoT]" || words[1] != "[EoT]")
    throw std::invalid_argument("vocabulary must start with [SoT], [EoT]");
  Vocabulary v;
  for (auto& w : words) v.add(std::move(w));
  return v;
}

std::optional<int> Vocabulary::find(std::string_view word) const {
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<int>(i);
  return std::nullopt;
}

int Vocabulary::id(std::string_view word) const {
  auto f = find(word);
  if (!f) throw std::invalid_argument("unknown word '" + std::string(word) + "'");
  return *f;
}

int Vocabulary::add(std::string word) {
  if (find(word)) throw std::invalid_argument("word '" + word + "' already in vocabulary");
  words_.push_back(std::move(word));
  return static_cast<int>(words_.size() - 1);
}

std::vector<std::size_t> TokenSequence::word_indices() const {
  std::vector<std::size_t> v;
  for (std::size_t i = word_begin; i < word_end; ++i) v.push_back(i);
  return v;
}

std::vector<std::size_t> TokenSequence::eot_indices() const {
  std::vector<std::size_t> v;
  for (std::size_t i = eot_begin; i < eot_end; ++i) v.push_back(i);
  return v;
}

TokenSequence tokenize(std::string_view caption, const Vocabulary& vocab, std::size_t context_length) {
  std::istringstream in{std::string(caption)};
  std::vector<int> words;
  for (std::string w; in >> w;) {
    const int id = vocab.id(w);
    if (id == Vocabulary::kSot || id == Vocabulary::kEot)
      throw std::invalid_argument("special token '" + w + "' cannot appear in a caption");
    words.push_back(id);
  }
  if (context_length < 3 || words.size() > context_length - 2)
    throw std::invalid_argument("caption has " + std::to_string(words.size()) + " words; at most " +
                                std::to_string(context_length >= 2 ? context_length - 2 : 0) + " fit");
  TokenSequence t;
  t.ids.assign(context_length, Vocabulary::kEot);
  t.ids[0] = Vocabulary::kSot;
  std::copy(words.begin(), words.end(), t.ids.begin() + 1);
  t.word_begin = 1;
  t.word_end = 1 + words.size();
  t.eot_begin = t.word_end;
  t.eot_end = context_length;
  return t;
}

// ---- config --------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (image_size % 4 != 0 || image_size < 4) throw std::invalid_argument("image_size must be a multiple of 4");
  if (context_length < 3) throw std::invalid_argument("context_length must be at least 3");
  if (embed_dim == 0 || time_dim == 0 || time_dim % 2) throw std::invalid_argument("invalid embedding sizes");
  if (down_repeats == 0 || mid_repeats == 0 || up_repeats == 0) throw std::invalid_argument("block repeats must be >= 1");
  if (down_repeats + 1 != up_repeats)
    throw std::invalid_argument("up_repeats must equal down_repeats + 1 to consume every skip connection");
  for (auto w : widths)
    if (w == 0 || w % std::min(norm_groups, w)) throw std::invalid_argument("widths must be divisible by norm_groups");
}

std::size_t ModelConfig::grid_size(LayerId id) const {
  static constexpr std::array<std::size_t, 7> levels{0, 1, 2, 2, 2, 1, 0};
  return image_size >> levels[layer_index(id)];
}

// ---- parameters ----------------------------------------------------------------------

Tensor& Parameters::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

const Tensor& Parameters::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return entries_[it->second].second;
}

Tensor& Parameters::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const Parameters&>(*this).get(name));
}

std::size_t Parameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

void Parameters::set_requires_grad(bool on) {
  for (auto& [_, t] : entries_) t.set_requires_grad(on);
}

Parameters Parameters::clone() const {
  Parameters p;
  for (const auto& [name, t] : entries_) p.add(name, t.clone());
  return p;
}

std::uint64_t Parameters::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : entries_) {
    mix(reinterpret_cast<const unsigned char*>(name.data()), name.size());
    auto v = t.values();
    mix(reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double));
  }
  return h;
}

// ---- model ---------------------------------------------------------------------------

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config), vocab_(Vocabulary::base()) {
  config_.validate();
  Initializer init(seed);
  auto& P = params_;
  const auto& c = config_;
  const std::size_t M = c.embed_dim, N = c.context_length, T2 = 2 * c.time_dim;

  P.add("text.token_embedding", init.normal({c.vocab_capacity, M}, 1.0));
  P.add("text.position_embedding", init.normal({N, M}, 0.3));
  for (std::size_t l = 0; l < c.text_layers; ++l) {
    const std::string p = "text.l" + std::to_string(l);
    const double s = 1.0 / std::sqrt(static_cast<double>(M));
    P.add(p + ".wq", init.normal({M, M}, s));
    P.add(p + ".wk", init.normal({M, M}, s));
    P.add(p + ".wv", init.normal({M, M}, s));
    P.add(p + ".wo", init.normal({M, M}, s));
    P.add(p + ".w1", init.normal({M, 2 * M}, s));
    P.add(p + ".w2", init.normal({2 * M, M}, 1.0 / std::sqrt(2.0 * M)));
  }

  P.add("time.w1", init.normal({c.time_dim, T2}, 1.0 / std::sqrt(static_cast<double>(c.time_dim))));
  P.add("time.b1", Tensor({1, T2}));
  P.add("time.w2", init.normal({T2, T2}, 1.0 / std::sqrt(static_cast<double>(T2))));
  P.add("time.b2", Tensor({1, T2}));

  auto conv = [&](const std::string& p, std::size_t cin, std::size_t cout, double gain) {
    P.add(p + ".w", init.normal({cout, cin, 3, 3}, gain / std::sqrt(9.0 * cin)));
    P.add(p + ".b", Tensor({cout}));
  };
  auto norm = [&](const std::string& p, std::size_t ch) {
    P.add(p + ".g", Tensor({ch}, 1.0));
    P.add(p + ".b", Tensor({ch}));
  };

  conv("conv_in", c.image_channels, c.widths[0], 1.0);
  for (const auto& block : plan_blocks(c)) {
    const std::size_t ch = block.channels;
    const double s = 1.0 / std::sqrt(static_cast<double>(ch));
    const std::size_t side = c.image_size >> block.level;
    for (const auto& r : block.res) {
      norm(r.prefix + ".gn1", r.cin);
      conv(r.prefix + ".conv1", r.cin, r.cout, 1.0);
      P.add(r.prefix + ".temb.w", init.normal({T2, r.cout}, 1.0 / std::sqrt(static_cast<double>(T2))));
      P.add(r.prefix + ".temb.b", Tensor({1, r.cout}));
      norm(r.prefix + ".gn2", r.cout);
      conv(r.prefix + ".conv2", r.cout, r.cout, 0.5);
      if (r.cin != r.cout) P.add(r.prefix + ".skip.w", init.normal({r.cout, r.cin}, 1.0 / std::sqrt(double(r.cin))));
      if (side * side <= c.self_attention_max_cells) {
        norm(r.prefix + ".sa.gn", ch);
        P.add(r.prefix + ".sa.wq", init.normal({ch, ch}, s));
        P.add(r.prefix + ".sa.wk", init.normal({ch, ch}, s));
        P.add(r.prefix + ".sa.wv", init.normal({ch, ch}, s));
        P.add(r.prefix + ".sa.wo", init.normal({ch, ch}, 0.5 * s));
      }
      norm(r.prefix + ".ca.gn", ch);
      P.add(r.prefix + ".ca.wq", init.normal({ch, ch}, s));
      P.add(r.prefix + ".ca.wk", init.normal({M, ch}, 1.0 / std::sqrt(static_cast<double>(M))));
      P.add(r.prefix + ".ca.wv", init.normal({M, ch}, 1.0 / std::sqrt(static_cast<double>(M))));
      P.add(r.prefix + ".ca.wo", init.normal({ch, ch}, 0.5 * s));
    }
  }
  norm("out.gn", c.widths[0]);
  conv("out.conv", c.widths[0], c.image_channels, 0.1);
}

Model::Model(ModelConfig config, Vocabulary vocab, Parameters params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
  config_.validate();
}

std::vector<double> timestep_embedding(int timestep, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::cos(timestep * freq);
    e[i + half] = std::sin(timestep * freq);
  }
  return e;
}

Tensor Model::encode_text(const TokenSequence& tokens) const {
  const auto& c = config_;
  if (tokens.size() != c.context_length)
    throw std::invalid_argument("token sequence length " + std::to_string(tokens.size()) + " != context length " +
                                std::to_string(c.context_length));
  const auto& P = params_;
  const std::size_t N = c.context_length, M = c.embed_dim;
  Tensor h = add(embedding(P.get("text.token_embedding"), tokens.ids), P.get("text.position_embedding"));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(M));
  for (std::size_t l = 0; l < c.text_layers; ++l) {
    const std::string p = "text.l" + std::to_string(l);
    Tensor n = group_norm(h, N);
    Tensor q = matmul(n, P.get(p + ".wq"));
    Tensor k = matmul(n, P.get(p + ".wk"));
    Tensor v = matmul(n, P.get(p + ".wv"));
    Tensor a = softmax(scale(matmul(q, k, false, true), inv_sqrt));
    h = add(h, matmul(matmul(a, v), P.get(p + ".wo")));
    Tensor n2 = group_norm(h, N);
    h = add(h, matmul(silu(matmul(n2, P.get(p + ".w1"))), P.get(p + ".w2")));
  }
  return h;
}

CrossAttnOutput cross_attention(const Tensor& features, const Tensor& context, const CrossAttnWeights& w,
                                LayerId layer, int timestep, const AttnIntervention* intervention) {
  if (features.rank() != 2 || context.rank() != 2)
    throw ShapeError("cross_attention: expected [cells, C] features and [N, M] context, got " +
                     shape_str(features.shape()) + " and " + shape_str(context.shape()));
  const std::size_t ch = features.dim(1);
  Tensor q = matmul(features, w.wq);
  Tensor k = matmul(context, w.wk);
  Tensor v = matmul(context, w.wv);
  Tensor map = softmax(scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(ch))));
  if (intervention && *intervention) {
    if (auto replaced = (*intervention)(layer, timestep, map)) {
      if (replaced->shape() != map.shape())
        throw ShapeError("intervention returned " + shape_str(replaced->shape()) + " for a map of shape " +
                         shape_str(map.shape()));
      map = *replaced;
    }
  }
  Tensor out = matmul(matmul(map, v), w.wo);
  return {out, map};
}

Tensor Model::res_block(const std::string& p, const Tensor& x, const Tensor& temb_act) const {
  const auto& P = params_;
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y = conv3x3(silu(group_norm(x, groups_for(config_, cin), P.get(p + ".gn1.g"), P.get(p + ".gn1.b"))),
                     P.get(p + ".conv1.w"), P.get(p + ".conv1.b"));
  const std::size_t cout = y.dim(0);
  Tensor tproj = add(matmul(temb_act, P.get(p + ".temb.w")), P.get(p + ".temb.b"));  // [1, cout]
  Tensor tmap = matmul(tproj, Tensor({1, h * w}, 1.0), true, false);                 // [cout, hw]
  y = add(y, reshape(tmap, {cout, h, w}));
  y = conv3x3(silu(group_norm(y, groups_for(config_, cout), P.get(p + ".gn2.g"), P.get(p + ".gn2.b"))),
              P.get(p + ".conv2.w"), P.get(p + ".conv2.b"));
  Tensor skip = x;
  if (cin != cout) skip = reshape(matmul(P.get(p + ".skip.w"), reshape(x, {cin, h * w})), {cout, h, w});
  return add(skip, y);
}

Tensor Model::self_attention(const std::string& p, const Tensor& x) const {
  const auto& P = params_;
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor n = reshape(group_norm(x, groups_for(config_, ch), P.get(p + ".gn.g"), P.get(p + ".gn.b")), {ch, h * w});
  Tensor q = matmul(n, P.get(p + ".wq"), true, false);  // [hw, C]
  Tensor k = matmul(n, P.get(p + ".wk"), true, false);
  Tensor v = matmul(n, P.get(p + ".wv"), true, false);
  Tensor a = softmax(scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(ch))));
  Tensor o = matmul(P.get(p + ".wo"), matmul(a, v), true, true);  // [C, hw]
  return add(x, reshape(o, {ch, h, w}));
}

Tensor Model::cross_attention_block(const std::string& p, const Tensor& x, const Tensor& context, LayerId layer,
                                    int timestep, const AttnIntervention* intervention, Tensor& map_out) const {
  const auto& P = params_;
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor n = group_norm(x, groups_for(config_, ch), P.get(p + ".gn.g"), P.get(p + ".gn.b"));
  Tensor cells = transpose(reshape(n, {ch, h * w}));
  CrossAttnWeights weights{P.get(p + ".wq"), P.get(p + ".wk"), P.get(p + ".wv"), P.get(p + ".wo")};
  auto out = cross_attention(cells, context, weights, layer, timestep, intervention);
  map_out = out.map;
  return add(x, reshape(transpose(out.features), {ch, h, w}));
}

DenoiseResult Model::denoise(const Tensor& z, int timestep, const Tensor& context, const DenoiseOptions& opt) const {
  const auto& c = config_;
  if (z.shape() != Shape{c.image_channels, c.image_size, c.image_size})
    throw ShapeError("denoise: latent shape " + shape_str(z.shape()) + " does not match the model");
  if (context.shape() != Shape{c.context_length, c.embed_dim})
    throw ShapeError("denoise: context shape " + shape_str(context.shape()) + " does not match the model");
  const auto& P = params_;

  auto temb_raw = timestep_embedding(timestep, c.time_dim);
  Tensor temb = Tensor({1, c.time_dim}, std::move(temb_raw));
  temb = add(matmul(temb, P.get("time.w1")), P.get("time.b1"));
  temb = add(matmul(silu(temb), P.get("time.w2")), P.get("time.b2"));
  const Tensor temb_act = silu(temb);

  DenoiseResult result;
  Tensor h = conv3x3(z, P.get("conv_in.w"), P.get("conv_in.b"));
  std::vector<Tensor> skips{h};

  auto run_block = [&](const BlockPlan& block, bool is_up) {
    std::vector<Tensor> maps;
    for (const auto& r : block.res) {
      if (is_up) {
        h = concat({h, skips.back()}, 0);
        skips.pop_back();
      }
      h = res_block(r.prefix, h, temb_act);
      if (h.dim(1) * h.dim(2) <= c.self_attention_max_cells) h = self_attention(r.prefix + ".sa", h);
      Tensor map;
      h = cross_attention_block(r.prefix + ".ca", h, context, block.id, timestep, opt.intervention, map);
      maps.push_back(map);
      if (!is_up && block.id != LayerId::Mid1) skips.push_back(h);
    }
    Tensor agg = maps[0];
    if (maps.size() > 1) {
      for (std::size_t i = 1; i < maps.size(); ++i) agg = add(agg, maps[i]);
      agg = scale(agg, 1.0 / static_cast<double>(maps.size()));
    }
    const std::size_t side = c.image_size >> block.level;
    result.records.push_back({block.id, timestep, side, side, agg});
    return opt.stop_after && *opt.stop_after == block.id;
  };

  const auto plan = plan_blocks(c);
  for (const auto& block : plan) {
    const bool is_up = layer_index(block.id) >= layer_index(LayerId::Up1);
    if (is_up && block.id != LayerId::Up1) h = upsample2x(h);
    if (run_block(block, is_up)) return result;
    if (block.level < 2 && !is_up) {
      h = avgpool2x(h);
      skips.push_back(h);
    }
  }
  Tensor out = silu(group_norm(h, groups_for(c, h.dim(0)), P.get("out.gn.g"), P.get("out.gn.b")));
  result.eps = conv3x3(out, P.get("out.conv.w"), P.get("out.conv.b"));
  return result;
}

Tensor substitute_word_embeddings(const Tensor& context, const TokenSequence& tokens) {
  if (tokens.eot_begin >= tokens.eot_end) throw std::invalid_argument("substitute_word_embeddings: no [EoT] rows");
  const std::size_t n = context.dim(0), m = context.dim(1);
  if (n != tokens.size()) throw ShapeError("substitute_word_embeddings: context rows do not match tokens");
  if (tokens.word_count() == 0) return context;
  std::vector<std::size_t> idx(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = (i >= tokens.word_begin && i < tokens.word_end) ? tokens.eot_begin : i;
    for (std::size_t j = 0; j < m; ++j) idx[i * m + j] = src * m + j;
  }
  return reshape(gather(context, idx), {n, m});
}

}  // namespace tinylayout
