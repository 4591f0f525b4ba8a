#include "tinylayout/editing.hpp"

#include <stdexcept>

namespace tinylayout {

namespace {

std::vector<TrainExample> template_examples(const std::vector<Image>& images, const std::string& prompt) {
  std::vector<TrainExample> ex;
  for (const auto& img : images) ex.push_back({image_to_tensor(img), prompt});
  return ex;
}

}  // namespace

void EditConfig::validate() const {
  if (symbol.empty()) throw std::invalid_argument("concept symbol must be nonempty");
  if (prompt_template.find(symbol) == std::string::npos)
    throw std::invalid_argument("prompt template '" + prompt_template + "' does not contain " + symbol);
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (!(inversion_lr > 0.0) || !(finetune_lr > 0.0)) throw std::invalid_argument("learning rates must be > 0");
}

std::string EditConfig::prompt() const { return prompt_template; }

void install_concept(Model& model, const ConceptToken& token) {
  auto& vocab = model.vocab();
  int id = vocab.find(token.symbol).value_or(-1);
  if (id < 0) id = vocab.add(token.symbol);
  if (id != token.token_id) throw std::invalid_argument("concept " + token.symbol + " maps to a different token id");
  auto& table = model.params().get("text.token_embedding");
  const std::size_t m = table.dim(1);
  if (static_cast<std::size_t>(id) >= table.dim(0)) throw std::invalid_argument("vocabulary capacity exhausted");
  if (token.embedding.size() != m) throw ShapeError("concept embedding has the wrong width");
  std::copy(token.embedding.begin(), token.embedding.end(), table.mutable_values().begin() + id * m);
}

std::uint64_t frozen_checksum(const Model& model, std::size_t first_free_row) {
  Parameters view;
  for (const auto& [name, t] : model.params().entries()) {
    if (name == "text.token_embedding") {
      const std::size_t m = t.dim(1);
      auto v = t.values();
      view.add(name, Tensor({first_free_row, m}, std::vector<double>(v.begin(), v.begin() + first_free_row * m)));
    } else {
      view.add(name, t);
    }
  }
  return view.checksum();
}

ConceptToken invert_concept(Model& model, const std::vector<Image>& images, const EditConfig& config,
                            const NoiseSchedule& schedule, const std::vector<std::string>& sources) {
  config.validate();
  if (images.empty() || images.size() > 5) throw std::invalid_argument("inversion takes 1 to 5 example images");
  if (model.vocab().find(config.symbol)) throw std::invalid_argument("symbol " + config.symbol + " already exists");
  const auto& table = model.params().get("text.token_embedding");
  const std::size_t m = table.dim(1);

  std::vector<int> init_ids;
  if (config.init_words.empty()) {
    for (std::size_t i = 2; i < model.vocab().size(); ++i) init_ids.push_back(static_cast<int>(i));
  } else {
    for (const auto& w : config.init_words) init_ids.push_back(model.vocab().id(w));
  }
  ConceptToken tok;
  tok.symbol = config.symbol;
  tok.token_id = static_cast<int>(model.vocab().size());
  tok.source_images = sources;
  tok.initial_embedding.assign(m, 0.0);
  for (int id : init_ids)
    for (std::size_t j = 0; j < m; ++j) tok.initial_embedding[j] += table.at(id * m + j) / init_ids.size();
  tok.embedding = tok.initial_embedding;
  install_concept(model, tok);

  const auto examples = template_examples(images, config.prompt());
  Adam adam;
  model.params().set_requires_grad(false);
  auto& table_ref = model.params().get("text.token_embedding");
  for (std::size_t step = 0; step < config.inversion_steps; ++step) {
    std::vector<const TrainExample*> batch;
    std::vector<NoiseDraw> draws;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      auto rng = derived_rng(config.seed, step, b);
      batch.push_back(&examples[std::uniform_int_distribution<std::size_t>(0, examples.size() - 1)(rng)]);
      draws.push_back(draw_noise(rng, examples[0].image.shape(), schedule, 0.0));
    }
    table_ref.set_requires_grad(true);
    auto bg = batch_gradients(model, batch, draws, schedule, {"text.token_embedding"}, config.jobs);
    table_ref.set_requires_grad(false);
    const auto& g = bg.grads.at("text.token_embedding");
    adam.advance();
    auto row = table_ref.mutable_values().subspan(tok.token_id * m, m);
    adam.update("concept", row, std::span<const double>(g).subspan(tok.token_id * m, m), config.inversion_lr);
    tok.loss_log.push_back(bg.loss);
  }
  auto row = table_ref.values().subspan(tok.token_id * m, m);
  tok.embedding.assign(row.begin(), row.end());
  tok.steps = config.inversion_steps;
  return tok;
}

double concept_loss(const Model& model, const std::vector<Image>& images, const EditConfig& config,
                    const NoiseSchedule& schedule, std::size_t draws_per_image) {
  GradTape::Pause no_grad;
  const auto examples = template_examples(images, config.prompt());
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < examples.size(); ++i)
    for (std::size_t k = 0; k < draws_per_image; ++k) {
      auto rng = derived_rng(config.seed ^ 0x10551ull, i, k);
      total += diffusion_loss(model, examples[i], draw_noise(rng, examples[i].image.shape(), schedule, 0.0), schedule).item();
      ++n;
    }
  return total / static_cast<double>(n);
}

Model finetune(const Model& model, const std::vector<Image>& images, const ConceptToken& token,
               const EditConfig& config, const NoiseSchedule& schedule, std::vector<double>* loss_log) {
  config.validate();
  if (!model.vocab().find(token.symbol)) throw std::invalid_argument("concept " + token.symbol + " is not installed");
  Model tuned = model.clone();
  if (config.finetune_steps == 0) return tuned;
  const auto examples = template_examples(images, config.prompt());
  TrainConfig tc;
  tc.batch_size = config.batch_size;
  tc.learning_rate = config.finetune_lr;
  tc.total_steps = config.finetune_steps;
  tc.dropout = 0.0;
  tc.warmup_steps = 0;
  tc.jobs = config.jobs;
  tc.seed = config.seed ^ 0xf17e7ull;
  Trainer trainer(tuned, schedule, tc);
  for (std::size_t s = 0; s < config.finetune_steps; ++s) {
    std::vector<const TrainExample*> batch;
    for (auto i : trainer.batch_indices(examples.size())) batch.push_back(&examples[i]);
    auto r = trainer.train_step(batch);
    if (r.rejected) throw NonFiniteError("fine-tuning aborted: " + r.message);
    if (loss_log) loss_log->push_back(r.loss);
  }
  return tuned;
}

SampleResult edit_layout(const Model& model, const NoiseSchedule& schedule, const std::string& prompt,
                         const LayoutSpec& layout, const std::optional<ForwardConfig>& forward,
                         const std::optional<BackwardConfig>& backward, const SamplerConfig& sampler) {
  if (layout.empty() || (!forward && !backward)) return sample(model, schedule, prompt, sampler);
  const auto tokens = model.tokenize(prompt);
  auto hooks = schedule_guidance(model, schedule, tokens, layout, forward, backward, sampler.steps);
  Tensor context;
  {
    GradTape::Pause no_grad;
    context = model.encode_text(tokens);
  }
  return sample(model, schedule, context, sampler, &hooks);
}

}  // namespace tinylayout
