#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tinylayout/diffusion.hpp"
#include "tinylayout/guidance.hpp"
#include "tinylayout/image.hpp"
#include "tinylayout/model.hpp"

namespace tinylayout {

struct EditConfig {
  std::size_t inversion_steps = 500;
  std::size_t finetune_steps = 150;
  double inversion_lr = 5e-2;
  double finetune_lr = 1e-4;
  std::size_t batch_size = 4;
  std::string prompt_template = "a photo of a <*>";
  std::string symbol = "<*>";
  // Words whose embeddings are averaged to initialize the concept; all base
  // words when empty.
  std::vector<std::string> init_words;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const;
  std::string prompt() const;  // template with the symbol in place
};

struct ConceptToken {
  std::string symbol;
  int token_id = 0;
  std::vector<double> initial_embedding;
  std::vector<double> embedding;
  std::vector<std::string> source_images;
  std::size_t steps = 0;
  std::vector<double> loss_log;
};

// Adds the symbol to the vocabulary (if absent) and writes its embedding row.
void install_concept(Model& model, const ConceptToken& token);

// Optimizes only the new token's embedding row; every other parameter value is left untouched.
ConceptToken invert_concept(Model& model, const std::vector<Image>& images, const EditConfig& config,
                            const NoiseSchedule& schedule, const std::vector<std::string>& sources = {});

// Checksum of every parameter except the embedding rows at or beyond `first_free_row`.
std::uint64_t frozen_checksum(const Model& model, std::size_t first_free_row);

// Mean loss on the template prompt over the images with fixed noise draws.
double concept_loss(const Model& model, const std::vector<Image>& images, const EditConfig& config,
                    const NoiseSchedule& schedule, std::size_t draws_per_image = 8);

// Fine-tunes a copy of the model (denoiser and text encoder) on the template prompt.
Model finetune(const Model& model, const std::vector<Image>& images, const ConceptToken& token,
               const EditConfig& config, const NoiseSchedule& schedule, std::vector<double>* loss_log = nullptr);

SampleResult edit_layout(const Model& model, const NoiseSchedule& schedule, const std::string& prompt,
                         const LayoutSpec& layout, const std::optional<ForwardConfig>& forward,
                         const std::optional<BackwardConfig>& backward, const SamplerConfig& sampler);

}  // namespace tinylayout
