#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tinylayout/dataset.hpp"
#include "tinylayout/diffusion.hpp"
#include "tinylayout/model.hpp"

namespace tinylayout {

inline constexpr int kCheckpointSchemaVersion = 1;

struct ConceptInfo {
  std::string symbol;
  int token_id = 0;
  std::vector<std::string> source_images;
  std::size_t steps = 0;
  bool finetuned = false;
};

struct Checkpoint {
  ModelConfig config;
  int schedule_T = 500;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  Vocabulary vocab = Vocabulary::base();
  Parameters params;
  std::size_t step = 0;
  std::vector<ConceptInfo> concepts;
  std::optional<ObjectClass> held_out;
  std::optional<Adam> optimizer;

  Model model() const { return Model(config, vocab, params.clone()); }
  NoiseSchedule schedule() const { return build_schedule(schedule_T, beta_start, beta_end); }
};

Checkpoint make_checkpoint(const Model& model, const NoiseSchedule& schedule);

// Writes to a temporary file in the same directory, then renames.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace tinylayout
