#include "tinylayout/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace tinylayout {

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"image_channels", c.image_channels},
          {"context_length", c.context_length},
          {"embed_dim", c.embed_dim},
          {"vocab_capacity", c.vocab_capacity},
          {"text_layers", c.text_layers},
          {"widths", c.widths},
          {"down_repeats", c.down_repeats},
          {"mid_repeats", c.mid_repeats},
          {"up_repeats", c.up_repeats},
          {"norm_groups", c.norm_groups},
          {"time_dim", c.time_dim},
          {"self_attention_max_cells", c.self_attention_max_cells}};
}

ModelConfig parse_config(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("image_size", c.image_size);
  get("image_channels", c.image_channels);
  get("context_length", c.context_length);
  get("embed_dim", c.embed_dim);
  get("vocab_capacity", c.vocab_capacity);
  get("text_layers", c.text_layers);
  get("widths", c.widths);
  get("down_repeats", c.down_repeats);
  get("mid_repeats", c.mid_repeats);
  get("up_repeats", c.up_repeats);
  get("norm_groups", c.norm_groups);
  get("time_dim", c.time_dim);
  get("self_attention_max_cells", c.self_attention_max_cells);
  c.validate();
  return c;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig config_from_json(const std::string& json_text) { return parse_config(nlohmann::json::parse(json_text)); }

Checkpoint make_checkpoint(const Model& model, const NoiseSchedule& schedule) {
  Checkpoint c;
  c.config = model.config();
  c.schedule_T = schedule.T;
  c.beta_start = schedule.beta_start;
  c.beta_end = schedule.beta_end;
  c.vocab = model.vocab();
  c.params = model.params().clone();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json m;
  m["format"] = "tinylayout-checkpoint";
  m["schema_version"] = kCheckpointSchemaVersion;
  m["config"] = config_json(ck.config);
  m["schedule"] = {{"T", ck.schedule_T}, {"beta_start", ck.beta_start}, {"beta_end", ck.beta_end}};
  m["vocab"] = ck.vocab.words();
  m["step"] = ck.step;
  m["concepts"] = nlohmann::json::array();
  for (const auto& c : ck.concepts)
    m["concepts"].push_back({{"symbol", c.symbol},
                             {"token_id", c.token_id},
                             {"source_images", c.source_images},
                             {"steps", c.steps},
                             {"finetuned", c.finetuned}});
  m["held_out"] = ck.held_out ? nlohmann::json(ck.held_out->name()) : nlohmann::json(nullptr);
  std::size_t count = ck.params.size();
  if (ck.optimizer) {
    m["optimizer"] = {{"t", ck.optimizer->step_count()}};
    count += 2 * ck.optimizer->moments().size();
  }
  m["tensor_count"] = count;

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << m.dump() << '\n';
    for (const auto& [name, t] : ck.params.entries()) write_tensor(out, "param/" + name, t);
    if (ck.optimizer)
      for (const auto& [name, mv] : ck.optimizer->moments()) {
        write_tensor(out, "adam_m/" + name, Tensor({mv.first.size()}, mv.first));
        write_tensor(out, "adam_v/" + name, Tensor({mv.second.size()}, mv.second));
      }
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("write failed for " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string header;
  std::getline(in, header);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": bad checkpoint manifest: " + e.what());
  }
  if (m.value("format", "") != "tinylayout-checkpoint") throw std::runtime_error(path.string() + ": not a checkpoint");
  if (m.at("schema_version").get<int>() != kCheckpointSchemaVersion)
    throw std::runtime_error(path.string() + ": unsupported schema version " + m.at("schema_version").dump());
  Checkpoint ck;
  ck.config = parse_config(m.at("config"));
  ck.schedule_T = m.at("schedule").at("T").get<int>();
  ck.beta_start = m.at("schedule").at("beta_start").get<double>();
  ck.beta_end = m.at("schedule").at("beta_end").get<double>();
  ck.vocab = Vocabulary::from_words(m.at("vocab").get<std::vector<std::string>>());
  ck.step = m.at("step").get<std::size_t>();
  for (const auto& c : m.at("concepts"))
    ck.concepts.push_back({c.at("symbol").get<std::string>(), c.at("token_id").get<int>(),
                           c.at("source_images").get<std::vector<std::string>>(), c.at("steps").get<std::size_t>(),
                           c.value("finetuned", false)});
  if (!m.at("held_out").is_null()) {
    ck.held_out = parse_object_class(m.at("held_out").get<std::string>());
  }
  if (m.contains("optimizer")) {
    ck.optimizer.emplace();
    ck.optimizer->set_step_count(m.at("optimizer").at("t").get<std::uint64_t>());
  }
  const auto count = m.at("tensor_count").get<std::size_t>();
  for (std::size_t i = 0; i < count; ++i) {
    auto [name, t] = read_tensor(in);
    auto slash = name.find('/');
    const auto kind = name.substr(0, slash), key = name.substr(slash + 1);
    if (kind == "param") {
      ck.params.add(key, t);
    } else if ((kind == "adam_m" || kind == "adam_v") && ck.optimizer) {
      auto& mv = ck.optimizer->moments()[key];
      (kind == "adam_m" ? mv.first : mv.second).assign(t.values().begin(), t.values().end());
    } else {
      throw std::runtime_error(path.string() + ": unexpected tensor '" + name + "'");
    }
  }
  return ck;
}

}  // namespace tinylayout
