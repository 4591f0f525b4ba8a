// Command-line driver: data generation, training, guided sampling, evaluation,
// ablations and concept editing.


#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tinylayout/checkpoint.hpp"
#include "tinylayout/dataset.hpp"
#include "tinylayout/editing.hpp"
#include "tinylayout/experiments.hpp"
#include "tinylayout/image.hpp"

namespace fs = std::filesystem;
using namespace tinylayout;

namespace {

struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create " + p.string() + ": " + ec.message());
}

// Shared run-config flags. Flags override the config file, which overrides defaults.
struct RunFlags {
  std::string config_file;
  std::optional<int> steps, forward_steps, backward_steps, backward_repeats;
  std::optional<double> cfg_scale, lambda, eta;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> gamma_layers, forward_layers;
  std::optional<bool> include_special;
  std::optional<std::size_t> jobs;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config file");
    app->add_option("--steps", steps, "inference steps");
    app->add_option("--cfg-scale", cfg_scale, "classifier-free guidance weight");
    app->add_option("--seed", seed, "RNG seed");
    app->add_option("--lambda", lambda, "forward guidance strength");
    app->add_option("--eta", eta, "backward guidance loss scale");
    app->add_option("--gamma-layers", gamma_layers, "backward layers, e.g. mid-1,up-1");
    app->add_option("--forward-layers", forward_layers, "forward layers");
    app->add_option("--forward-steps", forward_steps, "forward guidance steps");
    app->add_option("--backward-steps", backward_steps, "backward guidance steps");
    app->add_option("--backward-repeats", backward_repeats, "backward updates per step");
    app->add_option("--include-special", include_special, "bias [SoT]/[EoT] with forward guidance");
    app->add_option("--jobs", jobs, "worker threads");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_file.empty()) apply_run_config_json(c, read_text(config_file));
    if (steps) c.steps = *steps;
    if (cfg_scale) c.cfg_scale = *cfg_scale;
    if (seed) c.seed = *seed;
    if (lambda) c.lambda = *lambda;
    if (eta) c.eta = *eta;
    if (gamma_layers) c.gamma_layers = parse_layer_list(*gamma_layers);
    if (forward_layers) c.forward_layers = parse_layer_list(*forward_layers);
    if (forward_steps) c.forward_steps = *forward_steps;
    if (backward_steps) c.backward_steps = *backward_steps;
    if (backward_repeats) c.backward_repeats = *backward_repeats;
    if (include_special) c.include_special = *include_special;
    if (jobs) c.jobs = *jobs;
    c.validate();
    return c;
  }
};

Checkpoint load_or_invalid(const std::string& path) {
  if (!fs::exists(path)) throw InvalidInput("checkpoint " + path + " does not exist");
  return load_checkpoint(path);
}

LayoutSpec load_layout(const std::string& path, const TokenSequence& tokens, const Vocabulary& vocab) {
  if (path.empty()) return {};
  return parse_layout(read_text(path), tokens, vocab);
}

std::string detections_json(const std::vector<Detection>& dets) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& d : dets)
    j.push_back({{"label", d.label.name()},
                 {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
                 {"score", d.score},
                 {"centroid", {d.centroid_x, d.centroid_y}}});
  return j.dump();
}

// ---- make-data -----------------------------------------------------------------------

struct MakeData {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string out, held_out;
  double two_object_fraction = 0.5;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("make-data", "generate the synthetic shapes dataset");
    c->add_option("--n", n, "number of scenes")->required();
    c->add_option("--seed", seed, "RNG seed");
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--held-out", held_out, "class never generated, e.g. 'yellow triangle'");
    c->add_option("--two-object-fraction", two_object_fraction, "probability of a two-object scene");
    c->callback([this] { run(); });
  }

  void run() {
    if (n == 0) throw InvalidInput("--n must be >= 1");
    GeneratorConfig g;
    g.two_object_fraction = two_object_fraction;
    if (!held_out.empty()) g.held_out = parse_object_class(held_out);
    auto m = generate_dataset(n, seed, out, g);
    std::cout << m.train.string() << " (" << m.train_count << " train, " << m.val_count << " val)\n";
  }
};

// ---- train ---------------------------------------------------------------------------

struct Train {
  std::string data, out, config_file, resume, log;
  std::optional<std::size_t> steps, batch_size, checkpoint_every, jobs, warmup;
  std::optional<double> lr, dropout;
  std::optional<std::uint64_t> seed;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("train", "train the denoiser and text encoder");
    c->add_option("--data", data, "dataset directory")->required();
    c->add_option("--out", out, "checkpoint path")->required();
    c->add_option("--config", config_file, "JSON config with optional 'model' and 'train' objects");
    c->add_option("--resume", resume, "checkpoint to continue from");
    c->add_option("--log", log, "loss CSV (default: <out>.loss.csv)");
    c->add_option("--steps", steps, "total optimizer steps");
    c->add_option("--batch-size", batch_size, "examples per step");
    c->add_option("--lr", lr, "learning rate");
    c->add_option("--dropout", dropout, "caption dropout probability");
    c->add_option("--warmup", warmup, "linear warmup steps");
    c->add_option("--checkpoint-every", checkpoint_every, "checkpoint cadence in steps");
    c->add_option("--seed", seed, "RNG seed");
    c->add_option("--jobs", jobs, "worker threads");
    c->callback([this] { run(); });
  }

  void run() {
    ModelConfig mc;
    TrainConfig tc;
    if (!config_file.empty()) {
      auto j = nlohmann::json::parse(read_text(config_file), nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw InvalidInput("config " + config_file + " is not a JSON object");
      if (j.contains("model")) mc = config_from_json(j["model"].dump());
      if (j.contains("train")) {
        const auto& t = j["train"];
        tc.total_steps = t.value("steps", tc.total_steps);
        tc.batch_size = t.value("batch_size", tc.batch_size);
        tc.learning_rate = t.value("lr", tc.learning_rate);
        tc.dropout = t.value("dropout", tc.dropout);
        tc.warmup_steps = t.value("warmup", tc.warmup_steps);
        tc.checkpoint_every = t.value("checkpoint_every", tc.checkpoint_every);
        tc.seed = t.value("seed", tc.seed);
        tc.jobs = t.value("jobs", tc.jobs);
      }
    }
    if (steps) tc.total_steps = *steps;
    if (batch_size) tc.batch_size = *batch_size;
    if (lr) tc.learning_rate = *lr;
    if (dropout) tc.dropout = *dropout;
    if (warmup) tc.warmup_steps = *warmup;
    if (checkpoint_every) tc.checkpoint_every = *checkpoint_every;
    if (seed) tc.seed = *seed;
    if (jobs) tc.jobs = *jobs;
    tc.validate();

    const fs::path dir(data);
    if (!fs::exists(dir / "train.jsonl")) throw InvalidInput("no train.jsonl in " + data);
    std::optional<ObjectClass> held_out;
    if (fs::exists(dir / "dataset.json")) {
      auto info = nlohmann::json::parse(read_text(dir / "dataset.json"));
      if (!info["held_out"].is_null()) held_out = parse_object_class(info["held_out"].get<std::string>());
    }
    std::vector<TrainExample> examples;
    for (auto& s : load_split(dir / "train.jsonl")) examples.push_back({image_to_tensor(s.image), s.caption});

    std::optional<Model> model;
    Checkpoint ck;
    if (!resume.empty()) {
      ck = load_or_invalid(resume);
      model.emplace(ck.model());
    } else {
      model.emplace(mc, tc.seed);
      ck = make_checkpoint(*model, build_schedule());
    }
    const NoiseSchedule schedule = ck.schedule();
    Trainer trainer(*model, schedule, tc);
    if (!resume.empty()) {
      trainer.set_step(ck.step);
      if (ck.optimizer) trainer.optimizer() = *ck.optimizer;
    }
    const fs::path log_path = log.empty() ? fs::path(out + ".loss.csv") : fs::path(log);
    const bool append = !resume.empty() && fs::exists(log_path);
    std::ofstream csv(log_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + log_path.string());
    if (!append) csv << "step,loss\n";

    auto save = [&] {
      Checkpoint c = make_checkpoint(*model, schedule);
      c.step = trainer.step();
      c.held_out = held_out;
      c.optimizer = trainer.optimizer();
      save_checkpoint(out, c);
    };
    while (trainer.step() < tc.total_steps) {
      std::vector<const TrainExample*> batch;
      for (auto i : trainer.batch_indices(examples.size())) batch.push_back(&examples[i]);
      const std::size_t step = trainer.step();
      auto r = trainer.train_step(batch);
      if (r.rejected) {
        std::cerr << r.message << '\n';
        throw std::runtime_error("training aborted at step " + std::to_string(step));
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", step, r.loss);
      csv << buf;
      if (step % 50 == 0) csv.flush();
      if (tc.checkpoint_every && trainer.step() % tc.checkpoint_every == 0) save();
    }
    save();
    std::cout << out << " (step " << trainer.step() << ")\n";
  }
};

// ---- sample --------------------------------------------------------------------------

struct SampleCmd {
  std::string checkpoint, prompt, layout, mode = "none", out, dump_attn;
  RunFlags flags;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("sample", "generate one image");
    c->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    c->add_option("--prompt", prompt, "caption")->required();
    c->add_option("--layout", layout, "layout JSON file");
    c->add_option("--mode", mode, "none | forward | backward | both");
    c->add_option("--out", out, "output PNG")->required();
    c->add_option("--dump-attn", dump_attn, "directory for per-step attention maps (PGM)");
    flags.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    const RunConfig rc = flags.resolve();
    const GuidanceMode m = parse_mode(mode);
    auto ck = load_or_invalid(checkpoint);
    Model model = ck.model();
    const auto schedule = ck.schedule();
    const auto tokens = model.tokenize(prompt);
    const auto spec = load_layout(layout, tokens, model.vocab());
    auto result = generate(model, schedule, prompt, spec, m, rc, rc.seed);
    write_png(out, tensor_to_image(result.image));
    if (!dump_attn.empty()) {
      ensure_dir(dump_attn);
      for (std::size_t r = 0; r < result.history.size(); ++r) {
        const auto& rec = result.history[r];
        const std::size_t step = r / kAllLayers.size();
        const std::size_t n = rec.map.dim(1), cells = rec.map.dim(0);
        for (std::size_t tok = 0; tok < n; ++tok) {
          std::vector<double> col(cells);
          for (std::size_t u = 0; u < cells; ++u) col[u] = rec.map.at(u * n + tok);
          char name[96];
          std::snprintf(name, sizeof name, "step%02zu_%s_tok%02zu.pgm", step, std::string(layer_name(rec.layer)).c_str(),
                        tok);
          write_pgm(fs::path(dump_attn) / name, col, rec.grid_w, rec.grid_h);
        }
      }
    }
    std::cout << out << '\n';
  }
};

// ---- eval-visor ----------------------------------------------------------------------

void write_images(const fs::path& dir, const std::vector<VisorPrompt>& prompts, const VisorRun& run,
                  const std::string& tag) {
  ensure_dir(dir);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%04zu.png", tag.c_str(), i);
    write_png(dir / name, run.images[i]);
  }
}

struct EvalVisor {
  std::string checkpoint, mode = "backward", out, save_images;
  std::size_t n_prompts = 200;
  bool compare = false, allow_untrained = false;
  RunFlags flags;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("eval-visor", "split-canvas spatial fidelity evaluation");
    c->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    c->add_option("--n-prompts", n_prompts, "number of two-object prompts");
    c->add_option("--mode", mode, "none | forward | backward | both");
    c->add_flag("--compare", compare, "also report the unguided run");
    c->add_option("--out", out, "report JSON");
    c->add_option("--save-images", save_images, "directory for generated images");
    c->add_flag("--allow-untrained", allow_untrained, "accept a step-0 checkpoint");
    flags.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    if (n_prompts == 0) throw InvalidInput("--n-prompts must be >= 1");
    const RunConfig rc = flags.resolve();
    const GuidanceMode m = parse_mode(mode);
    auto ck = load_or_invalid(checkpoint);
    if (ck.step == 0 && !allow_untrained) throw InvalidInput("checkpoint " + checkpoint + " is untrained (step 0)");
    Model model = ck.model();
    const auto schedule = ck.schedule();
    const auto prompts = visor_prompts(n_prompts, rc.seed, ck.held_out);
    nlohmann::json reports;
    std::vector<GuidanceMode> modes{m};
    if (compare && m != GuidanceMode::None) modes.insert(modes.begin(), GuidanceMode::None);
    for (auto mm : modes) {
      auto run = run_visor(model, schedule, prompts, mm, rc);
      std::cout << "mode " << mode_name(mm) << '\n' << report_table(run.report);
      reports[mode_name(mm)] = nlohmann::json::parse(report_json(run.report));
      if (!save_images.empty()) write_images(save_images, prompts, run, mode_name(mm));
    }
    if (!out.empty()) write_text(out, reports.dump(2) + "\n");
  }
};

// ---- ablate --------------------------------------------------------------------------

struct Ablate {
  std::string checkpoint, sweep, out;
  std::size_t n_prompts = 50;
  RunFlags flags;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("ablate", "backward guidance layer / loss-scale sweeps");
    c->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    c->add_option("--sweep", sweep, "layers | eta")->required();
    c->add_option("--n-prompts", n_prompts, "prompts per setting");
    c->add_option("--out", out, "CSV output")->required();
    flags.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    if (sweep != "layers" && sweep != "eta") throw InvalidInput("--sweep must be 'layers' or 'eta'");
    if (n_prompts == 0) throw InvalidInput("--n-prompts must be >= 1");
    RunConfig rc = flags.resolve();
    auto ck = load_or_invalid(checkpoint);
    Model model = ck.model();
    const auto schedule = ck.schedule();
    const auto prompts = visor_prompts(n_prompts, rc.seed, ck.held_out);
    std::ostringstream csv;
    csv << "setting,oa,visor_uncond,visor_cond,map\n";
    auto row = [&](const std::string& setting, const RunConfig& c) {
      auto r = run_visor(model, schedule, prompts, GuidanceMode::Backward, c).report;
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%s,%.6f\n", setting.c_str(), r.object_accuracy, r.visor_uncond,
                    r.visor_cond ? std::to_string(*r.visor_cond).c_str() : "undefined", r.map);
      csv << buf;
      std::cout << buf << std::flush;
    };
    if (sweep == "layers") {
      for (const auto& set : ablation_layer_sets()) {
        RunConfig c = rc;
        c.gamma_layers = set;
        std::string name;
        for (auto l : set) name += (name.empty() ? "" : "+") + std::string(layer_name(l));
        row(name, c);
      }
    } else {
      for (double eta : ablation_etas()) {
        RunConfig c = rc;
        c.eta = eta;
        char name[32];
        std::snprintf(name, sizeof name, "eta=%g", eta);
        row(name, c);
      }
    }
    write_text(out, csv.str());
  }
};

// ---- word-drop -----------------------------------------------------------------------

struct WordDrop {
  std::string checkpoint, prompt, out_dir;
  RunFlags flags;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("word-drop", "generate with and without word embeddings");
    c->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    c->add_option("--prompt", prompt, "caption")->required();
    c->add_option("--out-dir", out_dir, "output directory")->required();
    flags.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    const RunConfig rc = flags.resolve();
    auto ck = load_or_invalid(checkpoint);
    Model model = ck.model();
    const auto schedule = ck.schedule();
    const auto tokens = model.tokenize(prompt);
    Tensor full, dropped;
    {
      GradTape::Pause no_grad;
      full = model.encode_text(tokens);
      dropped = substitute_word_embeddings(full, tokens);
    }
    ensure_dir(out_dir);
    auto a = tensor_to_image(generate(model, schedule, prompt, {}, GuidanceMode::None, rc, rc.seed, &full).image);
    auto b = tensor_to_image(generate(model, schedule, prompt, {}, GuidanceMode::None, rc, rc.seed, &dropped).image);
    write_png(fs::path(out_dir) / "full.png", a);
    write_png(fs::path(out_dir) / "dropped.png", b);
    const std::string log = "{\"full\":" + detections_json(detect(a)) + ",\"dropped\":" + detections_json(detect(b)) + "}\n";
    write_text(fs::path(out_dir) / "detections.json", log);
    std::cout << log;
  }
};

// ---- invert / edit -------------------------------------------------------------------

std::vector<Image> concept_images(const std::string& images, std::size_t render, const std::optional<ObjectClass>& cls,
                                  std::uint64_t seed, std::vector<std::string>* names) {
  std::vector<Image> out;
  if (!images.empty()) {
    std::stringstream in(images);
    for (std::string p; std::getline(in, p, ',');) {
      if (!fs::exists(p)) throw InvalidInput("image " + p + " does not exist");
      out.push_back(read_png(p));
      names->push_back(p);
    }
  } else {
    if (!cls) throw InvalidInput("--images is required when the checkpoint has no held-out class");
    std::mt19937_64 rng(seed ^ 0xc0ce97ull);
    for (std::size_t i = 0; i < render; ++i) {
      out.push_back(render_scene(random_scene_with(rng, 1, {*cls}, GeneratorConfig{})));
      names->push_back("rendered:" + cls->name() + "#" + std::to_string(i));
    }
  }
  if (out.empty() || out.size() > 5) throw InvalidInput("inversion takes 1 to 5 images");
  return out;
}

struct Invert {
  std::string checkpoint, images, out, init_words, tmpl;
  std::size_t render = 5;
  std::optional<std::size_t> steps, batch_size, jobs;
  std::optional<double> lr;
  std::uint64_t seed = 0;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("invert", "learn a concept token from example images");
    c->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    c->add_option("--images", images, "comma-separated PNG paths (default: render the held-out class)");
    c->add_option("--render", render, "images to render when --images is absent");
    c->add_option("--out", out, "concept checkpoint")->required();
    c->add_option("--steps", steps, "inversion steps");
    c->add_option("--lr", lr, "learning rate");
    c->add_option("--batch-size", batch_size, "examples per step");
    c->add_option("--template", tmpl, "prompt template containing <*>");
    c->add_option("--init-words", init_words, "comma-separated words averaged for the initial embedding");
    c->add_option("--seed", seed, "RNG seed");
    c->add_option("--jobs", jobs, "worker threads");
    c->callback([this] { run(); });
  }

  void run() {
    auto ck = load_or_invalid(checkpoint);
    Model model = ck.model();
    const auto schedule = ck.schedule();
    EditConfig ec;
    ec.seed = seed;
    if (steps) ec.inversion_steps = *steps;
    if (lr) ec.inversion_lr = *lr;
    if (batch_size) ec.batch_size = *batch_size;
    if (jobs) ec.jobs = *jobs;
    if (!tmpl.empty()) ec.prompt_template = tmpl;
    if (!init_words.empty()) {
      std::stringstream in(init_words);
      for (std::string w; std::getline(in, w, ',');) ec.init_words.push_back(w);
    } else if (ck.held_out) {
      ec.init_words = {std::string(shape_name(ck.held_out->shape))};
    }
    ec.validate();
    std::vector<std::string> names;
    auto imgs = concept_images(images, render, ck.held_out, seed, &names);
    auto token = invert_concept(model, imgs, ec, schedule, names);
    Checkpoint outc = make_checkpoint(model, schedule);
    outc.step = ck.step;
    outc.held_out = ck.held_out;
    outc.concepts = ck.concepts;
    outc.concepts.push_back({token.symbol, token.token_id, names, token.steps, false});
    save_checkpoint(out, outc);
    std::cout << out << " (" << token.symbol << " -> id " << token.token_id << ", final loss "
              << (token.loss_log.empty() ? 0.0 : token.loss_log.back()) << ")\n";
  }
};

struct Edit {
  std::string checkpoint, images, prompt, layout, mode = "backward", out, save_finetuned;
  std::size_t render = 5;
  std::optional<std::size_t> finetune_steps;
  std::optional<double> finetune_lr;
  RunFlags flags;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("edit", "fine-tune on concept images and sample with a layout");
    c->add_option("--checkpoint", checkpoint, "concept checkpoint from invert")->required();
    c->add_option("--images", images, "comma-separated PNG paths (default: render the held-out class)");
    c->add_option("--render", render, "images to render when --images is absent");
    c->add_option("--prompt", prompt, "caption containing the concept symbol")->required();
    c->add_option("--layout", layout, "layout JSON file");
    c->add_option("--mode", mode, "none | forward | backward | both");
    c->add_option("--finetune-steps", finetune_steps, "fine-tuning steps");
    c->add_option("--finetune-lr", finetune_lr, "fine-tuning learning rate");
    c->add_option("--save-finetuned", save_finetuned, "write the fine-tuned checkpoint");
    c->add_option("--out", out, "output PNG")->required();
    flags.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    const RunConfig rc = flags.resolve();
    const GuidanceMode m = parse_mode(mode);
    auto ck = load_or_invalid(checkpoint);
    if (ck.concepts.empty()) throw InvalidInput("checkpoint " + checkpoint + " holds no concept");
    Model model = ck.model();
    const auto schedule = ck.schedule();
    const auto& info = ck.concepts.back();
    ConceptToken token;
    token.symbol = info.symbol;
    token.token_id = info.token_id;
    EditConfig ec;
    ec.seed = rc.seed;
    ec.jobs = rc.jobs;
    if (finetune_steps) ec.finetune_steps = *finetune_steps;
    if (finetune_lr) ec.finetune_lr = *finetune_lr;
    std::vector<std::string> names;
    Model tuned = model.clone();
    if (ec.finetune_steps > 0) {
      auto imgs = concept_images(images, render, ck.held_out, rc.seed, &names);
      tuned = finetune(model, imgs, token, ec, schedule);
    }
    if (!save_finetuned.empty()) {
      Checkpoint c = make_checkpoint(tuned, schedule);
      c.step = ck.step;
      c.held_out = ck.held_out;
      c.concepts = ck.concepts;
      c.concepts.back().finetuned = ec.finetune_steps > 0;
      save_checkpoint(save_finetuned, c);
    }
    const auto tokens = tuned.tokenize(prompt);
    const auto spec = load_layout(layout, tokens, tuned.vocab());
    auto result = generate(tuned, schedule, prompt, spec, m, rc, rc.seed);
    write_png(out, tensor_to_image(result.image));
    std::cout << out << '\n';
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tinylayout: layout-guided text-to-image diffusion at desk scale"};
  app.require_subcommand(1);
  MakeData make_data;
  Train train;
  SampleCmd sample_cmd;
  EvalVisor eval_visor;
  Ablate ablate;
  WordDrop word_drop;
  Invert invert;
  Edit edit;
  make_data.add(app);
  train.add(app);
  sample_cmd.add(app);
  eval_visor.add(app);
  ablate.add(app);
  word_drop.add(app);
  invert.add(app);
  edit.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
