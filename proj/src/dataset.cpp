#include "tinylayout/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tinylayout {

namespace {

constexpr std::array<std::string_view, 3> kShapeNames{"circle", "square", "triangle"};
constexpr std::array<std::string_view, 4> kColorNames{"red", "green", "blue", "yellow"};
constexpr std::array<std::string_view, 4> kRelationNames{"left", "right", "above", "below"};
constexpr std::array<std::string_view, 4> kRelationPhrases{"to the left of", "to the right of", "above", "below"};

template <typename E, std::size_t K>
E parse_name(std::string_view s, const std::array<std::string_view, K>& names, const char* what) {
  for (std::size_t i = 0; i < K; ++i)
    if (names[i] == s) return static_cast<E>(i);
  throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

bool inside_shape(ShapeKind shape, const BBox& b, double px, double py) {
  if (!b.contains(px, py)) return false;
  switch (shape) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle: {
      const double rx = b.width() / 2, ry = b.height() / 2;
      const double dx = (px - b.cx()) / rx, dy = (py - b.cy()) / ry;
      return dx * dx + dy * dy <= 1.0;
    }
    case ShapeKind::Triangle:
      break;  // row-dependent, see render_scene
  }
  return false;
}

bool separated(const BBox& a, const BBox& b, double gap) {
  return a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0;
}

nlohmann::json box_json(const BBox& b) { return nlohmann::json::array({b.x0, b.y0, b.x1, b.y1}); }

}  // namespace

std::string_view shape_name(ShapeKind s) { return kShapeNames.at(static_cast<std::size_t>(s)); }
std::string_view color_name(Color c) { return kColorNames.at(static_cast<std::size_t>(c)); }
std::string_view relation_name(Relation r) { return kRelationNames.at(static_cast<std::size_t>(r)); }
std::string_view relation_phrase(Relation r) { return kRelationPhrases.at(static_cast<std::size_t>(r)); }
ShapeKind parse_shape(std::string_view s) { return parse_name<ShapeKind>(s, kShapeNames, "shape"); }
Color parse_color(std::string_view s) { return parse_name<Color>(s, kColorNames, "color"); }
Relation parse_relation(std::string_view s) { return parse_name<Relation>(s, kRelationNames, "relation"); }

std::array<std::uint8_t, 3> color_rgb(Color c) {
  switch (c) {
    case Color::Red:
      return {255, 0, 0};
    case Color::Green:
      return {0, 255, 0};
    case Color::Blue:
      return {0, 0, 255};
    case Color::Yellow:
      return {255, 255, 0};
  }
  return {0, 0, 0};
}

ObjectClass ObjectClass::from_index(std::size_t i) {
  if (i >= kNumClasses) throw std::out_of_range("class index " + std::to_string(i));
  return {static_cast<ShapeKind>(i / 4), static_cast<Color>(i % 4)};
}

ObjectClass parse_object_class(std::string_view name) {
  const auto space = name.find(' ');
  if (space == std::string_view::npos) throw std::invalid_argument("expected '<color> <shape>', got '" + std::string(name) + "'");
  return {parse_shape(name.substr(space + 1)), parse_color(name.substr(0, space))};
}

std::string ObjectClass::name() const { return std::string(color_name(color)) + " " + std::string(shape_name(shape)); }

void SceneSpec::validate(std::size_t image_size) const {
  if (objects.size() > 2) throw std::invalid_argument("scene holds at most 2 objects");
  const double min_side = 8.0 / static_cast<double>(image_size);
  for (const auto& o : objects) {
    make_bbox(o.box.x0, o.box.y0, o.box.x1, o.box.y1);
    if (o.box.width() + 1e-12 < min_side || o.box.height() + 1e-12 < min_side)
      throw std::invalid_argument("object box side below 8 px");
  }
  if (objects.size() == 2) {
    if (objects[0].cls == objects[1].cls) throw std::invalid_argument("two objects share a class");
    if (iou(objects[0].box, objects[1].box) > 0.0) throw std::invalid_argument("object boxes overlap");
  }
}

Relation relation_of(const BBox& s, const BBox& o) {
  const double dx = s.cx() - o.cx(), dy = s.cy() - o.cy();
  if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? Relation::Left : Relation::Right;
  return dy < 0 ? Relation::Above : Relation::Below;
}

Image render_scene(const SceneSpec& spec, std::size_t size) {
  spec.validate(size);
  Image img(size, size, spec.background);
  for (const auto& o : spec.objects) {
    const auto rgb = color_rgb(o.cls.color);
    const double rows = o.box.height() * size;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double px = (x + 0.5) / size, py = (y + 0.5) / size;
        bool in = false;
        if (o.cls.shape == ShapeKind::Triangle) {
          if (o.box.contains(px, py)) {
            // Row r (0 at the apex) spans half-width (r + 1) / rows of the box half-width.
            const double r = std::floor((py - o.box.y0) * size);
            const double half = (r + 1.0) / rows * o.box.width() / 2.0;
            in = std::abs(px - o.box.cx()) <= half + 1e-12;
          }
        } else {
          in = inside_shape(o.cls.shape, o.box, px, py);
        }
        if (in) std::copy(rgb.begin(), rgb.end(), img.pixel(x, y));
      }
  }
  return img;
}

std::string caption_scene(const SceneSpec& spec) {
  if (spec.objects.empty() || spec.objects.size() > 2) throw std::invalid_argument("captions need 1 or 2 objects");
  std::string c = "a " + spec.objects[0].cls.name();
  if (spec.objects.size() == 2)
    c += " " + std::string(relation_phrase(relation_of(spec.objects[0].box, spec.objects[1].box))) + " a " +
         spec.objects[1].cls.name();
  return c;
}

ParsedCaption parse_caption(std::string_view caption) {
  std::istringstream in{std::string(caption)};
  std::vector<std::string> w;
  for (std::string s; in >> s;) w.push_back(s);
  auto object_at = [&](std::size_t i) {
    if (i + 3 > w.size()) throw std::invalid_argument("caption ends early");
    if (w[i] != "a") throw std::invalid_argument("expected 'a' at word " + std::to_string(i));
    return ObjectClass{parse_shape(w[i + 2]), parse_color(w[i + 1])};
  };
  ParsedCaption p;
  if (w.size() < 3) throw std::invalid_argument("caption too short: '" + std::string(caption) + "'");
  p.objects.push_back(object_at(0));
  if (w.size() == 3) return p;
  std::size_t next = 0;
  if (w.size() == 10 && w[3] == "to" && w[4] == "the" && w[6] == "of") {
    p.relation = w[5] == "left" ? Relation::Left
                 : w[5] == "right" ? Relation::Right
                                   : throw std::invalid_argument("unknown relation '" + w[5] + "'");
    next = 7;
  } else if (w.size() == 7 && (w[3] == "above" || w[3] == "below")) {
    p.relation = w[3] == "above" ? Relation::Above : Relation::Below;
    next = 4;
  } else {
    throw std::invalid_argument("caption does not follow the grammar: '" + std::string(caption) + "'");
  }
  p.objects.push_back(object_at(next));
  return p;
}

SceneSpec random_scene_with(std::mt19937_64& rng, std::size_t count, const std::vector<ObjectClass>& classes,
                            const GeneratorConfig& cfg) {
  if (count > 2) throw std::invalid_argument("at most 2 objects");
  std::vector<ObjectClass> allowed;
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    auto c = ObjectClass::from_index(i);
    if (!cfg.held_out || !(c == *cfg.held_out)) allowed.push_back(c);
  }
  SceneSpec spec;
  spec.background = static_cast<std::uint8_t>(
      std::uniform_int_distribution<int>(cfg.background_min, cfg.background_max)(rng));
  const double s = static_cast<double>(cfg.image_size);
  std::uniform_int_distribution<std::size_t> side(cfg.min_side, cfg.max_side);
  for (std::size_t k = 0; k < count; ++k) {
    ObjectClass cls;
    if (k < classes.size()) {
      cls = classes[k];
    } else {
      do {
        cls = allowed[std::uniform_int_distribution<std::size_t>(0, allowed.size() - 1)(rng)];
      } while (k == 1 && cls == spec.objects[0].cls);
    }
    spec.objects.push_back({cls, {}});
  }
  auto random_box = [&] {
    const std::size_t w = side(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, cfg.image_size - w)(rng);
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, cfg.image_size - w)(rng);
    return BBox{x0 / s, y0 / s, (x0 + w) / s, (y0 + w) / s};
  };
  // Rejection sampling over whole layouts.
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100000) throw std::runtime_error("could not place scene objects");
    for (auto& o : spec.objects) o.box = random_box();
    if (count < 2 || separated(spec.objects[0].box, spec.objects[1].box, cfg.min_gap / s)) break;
  }
  return spec;
}

SceneSpec random_scene(std::uint64_t seed, std::uint64_t index, const GeneratorConfig& cfg) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5ce9u};
  std::mt19937_64 rng(seq);
  const std::size_t count = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.two_object_fraction ? 2 : 1;
  SceneSpec spec = random_scene_with(rng, count, {}, cfg);
  spec.seed = seed * 1000003ull + index;
  return spec;
}

DatasetManifest generate_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                 const GeneratorConfig& cfg) {
  if (n == 0) throw std::invalid_argument("dataset size must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m{out_dir / "train.jsonl", out_dir / "val.jsonl", 0, 0};
  std::ofstream train(m.train, std::ios::binary), val(m.val, std::ios::binary);
  if (!train || !val) throw std::runtime_error("cannot write manifests in " + out_dir.string());
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSpec spec = random_scene(seed, i, cfg);
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    write_png(out_dir / name, render_scene(spec, cfg.image_size));
    nlohmann::json j;
    j["image"] = name;
    j["caption"] = caption_scene(spec);
    j["background"] = spec.background;
    j["objects"] = nlohmann::json::array();
    for (const auto& o : spec.objects)
      j["objects"].push_back({{"shape", shape_name(o.cls.shape)}, {"color", color_name(o.cls.color)}, {"box", box_json(o.box)}});
    j["relation"] = spec.objects.size() == 2
                        ? nlohmann::json(relation_name(relation_of(spec.objects[0].box, spec.objects[1].box)))
                        : nlohmann::json(nullptr);
    auto& out = i % 10 == 9 ? val : train;
    (i % 10 == 9 ? m.val_count : m.train_count)++;
    out << j.dump() << '\n';
  }
  if (!train || !val) throw std::runtime_error("write failed in " + out_dir.string());
  nlohmann::json info{{"n", n}, {"seed", seed}, {"image_size", cfg.image_size},
                      {"held_out", cfg.held_out ? nlohmann::json(cfg.held_out->name()) : nlohmann::json(nullptr)}};
  std::ofstream(out_dir / "dataset.json", std::ios::binary) << info.dump() << '\n';
  return m;
}

std::vector<Sample> load_split(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw std::runtime_error("cannot open " + jsonl.string());
  std::vector<Sample> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Sample s;
      s.file = j.at("image").get<std::string>();
      s.caption = j.at("caption").get<std::string>();
      s.spec.background = j.at("background").get<std::uint8_t>();
      for (const auto& o : j.at("objects")) {
        auto b = o.at("box");
        s.spec.objects.push_back({{parse_shape(o.at("shape").get<std::string>()), parse_color(o.at("color").get<std::string>())},
                                  make_bbox(b[0], b[1], b[2], b[3])});
      }
      if (!j.at("relation").is_null()) s.relation = parse_relation(j.at("relation").get<std::string>());
      s.image = read_png(jsonl.parent_path() / s.file);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(jsonl.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tinylayout
