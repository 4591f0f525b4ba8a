#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tinylayout/geometry.hpp"
#include "tinylayout/image.hpp"

namespace tinylayout {

enum class ShapeKind { Circle = 0, Square, Triangle };
enum class Color { Red = 0, Green, Blue, Yellow };
enum class Relation { Left = 0, Right, Above, Below };

inline constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
inline constexpr std::array<Color, 4> kColors{Color::Red, Color::Green, Color::Blue, Color::Yellow};
inline constexpr std::array<Relation, 4> kRelations{Relation::Left, Relation::Right, Relation::Above, Relation::Below};

std::string_view shape_name(ShapeKind s);
std::string_view color_name(Color c);
std::string_view relation_name(Relation r);  // "left", "right", "above", "below"
std::string_view relation_phrase(Relation r);  // "to the left of", ..., "above", "below"
ShapeKind parse_shape(std::string_view s);
Color parse_color(std::string_view s);
Relation parse_relation(std::string_view s);
std::array<std::uint8_t, 3> color_rgb(Color c);

struct ObjectClass {
  ShapeKind shape = ShapeKind::Circle;
  Color color = Color::Red;

  std::size_t index() const { return static_cast<std::size_t>(shape) * 4 + static_cast<std::size_t>(color); }
  static ObjectClass from_index(std::size_t i);
  std::string name() const;  // "red circle"
  bool operator==(const ObjectClass&) const = default;
};
inline constexpr std::size_t kNumClasses = 12;
ObjectClass parse_object_class(std::string_view name);  // "yellow triangle"

struct SceneObject {
  ObjectClass cls;
  BBox box;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::uint8_t background = 128;
  std::uint64_t seed = 0;

  void validate(std::size_t image_size = 32) const;
};

// Subject is the first object; horizontal wins when |dx| >= |dy|.
Relation relation_of(const BBox& subject, const BBox& object);

Image render_scene(const SceneSpec& spec, std::size_t image_size = 32);
std::string caption_scene(const SceneSpec& spec);

struct ParsedCaption {
  std::vector<ObjectClass> objects;
  std::optional<Relation> relation;
};
ParsedCaption parse_caption(std::string_view caption);

struct GeneratorConfig {
  std::size_t image_size = 32;
  std::size_t min_side = 8;   // pixels
  std::size_t max_side = 14;  // pixels
  std::size_t min_gap = 2;    // pixels between objects
  double two_object_fraction = 0.5;
  std::uint8_t background_min = 80;
  std::uint8_t background_max = 176;
  std::optional<ObjectClass> held_out;  // never generated
};

SceneSpec random_scene(std::uint64_t seed, std::uint64_t index, const GeneratorConfig& config);
// Same generator restricted to exactly `count` objects of the given classes (empty = random classes).
SceneSpec random_scene_with(std::mt19937_64& rng, std::size_t count, const std::vector<ObjectClass>& classes,
                            const GeneratorConfig& config);

struct Sample {
  Image image;
  std::string caption;
  SceneSpec spec;
  std::optional<Relation> relation;
  std::string file;
};

struct DatasetManifest {
  std::filesystem::path train;
  std::filesystem::path val;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
};

// Writes {index:06}.png, train.jsonl (index % 10 != 9) and val.jsonl.
DatasetManifest generate_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                 const GeneratorConfig& config = {});

std::vector<Sample> load_split(const std::filesystem::path& jsonl);

}  // namespace tinylayout
