#pragma once

// Procedural grid-world videos with paired source/target renderings.
//
// A scene is a 4x4 grid of 4x4-pixel cells holding 2..5 coloured shapes and a
// small actor marker that walks one cell per frame and ends on the object it
// "touches". The same scene is rendered once per domain, which gives every
// target sample a source twin with the same content and pair id.

#include <cstddef>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "viscop/vision_encoder.hpp"
#include "viscop/vocabulary.hpp"

namespace viscop {

enum class DomainShift {
  identity,  // source rendering
  view,      // actor-centred crop, upscaled 2x
  modality,  // luminance collapsed to a single pseudo-depth channel (replicated)
  task,      // tabletop rendering; answers are pick/place grid coordinates
};

enum class QuestionFamily { color, region, touch, pick_place };

const char* to_string(DomainShift shift);
const char* to_string(QuestionFamily family);
DomainShift domain_shift_from_string(const std::string& s);
QuestionFamily question_family_from_string(const std::string& s);

struct SceneOptions {
  std::size_t frames = 4;
  std::size_t grid = 4;
  std::size_t cell = 4;
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;

  [[nodiscard]] std::size_t image_side() const { return grid * cell; }
};

struct GridCell {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const GridCell&) const = default;
};

struct SceneObject {
  std::size_t shape = 0;  // index into shape_names()
  std::size_t color = 0;  // index into color_names()
  GridCell cell;
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  SceneOptions options;
  std::vector<SceneObject> objects;
  std::size_t actor_color = 0;
  std::vector<GridCell> trajectory;  // one cell per frame
  std::size_t touched = 0;           // index of the object under the actor in the last frame

  bool operator==(const SceneSpec& o) const {
    return seed == o.seed && objects == o.objects && actor_color == o.actor_color && trajectory == o.trajectory &&
           touched == o.touched;
  }
};

const std::vector<std::string>& color_names();
const std::vector<std::string>& shape_names();
const std::vector<std::string>& region_names();
/// RGB of a palette colour at full intensity.
std::array<double, 3> palette_rgb(std::size_t color);

/// Every word the synthetic questions and answers use.
Vocabulary synthetic_vocabulary();

SceneSpec generate_scene(std::uint64_t seed, const SceneOptions& options = {});
Video render(const SceneSpec& spec, DomainShift shift);

/// Question text (without BOS) and gold answer text for a scene.
std::pair<std::string, std::string> question_answer(const SceneSpec& spec, QuestionFamily family);

struct QASample {
  Video frames;
  std::vector<std::size_t> question;  // starts with BOS
  std::vector<std::size_t> answer;    // ends with EOS
  std::string answer_text;
  std::string domain;  // "source" or the shift name
  QuestionFamily family = QuestionFamily::color;
  std::uint64_t scene_seed = 0;
  std::size_t pair_id = 0;
};

struct Benchmark {
  std::string name;  // "<domain>/<family>"
  std::string domain;
  DomainShift shift = DomainShift::identity;
  QuestionFamily family = QuestionFamily::color;
  std::vector<QASample> train;
  std::vector<QASample> eval;
  /// Closed answer set, sorted.
  std::vector<std::string> answer_set;
};

/// n samples of one family under one rendering; first 80% train, last 20% eval.
/// Scene seeds depend only on (seed, family, index), so the same call with a
/// different shift yields the paired twin set.
Benchmark make_benchmark(std::size_t n, DomainShift shift, QuestionFamily family, std::uint64_t seed,
                         const SceneOptions& options, const Vocabulary& vocab);

/// Families evaluated on the target side of a shift (source side is always color/region/touch).
std::vector<QuestionFamily> target_families(DomainShift shift);
std::vector<QuestionFamily> source_families();

struct DomainPair {
  DomainShift shift = DomainShift::view;
  std::vector<Benchmark> source;
  std::vector<Benchmark> target;
};

/// Source and target benchmarks for a shift, `per_domain` samples per domain
/// split evenly over its families.
DomainPair make_domain_pair(DomainShift shift, std::size_t per_domain, std::uint64_t seed,
                            const SceneOptions& options, const Vocabulary& vocab);

/// Dataset directory: manifest.json plus samples/<benchmark>/<split>-<index>.bin,
/// each holding u32 T, C, H, W followed by T*C*H*W little-endian f64 pixels.
void write_dataset(const std::filesystem::path& dir, const std::vector<Benchmark>& benchmarks,
                   const Vocabulary& vocab, std::uint64_t seed);
std::vector<Benchmark> read_dataset(const std::filesystem::path& dir, Vocabulary* vocab = nullptr);

std::vector<std::uint8_t> encode_video(const Video& v);
Video decode_video(const std::vector<std::uint8_t>& bytes);

}  // namespace viscop
