#include "viscop/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <set>

#include <json.hpp>

#include "viscop/checkpoint.hpp"
#include "viscop/errors.hpp"
#include "viscop/rng.hpp"

namespace viscop {

namespace {

constexpr double kObjectIntensity = 0.55;

bool shape_mask(std::size_t shape, std::size_t y, std::size_t x) {
  switch (shape) {
    case 0: return true;                            // square
    case 1: return y >= x;                          // triangle (lower-left)
    case 2: return !((y == 0 || y == 3) && (x == 0 || x == 3));  // circle
    case 3: return x == y || x + y == 3;            // cross
    default: return false;
  }
}

std::array<double, 3> background(std::size_t y, std::size_t x, std::size_t side, DomainShift shift) {
  if (shift == DomainShift::task) return {0.45, 0.42, 0.38};
  const double fx = static_cast<double>(x) / static_cast<double>(side - 1);
  const double fy = static_cast<double>(y) / static_cast<double>(side - 1);
  return {0.05 + 0.15 * fx, 0.05 + 0.15 * fy, 0.10};
}

/// RGB rendering of one frame into a [3 x side x side] buffer.
std::vector<double> draw_frame(const SceneSpec& spec, std::size_t t, DomainShift shift) {
  const auto& o = spec.options;
  const std::size_t side = o.image_side();
  std::vector<double> img(3 * side * side);
  auto px = [&](std::size_t c, std::size_t y, std::size_t x) -> double& { return img[(c * side + y) * side + x]; };
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const auto bg = background(y, x, side, shift);
      for (std::size_t c = 0; c < 3; ++c) px(c, y, x) = bg[c];
    }
  for (const auto& obj : spec.objects) {
    const auto rgb = palette_rgb(obj.color);
    for (std::size_t y = 0; y < o.cell; ++y)
      for (std::size_t x = 0; x < o.cell; ++x) {
        if (!shape_mask(obj.shape, y, x)) continue;
        for (std::size_t c = 0; c < 3; ++c)
          px(c, obj.cell.row * o.cell + y, obj.cell.col * o.cell + x) = kObjectIntensity * rgb[c];
      }
  }
  const auto rgb = palette_rgb(spec.actor_color);
  const GridCell at = spec.trajectory[t];
  for (std::size_t y = 1; y < 3; ++y)
    for (std::size_t x = 1; x < 3; ++x)
      for (std::size_t c = 0; c < 3; ++c) px(c, at.row * o.cell + y, at.col * o.cell + x) = rgb[c];
  return img;
}

std::uint64_t family_stream(QuestionFamily f) { return 0x51u + static_cast<std::uint64_t>(f); }

}  // namespace

const char* to_string(DomainShift shift) {
  switch (shift) {
    case DomainShift::identity: return "source";
    case DomainShift::view: return "view";
    case DomainShift::modality: return "modality";
    case DomainShift::task: return "task";
  }
  return "?";
}

const char* to_string(QuestionFamily family) {
  switch (family) {
    case QuestionFamily::color: return "color";
    case QuestionFamily::region: return "region";
    case QuestionFamily::touch: return "touch";
    case QuestionFamily::pick_place: return "pick-place";
  }
  return "?";
}

DomainShift domain_shift_from_string(const std::string& s) {
  for (auto v : {DomainShift::identity, DomainShift::view, DomainShift::modality, DomainShift::task}) {
    if (s == to_string(v)) return v;
  }
  if (s == "identity") return DomainShift::identity;
  throw ConfigError("unknown domain shift '" + s + "' (expected source, view, modality or task)");
}

QuestionFamily question_family_from_string(const std::string& s) {
  for (auto v : {QuestionFamily::color, QuestionFamily::region, QuestionFamily::touch, QuestionFamily::pick_place}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown question family '" + s + "'");
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names{"red", "green", "blue", "yellow"};
  return names;
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"square", "triangle", "circle", "cross"};
  return names;
}

const std::vector<std::string>& region_names() {
  static const std::vector<std::string> names{"top-left", "top-right", "bottom-left", "bottom-right"};
  return names;
}

std::array<double, 3> palette_rgb(std::size_t color) {
  static constexpr std::array<std::array<double, 3>, 4> rgb{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}}};
  return rgb.at(color);
}

namespace {
std::string coord_token(GridCell c) { return "(" + std::to_string(c.row) + "," + std::to_string(c.col) + ")"; }
}  // namespace

Vocabulary synthetic_vocabulary() {
  Vocabulary v;
  for (const char* w : {"what", "color", "is", "the", "actor", "?", "where", "does", "end", "touch",
                        "pick", "and", "place", "coordinates"}) {
    v.add(w);
  }
  for (const auto& w : color_names()) v.add(w);
  for (const auto& w : region_names()) v.add(w);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) v.add(coord_token({r, c}));
  return v;
}

SceneSpec generate_scene(std::uint64_t seed, const SceneOptions& options) {
  if (options.cell != 4) throw ConfigError("scene: cell size must be 4 pixels");
  if (options.grid < 2 || options.frames == 0) throw ConfigError("scene: need a grid of at least 2 and one frame");
  if (options.min_objects < 1 || options.max_objects < options.min_objects ||
      options.max_objects > options.grid * options.grid) {
    throw ConfigError("scene: invalid object count bounds");
  }
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.options = options;
  const std::size_t count = options.min_objects + rng.below(options.max_objects - options.min_objects + 1);
  std::vector<std::size_t> cells(options.grid * options.grid);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells);
  for (std::size_t i = 0; i < count; ++i) {
    SceneObject obj;
    obj.shape = rng.below(shape_names().size());
    obj.color = rng.below(color_names().size());
    obj.cell = {cells[i] / options.grid, cells[i] % options.grid};
    spec.objects.push_back(obj);
  }
  spec.actor_color = rng.below(color_names().size());
  spec.touched = rng.below(count);

  // Walk backwards from the touched object so the final frame ends on it.
  std::vector<GridCell> path{spec.objects[spec.touched].cell};
  while (path.size() < options.frames) {
    const GridCell cur = path.back();
    std::vector<GridCell> moves;
    if (cur.row > 0) moves.push_back({cur.row - 1, cur.col});
    if (cur.row + 1 < options.grid) moves.push_back({cur.row + 1, cur.col});
    if (cur.col > 0) moves.push_back({cur.row, cur.col - 1});
    if (cur.col + 1 < options.grid) moves.push_back({cur.row, cur.col + 1});
    path.push_back(moves[rng.below(moves.size())]);
  }
  std::reverse(path.begin(), path.end());
  spec.trajectory = std::move(path);
  return spec;
}

Video render(const SceneSpec& spec, DomainShift shift) {
  const auto& o = spec.options;
  const std::size_t side = o.image_side();
  const std::size_t T = spec.trajectory.size();
  Video v(T, 3, side, side);
  for (std::size_t t = 0; t < T; ++t) {
    const auto img = draw_frame(spec, t, shift);
    auto src = [&](std::size_t c, std::size_t y, std::size_t x) { return img[(c * side + y) * side + x]; };
    switch (shift) {
      case DomainShift::identity:
      case DomainShift::task:
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) v.at(t, c, y, x) = src(c, y, x);
        break;
      case DomainShift::modality:
        for (std::size_t y = 0; y < side; ++y)
          for (std::size_t x = 0; x < side; ++x) {
            const double lum = 0.299 * src(0, y, x) + 0.587 * src(1, y, x) + 0.114 * src(2, y, x);
            const double depth = 1.0 - lum;
            for (std::size_t c = 0; c < 3; ++c) v.at(t, c, y, x) = depth;
          }
        break;
      case DomainShift::view: {
        // Half-size window centred on the actor marker, nearest-neighbour upscaled 2x.
        const GridCell at = spec.trajectory[t];
        const auto cy = static_cast<long>(at.row * o.cell + o.cell / 2);
        const auto cx = static_cast<long>(at.col * o.cell + o.cell / 2);
        const long half = static_cast<long>(side / 4);
        for (std::size_t y = 0; y < side; ++y)
          for (std::size_t x = 0; x < side; ++x) {
            const long sy = cy - half + static_cast<long>(y / 2);
            const long sx = cx - half + static_cast<long>(x / 2);
            const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(side) && sx < static_cast<long>(side);
            for (std::size_t c = 0; c < 3; ++c)
              v.at(t, c, y, x) = inside ? src(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0;
          }
        break;
      }
    }
  }
  return v;
}

std::pair<std::string, std::string> question_answer(const SceneSpec& spec, QuestionFamily family) {
  const GridCell end = spec.trajectory.back();
  const std::size_t half = spec.options.grid / 2;
  switch (family) {
    case QuestionFamily::color: return {"what color is the actor ?", color_names()[spec.actor_color]};
    case QuestionFamily::region:
      return {"where does the actor end ?", region_names()[(end.row < half ? 0 : 2) + (end.col < half ? 0 : 1)]};
    case QuestionFamily::touch:
      return {"what color does the actor touch ?", color_names()[spec.objects[spec.touched].color]};
    case QuestionFamily::pick_place:
      return {"pick and place coordinates ?", coord_token(spec.trajectory.front()) + " " + coord_token(end)};
  }
  throw ConfigError("unknown question family");
}

Benchmark make_benchmark(std::size_t n, DomainShift shift, QuestionFamily family, std::uint64_t seed,
                         const SceneOptions& options, const Vocabulary& vocab) {
  if (n < 20) throw ConfigError("make_benchmark: need at least 20 samples, got " + std::to_string(n));
  if ((family == QuestionFamily::pick_place) != (shift == DomainShift::task)) {
    throw ConfigError(std::string("make_benchmark: family ") + to_string(family) + " is not asked under the " +
                      to_string(shift) + " rendering");
  }
  Benchmark b;
  b.domain = to_string(shift);
  b.name = b.domain + "/" + to_string(family);
  b.shift = shift;
  b.family = family;
  const std::size_t n_train = n * 4 / 5;
  std::set<std::string> answers;
  Rng seeds = Rng::derive(seed, family_stream(family));
  for (std::size_t i = 0; i < n; ++i) {
    QASample s;
    s.scene_seed = seeds.next_u64();
    s.pair_id = i;
    s.family = family;
    s.domain = b.domain;
    const SceneSpec spec = generate_scene(s.scene_seed, options);
    s.frames = render(spec, shift);
    auto [q, a] = question_answer(spec, family);
    s.question = {Vocabulary::bos};
    for (auto id : vocab.encode(q)) s.question.push_back(id);
    s.answer = vocab.encode(a);
    s.answer.push_back(Vocabulary::eos);
    s.answer_text = a;
    answers.insert(a);
    (i < n_train ? b.train : b.eval).push_back(std::move(s));
  }
  b.answer_set.assign(answers.begin(), answers.end());
  return b;
}

std::vector<QuestionFamily> source_families() {
  return {QuestionFamily::color, QuestionFamily::region, QuestionFamily::touch};
}

std::vector<QuestionFamily> target_families(DomainShift shift) {
  if (shift == DomainShift::task) return {QuestionFamily::pick_place};
  return source_families();
}

DomainPair make_domain_pair(DomainShift shift, std::size_t per_domain, std::uint64_t seed,
                            const SceneOptions& options, const Vocabulary& vocab) {
  if (shift == DomainShift::identity) throw ConfigError("make_domain_pair: target shift must differ from source");
  DomainPair pair;
  pair.shift = shift;
  const auto src = source_families();
  for (auto f : src) pair.source.push_back(make_benchmark(per_domain / src.size(), DomainShift::identity, f, seed, options, vocab));
  const auto tgt = target_families(shift);
  for (auto f : tgt) pair.target.push_back(make_benchmark(per_domain / tgt.size(), shift, f, seed, options, vocab));
  return pair;
}

std::vector<std::uint8_t> encode_video(const Video& v) {
  std::vector<std::uint8_t> out(4 * sizeof(std::uint32_t) + v.pixels.size() * sizeof(double));
  const std::uint32_t dims[4] = {static_cast<std::uint32_t>(v.frames), static_cast<std::uint32_t>(v.channels),
                                 static_cast<std::uint32_t>(v.height), static_cast<std::uint32_t>(v.width)};
  std::memcpy(out.data(), dims, sizeof dims);
  std::memcpy(out.data() + sizeof dims, v.pixels.data(), v.pixels.size() * sizeof(double));
  return out;
}

Video decode_video(const std::vector<std::uint8_t>& bytes) {
  std::uint32_t dims[4];
  if (bytes.size() < sizeof dims) throw ConfigError("video blob too short");
  std::memcpy(dims, bytes.data(), sizeof dims);
  Video v(dims[0], dims[1], dims[2], dims[3]);
  if (bytes.size() != sizeof dims + v.pixels.size() * sizeof(double)) throw ConfigError("video blob size mismatch");
  std::memcpy(v.pixels.data(), bytes.data() + sizeof dims, v.pixels.size() * sizeof(double));
  return v;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Benchmark>& benchmarks,
                   const Vocabulary& vocab, std::uint64_t seed) {
  using nlohmann::json;
  json manifest{{"format", "viscop-dataset"}, {"version", 1}, {"seed", seed}};
  manifest["vocabulary"] = vocab.words();
  json list = json::array();
  for (const auto& b : benchmarks) {
    json jb{{"name", b.name},
            {"domain", b.domain},
            {"shift", to_string(b.shift)},
            {"family", to_string(b.family)},
            {"answer_set", b.answer_set}};
    json samples = json::array();
    std::string safe = b.name;
    std::replace(safe.begin(), safe.end(), '/', '_');
    for (const auto* split : {"train", "eval"}) {
      const auto& items = std::string(split) == "train" ? b.train : b.eval;
      for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& s = items[i];
        const std::string file = "samples/" + safe + "/" + split + "-" + std::to_string(i) + ".bin";
        write_file_bytes(dir / file, encode_video(s.frames));
        samples.push_back({{"split", split},
                           {"pair_id", s.pair_id},
                           {"scene_seed", s.scene_seed},
                           {"question", s.question},
                           {"answer", s.answer},
                           {"answer_text", s.answer_text},
                           {"file", file}});
      }
    }
    jb["samples"] = std::move(samples);
    list.push_back(std::move(jb));
  }
  manifest["benchmarks"] = std::move(list);
  write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

std::vector<Benchmark> read_dataset(const std::filesystem::path& dir, Vocabulary* vocab) {
  using nlohmann::json;
  const json manifest = json::parse(read_text_file(dir / "manifest.json"));
  if (manifest.at("format") != "viscop-dataset" || manifest.at("version") != 1) {
    throw ConfigError("unsupported dataset manifest in " + dir.string());
  }
  if (vocab) {
    const auto words = manifest.at("vocabulary").get<std::vector<std::string>>();
    *vocab = Vocabulary(std::vector<std::string>(words.begin() + 4, words.end()));
  }
  std::vector<Benchmark> out;
  for (const auto& jb : manifest.at("benchmarks")) {
    Benchmark b;
    b.name = jb.at("name");
    b.domain = jb.at("domain");
    b.shift = domain_shift_from_string(jb.at("shift"));
    b.family = question_family_from_string(jb.at("family"));
    b.answer_set = jb.at("answer_set").get<std::vector<std::string>>();
    for (const auto& js : jb.at("samples")) {
      QASample s;
      s.domain = b.domain;
      s.family = b.family;
      s.pair_id = js.at("pair_id");
      s.scene_seed = js.at("scene_seed");
      s.question = js.at("question").get<std::vector<std::size_t>>();
      s.answer = js.at("answer").get<std::vector<std::size_t>>();
      s.answer_text = js.at("answer_text");
      s.frames = decode_video(read_file_bytes(dir / js.at("file").get<std::string>()));
      (js.at("split") == "train" ? b.train : b.eval).push_back(std::move(s));
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace viscop
