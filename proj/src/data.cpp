#include "sketchssl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "sketchssl/error.hpp"
#include "sketchssl/rng.hpp"

namespace sketchssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr int kQuickdrawGrid = 256;

using Polyline = std::vector<std::pair<double, double>>;
using Polylines = std::vector<Polyline>;

// ----------------------------------------------------- sketch templates

Polyline regular_polygon(double cx, double cy, double r, int sides,
                         double start_angle) {
  Polyline pts;
  for (int i = 0; i <= sides; ++i) {
    double a = start_angle + 2.0 * kPi * i / sides;
    pts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
  }
  return pts;
}

Polylines sketch_template(const std::string& name) {
  if (name == "circle") return {regular_polygon(0.5, 0.5, 0.35, 24, 0.0)};
  if (name == "square")
    return {{{0.15, 0.15}, {0.85, 0.15}, {0.85, 0.85}, {0.15, 0.85}, {0.15, 0.15}}};
  if (name == "triangle")
    return {{{0.5, 0.12}, {0.88, 0.82}, {0.12, 0.82}, {0.5, 0.12}}};
  if (name == "star") {
    Polyline pts;
    for (int i = 0; i <= 10; ++i) {
      double r = (i % 2 == 0) ? 0.4 : 0.16;
      double a = -kPi / 2 + kPi * i / 5.0;
      pts.push_back({0.5 + r * std::cos(a), 0.5 + r * std::sin(a)});
    }
    return {pts};
  }
  if (name == "zigzag") {
    Polyline pts;
    for (int i = 0; i <= 6; ++i)
      pts.push_back({0.1 + 0.8 * i / 6.0, (i % 2 == 0) ? 0.3 : 0.7});
    return {pts};
  }
  if (name == "spiral") {
    Polyline pts;
    for (int i = 0; i < 40; ++i) {
      double t = 4.0 * kPi * i / 39.0;
      double r = 0.04 + 0.31 * t / (4.0 * kPi);
      pts.push_back({0.5 + r * std::cos(t), 0.5 + r * std::sin(t)});
    }
    return {pts};
  }
  if (name == "arrow")
    return {{{0.1, 0.5}, {0.82, 0.5}, {0.62, 0.32}}, {{0.82, 0.5}, {0.62, 0.68}}};
  if (name == "cross")
    return {{{0.15, 0.15}, {0.85, 0.85}}, {{0.85, 0.15}, {0.15, 0.85}}};
  if (name == "heart") {
    Polyline pts;
    for (int i = 0; i <= 24; ++i) {
      double t = 2.0 * kPi * i / 24.0;
      double x = 16.0 * std::pow(std::sin(t), 3.0);
      double y = 13.0 * std::cos(t) - 5.0 * std::cos(2 * t) -
                 2.0 * std::cos(3 * t) - std::cos(4 * t);
      pts.push_back({0.5 + x / 40.0, 0.5 - y / 40.0});
    }
    return {pts};
  }
  if (name == "house")
    return {{{0.2, 0.45}, {0.8, 0.45}, {0.8, 0.9}, {0.2, 0.9}, {0.2, 0.45}},
            {{0.2, 0.45}, {0.5, 0.12}, {0.8, 0.45}}};
  fail(ErrorCode::UnknownClassName, "data: unknown sketch class '" + name + "'");
}

// ------------------------------------------------------ glyph templates

// Each glyph lives in a unit box, y increasing downward (raster rows).
Polylines glyph_template(const std::string& name) {
  if (name == "a")
    return {regular_polygon(0.45, 0.65, 0.22, 12, kPi / 2),
            {{0.67, 0.43}, {0.67, 0.87}}};
  if (name == "c") {
    Polyline arc;
    for (int i = 0; i <= 12; ++i) {
      double a = kPi / 4 + (3.0 * kPi / 2) * i / 12.0;
      arc.push_back({0.5 + 0.22 * std::cos(a), 0.65 + 0.22 * std::sin(a)});
    }
    return {arc};
  }
  if (name == "e") {
    Polyline arc;
    for (int i = 0; i <= 12; ++i) {
      double a = -kPi / 6 + (4.0 * kPi / 3) * i / 12.0;
      arc.push_back({0.5 + 0.22 * std::cos(a), 0.65 + 0.22 * std::sin(a)});
    }
    return {{{0.28, 0.65}, {0.72, 0.65}}, arc};
  }
  if (name == "h")
    return {{{0.3, 0.1}, {0.3, 0.9}},
            {{0.3, 0.6}, {0.5, 0.45}, {0.7, 0.6}, {0.7, 0.9}}};
  if (name == "l") return {{{0.5, 0.1}, {0.5, 0.9}}};
  if (name == "n")
    return {{{0.3, 0.45}, {0.3, 0.9}},
            {{0.3, 0.55}, {0.5, 0.4}, {0.7, 0.55}, {0.7, 0.9}}};
  if (name == "o") return {regular_polygon(0.5, 0.65, 0.24, 12, 0.0)};
  if (name == "s")
    return {{{0.68, 0.48},
             {0.5, 0.42},
             {0.34, 0.5},
             {0.5, 0.62},
             {0.66, 0.72},
             {0.5, 0.85},
             {0.3, 0.8}}};
  if (name == "t")
    return {{{0.5, 0.15}, {0.5, 0.85}}, {{0.3, 0.4}, {0.7, 0.4}}};
  if (name == "u")
    return {{{0.3, 0.45},
             {0.3, 0.75},
             {0.4, 0.88},
             {0.6, 0.88},
             {0.7, 0.75},
             {0.7, 0.45},
             {0.7, 0.9}}};
  fail(ErrorCode::UnknownClassName, "data: unknown glyph '" + name + "'");
}

DatasetSplit make_split(std::vector<std::string> ids,
                        std::vector<std::string> universe, std::uint64_t seed,
                        Rng& rng) {
  rng.shuffle(ids);
  std::size_t n = ids.size();
  std::size_t n_train = n * 8 / 10;
  std::size_t n_val = n / 10;
  DatasetSplit split;
  split.seed = seed;
  split.class_universe = std::move(universe);
  split.train.assign(ids.begin(), ids.begin() + n_train);
  split.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test.assign(ids.begin() + n_train + n_val, ids.end());
  return split;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ostream& out, float v) {
  static_assert(sizeof(float) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.gcount() == 4, ErrorCode::MalformedRecord,
          "corpus: truncated " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

float read_f32(std::istream& in, const std::string& what) {
  std::uint32_t bits = read_u32(in, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

// ------------------------------------------------------------- parsing

ParsedQuickdraw parse_quickdraw_lines(std::istream& in) {
  ParsedQuickdraw out;
  std::string line;
  std::size_t line_no = 0;
  bool any_content = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    any_content = true;
    try {
      json rec = json::parse(line);
      require(rec.is_object() && rec.contains("word") && rec.contains("drawing"),
              ErrorCode::MalformedRecord, "missing word/drawing fields");
      require(rec["word"].is_string() && rec["drawing"].is_array(),
              ErrorCode::MalformedRecord, "word/drawing have wrong types");
      Polylines strokes;
      std::size_t total_points = 0;
      for (const auto& stroke : rec["drawing"]) {
        require(stroke.is_array() && stroke.size() == 2 &&
                    stroke[0].is_array() && stroke[1].is_array() &&
                    stroke[0].size() == stroke[1].size(),
                ErrorCode::MalformedRecord,
                "stroke must be parallel [xs, ys] arrays of equal length");
        Polyline pts;
        for (std::size_t i = 0; i < stroke[0].size(); ++i) {
          require(stroke[0][i].is_number() && stroke[1][i].is_number(),
                  ErrorCode::MalformedRecord, "non-numeric coordinate");
          double x = stroke[0][i].get<double>();
          double y = stroke[1][i].get<double>();
          require(x >= 0 && x < kQuickdrawGrid && y >= 0 && y < kQuickdrawGrid,
                  ErrorCode::MalformedRecord,
                  "coordinate outside the 256x256 grid");
          pts.push_back({x, y});
          ++total_points;
        }
        strokes.push_back(std::move(pts));
      }
      if (total_points < 2) {
        ++out.skipped;
        continue;
      }
      StrokeSequence seq =
          normalize(from_polylines(strokes), kQuickdrawGrid, kQuickdrawGrid);
      out.records.emplace_back(rec["word"].get<std::string>(), std::move(seq));
    } catch (const json::exception& e) {
      ++out.skipped;
      out.diagnostics.push_back("line " + std::to_string(line_no) +
                                ": MalformedRecord: " + e.what());
    } catch (const Error& e) {
      ++out.skipped;
      out.diagnostics.push_back("line " + std::to_string(line_no) + ": " +
                                e.what());
    }
  }
  require(any_content, ErrorCode::EmptyFile,
          "parse_quickdraw_lines: input has no records");
  return out;
}

// ------------------------------------------------------------ synthesis

const std::vector<std::string>& synthetic_sketch_classes() {
  static const std::vector<std::string> names = {
      "circle", "square", "triangle", "star",  "zigzag",
      "spiral", "arrow",  "cross",    "heart", "house"};
  return names;
}

const std::vector<std::string>& synthetic_glyph_names() {
  static const std::vector<std::string> names = {"a", "c", "e", "h", "l",
                                                 "n", "o", "s", "t", "u"};
  return names;
}

std::pair<std::vector<LabeledSample>, DatasetSplit> make_synthetic_sketches(
    const SyntheticSketchSpec& spec) {
  require(spec.per_class >= 1, ErrorCode::ConfigError,
          "data: per_class must be at least 1");
  require(spec.jitter >= 0.0, ErrorCode::ConfigError,
          "data: jitter must be non-negative");
  require(!spec.classes.empty(), ErrorCode::ConfigError,
          "data: class list is empty");
  const std::vector<std::string>& classes = spec.classes;
  for (const auto& name : classes) sketch_template(name);  // UnknownClassName

  Rng master(spec.seed);
  std::vector<LabeledSample> samples;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    Polylines base = sketch_template(classes[ci]);
    for (int i = 0; i < spec.per_class; ++i) {
      Rng rng = master.derive((static_cast<std::uint64_t>(ci) << 32) |
                              static_cast<std::uint64_t>(i));
      Polylines jittered = base;
      for (auto& stroke : jittered)
        for (auto& [x, y] : stroke) {
          x = std::clamp(x + spec.jitter * rng.normal(), 0.0, 1.0);
          y = std::clamp(y + spec.jitter * rng.normal(), 0.0, 1.0);
        }
      LabeledSample s;
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "-%05d", i);
      s.id = classes[ci] + idbuf;
      s.vector = rdp_simplify(from_polylines(jittered), spec.rdp_epsilon);
      s.label = static_cast<int>(ci);
      samples.push_back(std::move(s));
    }
  }

  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.id);
  Rng split_rng = master.derive(0xdeadbeefULL);
  DatasetSplit split = make_split(std::move(ids), classes, spec.seed, split_rng);
  return {std::move(samples), std::move(split)};
}

std::pair<std::vector<LabeledSample>, DatasetSplit> make_synthetic_words(
    const SyntheticWordSpec& spec) {
  require(spec.count >= 1, ErrorCode::ConfigError,
          "data: word count must be at least 1");
  require(spec.min_length >= 1 && spec.max_length >= spec.min_length,
          ErrorCode::ConfigError, "data: invalid word length range");
  require(!spec.alphabet.empty(), ErrorCode::EmptyAlphabet,
          "data: alphabet has no glyphs");
  const std::vector<std::string>& alphabet = spec.alphabet;
  for (const auto& g : alphabet) glyph_template(g);  // UnknownClassName

  Rng master(spec.seed);
  std::vector<LabeledSample> samples;
  for (int i = 0; i < spec.count; ++i) {
    Rng rng = master.derive(static_cast<std::uint64_t>(i));
    int len = spec.min_length +
              static_cast<int>(rng.below(spec.max_length - spec.min_length + 1));
    std::string word;
    Polylines strokes;
    for (int k = 0; k < len; ++k) {
      const std::string& glyph =
          alphabet[static_cast<std::size_t>(rng.below(alphabet.size()))];
      word += glyph;
      for (Polyline stroke : glyph_template(glyph)) {
        for (auto& [x, y] : stroke) x = (x + k) / static_cast<double>(len);
        strokes.push_back(std::move(stroke));
      }
    }
    LabeledSample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "word-%05d", i);
    s.id = idbuf;
    s.vector = from_polylines(strokes);
    s.text = word;
    samples.push_back(std::move(s));
  }

  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.id);
  Rng split_rng = master.derive(0xdeadbeefULL);
  DatasetSplit split = make_split(std::move(ids), alphabet, spec.seed, split_rng);
  return {std::move(samples), std::move(split)};
}

std::pair<DatasetSplit, DatasetSplit> split_disjoint_classes(
    const std::vector<LabeledSample>& samples,
    const std::vector<std::string>& class_universe, int n_pretrain_classes,
    std::uint64_t seed) {
  int n_classes = static_cast<int>(class_universe.size());
  require(n_pretrain_classes >= 1 && n_classes > n_pretrain_classes,
          ErrorCode::TooFewClasses,
          "split_disjoint_classes: need 1 <= n_pretrain < total classes");

  std::vector<int> order(n_classes);
  for (int i = 0; i < n_classes; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<bool> in_pretrain(n_classes, false);
  for (int i = 0; i < n_pretrain_classes; ++i) in_pretrain[order[i]] = true;

  std::vector<std::string> pre_ids, eval_ids, pre_classes, eval_classes;
  for (int c = 0; c < n_classes; ++c)
    (in_pretrain[c] ? pre_classes : eval_classes).push_back(class_universe[c]);
  for (const auto& s : samples) {
    require(s.has_label() && s.label < n_classes, ErrorCode::ClassMismatch,
            "split_disjoint_classes: sample '" + s.id +
                "' lacks a label in the universe");
    (in_pretrain[s.label] ? pre_ids : eval_ids).push_back(s.id);
  }

  Rng pre_rng = rng.derive(1);
  Rng eval_rng = rng.derive(2);
  DatasetSplit pre =
      make_split(std::move(pre_ids), std::move(pre_classes), seed, pre_rng);
  DatasetSplit eval =
      make_split(std::move(eval_ids), std::move(eval_classes), seed, eval_rng);
  return {std::move(pre), std::move(eval)};
}

RasterImage sample_raster(const LabeledSample& sample, const RasterConfig& cfg) {
  return render(sample.vector, cfg);
}

// --------------------------------------------------------------- corpus

void save_corpus(const std::string& dir,
                 const std::vector<LabeledSample>& samples,
                 const DatasetSplit& split, const std::string& spec_echo_json) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::IoError, "corpus: cannot create '" + dir + "'");

  json manifest;
  manifest["format"] = "sketchssl-corpus-v1";
  manifest["seed"] = split.seed;
  manifest["classes"] = split.class_universe;
  manifest["splits"] = {{"train", split.train}, {"val", split.val},
                        {"test", split.test}};
  json labels = json::object(), texts = json::object();
  json ids = json::array();
  for (const auto& s : samples) {
    ids.push_back(s.id);
    if (s.has_label()) labels[s.id] = s.label;
    if (s.has_text()) texts[s.id] = s.text;
  }
  manifest["ids"] = ids;
  manifest["labels"] = labels;
  manifest["texts"] = texts;
  manifest["spec"] =
      spec_echo_json.empty() ? json::object() : json::parse(spec_echo_json);

  for (const auto& s : samples) {
    std::ofstream out(fs::path(dir) / (s.id + ".strokes"), std::ios::binary);
    require(out.good(), ErrorCode::IoError,
            "corpus: cannot write strokes for '" + s.id + "'");
    write_u32(out, static_cast<std::uint32_t>(s.vector.points.size()));
    for (const auto& p : s.vector.points) {
      write_f32(out, static_cast<float>(p.x));
      write_f32(out, static_cast<float>(p.y));
      for (double q : pen_one_hot(p.state)) write_f32(out, static_cast<float>(q));
    }
    require(out.good(), ErrorCode::IoError,
            "corpus: short write for '" + s.id + "'");
  }

  std::ofstream mout(fs::path(dir) / "manifest.json", std::ios::binary);
  require(mout.good(), ErrorCode::IoError, "corpus: cannot write manifest");
  mout << manifest.dump(2) << "\n";
  require(mout.good(), ErrorCode::IoError, "corpus: short manifest write");
}

std::pair<std::vector<LabeledSample>, DatasetSplit> load_corpus(
    const std::string& dir) {
  std::ifstream min(fs::path(dir) / "manifest.json", std::ios::binary);
  require(min.good(), ErrorCode::IoError,
          "corpus: cannot open manifest in '" + dir + "'");
  json manifest;
  try {
    min >> manifest;
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord,
         std::string("corpus: manifest is not valid JSON: ") + e.what());
  }
  require(manifest.value("format", "") == "sketchssl-corpus-v1",
          ErrorCode::MalformedRecord, "corpus: unknown manifest format");

  DatasetSplit split;
  std::vector<std::string> ids;
  json labels, texts;
  try {
    split.seed = manifest.value("seed", 0ULL);
    split.class_universe =
        manifest.value("classes", std::vector<std::string>{});
    split.train = manifest.at("splits").value("train", std::vector<std::string>{});
    split.val = manifest.at("splits").value("val", std::vector<std::string>{});
    split.test = manifest.at("splits").value("test", std::vector<std::string>{});
    ids = manifest.at("ids").get<std::vector<std::string>>();
    labels = manifest.value("labels", json::object());
    texts = manifest.value("texts", json::object());
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord,
         std::string("corpus: manifest field error: ") + e.what());
  }

  std::vector<LabeledSample> samples;
  for (const auto& id : ids) {
    LabeledSample s;
    s.id = id;
    try {
      if (labels.contains(s.id)) s.label = labels[s.id].get<int>();
      if (texts.contains(s.id)) s.text = texts[s.id].get<std::string>();
    } catch (const json::exception& e) {
      fail(ErrorCode::MalformedRecord,
           std::string("corpus: bad label/text for '") + s.id + "': " + e.what());
    }

    std::ifstream in(fs::path(dir) / (s.id + ".strokes"), std::ios::binary);
    require(in.good(), ErrorCode::IoError,
            "corpus: missing strokes for '" + s.id + "'");
    std::uint32_t count = read_u32(in, "row count of '" + s.id + "'");
    require(count >= 1, ErrorCode::MalformedRecord,
            "corpus: empty sequence for '" + s.id + "'");
    for (std::uint32_t i = 0; i < count; ++i) {
      double row[5];
      for (double& v : row)
        v = static_cast<double>(read_f32(in, "row of '" + s.id + "'"));
      PenState state;
      if (row[2] == 1.0 && row[3] == 0.0 && row[4] == 0.0)
        state = PenState::kDown;
      else if (row[2] == 0.0 && row[3] == 1.0 && row[4] == 0.0)
        state = PenState::kUp;
      else if (row[2] == 0.0 && row[3] == 0.0 && row[4] == 1.0)
        state = PenState::kEnd;
      else
        fail(ErrorCode::MalformedRecord,
             "corpus: non-one-hot pen state in '" + s.id + "'");
      s.vector.points.push_back({row[0], row[1], state});
    }
    char extra;
    require(!in.read(&extra, 1), ErrorCode::MalformedRecord,
            "corpus: trailing bytes in '" + s.id + "'");
    s.vector.validate_canonical();
    samples.push_back(std::move(s));
  }
  return {std::move(samples), std::move(split)};
}

}  // namespace sketchssl
