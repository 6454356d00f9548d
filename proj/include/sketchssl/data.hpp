#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <utility>
#include <vector>

#include "sketchssl/raster.hpp"
#include "sketchssl/stroke.hpp"

namespace sketchssl {

struct LabeledSample {
  std::string id;
  StrokeSequence vector;
  int label = -1;    // class index into the split's class_universe; -1 = absent
  std::string text;  // handwriting transcription; empty = absent

  bool has_label() const { return label >= 0; }
  bool has_text() const { return !text.empty(); }
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;  // sample ids, pairwise disjoint
  std::vector<std::string> class_universe;    // ordered class names
  std::uint64_t seed = 0;
};

const std::vector<std::string>& synthetic_sketch_classes();
const std::vector<std::string>& synthetic_glyph_names();

struct SyntheticSketchSpec {
  std::vector<std::string> classes = synthetic_sketch_classes();
  int per_class = 100;
  double jitter = 0.01;     // per-point Gaussian noise, canvas units
  double rdp_epsilon = 0.01;
  int t_max = 64;           // echoed into the corpus manifest
  std::uint64_t seed = 0;
};

struct SyntheticWordSpec {
  std::vector<std::string> alphabet = synthetic_glyph_names();
  int min_length = 2;
  int max_length = 5;
  int count = 100;
  std::uint64_t seed = 0;
};

struct ParsedQuickdraw {
  std::vector<std::pair<std::string, StrokeSequence>> records;
  std::size_t skipped = 0;                // malformed or under-two-point records
  std::vector<std::string> diagnostics;   // one line per malformed record
};

/// Newline-delimited JSON records with "word" and "drawing" fields; drawing
/// is a list of strokes, each a pair of parallel [xs, ys] arrays on a
/// 256x256 grid. Malformed lines are skipped, counted, and reported in
/// diagnostics by line number; parsing continues.
ParsedQuickdraw parse_quickdraw_lines(std::istream& in);

std::pair<std::vector<LabeledSample>, DatasetSplit> make_synthetic_sketches(
    const SyntheticSketchSpec& spec);

std::pair<std::vector<LabeledSample>, DatasetSplit> make_synthetic_words(
    const SyntheticWordSpec& spec);

/// Partitions classes (not samples) into a pretraining set of
/// n_pretrain_classes and an evaluation set of the rest; each side is then
/// split 80/10/10 by a seeded shuffle. Sample labels keep indexing the
/// original universe.
std::pair<DatasetSplit, DatasetSplit> split_disjoint_classes(
    const std::vector<LabeledSample>& samples,
    const std::vector<std::string>& class_universe, int n_pretrain_classes,
    std::uint64_t seed);

/// Lazy raster view: renders sample.vector on the given canvas. Rendering
/// the same sample twice is byte-identical.
RasterImage sample_raster(const LabeledSample& sample, const RasterConfig& cfg);

/// Corpus directory: manifest.json plus one "<id>.strokes" file per sample
/// (u32 LE row count, then rows of 5 f32 LE values).
void save_corpus(const std::string& dir,
                 const std::vector<LabeledSample>& samples,
                 const DatasetSplit& split, const std::string& spec_echo_json);

std::pair<std::vector<LabeledSample>, DatasetSplit> load_corpus(
    const std::string& dir);

}  // namespace sketchssl
