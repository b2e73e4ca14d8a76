#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sketchembed/raster.hpp"
#include "sketchembed/rng.hpp"
#include "sketchembed/stroke.hpp"

namespace skem {

struct Polyline {
  std::vector<std::pair<double, double>> points;
};

// Std of all dx and dy pooled over a training set; dividing by offset_std
// makes the pooled variance 1 and allows the inverse transform. count is the
// number of sketches in the set.
struct DatasetStats {
  double offset_std = 1.0;
  std::int64_t count = 0;
};

struct SplitSpec {
  std::vector<std::string> train_classes;
  std::vector<std::string> holdout_classes;
  std::uint64_t seed = 0;
};

// --- external formats ---

// One line of Quickdraw raw NDJSON: {"word": ..., "drawing": [[xs, ys], ...]}.
// Pen-up between strokes, end-of-sketch on the last stroke; offsets are
// relative to the drawing's first point.
Sketch parse_quickdraw_line(const std::string& ndjson_line);

// Canonical sketch JSONL: {"id", "class", "strokes": [[dx,dy,s1,s2,s3],...]}.
std::string sketch_to_jsonl(const Sketch& sketch);
Sketch sketch_from_jsonl(const std::string& line);
std::vector<Sketch> read_sketch_jsonl(const std::string& path);
void write_sketch_jsonl(const std::vector<Sketch>& sketches, const std::string& path);

// SVG 1.1 path subset: M/L/C/Q with relative forms and Z closing. Each
// subpath becomes one Polyline in document order; Bezier segments are sampled
// at uniform parameter steps. Unsupported commands are an error naming the
// command.
std::vector<Polyline> sample_svg_paths(const std::string& svg_text,
                                       int samples_per_curve);

// --- processing ---

// Ramer-Douglas-Peucker with tolerance epsilon; endpoints always retained.
Polyline rdp_simplify(const Polyline& line, double epsilon);

// Drops polylines with path length < min_len_frac * scale or endpoint
// displacement < min_disp_frac * scale, where scale is the longest bbox side
// over all input lines. Throws if nothing remains.
std::vector<Polyline> filter_strokes(const std::vector<Polyline>& lines,
                                     double min_len_frac, double min_disp_frac);

// Converts absolute polylines to one stroke-5 sketch. The first point of the
// first line becomes the origin; pen lifts between lines; the final stroke is
// tagged end-of-sketch.
Sketch polylines_to_sketch(const std::vector<Polyline>& lines,
                           std::optional<std::string> class_id = std::nullopt,
                           std::string source_id = {});

std::pair<std::vector<Sketch>, DatasetStats> normalize_offsets(
    std::vector<Sketch> sketches);

// Scales and centers the sketch into the interior left after padding each
// side by round(pad_frac * dim) pixels, then rasterizes without blur.
PixelImage render_input_image(const Sketch& sketch, int h, int w, double pad_frac);

SplitSpec make_split(const std::vector<std::string>& classes, int n_holdout,
                     std::uint64_t seed);

// --- procedural corpus ---

// Ground-truth latent factors for two-shape scenes: satellite angle
// (radians), center distance and satellite size (canvas units).
struct SceneFactors {
  double angle = 0.0;
  double distance = 0.0;
  double size = 0.0;
};

struct CorpusExample {
  PixelImage image;
  Sketch sketch;
  std::string class_id;
  std::optional<SceneFactors> factors;
};

struct CorpusSpec {
  std::vector<std::string> classes;
  int per_class = 64;
  int image_h = 28;
  int image_w = 28;
  double pad_frac = 0.10;
  double jitter = 0.04;  // relative vertex noise
};

// Known classes: circle, square, triangle, zigzag, line, snowman, snowman3,
// boxstack, boxstack3, pair, pair_angle, pair_distance, pair_size. The pair_*
// classes vary only the named factor; pair varies all three. Factors are
// recorded for every two-shape scene.
std::vector<CorpusExample> gen_shape_corpus(const CorpusSpec& spec,
                                            std::uint64_t seed);

const std::vector<std::string>& shape_class_names();

// stats JSON {"offset_std": ..., "count": ...}.
std::string stats_to_json(const DatasetStats& stats);
DatasetStats stats_from_json(const std::string& text);

}  // namespace skem
