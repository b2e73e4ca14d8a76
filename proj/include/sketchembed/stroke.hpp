#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace skem {

// One timestep of the stroke-5 drawing representation: canvas offsets from
// the previous pen position plus a one-hot pen state. s1 = pen stays down
// (the next segment is drawn), s2 = pen lifts, s3 = drawing has ended.
struct Stroke5 {
  double dx = 0.0;
  double dy = 0.0;
  int s1 = 0;
  int s2 = 0;
  int s3 = 0;

  bool operator==(const Stroke5&) const = default;
};

inline Stroke5 start_token() { return Stroke5{0.0, 0.0, 1, 0, 0}; }
inline Stroke5 padding_token() { return Stroke5{0.0, 0.0, 0, 0, 1}; }

// A drawing as an ordered stroke-5 sequence. strokes[0] is always the start
// token (0,0,1,0,0); the drawing itself lives in strokes[1..]. The canvas
// convention throughout the project is x growing right and y growing down.
struct Sketch {
  std::vector<Stroke5> strokes;
  std::optional<std::string> class_id;
  std::string source_id;
};

// Absolute pen position at one timestep. s1_prev is the pen-down flag of the
// preceding stroke: it gates whether the segment ending at this point is
// drawn.
struct AbsPoint {
  double x = 0.0;
  double y = 0.0;
  int s1_prev = 1;
};

struct BBox {
  double x_min = 0.0;
  double x_max = 0.0;
  double y_min = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
};

struct Violation {
  std::size_t stroke_index;
  std::string message;
};

// Checks every Sketch/Stroke5 invariant and reports each breach with the
// offending stroke index. Violations are data, not faults.
std::vector<Violation> validate(const Sketch& sketch);

inline bool is_valid(const Sketch& sketch) { return validate(sketch).empty(); }

// Cumulative sum of offsets. Returns one point per stroke index t >= 1; the
// start token contributes its (zero) offset to every prefix sum but produces
// no point of its own. s1_prev is carried from stroke t-1.
std::vector<AbsPoint> to_absolute(const Sketch& sketch);

// to_absolute with the initial pen position prepended, which is what the
// rasterizer consumes: segments run between consecutive entries.
std::vector<AbsPoint> raster_points(const Sketch& sketch);

// Tight axis-aligned bounding box. Throws on empty input.
BBox bounds(std::span<const AbsPoint> points);

// Appends (0,0,0,0,1) padding so that the sketch holds exactly
// 1 + t_max strokes (start token plus t_max decoder targets). The last real
// stroke is re-tagged as end-of-sketch if no s3 is present yet.
Sketch pad_to(const Sketch& sketch, std::size_t t_max);

// Number of strokes after the start token.
inline std::size_t drawn_length(const Sketch& sketch) {
  return sketch.strokes.empty() ? 0 : sketch.strokes.size() - 1;
}

}  // namespace skem
