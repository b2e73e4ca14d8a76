#include "sketchembed/stroke.hpp"

#include <cmath>
#include <stdexcept>

namespace skem {

std::vector<Violation> validate(const Sketch& sketch) {
  std::vector<Violation> out;
  auto flag = [&](std::size_t i, std::string msg) {
    out.push_back(Violation{i, std::move(msg)});
  };

  if (sketch.strokes.empty()) {
    flag(0, "sketch has no strokes (missing start token)");
    return out;
  }
  if (!(sketch.strokes[0] == start_token()))
    flag(0, "first stroke is not the start token (0,0,1,0,0)");

  bool ended = false;
  for (std::size_t i = 0; i < sketch.strokes.size(); ++i) {
    const Stroke5& s = sketch.strokes[i];
    if (s.s1 + s.s2 + s.s3 != 1 || s.s1 < 0 || s.s2 < 0 || s.s3 < 0)
      flag(i, "pen states are not one-hot");
    if (!std::isfinite(s.dx) || !std::isfinite(s.dy))
      flag(i, "non-finite offset");
    if (ended && !(s == padding_token()))
      flag(i, "stroke after end-of-sketch is not (0,0,0,0,1) padding");
    if (s.s3 == 1 && !ended) ended = true;
  }
  return out;
}

std::vector<AbsPoint> to_absolute(const Sketch& sketch) {
  std::vector<AbsPoint> points;
  if (sketch.strokes.size() < 2) return points;
  points.reserve(sketch.strokes.size() - 1);
  double x = sketch.strokes[0].dx;
  double y = sketch.strokes[0].dy;
  for (std::size_t t = 1; t < sketch.strokes.size(); ++t) {
    x += sketch.strokes[t].dx;
    y += sketch.strokes[t].dy;
    points.push_back(AbsPoint{x, y, sketch.strokes[t - 1].s1});
  }
  return points;
}

std::vector<AbsPoint> raster_points(const Sketch& sketch) {
  std::vector<AbsPoint> points;
  if (sketch.strokes.empty()) return points;
  points.reserve(sketch.strokes.size());
  points.push_back(AbsPoint{sketch.strokes[0].dx, sketch.strokes[0].dy, 1});
  auto rest = to_absolute(sketch);
  points.insert(points.end(), rest.begin(), rest.end());
  return points;
}

BBox bounds(std::span<const AbsPoint> points) {
  if (points.empty()) throw std::invalid_argument("bounds: empty sketch");
  BBox box{points[0].x, points[0].x, points[0].y, points[0].y};
  for (const AbsPoint& p : points) {
    box.x_min = std::min(box.x_min, p.x);
    box.x_max = std::max(box.x_max, p.x);
    box.y_min = std::min(box.y_min, p.y);
    box.y_max = std::max(box.y_max, p.y);
  }
  return box;
}

Sketch pad_to(const Sketch& sketch, std::size_t t_max) {
  Sketch padded = sketch;
  if (padded.strokes.empty()) padded.strokes.push_back(start_token());
  if (drawn_length(padded) > t_max)
    throw std::invalid_argument("pad_to: sketch longer than t_max");

  bool has_end = false;
  for (const Stroke5& s : padded.strokes) has_end |= s.s3 == 1;
  if (!has_end && padded.strokes.size() > 1) {
    Stroke5& last = padded.strokes.back();
    last.s1 = 0;
    last.s2 = 0;
    last.s3 = 1;
  }
  while (drawn_length(padded) < t_max) padded.strokes.push_back(padding_token());
  return padded;
}

}  // namespace skem
