#include <doctest.h>

#include <cmath>

#include "sketchembed/rng.hpp"
#include "sketchembed/stroke.hpp"

using namespace skem;

namespace {

Sketch sketch_from_offsets(const std::vector<std::array<double, 2>>& offsets) {
  Sketch sk;
  sk.strokes.push_back(start_token());
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    Stroke5 s;
    s.dx = offsets[i][0];
    s.dy = offsets[i][1];
    if (i + 1 == offsets.size())
      s.s3 = 1;
    else
      s.s1 = 1;
    sk.strokes.push_back(s);
  }
  return sk;
}

}  // namespace

TEST_CASE("validate accepts a well-formed sketch") {
  Sketch sk = sketch_from_offsets({{1, 0}, {0, 1}, {-1, 0}});
  CHECK(validate(sk).empty());
}

TEST_CASE("validate flags non-one-hot pen states with the stroke index") {
  Sketch sk = sketch_from_offsets({{1, 0}, {0, 1}});
  sk.strokes[1].s2 = 1;  // s1 and s2 both set
  auto violations = validate(sk);
  REQUIRE(!violations.empty());
  CHECK(violations[0].stroke_index == 1);
}

TEST_CASE("validate flags non-padding strokes after end-of-sketch") {
  Sketch sk = sketch_from_offsets({{1, 0}, {0, 1}});
  Stroke5 extra;
  extra.dx = 0.5;
  extra.s1 = 1;
  sk.strokes.push_back(extra);
  auto violations = validate(sk);
  REQUIRE(!violations.empty());
  CHECK(violations[0].stroke_index == 3);
}

TEST_CASE("validate flags a missing start token") {
  Sketch sk;
  Stroke5 s;
  s.dx = 1;
  s.s3 = 1;
  sk.strokes.push_back(s);
  CHECK(!validate(sk).empty());
}

TEST_CASE("to_absolute: single stroke lands on its offset") {
  Sketch sk = sketch_from_offsets({{1, 2}});
  auto pts = to_absolute(sk);
  REQUIRE(pts.size() == 1);
  CHECK(pts[0].x == doctest::Approx(1));
  CHECK(pts[0].y == doctest::Approx(2));
  CHECK(pts[0].s1_prev == 1);  // start token pen-down
}

TEST_CASE("to_absolute: cancelling offsets return to origin") {
  Sketch sk = sketch_from_offsets({{1, 0}, {-1, 0}});
  auto pts = to_absolute(sk);
  REQUIRE(pts.size() == 2);
  CHECK(pts[1].x == doctest::Approx(0));
  CHECK(pts[1].y == doctest::Approx(0));
}

TEST_CASE("to_absolute: hand-computed cumulative sum") {
  Sketch sk = sketch_from_offsets({{1, 1}, {2, 3}, {0, -1}});
  auto pts = to_absolute(sk);
  REQUIRE(pts.size() == 3);
  CHECK(pts[0].x == doctest::Approx(1));
  CHECK(pts[0].y == doctest::Approx(1));
  CHECK(pts[1].x == doctest::Approx(3));
  CHECK(pts[1].y == doctest::Approx(4));
  CHECK(pts[2].x == doctest::Approx(3));
  CHECK(pts[2].y == doctest::Approx(3));
}

TEST_CASE("to_absolute carries the previous stroke's pen state") {
  Sketch sk;
  sk.strokes.push_back(start_token());
  sk.strokes.push_back(Stroke5{1, 0, 0, 1, 0});  // pen lifts after this stroke
  sk.strokes.push_back(Stroke5{1, 0, 1, 0, 0});
  sk.strokes.push_back(Stroke5{1, 0, 0, 0, 1});
  auto pts = to_absolute(sk);
  REQUIRE(pts.size() == 3);
  CHECK(pts[0].s1_prev == 1);
  CHECK(pts[1].s1_prev == 0);  // previous stroke lifted the pen
  CHECK(pts[2].s1_prev == 1);
}

TEST_CASE("bounds: two points and a degenerate box") {
  std::vector<AbsPoint> pts{{0, 0, 1}, {2, 3, 1}};
  BBox box = bounds(pts);
  CHECK(box.x_min == 0);
  CHECK(box.x_max == 2);
  CHECK(box.y_min == 0);
  CHECK(box.y_max == 3);

  std::vector<AbsPoint> single{{5, 5, 1}};
  BBox deg = bounds(single);
  CHECK(deg.x_min == 5);
  CHECK(deg.x_max == 5);
  CHECK(deg.width() == 0);
}

TEST_CASE("bounds: empty input is an error") {
  std::vector<AbsPoint> none;
  CHECK_THROWS(bounds(none));
}

TEST_CASE("bounds matches a brute-force min/max scan on random points") {
  Rng rng(42);
  std::vector<AbsPoint> pts;
  for (int i = 0; i < 100; ++i)
    pts.push_back(AbsPoint{rng.uniform(-50, 50), rng.uniform(-50, 50), 1});
  BBox box = bounds(pts);
  double xmin = pts[0].x, xmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
  for (const auto& p : pts) {
    if (p.x < xmin) xmin = p.x;
    if (p.x > xmax) xmax = p.x;
    if (p.y < ymin) ymin = p.y;
    if (p.y > ymax) ymax = p.y;
  }
  CHECK(box.x_min == xmin);
  CHECK(box.x_max == xmax);
  CHECK(box.y_min == ymin);
  CHECK(box.y_max == ymax);
}

TEST_CASE("to_absolute is translation-equivariant in the first offset") {
  Sketch sk = sketch_from_offsets({{1, 1}, {2, -1}, {-0.5, 3}});
  auto base = to_absolute(sk);
  Sketch shifted = sk;
  shifted.strokes[0].dx += 2.5;
  shifted.strokes[0].dy += -1.25;
  auto moved = to_absolute(shifted);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(moved[i].x == doctest::Approx(base[i].x + 2.5).epsilon(1e-12));
    CHECK(moved[i].y == doctest::Approx(base[i].y - 1.25).epsilon(1e-12));
  }
}

TEST_CASE("reverse-cancelling sequences end at the origin") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::array<double, 2>> offsets;
    for (int i = 0; i < 6; ++i)
      offsets.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3)});
    for (int i = 5; i >= 0; --i) offsets.push_back({-offsets[i][0], -offsets[i][1]});
    auto pts = to_absolute(sketch_from_offsets(offsets));
    CHECK(std::abs(pts.back().x) < 1e-12);
    CHECK(std::abs(pts.back().y) < 1e-12);
  }
}

TEST_CASE("padding a valid sketch to T_max still validates") {
  Sketch sk = sketch_from_offsets({{1, 0}, {0, 2}});
  Sketch padded = pad_to(sk, 10);
  CHECK(padded.strokes.size() == 11);
  CHECK(validate(padded).empty());
  CHECK(padded.strokes.back() == padding_token());
}

TEST_CASE("raster_points prepends the pen origin") {
  Sketch sk = sketch_from_offsets({{1, 2}});
  auto pts = raster_points(sk);
  REQUIRE(pts.size() == 2);
  CHECK(pts[0].x == 0);
  CHECK(pts[0].y == 0);
  CHECK(pts[1].x == 1);
}
