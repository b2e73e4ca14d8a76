#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "sketchembed/ingest.hpp"
#include "sketchembed/rng.hpp"

using namespace skem;

TEST_CASE("quickdraw: one horizontal segment") {
  Sketch sk = parse_quickdraw_line(R"({"word":"line","drawing":[[[0,10],[0,0]]]})");
  REQUIRE(sk.strokes.size() == 2);
  CHECK(sk.strokes[0] == start_token());
  CHECK(sk.strokes[1].dx == doctest::Approx(10));
  CHECK(sk.strokes[1].dy == doctest::Approx(0));
  CHECK(sk.strokes[1].s3 == 1);
  CHECK(sk.class_id == "line");
  CHECK(validate(sk).empty());
}

TEST_CASE("quickdraw: pen lifts between strokes, ends on the last") {
  Sketch sk = parse_quickdraw_line(
      R"({"word":"x","drawing":[[[0,5],[0,0]],[[0,5],[3,3]]]})");
  REQUIRE(sk.strokes.size() == 4);
  CHECK(sk.strokes[1].s2 == 1);  // end of first stroke
  CHECK(sk.strokes[2].s1 == 1);  // travel to the second stroke
  CHECK(sk.strokes[3].s3 == 1);
  CHECK(validate(sk).empty());
}

TEST_CASE("quickdraw: errors carry context") {
  CHECK_THROWS_WITH_AS(parse_quickdraw_line(R"({"word":"x","drawing":[[[0,)"),
                       doctest::Contains("byte"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_quickdraw_line(R"({"word":"x","drawing":[]})"),
                       doctest::Contains("empty sketch"), std::runtime_error);
}

TEST_CASE("canonical JSONL round trip") {
  Sketch sk = parse_quickdraw_line(
      R"({"word":"cat","drawing":[[[0,5,9],[0,2,1]],[[4,8],[4,4]]]})");
  sk.source_id = "cat_0";
  Sketch back = sketch_from_jsonl(sketch_to_jsonl(sk));
  REQUIRE(back.strokes.size() == sk.strokes.size());
  for (std::size_t i = 0; i < back.strokes.size(); ++i)
    CHECK(back.strokes[i] == sk.strokes[i]);
  CHECK(back.class_id == sk.class_id);
  CHECK(back.source_id == "cat_0");
}

// --- RDP ---

namespace {

double line_dist(std::pair<double, double> p, std::pair<double, double> a,
                 std::pair<double, double> b) {
  double vx = b.first - a.first, vy = b.second - a.second;
  double norm = std::hypot(vx, vy);
  if (norm <= 0.0) return std::hypot(p.first - a.first, p.second - a.second);
  return std::abs(vx * (p.second - a.second) - vy * (p.first - a.first)) / norm;
}

// Textbook recursive formulation, kept independent of the shipped iterative
// implementation.
void rdp_recursive(const std::vector<std::pair<double, double>>& pts,
                   std::size_t lo, std::size_t hi, double eps,
                   std::vector<std::pair<double, double>>& out) {
  double dmax = -1.0;
  std::size_t imax = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    double d = line_dist(pts[i], pts[lo], pts[hi]);
    if (d > dmax) {
      dmax = d;
      imax = i;
    }
  }
  if (dmax > eps) {
    rdp_recursive(pts, lo, imax, eps, out);
    rdp_recursive(pts, imax, hi, eps, out);
  } else {
    out.push_back(pts[hi]);
  }
}

Polyline rdp_oracle(const Polyline& line, double eps) {
  Polyline out;
  out.points.push_back(line.points.front());
  rdp_recursive(line.points, 0, line.points.size() - 1, eps, out.points);
  return out;
}

}  // namespace

TEST_CASE("rdp collapses collinear points") {
  Polyline line;
  for (int i = 0; i < 5; ++i) line.points.emplace_back(i, 2.0 * i);
  Polyline out = rdp_simplify(line, 0.1);
  REQUIRE(out.points.size() == 2);
  CHECK(out.points.front() == line.points.front());
  CHECK(out.points.back() == line.points.back());
}

TEST_CASE("rdp with epsilon 0 keeps non-collinear points") {
  Polyline line;
  line.points = {{0, 0}, {1, 0.5}, {2, 0}, {3, -0.25}, {4, 0}};
  Polyline out = rdp_simplify(line, 0.0);
  CHECK(out.points.size() == line.points.size());
}

TEST_CASE("rdp agrees exactly with the recursive oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    Polyline line;
    int n = 10;
    for (int i = 0; i < n; ++i)
      line.points.emplace_back(i + rng.uniform(-0.2, 0.2), rng.uniform(-3, 3));
    double eps = rng.uniform(0.1, 2.0);
    Polyline got = rdp_simplify(line, eps);
    Polyline want = rdp_oracle(line, eps);
    REQUIRE(got.points.size() == want.points.size());
    for (std::size_t i = 0; i < got.points.size(); ++i) {
      CHECK(got.points[i].first == want.points[i].first);
      CHECK(got.points[i].second == want.points[i].second);
    }
  }
}

TEST_CASE("rdp is idempotent") {
  Rng rng(102);
  for (int trial = 0; trial < 30; ++trial) {
    Polyline line;
    for (int i = 0; i < 24; ++i)
      line.points.emplace_back(i * 0.5, std::sin(i * 0.6) + rng.uniform(-0.1, 0.1));
    Polyline once = rdp_simplify(line, 0.3);
    Polyline twice = rdp_simplify(once, 0.3);
    REQUIRE(once.points.size() == twice.points.size());
    for (std::size_t i = 0; i < once.points.size(); ++i)
      CHECK(once.points[i] == twice.points[i]);
  }
}

TEST_CASE("rdp rejects degenerate input") {
  Polyline p;
  p.points = {{0, 0}};
  CHECK_THROWS(rdp_simplify(p, 1.0));
}

// --- SVG ---

TEST_CASE("svg: straight line path") {
  auto lines = sample_svg_paths(R"(<svg><path d="M 0 0 L 10 0"/></svg>)", 8);
  REQUIRE(lines.size() == 1);
  REQUIRE(lines[0].points.size() == 2);
  CHECK(lines[0].points[0] == std::pair<double, double>{0, 0});
  CHECK(lines[0].points[1] == std::pair<double, double>{10, 0});
}

TEST_CASE("svg: cubic endpoints appear as first and last samples") {
  auto lines = sample_svg_paths(R"(<path d="M 1 2 C 3 4 5 6 7 8"/>)", 16);
  REQUIRE(lines.size() == 1);
  CHECK(lines[0].points.front() == std::pair<double, double>{1, 2});
  CHECK(lines[0].points.back().first == doctest::Approx(7));
  CHECK(lines[0].points.back().second == doctest::Approx(8));
  CHECK(lines[0].points.size() == 17);  // moveto + 16 parameter steps
}

TEST_CASE("svg: quarter-circle cubic approximates the analytic arc length") {
  // Standard magic-constant quarter circle from (1,0) to (0,1).
  const double k = 0.5522847498307936;
  char d[160];
  std::snprintf(d, sizeof(d), "M 1 0 C 1 %.12f %.12f 1 0 1", k, k);
  auto lines = sample_svg_paths(std::string("<path d=\"") + d + "\"/>", 64);
  REQUIRE(lines.size() == 1);
  double len = 0.0;
  for (std::size_t i = 1; i < lines[0].points.size(); ++i)
    len += std::hypot(lines[0].points[i].first - lines[0].points[i - 1].first,
                      lines[0].points[i].second - lines[0].points[i - 1].second);
  CHECK(len == doctest::Approx(3.14159265358979 / 2).epsilon(0.01));
}

TEST_CASE("svg: relative commands accumulate, subpaths split") {
  auto lines = sample_svg_paths(R"(<path d="m 1 1 l 2 0 m 0 2 l 0 3"/>)", 4);
  REQUIRE(lines.size() == 2);
  CHECK(lines[0].points.back() == std::pair<double, double>{3, 1});
  CHECK(lines[1].points.front() == std::pair<double, double>{3, 3});
  CHECK(lines[1].points.back() == std::pair<double, double>{3, 6});
}

TEST_CASE("svg: quadratic segments and closepath") {
  auto lines = sample_svg_paths(R"(<path d="M 0 0 Q 1 1 2 0 Z"/>)", 8);
  REQUIRE(lines.size() == 1);
  CHECK(lines[0].points.back() == std::pair<double, double>{0, 0});
}

TEST_CASE("svg: unsupported commands are named") {
  CHECK_THROWS_WITH_AS(sample_svg_paths(R"(<path d="M 0 0 A 1 1 0 0 0 2 2"/>)", 8),
                       doctest::Contains("'A'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(sample_svg_paths("<svg></svg>", 8),
                       doctest::Contains("no path"), std::runtime_error);
}

// --- filtering ---

TEST_CASE("filter_strokes drops short and static lines") {
  Polyline big;
  big.points = {{0, 0}, {10, 0}};
  Polyline speck;
  speck.points = {{5, 5}, {5.01, 5}};
  Polyline mid;
  mid.points = {{0, 2}, {5, 2}};
  auto kept = filter_strokes({big, speck, mid}, 0.05, 0.01);
  CHECK(kept.size() == 2);

  auto all = filter_strokes({big, speck, mid}, 0.0, 0.0);
  CHECK(all.size() == 3);
}

TEST_CASE("filter_strokes applies the length threshold against sketch scale") {
  // Lengths 0.01, 0.5 and 1.0 of the overall scale (10).
  Polyline a, b, c;
  a.points = {{0, 0}, {0.1, 0}};
  b.points = {{0, 1}, {5, 1}};
  c.points = {{0, 2}, {10, 2}};
  auto kept = filter_strokes({a, b, c}, 0.05, 0.0);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].points[1].first == doctest::Approx(5));
}

TEST_CASE("filter_strokes errors when nothing survives") {
  Polyline speck;
  speck.points = {{0, 0}, {0.001, 0}};
  Polyline speck2;
  speck2.points = {{1, 1}, {1.001, 1}};
  CHECK_THROWS_WITH_AS(filter_strokes({speck, speck2}, 0.9, 0.9),
                       doctest::Contains("no strokes remain"), std::runtime_error);
}

// --- normalization ---

namespace {

std::vector<Sketch> tiny_dataset() {
  std::vector<Sketch> out;
  Rng rng(55);
  for (int s = 0; s < 8; ++s) {
    Sketch sk;
    sk.strokes.push_back(start_token());
    int n = 4 + static_cast<int>(rng.below(5));
    for (int i = 0; i < n; ++i) {
      Stroke5 st;
      st.dx = rng.uniform(-7, 7);
      st.dy = rng.uniform(-7, 7);
      if (i + 1 == n)
        st.s3 = 1;
      else
        st.s1 = 1;
      sk.strokes.push_back(st);
    }
    out.push_back(sk);
  }
  return out;
}

}  // namespace

TEST_CASE("normalize_offsets yields pooled std 1 and is scale invariant") {
  auto data = tiny_dataset();
  auto [normed, stats] = normalize_offsets(data);
  CHECK(stats.offset_std > 0);

  double sum = 0, sq = 0;
  std::int64_t n = 0;
  for (const auto& sk : normed)
    for (std::size_t t = 1; t < sk.strokes.size(); ++t) {
      sum += sk.strokes[t].dx + sk.strokes[t].dy;
      n += 2;
    }
  double mean = sum / n;
  for (const auto& sk : normed)
    for (std::size_t t = 1; t < sk.strokes.size(); ++t) {
      sq += (sk.strokes[t].dx - mean) * (sk.strokes[t].dx - mean);
      sq += (sk.strokes[t].dy - mean) * (sk.strokes[t].dy - mean);
    }
  CHECK(std::sqrt(sq / n) == doctest::Approx(1.0).epsilon(1e-9));

  auto scaled = data;
  for (auto& sk : scaled)
    for (auto& st : sk.strokes) {
      st.dx *= 5;
      st.dy *= 5;
    }
  auto [normed5, stats5] = normalize_offsets(scaled);
  CHECK(stats5.offset_std == doctest::Approx(5 * stats.offset_std).epsilon(1e-12));
  for (std::size_t s = 0; s < normed.size(); ++s)
    for (std::size_t t = 0; t < normed[s].strokes.size(); ++t)
      CHECK(normed5[s].strokes[t].dx ==
            doctest::Approx(normed[s].strokes[t].dx).epsilon(1e-9));
}

TEST_CASE("normalize_offsets on unit offsets is the identity") {
  std::vector<Sketch> data(2);
  for (int s = 0; s < 2; ++s) {
    data[s].strokes.push_back(start_token());
    for (int i = 0; i < 4; ++i) {
      Stroke5 st;
      st.dx = i % 2 == 0 ? 1 : -1;
      st.dy = i % 2 == 0 ? -1 : 1;
      if (i == 3)
        st.s3 = 1;
      else
        st.s1 = 1;
      data[s].strokes.push_back(st);
    }
  }
  auto [normed, stats] = normalize_offsets(data);
  CHECK(stats.offset_std == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(normed[0].strokes[1].dx == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normalization round-trips through DatasetStats") {
  auto data = tiny_dataset();
  auto [normed, stats] = normalize_offsets(data);
  for (std::size_t s = 0; s < data.size(); ++s)
    for (std::size_t t = 1; t < data[s].strokes.size(); ++t) {
      double back = normed[s].strokes[t].dx * stats.offset_std;
      CHECK(back == doctest::Approx(data[s].strokes[t].dx).epsilon(1e-9));
    }
}

TEST_CASE("normalize_offsets rejects all-zero offsets") {
  std::vector<Sketch> data(1);
  data[0].strokes.push_back(start_token());
  data[0].strokes.push_back(Stroke5{0, 0, 0, 0, 1});
  CHECK_THROWS(normalize_offsets(data));
}

// --- rendering ---

TEST_CASE("render_input_image honors the 10 percent padding rule") {
  // Horizontal line: interior width 28 - 2*round(2.8) = 22 columns.
  Sketch sk;
  sk.strokes.push_back(start_token());
  sk.strokes.push_back(Stroke5{4, 0, 0, 0, 1});
  PixelImage img = render_input_image(sk, 28, 28, 0.10);
  for (double v : img.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // The stroke spans columns [3, 25) on row 14 at full intensity.
  double bright = 1.0 / (1.0 + std::exp(-2.0));
  CHECK(img.at(14, 14) == doctest::Approx(bright).epsilon(1e-9));
  CHECK(img.at(14, 3) == doctest::Approx(bright).epsilon(1e-9));
  CHECK(img.at(14, 24) == doctest::Approx(bright).epsilon(1e-9));
  // Outside pad + line the canvas is dark.
  CHECK(img.at(0, 14) < 1e-12);
  CHECK(img.at(27, 0) < 1e-12);
}

TEST_CASE("render_input_image rejects empty sketches and bad pads") {
  Sketch empty;
  empty.strokes.push_back(start_token());
  CHECK_THROWS(render_input_image(empty, 28, 28, 0.1));
  Sketch ok;
  ok.strokes.push_back(start_token());
  ok.strokes.push_back(Stroke5{1, 1, 0, 0, 1});
  CHECK_THROWS(render_input_image(ok, 28, 28, 0.5));
  CHECK_THROWS(render_input_image(ok, 2, 28, 0.1));
}

// --- splits ---

TEST_CASE("make_split is deterministic and disjoint") {
  std::vector<std::string> classes;
  for (int i = 0; i < 10; ++i) classes.push_back("c" + std::to_string(i));
  SplitSpec a = make_split(classes, 2, 7);
  SplitSpec b = make_split(classes, 2, 7);
  CHECK(a.train_classes == b.train_classes);
  CHECK(a.holdout_classes == b.holdout_classes);
  CHECK(a.train_classes.size() == 8);
  CHECK(a.holdout_classes.size() == 2);
  std::set<std::string> all(a.train_classes.begin(), a.train_classes.end());
  for (const auto& c : a.holdout_classes) CHECK(all.insert(c).second);
  CHECK(all.size() == 10);
  CHECK_THROWS(make_split(classes, 0, 7));
  CHECK_THROWS(make_split(classes, 10, 7));
}

TEST_CASE("different seeds give different splits almost surely") {
  std::vector<std::string> classes;
  for (int i = 0; i < 12; ++i) classes.push_back("c" + std::to_string(i));
  std::set<std::vector<std::string>> seen;
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    seen.insert(make_split(classes, 4, seed).holdout_classes);
  CHECK(seen.size() >= 99);
}

// --- shape corpus ---

TEST_CASE("gen_shape_corpus: circles are closed and well-formed") {
  CorpusSpec spec;
  spec.classes = {"circle"};
  spec.per_class = 4;
  auto corpus = gen_shape_corpus(spec, 3);
  REQUIRE(corpus.size() == 4);
  for (const auto& ex : corpus) {
    CHECK(validate(ex.sketch).empty());
    CHECK(drawn_length(ex.sketch) >= 12);
    auto pts = to_absolute(ex.sketch);
    CHECK(std::abs(pts.back().x - pts.front().x + ex.sketch.strokes[1].dx) < 1e-9);
  }
}

TEST_CASE("gen_shape_corpus: scene factors are recorded by construction") {
  CorpusSpec spec;
  spec.classes = {"pair_distance"};
  spec.per_class = 8;
  auto corpus = gen_shape_corpus(spec, 9);
  for (const auto& ex : corpus) {
    REQUIRE(ex.factors.has_value());
    CHECK(ex.factors->distance >= 1.1);
    CHECK(ex.factors->distance <= 2.4);
    CHECK(ex.factors->angle == doctest::Approx(3.14159265358979 / 4));
    auto pts = to_absolute(ex.sketch);
    CHECK(validate(ex.sketch).empty());
  }
}

TEST_CASE("gen_shape_corpus: rendered circle is centered") {
  CorpusSpec spec;
  spec.classes = {"circle"};
  spec.per_class = 2;
  spec.jitter = 0.0;
  auto corpus = gen_shape_corpus(spec, 4);
  for (const auto& ex : corpus) {
    double mass = 0, mi = 0, mj = 0;
    for (int i = 0; i < ex.image.h; ++i)
      for (int j = 0; j < ex.image.w; ++j) {
        mass += ex.image.at(i, j);
        mi += i * ex.image.at(i, j);
        mj += j * ex.image.at(i, j);
      }
    CHECK(mi / mass == doctest::Approx(14.0).epsilon(0.08));
    CHECK(mj / mass == doctest::Approx(14.0).epsilon(0.08));
  }
}

TEST_CASE("gen_shape_corpus: every class validates and fits the stroke budget") {
  CorpusSpec spec;
  spec.classes = shape_class_names();
  spec.per_class = 3;
  auto corpus = gen_shape_corpus(spec, 5);
  for (const auto& ex : corpus) {
    CHECK(validate(ex.sketch).empty());
    CHECK(drawn_length(ex.sketch) <= 32);
  }
}

TEST_CASE("gen_shape_corpus rejects unknown classes") {
  CorpusSpec spec;
  spec.classes = {"hexagon"};
  CHECK_THROWS_WITH_AS(gen_shape_corpus(spec, 1), doctest::Contains("hexagon"),
                       std::invalid_argument);
}

TEST_CASE("stats JSON round trip") {
  DatasetStats s;
  s.offset_std = 3.25;
  s.count = 17;
  DatasetStats back = stats_from_json(stats_to_json(s));
  CHECK(back.offset_std == doctest::Approx(3.25));
  CHECK(back.count == 17);
}
