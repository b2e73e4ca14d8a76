#include "sketchembed/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace skem {

using json = nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

double path_length(const Polyline& line) {
  double len = 0.0;
  for (std::size_t i = 1; i < line.points.size(); ++i)
    len += std::hypot(line.points[i].first - line.points[i - 1].first,
                      line.points[i].second - line.points[i - 1].second);
  return len;
}

// Neumaier compensated accumulation; partition-independent for a fixed
// element order.
struct CompensatedSum {
  double sum = 0.0;
  double c = 0.0;
  void add(double v) {
    double t = sum + v;
    if (std::abs(sum) >= std::abs(v))
      c += (sum - t) + v;
    else
      c += (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + c; }
};

}  // namespace

// --- quickdraw ---

Sketch parse_quickdraw_line(const std::string& ndjson_line) {
  json doc;
  try {
    doc = json::parse(ndjson_line);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("parse_quickdraw_line: parse error at byte " +
                             std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("drawing") || !doc["drawing"].is_array())
    throw std::runtime_error("parse_quickdraw_line: missing \"drawing\" array");

  std::vector<Polyline> lines;
  for (const auto& stroke : doc["drawing"]) {
    if (!stroke.is_array() || stroke.size() < 2)
      throw std::runtime_error("parse_quickdraw_line: stroke is not [xs, ys]");
    const auto& xs = stroke[0];
    const auto& ys = stroke[1];
    if (xs.size() != ys.size())
      throw std::runtime_error("parse_quickdraw_line: xs/ys length mismatch");
    Polyline line;
    for (std::size_t i = 0; i < xs.size(); ++i)
      line.points.emplace_back(xs[i].get<double>(), ys[i].get<double>());
    if (!line.points.empty()) lines.push_back(std::move(line));
  }
  if (lines.empty()) throw std::runtime_error("parse_quickdraw_line: empty sketch");

  std::optional<std::string> cls;
  if (doc.contains("word") && doc["word"].is_string())
    cls = doc["word"].get<std::string>();
  std::string id;
  if (doc.contains("key_id"))
    id = doc["key_id"].is_string() ? doc["key_id"].get<std::string>()
                                   : doc["key_id"].dump();
  return polylines_to_sketch(lines, cls, id);
}

// --- canonical JSONL ---

std::string sketch_to_jsonl(const Sketch& sketch) {
  json strokes = json::array();
  for (const Stroke5& s : sketch.strokes)
    strokes.push_back({s.dx, s.dy, s.s1, s.s2, s.s3});
  json doc;
  doc["id"] = sketch.source_id;
  doc["class"] = sketch.class_id ? json(*sketch.class_id) : json(nullptr);
  doc["strokes"] = std::move(strokes);
  return doc.dump();
}

Sketch sketch_from_jsonl(const std::string& line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("sketch_from_jsonl: parse error at byte " +
                             std::to_string(e.byte) + ": " + e.what());
  }
  Sketch sk;
  sk.source_id = doc.value("id", std::string{});
  if (doc.contains("class") && doc["class"].is_string())
    sk.class_id = doc["class"].get<std::string>();
  if (!doc.contains("strokes") || !doc["strokes"].is_array())
    throw std::runtime_error("sketch_from_jsonl: missing \"strokes\" array");
  for (const auto& row : doc["strokes"]) {
    if (!row.is_array() || row.size() != 5)
      throw std::runtime_error("sketch_from_jsonl: stroke row is not length 5");
    Stroke5 s;
    s.dx = row[0].get<double>();
    s.dy = row[1].get<double>();
    s.s1 = row[2].get<int>();
    s.s2 = row[3].get<int>();
    s.s3 = row[4].get<int>();
    sk.strokes.push_back(s);
  }
  return sk;
}

std::vector<Sketch> read_sketch_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_sketch_jsonl: cannot open " + path);
  std::vector<Sketch> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sketch_from_jsonl(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_sketch_jsonl(const std::vector<Sketch>& sketches, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_sketch_jsonl: cannot open " + path);
  for (const Sketch& s : sketches) out << sketch_to_jsonl(s) << "\n";
}

// --- SVG path subset ---

namespace {

struct PathScanner {
  const std::string& d;
  std::size_t pos = 0;

  void skip_separators() {
    while (pos < d.size() && (std::isspace(static_cast<unsigned char>(d[pos])) || d[pos] == ','))
      ++pos;
  }
  bool at_number() {
    skip_separators();
    if (pos >= d.size()) return false;
    char c = d[pos];
    return std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.';
  }
  double number() {
    skip_separators();
    const char* start = d.c_str() + pos;
    char* end = nullptr;
    double v = std::strtod(start, &end);
    if (end == start)
      throw std::runtime_error("sample_svg_paths: expected number at offset " +
                               std::to_string(pos));
    pos += static_cast<std::size_t>(end - start);
    return v;
  }
};

std::pair<double, double> cubic_at(double t, std::pair<double, double> p0,
                                   std::pair<double, double> c1,
                                   std::pair<double, double> c2,
                                   std::pair<double, double> p1) {
  double s = 1.0 - t;
  double w0 = s * s * s, w1 = 3 * s * s * t, w2 = 3 * s * t * t, w3 = t * t * t;
  return {w0 * p0.first + w1 * c1.first + w2 * c2.first + w3 * p1.first,
          w0 * p0.second + w1 * c1.second + w2 * c2.second + w3 * p1.second};
}

std::pair<double, double> quad_at(double t, std::pair<double, double> p0,
                                  std::pair<double, double> c,
                                  std::pair<double, double> p1) {
  double s = 1.0 - t;
  double w0 = s * s, w1 = 2 * s * t, w2 = t * t;
  return {w0 * p0.first + w1 * c.first + w2 * p1.first,
          w0 * p0.second + w1 * c.second + w2 * p1.second};
}

void parse_path_data(const std::string& d, int samples_per_curve,
                     std::vector<Polyline>& out) {
  PathScanner sc{d};
  Polyline current;
  std::pair<double, double> pen{0, 0};
  std::pair<double, double> subpath_start{0, 0};
  char cmd = 0;

  auto flush = [&]() {
    if (current.points.size() >= 2) out.push_back(current);
    current.points.clear();
  };

  while (true) {
    sc.skip_separators();
    if (sc.pos >= sc.d.size()) break;
    char c = sc.d[sc.pos];
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cmd = c;
      ++sc.pos;
    } else if (cmd == 0) {
      throw std::runtime_error("sample_svg_paths: path data does not start with a command");
    } else if (cmd == 'M') {
      cmd = 'L';  // implicit lineto after moveto
    } else if (cmd == 'm') {
      cmd = 'l';
    }

    bool rel = std::islower(static_cast<unsigned char>(cmd));
    switch (std::toupper(static_cast<unsigned char>(cmd))) {
      case 'M': {
        double x = sc.number(), y = sc.number();
        if (rel) x += pen.first, y += pen.second;
        flush();
        pen = {x, y};
        subpath_start = pen;
        current.points.push_back(pen);
        break;
      }
      case 'L': {
        double x = sc.number(), y = sc.number();
        if (rel) x += pen.first, y += pen.second;
        pen = {x, y};
        current.points.push_back(pen);
        break;
      }
      case 'C': {
        std::pair<double, double> c1{sc.number(), sc.number()};
        std::pair<double, double> c2{sc.number(), sc.number()};
        std::pair<double, double> p1{sc.number(), sc.number()};
        if (rel) {
          c1.first += pen.first; c1.second += pen.second;
          c2.first += pen.first; c2.second += pen.second;
          p1.first += pen.first; p1.second += pen.second;
        }
        for (int i = 1; i <= samples_per_curve; ++i)
          current.points.push_back(
              cubic_at(static_cast<double>(i) / samples_per_curve, pen, c1, c2, p1));
        pen = p1;
        break;
      }
      case 'Q': {
        std::pair<double, double> c1{sc.number(), sc.number()};
        std::pair<double, double> p1{sc.number(), sc.number()};
        if (rel) {
          c1.first += pen.first; c1.second += pen.second;
          p1.first += pen.first; p1.second += pen.second;
        }
        for (int i = 1; i <= samples_per_curve; ++i)
          current.points.push_back(
              quad_at(static_cast<double>(i) / samples_per_curve, pen, c1, p1));
        pen = p1;
        break;
      }
      case 'Z': {
        if (!current.points.empty() &&
            (pen.first != subpath_start.first || pen.second != subpath_start.second))
          current.points.push_back(subpath_start);
        pen = subpath_start;
        flush();
        cmd = 0;
        break;
      }
      default:
        throw std::runtime_error(std::string("sample_svg_paths: unsupported SVG path command '") +
                                 cmd + "'");
    }
  }
  flush();
}

}  // namespace

std::vector<Polyline> sample_svg_paths(const std::string& svg_text,
                                       int samples_per_curve) {
  if (samples_per_curve < 1)
    throw std::invalid_argument("sample_svg_paths: samples_per_curve < 1");
  std::vector<Polyline> out;
  std::size_t pos = 0;
  bool looks_like_document = svg_text.find('<') != std::string::npos;
  if (!looks_like_document) {
    // Bare path data.
    parse_path_data(svg_text, samples_per_curve, out);
  } else {
    while ((pos = svg_text.find("<path", pos)) != std::string::npos) {
      std::size_t end = svg_text.find('>', pos);
      if (end == std::string::npos) break;
      std::string tag = svg_text.substr(pos, end - pos);
      // Locate the d attribute inside the tag.
      std::size_t dpos = 0;
      while ((dpos = tag.find('d', dpos)) != std::string::npos) {
        bool boundary = dpos > 0 && (std::isspace(static_cast<unsigned char>(tag[dpos - 1])) ||
                                     tag[dpos - 1] == '"' || tag[dpos - 1] == '\'');
        std::size_t eq = dpos + 1;
        while (eq < tag.size() && std::isspace(static_cast<unsigned char>(tag[eq]))) ++eq;
        if (boundary && eq < tag.size() && tag[eq] == '=') {
          ++eq;
          while (eq < tag.size() && std::isspace(static_cast<unsigned char>(tag[eq]))) ++eq;
          if (eq < tag.size() && (tag[eq] == '"' || tag[eq] == '\'')) {
            char quote = tag[eq];
            std::size_t close = tag.find(quote, eq + 1);
            if (close != std::string::npos) {
              parse_path_data(tag.substr(eq + 1, close - eq - 1), samples_per_curve, out);
              break;
            }
          }
        }
        ++dpos;
      }
      pos = end;
    }
  }
  if (out.empty()) throw std::runtime_error("sample_svg_paths: no path data found");
  return out;
}

// --- RDP ---

namespace {

// Perpendicular distance from p to the infinite line through a and b;
// degenerates to point distance when a == b.
double line_distance(std::pair<double, double> p, std::pair<double, double> a,
                     std::pair<double, double> b) {
  double vx = b.first - a.first, vy = b.second - a.second;
  double norm = std::hypot(vx, vy);
  if (norm <= 0.0) return std::hypot(p.first - a.first, p.second - a.second);
  return std::abs(vx * (p.second - a.second) - vy * (p.first - a.first)) / norm;
}

}  // namespace

Polyline rdp_simplify(const Polyline& line, double epsilon) {
  if (line.points.size() < 2)
    throw std::invalid_argument("rdp_simplify: need at least 2 points");
  if (epsilon < 0.0) throw std::invalid_argument("rdp_simplify: epsilon < 0");

  const auto& pts = line.points;
  std::vector<char> keep(pts.size(), 0);
  keep.front() = keep.back() = 1;

  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, pts.size() - 1}};
  while (!stack.empty()) {
    auto [lo, hi] = stack.back();
    stack.pop_back();
    if (hi <= lo + 1) continue;
    double dmax = -1.0;
    std::size_t imax = lo;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      double dist = line_distance(pts[i], pts[lo], pts[hi]);
      if (dist > dmax) {
        dmax = dist;
        imax = i;
      }
    }
    if (dmax > epsilon) {
      keep[imax] = 1;
      stack.emplace_back(lo, imax);
      stack.emplace_back(imax, hi);
    }
  }

  Polyline out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (keep[i]) out.points.push_back(pts[i]);
  return out;
}

// --- filtering / conversion / normalization ---

std::vector<Polyline> filter_strokes(const std::vector<Polyline>& lines,
                                     double min_len_frac, double min_disp_frac) {
  if (min_len_frac < 0.0 || min_len_frac >= 1.0 || min_disp_frac < 0.0 ||
      min_disp_frac >= 1.0)
    throw std::invalid_argument("filter_strokes: fractions must lie in [0,1)");

  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  bool first = true;
  for (const Polyline& line : lines) {
    for (const auto& [x, y] : line.points) {
      if (first) {
        x_min = x_max = x;
        y_min = y_max = y;
        first = false;
      }
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  }
  double scale = std::max(x_max - x_min, y_max - y_min);

  std::vector<Polyline> out;
  for (const Polyline& line : lines) {
    if (line.points.size() < 2) continue;
    double len = path_length(line);
    double disp = std::hypot(line.points.back().first - line.points.front().first,
                             line.points.back().second - line.points.front().second);
    if (len < min_len_frac * scale) continue;
    if (disp < min_disp_frac * scale) continue;
    out.push_back(line);
  }
  if (out.empty()) throw std::runtime_error("filter_strokes: no strokes remain");
  return out;
}

Sketch polylines_to_sketch(const std::vector<Polyline>& lines,
                           std::optional<std::string> class_id,
                           std::string source_id) {
  Sketch sk;
  sk.class_id = std::move(class_id);
  sk.source_id = std::move(source_id);
  sk.strokes.push_back(start_token());

  std::vector<const Polyline*> nonempty;
  for (const Polyline& l : lines)
    if (!l.points.empty()) nonempty.push_back(&l);
  if (nonempty.empty()) throw std::runtime_error("polylines_to_sketch: empty sketch");

  double px = nonempty[0]->points[0].first;
  double py = nonempty[0]->points[0].second;
  for (std::size_t li = 0; li < nonempty.size(); ++li) {
    const auto& pts = nonempty[li]->points;
    for (std::size_t i = (li == 0 ? 1 : 0); i < pts.size(); ++i) {
      Stroke5 s;
      s.dx = pts[i].first - px;
      s.dy = pts[i].second - py;
      bool last_of_line = i + 1 == pts.size();
      bool last_line = li + 1 == nonempty.size();
      if (last_of_line && last_line)
        s.s3 = 1;
      else if (last_of_line)
        s.s2 = 1;
      else
        s.s1 = 1;
      sk.strokes.push_back(s);
      px = pts[i].first;
      py = pts[i].second;
    }
  }
  if (sk.strokes.size() < 2) throw std::runtime_error("polylines_to_sketch: empty sketch");
  return sk;
}

std::pair<std::vector<Sketch>, DatasetStats> normalize_offsets(
    std::vector<Sketch> sketches) {
  if (sketches.empty())
    throw std::invalid_argument("normalize_offsets: empty dataset");

  // Offsets of real strokes only: after the start token, up to and including
  // the first end-of-sketch stroke.
  auto for_each_offset = [&](auto&& fn) {
    for (Sketch& sk : sketches) {
      for (std::size_t t = 1; t < sk.strokes.size(); ++t) {
        fn(sk.strokes[t]);
        if (sk.strokes[t].s3 == 1) break;
      }
    }
  };

  CompensatedSum sum;
  std::int64_t n = 0;
  for_each_offset([&](Stroke5& s) {
    sum.add(s.dx);
    sum.add(s.dy);
    n += 2;
  });
  if (n == 0) throw std::invalid_argument("normalize_offsets: no offsets");
  double mean = sum.value() / static_cast<double>(n);

  CompensatedSum sq;
  for_each_offset([&](Stroke5& s) {
    sq.add((s.dx - mean) * (s.dx - mean));
    sq.add((s.dy - mean) * (s.dy - mean));
  });
  double stddev = std::sqrt(sq.value() / static_cast<double>(n));
  if (stddev <= 0.0)
    throw std::invalid_argument("normalize_offsets: all offsets zero");

  for (Sketch& sk : sketches)
    for (std::size_t t = 1; t < sk.strokes.size(); ++t) {
      sk.strokes[t].dx /= stddev;
      sk.strokes[t].dy /= stddev;
    }

  DatasetStats stats;
  stats.offset_std = stddev;
  stats.count = static_cast<std::int64_t>(sketches.size());
  return {std::move(sketches), stats};
}

PixelImage render_input_image(const Sketch& sketch, int h, int w, double pad_frac) {
  if (h < 4 || w < 4)
    throw std::invalid_argument("render_input_image: canvas must be at least 4x4");
  if (pad_frac < 0.0 || pad_frac >= 0.5)
    throw std::invalid_argument("render_input_image: pad_frac outside [0, 0.5)");
  auto points = raster_points(sketch);
  if (points.size() < 2) throw std::runtime_error("render_input_image: empty sketch");
  int pad_h = static_cast<int>(std::lround(pad_frac * h));
  int pad_w = static_cast<int>(std::lround(pad_frac * w));
  ScaleShift ss = scale_params(points, h - 2 * pad_h, w - 2 * pad_w);
  return rasterize(points, ss, h, w);
}

SplitSpec make_split(const std::vector<std::string>& classes, int n_holdout,
                     std::uint64_t seed) {
  if (n_holdout <= 0 || n_holdout >= static_cast<int>(classes.size()))
    throw std::invalid_argument("make_split: n_holdout out of range");
  std::vector<std::string> shuffled = classes;
  Rng rng = Rng::derive(seed, "class-split");
  rng.shuffle(shuffled);
  SplitSpec spec;
  spec.seed = seed;
  spec.train_classes.assign(shuffled.begin(), shuffled.end() - n_holdout);
  spec.holdout_classes.assign(shuffled.end() - n_holdout, shuffled.end());
  return spec;
}

// --- procedural shape corpus ---

namespace {

using Point = std::pair<double, double>;

// Every closed shape is drawn like a person would: from a random starting
// vertex, in a random direction, with a per-example segment count. Diverse
// stroke programs for the same visual class keep the drawing task from
// collapsing into class recall.
Polyline close_loop(std::vector<Point> ring, Rng& rng) {
  std::size_t start = rng.below(ring.size());
  std::rotate(ring.begin(), ring.begin() + static_cast<long>(start), ring.end());
  if (rng.uniform() < 0.5) std::reverse(ring.begin() + 1, ring.end());
  Polyline line;
  line.points = std::move(ring);
  line.points.push_back(line.points.front());
  return line;
}

Polyline make_circle(Point c, double r, int nseg, double jitter, Rng& rng) {
  double phase = rng.uniform(0, 2 * kPi);
  std::vector<Point> ring;
  for (int i = 0; i < nseg; ++i) {
    double a = phase + 2.0 * kPi * i / nseg;
    double rr = r * (1.0 + rng.normal(0, jitter));
    ring.push_back({c.first + rr * std::cos(a), c.second + rr * std::sin(a)});
  }
  return close_loop(std::move(ring), rng);
}

Polyline make_polygon(const std::vector<Point>& corners, double jitter, Rng& rng) {
  std::vector<Point> ring;
  for (const Point& p : corners)
    ring.push_back({p.first + rng.normal(0, jitter), p.second + rng.normal(0, jitter)});
  return close_loop(std::move(ring), rng);
}

Polyline make_square(Point c, double half, double jitter, Rng& rng) {
  return make_polygon({{c.first - half, c.second - half},
                       {c.first + half, c.second - half},
                       {c.first + half, c.second + half},
                       {c.first - half, c.second + half}},
                      jitter, rng);
}

// Mild anisotropic stretch so rendered shapes are not pixel templates. Full
// rotations were tried and destroy class identity at 28x28 for every
// embedding model; factor scenes stay axis-aligned so the recorded factors
// keep their meaning.
void apply_pose(std::vector<Polyline>& lines, Rng& rng) {
  double sx = rng.uniform(0.9, 1.12);
  double sy = rng.uniform(0.9, 1.12);
  for (Polyline& line : lines)
    for (auto& [x, y] : line.points) {
      x *= sx;
      y *= sy;
    }
}

std::vector<Polyline> shape_polylines(const std::string& cls, double jitter,
                                      Rng& rng, std::optional<SceneFactors>& factors) {
  double j = jitter;
  if (cls == "circle") {
    int nseg = 12 + static_cast<int>(rng.below(5));
    return {make_circle({0, 0}, 1.0, nseg, j, rng)};
  }
  if (cls == "square") {
    return {make_square({0, 0}, 1.0, 3 * j, rng)};
  }
  if (cls == "triangle") {
    double a = rng.uniform(-0.3, 0.3) + kPi / 2;
    std::vector<Point> corners;
    for (int i = 0; i < 3; ++i) {
      double ang = a + 2.0 * kPi * i / 3;
      corners.push_back({std::cos(ang), std::sin(ang)});
    }
    return {make_polygon(corners, 3 * j, rng)};
  }
  if (cls == "zigzag") {
    int n = 5 + static_cast<int>(rng.below(3));
    double amp = rng.uniform(0.35, 0.65);
    Polyline line;
    for (int i = 0; i < n; ++i)
      line.points.emplace_back(-1.0 + 2.0 * i / (n - 1) + rng.normal(0, j),
                               (i % 2 == 0 ? -amp : amp) + rng.normal(0, j));
    if (rng.uniform() < 0.5)
      std::reverse(line.points.begin(), line.points.end());
    return {line};
  }
  if (cls == "line") {
    double a = rng.uniform(0, kPi);
    int n = 2 + static_cast<int>(rng.below(3));
    Polyline line;
    for (int i = 0; i < n; ++i) {
      double t = -1.0 + 2.0 * i / (n - 1);
      line.points.emplace_back(t * std::cos(a) + rng.normal(0, j),
                               t * std::sin(a) + rng.normal(0, j));
    }
    return {line};
  }
  if (cls == "snowman" || cls == "snowman3") {
    int n = cls == "snowman" ? 2 : 3;
    std::vector<Polyline> lines;
    double r = 0.9, y = 0.9;
    for (int i = 0; i < n; ++i) {
      int nseg = 7 + static_cast<int>(rng.below(3));
      double wobble = rng.normal(0, 2 * j);
      lines.push_back(make_circle({wobble, y}, r * (1 + rng.normal(0, j)), nseg, j, rng));
      y -= r;
      r *= rng.uniform(0.6, 0.72);
      y -= r;
    }
    return lines;
  }
  if (cls == "boxstack" || cls == "boxstack3") {
    int n = cls == "boxstack" ? 2 : 3;
    std::vector<Polyline> lines;
    double half = 0.9, y = 0.9;
    for (int i = 0; i < n; ++i) {
      double wobble = rng.normal(0, 2 * j);
      lines.push_back(make_square({wobble, y}, half * (1 + rng.normal(0, j)), 2 * j, rng));
      y -= half;
      half *= rng.uniform(0.6, 0.72);
      y -= half;
    }
    return lines;
  }
  if (cls == "pair" || cls == "pair_angle" || cls == "pair_distance" ||
      cls == "pair_size") {
    SceneFactors f;
    f.angle = kPi / 4;
    f.distance = 1.6;
    f.size = 0.45;
    if (cls == "pair" || cls == "pair_angle") f.angle = rng.uniform(0, 2 * kPi);
    if (cls == "pair" || cls == "pair_distance") f.distance = rng.uniform(1.1, 2.4);
    if (cls == "pair" || cls == "pair_size") f.size = rng.uniform(0.2, 0.7);
    factors = f;
    Point sat{f.distance * std::cos(f.angle), f.distance * std::sin(f.angle)};
    int nseg = 7 + static_cast<int>(rng.below(3));
    return {make_square({0, 0}, 0.5, j, rng),
            make_circle(sat, f.size, nseg, j, rng)};
  }
  throw std::invalid_argument("gen_shape_corpus: unknown class name \"" + cls + "\"");
}

}  // namespace

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names = {
      "circle",   "square",    "triangle",      "zigzag",    "line",
      "snowman",  "snowman3",  "boxstack",      "boxstack3", "pair",
      "pair_angle", "pair_distance", "pair_size"};
  return names;
}

std::vector<CorpusExample> gen_shape_corpus(const CorpusSpec& spec,
                                            std::uint64_t seed) {
  std::vector<CorpusExample> out;
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    const std::string& cls = spec.classes[ci];
    for (int k = 0; k < spec.per_class; ++k) {
      Rng rng = Rng::derive(seed, "shape-corpus",
                            (Rng::fnv1a(cls) << 20) + static_cast<std::uint64_t>(k));
      CorpusExample ex;
      ex.class_id = cls;
      std::optional<SceneFactors> factors;
      auto lines = shape_polylines(cls, spec.jitter, rng, factors);
      if (!factors) apply_pose(lines, rng);
      ex.factors = factors;
      ex.sketch = polylines_to_sketch(lines, cls, cls + "_" + std::to_string(k));
      ex.image = render_input_image(ex.sketch, spec.image_h, spec.image_w, spec.pad_frac);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// --- stats JSON ---

std::string stats_to_json(const DatasetStats& stats) {
  json doc;
  doc["offset_std"] = stats.offset_std;
  doc["count"] = stats.count;
  return doc.dump();
}

DatasetStats stats_from_json(const std::string& text) {
  json doc = json::parse(text);
  DatasetStats stats;
  stats.offset_std = doc.at("offset_std").get<double>();
  stats.count = doc.at("count").get<std::int64_t>();
  return stats;
}

}  // namespace skem
