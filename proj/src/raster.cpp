#include "sketchembed/raster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace skem {

namespace {

constexpr double kPenUpPenalty = 1e6;
constexpr double kLogClamp = 1e-7;

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  double e = std::exp(u);
  return e / (1.0 + e);
}

// Mirror-with-edge reflection into [0, n); repeats until in range so it is
// total for any radius.
int reflect(int idx, int n) {
  if (n == 1) return 0;
  while (idx < 0 || idx >= n) {
    if (idx < 0) idx = -idx - 1;
    if (idx >= n) idx = 2 * n - 1 - idx;
  }
  return idx;
}

std::vector<double> blur_kernel(double sigma) {
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Closest-point parameter of p on segment [a,b], clamped to [0,1].
double segment_param(double px, double py, double ax, double ay, double bx,
                     double by) {
  double vx = bx - ax;
  double vy = by - ay;
  double vv = vx * vx + vy * vy;
  if (vv <= 0.0) return 0.0;
  double t = ((px - ax) * vx + (py - ay) * vy) / vv;
  return std::clamp(t, 0.0, 1.0);
}

}  // namespace

ScaleShift scale_params(std::span<const AbsPoint> gt_points, int h, int w) {
  BBox box = bounds(gt_points);
  double rx = box.width() > 0.0 ? w / box.width()
                                : std::numeric_limits<double>::infinity();
  double ry = box.height() > 0.0 ? h / box.height()
                                 : std::numeric_limits<double>::infinity();
  double lambda = std::min(rx, ry);
  if (!std::isfinite(lambda)) lambda = 1.0;
  ScaleShift ss;
  ss.lambda = lambda;
  ss.x_shift = 0.5 * (box.x_max + box.x_min) * lambda;
  ss.y_shift = 0.5 * (box.y_max + box.y_min) * lambda;
  return ss;
}

double point_segment_distance(double px, double py, double ax, double ay,
                              double bx, double by) {
  double t = segment_param(px, py, ax, ay, bx, by);
  double cx = ax + t * (bx - ax);
  double cy = ay + t * (by - ay);
  return std::hypot(px - cx, py - cy);
}

std::vector<Segment> to_segments(std::span<const AbsPoint> points,
                                 const ScaleShift& ss, int h, int w) {
  double cx = 0.5 * w;
  double cy = 0.5 * h;
  std::vector<Segment> segs;
  if (points.size() < 2) return segs;
  segs.reserve(points.size() - 1);
  for (std::size_t t = 1; t < points.size(); ++t) {
    Segment s;
    s.ax = ss.lambda * points[t - 1].x - ss.x_shift + cx;
    s.ay = ss.lambda * points[t - 1].y - ss.y_shift + cy;
    s.bx = ss.lambda * points[t].x - ss.x_shift + cx;
    s.by = ss.lambda * points[t].y - ss.y_shift + cy;
    s.pen_down = points[t].s1_prev >= 1;
    segs.push_back(s);
  }
  return segs;
}

PixelImage rasterize_segments(std::span<const Segment> segments, int h, int w) {
  PixelImage img(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double dmin = std::numeric_limits<double>::infinity();
      for (const Segment& s : segments) {
        double d = point_segment_distance(j, i, s.ax, s.ay, s.bx, s.by);
        if (!s.pen_down) d += kPenUpPenalty;
        dmin = std::min(dmin, d);
      }
      img.at(i, j) = std::isfinite(dmin) ? sigmoid(2.0 - 5.0 * dmin) : 0.0;
    }
  }
  return img;
}

PixelImage rasterize(std::span<const AbsPoint> points, const ScaleShift& ss,
                     int h, int w) {
  if (points.size() < 2)
    throw std::invalid_argument("rasterize: need at least 2 points");
  auto segs = to_segments(points, ss, h, w);
  return rasterize_segments(segs, h, w);
}

PixelImage gaussian_blur(const PixelImage& img, double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("gaussian_blur: sigma <= 0");
  auto k = blur_kernel(sigma);
  int radius = (static_cast<int>(k.size()) - 1) / 2;

  PixelImage tmp(img.h, img.w);
  for (int i = 0; i < img.h; ++i) {
    for (int j = 0; j < img.w; ++j) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t)
        acc += k[t + radius] * img.at(i, reflect(j + t, img.w));
      tmp.at(i, j) = acc;
    }
  }
  PixelImage out(img.h, img.w);
  for (int i = 0; i < img.h; ++i) {
    for (int j = 0; j < img.w; ++j) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t)
        acc += k[t + radius] * tmp.at(reflect(i + t, img.h), j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

double pixel_loss(const PixelImage& i_gt, const PixelImage& i_pred,
                  bool full_bce) {
  if (i_gt.h != i_pred.h || i_gt.w != i_pred.w)
    throw std::invalid_argument("pixel_loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t n = 0; n < i_gt.data.size(); ++n) {
    double gt = i_gt.data[n];
    double pred = std::clamp(i_pred.data[n], kLogClamp, 1.0);
    acc -= gt * std::log(pred);
    if (full_bce) {
      double inv = std::clamp(1.0 - i_pred.data[n], kLogClamp, 1.0);
      acc -= (1.0 - gt) * std::log(inv);
    }
  }
  return acc / static_cast<double>(i_gt.data.size());
}

PixelLossResult pixel_loss_grad(const Sketch& gt,
                                std::span<const double> pred_dx,
                                std::span<const double> pred_dy,
                                std::span<const int> pred_pen_down,
                                const ScaleShift& ss, int h, int w,
                                double sigma, bool full_bce) {
  const std::size_t n = pred_dx.size();
  if (pred_dy.size() != n || pred_pen_down.size() != n)
    throw std::invalid_argument("pixel_loss_grad: length mismatch");
  if (n < 2) throw std::invalid_argument("pixel_loss_grad: need >= 2 strokes");

  // Target image.
  auto gt_pts = raster_points(gt);
  PixelImage target = gaussian_blur(rasterize(gt_pts, ss, h, w), sigma);

  // Predicted absolute points on the canvas (same ScaleShift as the target).
  double ccx = 0.5 * w;
  double ccy = 0.5 * h;
  std::vector<double> px(n), py(n);
  {
    double x = 0.0, y = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      x += pred_dx[t];
      y += pred_dy[t];
      px[t] = ss.lambda * x - ss.x_shift + ccx;
      py[t] = ss.lambda * y - ss.y_shift + ccy;
    }
  }

  // Rasterize the prediction, remembering each pixel's argmin segment.
  PixelImage raw(h, w);
  std::vector<int> arg(static_cast<std::size_t>(h) * w, -1);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double dmin = std::numeric_limits<double>::infinity();
      int best = -1;
      for (std::size_t t = 1; t < n; ++t) {
        double d = point_segment_distance(j, i, px[t - 1], py[t - 1], px[t], py[t]);
        if (pred_pen_down[t - 1] < 1) d += kPenUpPenalty;
        if (d < dmin) {
          dmin = d;
          best = static_cast<int>(t);
        }
      }
      raw.at(i, j) = sigmoid(2.0 - 5.0 * dmin);
      arg[static_cast<std::size_t>(i) * w + j] = best;
    }
  }
  PixelImage blurred = gaussian_blur(raw, sigma);

  PixelLossResult res;
  res.loss = pixel_loss(target, blurred, full_bce);

  // dL/d blurred.
  double inv_hw = 1.0 / static_cast<double>(h * w);
  PixelImage g_blur(h, w);
  for (std::size_t idx = 0; idx < blurred.data.size(); ++idx) {
    double pred = blurred.data[idx];
    double g = 0.0;
    if (pred > kLogClamp && pred <= 1.0) g -= inv_hw * target.data[idx] / pred;
    if (full_bce) {
      double inv = 1.0 - pred;
      if (inv > kLogClamp && inv <= 1.0)
        g += inv_hw * (1.0 - target.data[idx]) / inv;
    }
    g_blur.data[idx] = g;
  }

  // Adjoint of the separable blur (scatter with the same reflect rule;
  // column pass adjoint first, then row pass adjoint).
  auto k = blur_kernel(sigma);
  int radius = (static_cast<int>(k.size()) - 1) / 2;
  PixelImage g_tmp(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int t = -radius; t <= radius; ++t)
        g_tmp.at(reflect(i + t, h), j) += k[t + radius] * g_blur.at(i, j);
  PixelImage g_raw(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int t = -radius; t <= radius; ++t)
        g_raw.at(i, reflect(j + t, w)) += k[t + radius] * g_tmp.at(i, j);

  // Through the sigmoid and the argmin segment's distance to its endpoints.
  std::vector<double> gpx(n, 0.0), gpy(n, 0.0);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      std::size_t idx = static_cast<std::size_t>(i) * w + j;
      int t = arg[idx];
      if (t < 0) continue;
      double p = raw.data[idx];
      double dd = -5.0 * p * (1.0 - p) * g_raw.data[idx];
      if (dd == 0.0) continue;

      double ax = px[t - 1], ay = py[t - 1], bx = px[t], by = py[t];
      double hstar = segment_param(j, i, ax, ay, bx, by);
      double cx = ax + hstar * (bx - ax);
      double cy = ay + hstar * (by - ay);
      double dist = std::hypot(j - cx, i - cy);
      if (dist <= 0.0) continue;
      double ux = (j - cx) / dist;
      double uy = (i - cy) / dist;
      // d dist / d a = -(1-h*) u, d dist / d b = -h* u (envelope theorem).
      gpx[t - 1] += dd * (-(1.0 - hstar) * ux);
      gpy[t - 1] += dd * (-(1.0 - hstar) * uy);
      gpx[t] += dd * (-hstar * ux);
      gpy[t] += dd * (-hstar * uy);
    }
  }

  // Canvas -> sketch coordinates, then the cumulative-sum adjoint (suffix
  // sums). Entry 0 is the fixed start token.
  res.grad.d_dx.assign(n, 0.0);
  res.grad.d_dy.assign(n, 0.0);
  double sx = 0.0, sy = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    sx += ss.lambda * gpx[t];
    sy += ss.lambda * gpy[t];
    res.grad.d_dx[t] = sx;
    res.grad.d_dy[t] = sy;
  }
  res.grad.d_dx[0] = 0.0;
  res.grad.d_dy[0] = 0.0;
  return res;
}

void write_pgm(const PixelImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << pgm_bytes(img);
}

std::string pgm_bytes(const PixelImage& img) {
  std::ostringstream out;
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  for (double v : img.data) {
    int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(q));
  }
  return out.str();
}

PixelImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: not a P5 file: " + path);
  auto next_int = [&in, &path]() {
    // Skip whitespace and # comments.
    int c = in.get();
    while (c == '#' || std::isspace(c)) {
      if (c == '#')
        while (c != '\n' && c != EOF) c = in.get();
      c = in.get();
    }
    int value = 0;
    bool any = false;
    while (std::isdigit(c)) {
      value = value * 10 + (c - '0');
      any = true;
      c = in.get();
    }
    if (!any) throw std::runtime_error("read_pgm: malformed header in " + path);
    return value;
  };
  int w = next_int();
  int h = next_int();
  int maxval = next_int();
  if (maxval != 255) throw std::runtime_error("read_pgm: maxval must be 255");
  PixelImage img(h, w);
  std::vector<unsigned char> buf(img.data.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

}  // namespace skem
