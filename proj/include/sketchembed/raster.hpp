#pragma once

#include <span>
#include <string>
#include <vector>

#include "sketchembed/stroke.hpp"

namespace skem {

// Grayscale intensity grid in [0,1], row-major, pixel (i,j) = (row, col).
struct PixelImage {
  int h = 0;
  int w = 0;
  std::vector<double> data;

  PixelImage() = default;
  PixelImage(int h_, int w_, double fill = 0.0)
      : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, fill) {}

  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * w + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * w + j]; }
};

// Scale and centering shift fitted to the ground-truth points:
//   lambda  = min(W / (x_max - x_min), H / (y_max - y_min))
//   x_shift = (x_max + x_min) / 2 * lambda      (and same for y)
// A collapsed extent drops out of the min; if both collapse, lambda = 1.
struct ScaleShift {
  double lambda = 1.0;
  double x_shift = 0.0;
  double y_shift = 0.0;
};

// Partials of a scalar loss with respect to each stroke offset. Index t
// matches Sketch stroke index (entry 0 corresponds to the start token and
// stays zero, as do padding timesteps).
struct RasterGrad {
  std::vector<double> d_dx;
  std::vector<double> d_dy;
};

struct Segment {
  double ax = 0.0, ay = 0.0;
  double bx = 0.0, by = 0.0;
  bool pen_down = true;
};

ScaleShift scale_params(std::span<const AbsPoint> gt_points, int h, int w);

// Euclidean distance from p to the closed segment [a,b]; a == b degenerates
// to point distance.
double point_segment_distance(double px, double py, double ax, double ay,
                              double bx, double by);

// Pixel intensity sigma(2 - 5 * min over segments of (distance + pen-up
// penalty)), evaluated at pixel indices (i,j). Points are mapped onto the
// canvas as
//   col = lambda * x - x_shift + w / 2,   row likewise with y,
// so the bbox that produced the ScaleShift lands centered on the canvas and
// a degenerate extent falls on the integer midline.
PixelImage rasterize(std::span<const AbsPoint> points, const ScaleShift& ss,
                     int h, int w);

// Same intensity rule on an explicit segment list (already in canvas
// coordinates). Kept public so order-invariance is testable directly.
PixelImage rasterize_segments(std::span<const Segment> segments, int h, int w);

// Segments of `points` after applying ss and canvas centering.
std::vector<Segment> to_segments(std::span<const AbsPoint> points,
                                 const ScaleShift& ss, int h, int w);

// Separable Gaussian blur, kernel radius ceil(3*sigma), reflect padding.
PixelImage gaussian_blur(const PixelImage& img, double sigma);

// L_pixel = -(1/HW) sum I_gt * log(clamp(I_pred, 1e-7, 1)).
// With full_bce, adds the -(1-I)log(1-I') term (off by default).
double pixel_loss(const PixelImage& i_gt, const PixelImage& i_pred,
                  bool full_bce = false);

struct PixelLossResult {
  double loss = 0.0;
  RasterGrad grad;
};

// Forward pipeline rasterize -> blur -> pixel_loss on the predicted strokes,
// plus the analytic gradient with respect to every predicted offset. The
// chain runs through the cumulative sums, the per-pixel argmin segment, the
// segment distance, the sigmoid, the blur adjoint and the loss; pen states
// are constants. pred_offsets[t]/pred_pen_down[t] follow Sketch indexing
// (entry 0 is the start token).
PixelLossResult pixel_loss_grad(const Sketch& gt,
                                std::span<const double> pred_dx,
                                std::span<const double> pred_dy,
                                std::span<const int> pred_pen_down,
                                const ScaleShift& ss, int h, int w,
                                double sigma, bool full_bce = false);

// PGM (P5, maxval 255) round trip; intensities quantized by round(v * 255).
void write_pgm(const PixelImage& img, const std::string& path);
PixelImage read_pgm(const std::string& path);
std::string pgm_bytes(const PixelImage& img);

}  // namespace skem
