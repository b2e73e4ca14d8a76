#pragma once

#include <span>
#include <vector>

#include "sketchembed/rng.hpp"
#include "sketchembed/stroke.hpp"

namespace skem {

// Mixture parameters for one decoder timestep: M bivariate Gaussians over
// the stroke offset plus 3 pen-state probabilities.
struct MdnParams {
  std::vector<double> pi;        // simplex over M components
  std::vector<double> mu_x;
  std::vector<double> mu_y;
  std::vector<double> sigma_x;   // > 0
  std::vector<double> sigma_y;   // > 0
  std::vector<double> rho;       // in (-1, 1)
  double pen[3] = {0, 0, 0};     // simplex over {down, up, end}

  std::size_t mixtures() const { return pi.size(); }
};

// alpha(step) = min(alpha_max, step_size * floor(step / interval)).
struct AlphaSchedule {
  double step_size = 0.05;
  int interval = 10000;
  double alpha_max = 0.5;
};

// Raw head layout: [pi logits | mu_x | mu_y | log sigma_x | log sigma_y |
// rho raw | pen logits]; length 6M + 3.
MdnParams mdn_split(std::span<const double> raw, std::size_t m);

inline std::size_t mdn_raw_width(std::size_t m) { return 6 * m + 3; }

double bivariate_density(double dx, double dy, double mu_x, double mu_y,
                         double sigma_x, double sigma_y, double rho);

// log of the mixture density at (dx, dy), via log-sum-exp.
double mixture_log_density(const MdnParams& p, double dx, double dy);

// L_stroke = -(1/T) sum over masked steps of log p_t(offset_t). T is the
// full padded step count; the mask selects steps up to and including the
// first end-of-sketch state.
double stroke_nll(std::span<const MdnParams> params, const Sketch& target,
                  std::span<const int> mask);

// Mask that is 1 for target steps t = 1..first s3 and 0 afterwards, indexed
// by decoder step (length = strokes - 1).
std::vector<int> stroke_mask(const Sketch& padded);

// L_pen: mean 3-way cross-entropy over every step, probabilities clamped at
// 1e-7. target_states[t] in {0,1,2}.
double pen_loss(std::span<const MdnParams> params,
                std::span<const int> target_states);

// One offset sample. Temperature scales sigma by sqrt(tau) and divides pi
// logits by tau; tau = 1 reproduces the untempered draw
//   [dx, dy] = mu + [[sx, 0], [rho*sy, sy*sqrt(1-rho^2)]] * eps.
struct OffsetSample {
  double dx = 0.0;
  double dy = 0.0;
  std::size_t component = 0;
  double eps1 = 0.0;
  double eps2 = 0.0;
};
OffsetSample sample_offsets(const MdnParams& p, double temperature, Rng& rng);

// Pen state index sampled from the (temperature-flattened) pen simplex.
int sample_pen_state(const MdnParams& p, double temperature, Rng& rng);

// L = L_pen + (1 - alpha) * L_stroke + alpha * L_pixel.
double total_loss(double l_pen, double l_stroke, double l_pixel, double alpha);

double alpha_at(long long step, const AlphaSchedule& sched);

}  // namespace skem
