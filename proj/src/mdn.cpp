#include "sketchembed/mdn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace skem {

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;
constexpr double kProbClamp = 1e-7;

void softmax_into(std::span<const double> logits, std::span<double> out) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] /= sum;
}

}  // namespace

MdnParams mdn_split(std::span<const double> raw, std::size_t m) {
  if (raw.size() != mdn_raw_width(m))
    throw std::invalid_argument("mdn_split: raw length != 6M+3");
  MdnParams p;
  p.pi.resize(m);
  p.mu_x.assign(raw.begin() + m, raw.begin() + 2 * m);
  p.mu_y.assign(raw.begin() + 2 * m, raw.begin() + 3 * m);
  p.sigma_x.resize(m);
  p.sigma_y.resize(m);
  p.rho.resize(m);
  softmax_into(raw.subspan(0, m), p.pi);
  for (std::size_t j = 0; j < m; ++j) {
    p.sigma_x[j] = std::exp(raw[3 * m + j]);
    p.sigma_y[j] = std::exp(raw[4 * m + j]);
    p.rho[j] = std::tanh(raw[5 * m + j]);
  }
  double pen[3];
  softmax_into(raw.subspan(6 * m, 3), pen);
  std::copy(pen, pen + 3, p.pen);
  return p;
}

double bivariate_density(double dx, double dy, double mu_x, double mu_y,
                         double sigma_x, double sigma_y, double rho) {
  double u = (dx - mu_x) / sigma_x;
  double v = (dy - mu_y) / sigma_y;
  double q = 1.0 - rho * rho;
  double z = u * u + v * v - 2.0 * rho * u * v;
  return std::exp(-z / (2.0 * q)) / (kTwoPi * sigma_x * sigma_y * std::sqrt(q));
}

double mixture_log_density(const MdnParams& p, double dx, double dy) {
  const std::size_t m = p.mixtures();
  std::vector<double> terms(m);
  for (std::size_t j = 0; j < m; ++j) {
    double u = (dx - p.mu_x[j]) / p.sigma_x[j];
    double v = (dy - p.mu_y[j]) / p.sigma_y[j];
    double q = 1.0 - p.rho[j] * p.rho[j];
    double z = u * u + v * v - 2.0 * p.rho[j] * u * v;
    terms[j] = std::log(std::max(p.pi[j], 1e-300)) - z / (2.0 * q) -
               std::log(kTwoPi * p.sigma_x[j] * p.sigma_y[j] * std::sqrt(q));
  }
  double mx = terms[0];
  for (double t : terms) mx = std::max(mx, t);
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - mx);
  return mx + std::log(sum);
}

std::vector<int> stroke_mask(const Sketch& padded) {
  std::vector<int> mask;
  if (padded.strokes.size() < 2) return mask;
  mask.assign(padded.strokes.size() - 1, 0);
  for (std::size_t t = 1; t < padded.strokes.size(); ++t) {
    mask[t - 1] = 1;
    if (padded.strokes[t].s3 == 1) break;
  }
  return mask;
}

double stroke_nll(std::span<const MdnParams> params, const Sketch& target,
                  std::span<const int> mask) {
  const std::size_t steps = params.size();
  if (target.strokes.size() != steps + 1 || mask.size() != steps)
    throw std::invalid_argument("stroke_nll: step count mismatch");
  double acc = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    if (!mask[t]) continue;
    const Stroke5& s = target.strokes[t + 1];
    if (!std::isfinite(s.dx) || !std::isfinite(s.dy))
      throw std::invalid_argument("stroke_nll: non-finite target offset");
    acc -= mixture_log_density(params[t], s.dx, s.dy);
  }
  return acc / static_cast<double>(steps);
}

double pen_loss(std::span<const MdnParams> params,
                std::span<const int> target_states) {
  if (params.size() != target_states.size())
    throw std::invalid_argument("pen_loss: step count mismatch");
  double acc = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    double p = std::max(params[t].pen[target_states[t]], kProbClamp);
    acc -= std::log(p);
  }
  return acc / static_cast<double>(params.size());
}

OffsetSample sample_offsets(const MdnParams& p, double temperature, Rng& rng) {
  if (temperature <= 0.0)
    throw std::invalid_argument("sample_offsets: temperature must be > 0");
  const std::size_t m = p.mixtures();

  // Flatten pi by dividing its logits by tau.
  std::vector<double> w(m);
  if (temperature == 1.0) {
    w.assign(p.pi.begin(), p.pi.end());
  } else {
    for (std::size_t j = 0; j < m; ++j)
      w[j] = std::pow(std::max(p.pi[j], 1e-300), 1.0 / temperature);
  }
  OffsetSample s;
  s.component = rng.categorical(w);
  s.eps1 = rng.normal();
  s.eps2 = rng.normal();

  double sx = p.sigma_x[s.component] * std::sqrt(temperature);
  double sy = p.sigma_y[s.component] * std::sqrt(temperature);
  double rho = p.rho[s.component];
  s.dx = p.mu_x[s.component] + sx * s.eps1;
  s.dy = p.mu_y[s.component] + sy * (rho * s.eps1 + std::sqrt(1.0 - rho * rho) * s.eps2);
  return s;
}

int sample_pen_state(const MdnParams& p, double temperature, Rng& rng) {
  double w[3];
  for (int i = 0; i < 3; ++i)
    w[i] = temperature == 1.0
               ? p.pen[i]
               : std::pow(std::max(p.pen[i], 1e-300), 1.0 / temperature);
  return static_cast<int>(rng.categorical(std::span<const double>(w, 3)));
}

double total_loss(double l_pen, double l_stroke, double l_pixel, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("total_loss: alpha outside [0,1]");
  return l_pen + (1.0 - alpha) * l_stroke + alpha * l_pixel;
}

double alpha_at(long long step, const AlphaSchedule& sched) {
  if (step < 0) throw std::invalid_argument("alpha_at: negative step");
  double a = sched.step_size * static_cast<double>(step / sched.interval);
  return std::min(a, sched.alpha_max);
}

}  // namespace skem
