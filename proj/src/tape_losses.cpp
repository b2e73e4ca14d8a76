#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "sketchembed/tape.hpp"

namespace skem {

namespace {

constexpr double kProbClamp = 1e-7;

// Raw head layout per row: [pi | mu_x | mu_y | log sx | log sy | rho | pen].
struct RawRow {
  const double* pi;
  const double* mu_x;
  const double* mu_y;
  const double* lsx;
  const double* lsy;
  const double* rho_raw;
  const double* pen;
};

RawRow row_view(const double* row, std::size_t m) {
  return RawRow{row, row + m, row + 2 * m, row + 3 * m, row + 4 * m, row + 5 * m,
                row + 6 * m};
}

}  // namespace

int Tape::mdn_stroke_nll_step(int raw, std::size_t m,
                              std::span<const double> target_dx,
                              std::span<const double> target_dy,
                              std::span<const int> mask) {
  const Tensor& tr = val(raw);
  int B = tr.shape[0];
  int width = tr.shape[1];
  if (width != static_cast<int>(mdn_raw_width(m)))
    throw std::invalid_argument("mdn_stroke_nll_step: raw width != 6M+3");
  if (target_dx.size() != static_cast<std::size_t>(B) ||
      target_dy.size() != static_cast<std::size_t>(B) ||
      mask.size() != static_cast<std::size_t>(B))
    throw std::invalid_argument("mdn_stroke_nll_step: batch mismatch");

  // Posterior responsibilities cached for backward.
  auto gamma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * m, 0.0);
  auto pis = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * m, 0.0);

  double total = 0.0;
  std::vector<double> r(m);
  for (int bb = 0; bb < B; ++bb) {
    if (!mask[bb]) continue;
    RawRow row = row_view(&tr.v[static_cast<std::size_t>(bb) * width], m);
    double pimax = row.pi[0];
    for (std::size_t j = 1; j < m; ++j) pimax = std::max(pimax, row.pi[j]);
    double pisum = 0.0;
    for (std::size_t j = 0; j < m; ++j) pisum += std::exp(row.pi[j] - pimax);
    double logpisum = std::log(pisum);

    for (std::size_t j = 0; j < m; ++j) {
      double sx = std::exp(row.lsx[j]);
      double sy = std::exp(row.lsy[j]);
      double rho = std::tanh(row.rho_raw[j]);
      double q = 1.0 - rho * rho;
      double u = (target_dx[bb] - row.mu_x[j]) / sx;
      double v = (target_dy[bb] - row.mu_y[j]) / sy;
      double z = u * u + v * v - 2.0 * rho * u * v;
      double log_n = -z / (2.0 * q) -
                     std::log(2.0 * 3.14159265358979323846 * sx * sy * std::sqrt(q));
      double log_pi = (row.pi[j] - pimax) - logpisum;
      r[j] = log_pi + log_n;
      (*pis)[static_cast<std::size_t>(bb) * m + j] = std::exp(log_pi);
    }
    double rmax = r[0];
    for (std::size_t j = 1; j < m; ++j) rmax = std::max(rmax, r[j]);
    double rsum = 0.0;
    for (std::size_t j = 0; j < m; ++j) rsum += std::exp(r[j] - rmax);
    double lse = rmax + std::log(rsum);
    total -= lse;
    for (std::size_t j = 0; j < m; ++j)
      (*gamma)[static_cast<std::size_t>(bb) * m + j] = std::exp(r[j] - lse);
  }

  Tensor out({1});
  out.v[0] = total;
  std::vector<double> tdx(target_dx.begin(), target_dx.end());
  std::vector<double> tdy(target_dy.begin(), target_dy.end());
  std::vector<int> msk(mask.begin(), mask.end());
  bool ng = needs_grad(raw);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, raw, m, B, width, gamma, pis,
                             tdx = std::move(tdx), tdy = std::move(tdy),
                             msk = std::move(msk)](Tape& t) {
      double up = t.grad(self).v[0];
      if (up == 0.0) return;
      const Tensor& tr2 = t.val(raw);
      t.ensure_grad(raw);
      for (int bb = 0; bb < B; ++bb) {
        if (!msk[bb]) continue;
        RawRow row = row_view(&tr2.v[static_cast<std::size_t>(bb) * width], m);
        double* grow = &t.nodes_[raw].grad.v[static_cast<std::size_t>(bb) * width];
        for (std::size_t j = 0; j < m; ++j) {
          double gj = (*gamma)[static_cast<std::size_t>(bb) * m + j];
          double pj = (*pis)[static_cast<std::size_t>(bb) * m + j];
          double sx = std::exp(row.lsx[j]);
          double sy = std::exp(row.lsy[j]);
          double rho = std::tanh(row.rho_raw[j]);
          double q = 1.0 - rho * rho;
          double u = (tdx[bb] - row.mu_x[j]) / sx;
          double v = (tdy[bb] - row.mu_y[j]) / sy;
          double z = u * u + v * v - 2.0 * rho * u * v;

          // d(-lse)/d pi_logit_k = pi_k - gamma_k.
          grow[j] += up * (pj - gj);
          grow[m + j] += up * (-gj * (u - rho * v) / (q * sx));
          grow[2 * m + j] += up * (-gj * (v - rho * u) / (q * sy));
          grow[3 * m + j] += up * (-gj * (-1.0 + u * (u - rho * v) / q));
          grow[4 * m + j] += up * (-gj * (-1.0 + v * (v - rho * u) / q));
          double drho = rho / q + (u * v * q - rho * z) / (q * q);
          grow[5 * m + j] += up * (-gj * drho * (1.0 - rho * rho));
        }
      }
    };
  return self;
}

int Tape::mdn_pen_ce_step(int raw, std::size_t m, std::span<const int> target_state) {
  const Tensor& tr = val(raw);
  int B = tr.shape[0];
  int width = tr.shape[1];
  if (width != static_cast<int>(mdn_raw_width(m)))
    throw std::invalid_argument("mdn_pen_ce_step: raw width != 6M+3");
  if (target_state.size() != static_cast<std::size_t>(B))
    throw std::invalid_argument("mdn_pen_ce_step: batch mismatch");

  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * 3);
  double total = 0.0;
  for (int bb = 0; bb < B; ++bb) {
    const double* pen = &tr.v[static_cast<std::size_t>(bb) * width + 6 * m];
    double mx = std::max(pen[0], std::max(pen[1], pen[2]));
    double sum = 0.0;
    double p[3];
    for (int i = 0; i < 3; ++i) {
      p[i] = std::exp(pen[i] - mx);
      sum += p[i];
    }
    for (int i = 0; i < 3; ++i) {
      p[i] /= sum;
      (*probs)[static_cast<std::size_t>(bb) * 3 + i] = p[i];
    }
    total -= std::log(std::max(p[target_state[bb]], kProbClamp));
  }

  Tensor out({1});
  out.v[0] = total;
  std::vector<int> tgt(target_state.begin(), target_state.end());
  bool ng = needs_grad(raw);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, raw, m, B, width, probs, tgt = std::move(tgt)](Tape& t) {
      double up = t.grad(self).v[0];
      if (up == 0.0) return;
      t.ensure_grad(raw);
      for (int bb = 0; bb < B; ++bb) {
        double pt = (*probs)[static_cast<std::size_t>(bb) * 3 + tgt[bb]];
        if (pt < kProbClamp) continue;  // clamp active, flat region
        double* grow = &t.nodes_[raw].grad.v[static_cast<std::size_t>(bb) * width + 6 * m];
        for (int i = 0; i < 3; ++i) {
          double p = (*probs)[static_cast<std::size_t>(bb) * 3 + i];
          grow[i] += up * (p - (i == tgt[bb] ? 1.0 : 0.0));
        }
      }
    };
  return self;
}

int Tape::kl_standard_normal(int mu, int logsigma) {
  const Tensor& tm = val(mu);
  const Tensor& ts = val(logsigma);
  if (!tm.same_shape(ts) || tm.shape.size() != 2)
    throw std::invalid_argument("kl_standard_normal: need matching [B,D]");
  int B = tm.shape[0];
  double total = 0.0;
  for (std::size_t i = 0; i < tm.v.size(); ++i) {
    double s2 = std::exp(2.0 * ts.v[i]);
    total += 0.5 * (tm.v[i] * tm.v[i] + s2 - 1.0) - ts.v[i];
  }
  Tensor out({1});
  out.v[0] = total / B;
  bool ng = needs_grad(mu) || needs_grad(logsigma);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, mu, logsigma, B](Tape& t) {
      double up = t.grad(self).v[0] / B;
      const Tensor& tm2 = t.val(mu);
      const Tensor& ts2 = t.val(logsigma);
      if (t.needs_grad(mu)) {
        t.ensure_grad(mu);
        for (std::size_t i = 0; i < tm2.v.size(); ++i)
          t.nodes_[mu].grad.v[i] += up * tm2.v[i];
      }
      if (t.needs_grad(logsigma)) {
        t.ensure_grad(logsigma);
        for (std::size_t i = 0; i < ts2.v.size(); ++i)
          t.nodes_[logsigma].grad.v[i] += up * (std::exp(2.0 * ts2.v[i]) - 1.0);
      }
    };
  return self;
}

int Tape::bce_with_logits(int logits, const Tensor& targets) {
  const Tensor& tl = val(logits);
  if (!tl.same_shape(targets))
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  int B = tl.shape[0];
  double total = 0.0;
  for (std::size_t i = 0; i < tl.v.size(); ++i) {
    double l = tl.v[i];
    double y = targets.v[i];
    total += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
  }
  Tensor out({1});
  out.v[0] = total / B;
  auto tgt = std::make_shared<Tensor>(targets);
  bool ng = needs_grad(logits);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, logits, tgt, B](Tape& t) {
      double up = t.grad(self).v[0] / B;
      const Tensor& tl2 = t.val(logits);
      t.ensure_grad(logits);
      for (std::size_t i = 0; i < tl2.v.size(); ++i) {
        double l = tl2.v[i];
        double s = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l))
                            : std::exp(l) / (1.0 + std::exp(l));
        t.nodes_[logits].grad.v[i] += up * (s - tgt->v[i]);
      }
    };
  return self;
}

int Tape::mdn_sample(int raw, std::size_t m, double temperature, Rng& rng,
                     std::vector<int>& pen_out) {
  const Tensor& tr = val(raw);
  int B = tr.shape[0];
  int width = tr.shape[1];
  if (width != static_cast<int>(mdn_raw_width(m)))
    throw std::invalid_argument("mdn_sample: raw width != 6M+3");

  Tensor out({B, 2});
  pen_out.assign(B, 0);
  auto samples = std::make_shared<std::vector<OffsetSample>>(B);
  for (int bb = 0; bb < B; ++bb) {
    MdnParams p = mdn_split(
        std::span<const double>(&tr.v[static_cast<std::size_t>(bb) * width], width), m);
    OffsetSample s = sample_offsets(p, temperature, rng);
    pen_out[bb] = sample_pen_state(p, temperature, rng);
    out.v[static_cast<std::size_t>(bb) * 2] = s.dx;
    out.v[static_cast<std::size_t>(bb) * 2 + 1] = s.dy;
    (*samples)[bb] = s;
  }
  double sqrt_tau = std::sqrt(temperature);
  bool ng = needs_grad(raw);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, raw, m, B, width, samples, sqrt_tau](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& tr2 = t.val(raw);
      t.ensure_grad(raw);
      for (int bb = 0; bb < B; ++bb) {
        double gdx = g.v[static_cast<std::size_t>(bb) * 2];
        double gdy = g.v[static_cast<std::size_t>(bb) * 2 + 1];
        if (gdx == 0.0 && gdy == 0.0) continue;
        const OffsetSample& s = (*samples)[bb];
        std::size_t j = s.component;
        RawRow row = row_view(&tr2.v[static_cast<std::size_t>(bb) * width], m);
        double* grow = &t.nodes_[raw].grad.v[static_cast<std::size_t>(bb) * width];
        double sy = std::exp(row.lsy[j]);
        double rho = std::tanh(row.rho_raw[j]);
        double root = std::sqrt(1.0 - rho * rho);
        // dx = mu_x + sx*sqrt(tau)*e1; dy = mu_y + sy*sqrt(tau)*(rho e1 +
        // sqrt(1-rho^2) e2). Only the sampled component receives gradient.
        grow[m + j] += gdx;
        grow[3 * m + j] += gdx * std::exp(row.lsx[j]) * sqrt_tau * s.eps1;
        grow[2 * m + j] += gdy;
        grow[4 * m + j] += gdy * sy * sqrt_tau * (rho * s.eps1 + root * s.eps2);
        grow[5 * m + j] +=
            gdy * sy * sqrt_tau * (s.eps1 * (1.0 - rho * rho) - rho * root * s.eps2);
      }
    };
  return self;
}

int Tape::pixel_loss_node(std::span<const int> offset_steps,
                          const std::vector<std::vector<int>>& pen_down,
                          const std::vector<Sketch>& gt,
                          const std::vector<ScaleShift>& ss, int h, int w,
                          double sigma) {
  const std::size_t T = offset_steps.size();
  if (T == 0) throw std::invalid_argument("pixel_loss_node: no steps");
  const int B = val(offset_steps[0]).shape[0];
  if (gt.size() != static_cast<std::size_t>(B) || ss.size() != gt.size() ||
      pen_down.size() != gt.size())
    throw std::invalid_argument("pixel_loss_node: batch mismatch");

  auto grads = std::make_shared<std::vector<RasterGrad>>(B);
  double total = 0.0;
  std::vector<double> dx(T + 1, 0.0), dy(T + 1, 0.0);
  std::vector<int> pen(T + 1, 1);
  for (int bb = 0; bb < B; ++bb) {
    dx[0] = dy[0] = 0.0;
    pen[0] = 1;  // start token
    for (std::size_t t = 0; t < T; ++t) {
      const Tensor& step = val(offset_steps[t]);
      dx[t + 1] = step.v[static_cast<std::size_t>(bb) * 2];
      dy[t + 1] = step.v[static_cast<std::size_t>(bb) * 2 + 1];
      pen[t + 1] = pen_down[bb][t];
    }
    PixelLossResult res = pixel_loss_grad(gt[bb], dx, dy, pen, ss[bb], h, w, sigma);
    total += res.loss;
    (*grads)[bb] = std::move(res.grad);
  }

  Tensor out({1});
  out.v[0] = total / B;
  bool ng = false;
  for (int id : offset_steps) ng = ng || needs_grad(id);
  std::vector<int> steps(offset_steps.begin(), offset_steps.end());
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, steps = std::move(steps), grads, B](Tape& t) {
      double up = t.grad(self).v[0] / B;
      if (up == 0.0) return;
      for (std::size_t ti = 0; ti < steps.size(); ++ti) {
        int id = steps[ti];
        if (!t.needs_grad(id)) continue;
        t.ensure_grad(id);
        for (int bb = 0; bb < B; ++bb) {
          t.nodes_[id].grad.v[static_cast<std::size_t>(bb) * 2] +=
              up * (*grads)[bb].d_dx[ti + 1];
          t.nodes_[id].grad.v[static_cast<std::size_t>(bb) * 2 + 1] +=
              up * (*grads)[bb].d_dy[ti + 1];
        }
      }
    };
  return self;
}

}  // namespace skem
