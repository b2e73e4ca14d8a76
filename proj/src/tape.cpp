#include "sketchembed/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace skem {

namespace {

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  double e = std::exp(u);
  return e / (1.0 + e);
}

}  // namespace

int Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&)> back) {
  nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back), needs_grad});
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input(Tensor value, bool needs_grad) {
  return push(std::move(value), needs_grad, nullptr);
}

void Tape::ensure_grad(int id) {
  if (nodes_[id].grad.v.empty()) nodes_[id].grad = Tensor(nodes_[id].value.shape);
}

void Tape::backward(int root) {
  if (nodes_[root].value.numel() != 1)
    throw std::invalid_argument("backward: root is not scalar");
  ensure_grad(root);
  nodes_[root].grad.v[0] = 1.0;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.v.empty() || !n.backward) continue;
    n.backward(*this);
  }
}

// --- elementwise ---

int Tape::add(int a, int b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += tb.v[i];
  bool ng = needs_grad(a) || needs_grad(b);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a, b](Tape& t) {
      const Tensor& g = t.grad(self);
      if (t.needs_grad(a)) {
        t.ensure_grad(a);
        for (std::size_t i = 0; i < g.v.size(); ++i) t.nodes_[a].grad.v[i] += g.v[i];
      }
      if (t.needs_grad(b)) {
        t.ensure_grad(b);
        for (std::size_t i = 0; i < g.v.size(); ++i) t.nodes_[b].grad.v[i] += g.v[i];
      }
    };
  return self;
}

int Tape::mul(int a, int b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= tb.v[i];
  bool ng = needs_grad(a) || needs_grad(b);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a, b](Tape& t) {
      const Tensor& g = t.grad(self);
      if (t.needs_grad(a)) {
        t.ensure_grad(a);
        const auto& vb = t.val(b).v;
        for (std::size_t i = 0; i < g.v.size(); ++i)
          t.nodes_[a].grad.v[i] += g.v[i] * vb[i];
      }
      if (t.needs_grad(b)) {
        t.ensure_grad(b);
        const auto& va = t.val(a).v;
        for (std::size_t i = 0; i < g.v.size(); ++i)
          t.nodes_[b].grad.v[i] += g.v[i] * va[i];
      }
    };
  return self;
}

int Tape::scale(int a, double s) {
  Tensor out = val(a);
  for (double& x : out.v) x *= s;
  bool ng = needs_grad(a);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a, s](Tape& t) {
      const Tensor& g = t.grad(self);
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        t.nodes_[a].grad.v[i] += s * g.v[i];
    };
  return self;
}

int Tape::relu(int a) {
  Tensor out = val(a);
  for (double& x : out.v) x = x > 0.0 ? x : 0.0;
  bool ng = needs_grad(a);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a](Tape& t) {
      const Tensor& g = t.grad(self);
      const auto& x = t.val(a).v;
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        if (x[i] > 0.0) t.nodes_[a].grad.v[i] += g.v[i];
    };
  return self;
}

int Tape::tanh_(int a) {
  Tensor out = val(a);
  for (double& x : out.v) x = std::tanh(x);
  bool ng = needs_grad(a);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a](Tape& t) {
      const Tensor& g = t.grad(self);
      const auto& y = t.val(self).v;
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        t.nodes_[a].grad.v[i] += g.v[i] * (1.0 - y[i] * y[i]);
    };
  return self;
}

int Tape::sigmoid_(int a) {
  Tensor out = val(a);
  for (double& x : out.v) x = sigmoid(x);
  bool ng = needs_grad(a);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a](Tape& t) {
      const Tensor& g = t.grad(self);
      const auto& y = t.val(self).v;
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        t.nodes_[a].grad.v[i] += g.v[i] * y[i] * (1.0 - y[i]);
    };
  return self;
}

int Tape::exp_(int a) {
  Tensor out = val(a);
  for (double& x : out.v) x = std::exp(x);
  bool ng = needs_grad(a);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a](Tape& t) {
      const Tensor& g = t.grad(self);
      const auto& y = t.val(self).v;
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        t.nodes_[a].grad.v[i] += g.v[i] * y[i];
    };
  return self;
}

int Tape::log_(int a) {
  Tensor out = val(a);
  for (double& x : out.v) x = std::log(x);
  bool ng = needs_grad(a);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a](Tape& t) {
      const Tensor& g = t.grad(self);
      const auto& x = t.val(a).v;
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        t.nodes_[a].grad.v[i] += g.v[i] / x[i];
    };
  return self;
}

// --- shape ---

int Tape::concat_cols(int a, int b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[0] != tb.shape[0])
    throw std::invalid_argument("concat_cols: need [B,*] with equal B");
  int B = ta.shape[0], na = ta.shape[1], nb = tb.shape[1];
  Tensor out({B, na + nb});
  for (int r = 0; r < B; ++r) {
    std::memcpy(&out.v[static_cast<std::size_t>(r) * (na + nb)],
                &ta.v[static_cast<std::size_t>(r) * na], sizeof(double) * na);
    std::memcpy(&out.v[static_cast<std::size_t>(r) * (na + nb) + na],
                &tb.v[static_cast<std::size_t>(r) * nb], sizeof(double) * nb);
  }
  bool ng = needs_grad(a) || needs_grad(b);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a, b, B, na, nb](Tape& t) {
      const Tensor& g = t.grad(self);
      if (t.needs_grad(a)) {
        t.ensure_grad(a);
        for (int r = 0; r < B; ++r)
          for (int i = 0; i < na; ++i)
            t.nodes_[a].grad.v[static_cast<std::size_t>(r) * na + i] +=
                g.v[static_cast<std::size_t>(r) * (na + nb) + i];
      }
      if (t.needs_grad(b)) {
        t.ensure_grad(b);
        for (int r = 0; r < B; ++r)
          for (int i = 0; i < nb; ++i)
            t.nodes_[b].grad.v[static_cast<std::size_t>(r) * nb + i] +=
                g.v[static_cast<std::size_t>(r) * (na + nb) + na + i];
      }
    };
  return self;
}

int Tape::slice_cols(int x, int from, int len) {
  const Tensor& tx = val(x);
  if (tx.shape.size() != 2 || from < 0 || from + len > tx.shape[1])
    throw std::invalid_argument("slice_cols: bad range");
  int B = tx.shape[0], n = tx.shape[1];
  Tensor out({B, len});
  for (int r = 0; r < B; ++r)
    std::memcpy(&out.v[static_cast<std::size_t>(r) * len],
                &tx.v[static_cast<std::size_t>(r) * n + from], sizeof(double) * len);
  bool ng = needs_grad(x);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, from, len, B, n](Tape& t) {
      const Tensor& g = t.grad(self);
      t.ensure_grad(x);
      for (int r = 0; r < B; ++r)
        for (int i = 0; i < len; ++i)
          t.nodes_[x].grad.v[static_cast<std::size_t>(r) * n + from + i] +=
              g.v[static_cast<std::size_t>(r) * len + i];
    };
  return self;
}

int Tape::flatten2(int x) {
  const Tensor& tx = val(x);
  if (tx.shape.empty()) throw std::invalid_argument("flatten2: scalar input");
  int B = tx.shape[0];
  int rest = static_cast<int>(tx.numel() / B);
  Tensor out({B, rest});
  out.v = tx.v;  // row-major flatten is the identity on data
  bool ng = needs_grad(x);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x](Tape& t) {
      const Tensor& g = t.grad(self);
      t.ensure_grad(x);
      for (std::size_t i = 0; i < g.v.size(); ++i) t.nodes_[x].grad.v[i] += g.v[i];
    };
  return self;
}

// --- rows ---

int Tape::softmax_rows(int x) {
  const Tensor& tx = val(x);
  if (tx.shape.size() != 2) throw std::invalid_argument("softmax_rows: need [B,N]");
  int B = tx.shape[0], N = tx.shape[1];
  Tensor out({B, N});
  for (int r = 0; r < B; ++r) {
    const double* in = &tx.v[static_cast<std::size_t>(r) * N];
    double* o = &out.v[static_cast<std::size_t>(r) * N];
    double mx = in[0];
    for (int i = 1; i < N; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < N; ++i) {
      o[i] = std::exp(in[i] - mx);
      sum += o[i];
    }
    for (int i = 0; i < N; ++i) o[i] /= sum;
  }
  bool ng = needs_grad(x);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, B, N](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& y = t.val(self);
      t.ensure_grad(x);
      for (int r = 0; r < B; ++r) {
        const double* gr = &g.v[static_cast<std::size_t>(r) * N];
        const double* yr = &y.v[static_cast<std::size_t>(r) * N];
        double dot = 0.0;
        for (int i = 0; i < N; ++i) dot += gr[i] * yr[i];
        double* gx = &t.nodes_[x].grad.v[static_cast<std::size_t>(r) * N];
        for (int i = 0; i < N; ++i) gx[i] += yr[i] * (gr[i] - dot);
      }
    };
  return self;
}

int Tape::logsumexp_rows(int x) {
  const Tensor& tx = val(x);
  if (tx.shape.size() != 2) throw std::invalid_argument("logsumexp_rows: need [B,N]");
  int B = tx.shape[0], N = tx.shape[1];
  Tensor out({B, 1});
  for (int r = 0; r < B; ++r) {
    const double* in = &tx.v[static_cast<std::size_t>(r) * N];
    double mx = in[0];
    for (int i = 1; i < N; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < N; ++i) sum += std::exp(in[i] - mx);
    out.v[r] = mx + std::log(sum);
  }
  bool ng = needs_grad(x);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, B, N](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& y = t.val(self);
      const Tensor& tx2 = t.val(x);
      t.ensure_grad(x);
      for (int r = 0; r < B; ++r) {
        double* gx = &t.nodes_[x].grad.v[static_cast<std::size_t>(r) * N];
        const double* in = &tx2.v[static_cast<std::size_t>(r) * N];
        for (int i = 0; i < N; ++i)
          gx[i] += g.v[r] * std::exp(in[i] - y.v[r]);
      }
    };
  return self;
}

int Tape::mean_all(int x) {
  const Tensor& tx = val(x);
  double acc = 0.0;
  for (double v : tx.v) acc += v;
  double n = static_cast<double>(tx.v.size());
  Tensor out({1});
  out.v[0] = acc / n;
  bool ng = needs_grad(x);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, n](Tape& t) {
      double g = t.grad(self).v[0] / n;
      t.ensure_grad(x);
      for (double& gv : t.nodes_[x].grad.v) gv += g;
    };
  return self;
}

// --- linear algebra ---

int Tape::matmul(int a, int b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
    throw std::invalid_argument("matmul: shape mismatch " + ta.shape_str() + " x " +
                                tb.shape_str());
  int M = ta.shape[0], K = ta.shape[1], N = tb.shape[1];
  Tensor out({M, N});
  for (int i = 0; i < M; ++i) {
    double* orow = &out.v[static_cast<std::size_t>(i) * N];
    for (int k = 0; k < K; ++k) {
      double aik = ta.v[static_cast<std::size_t>(i) * K + k];
      const double* brow = &tb.v[static_cast<std::size_t>(k) * N];
      for (int j = 0; j < N; ++j) orow[j] += aik * brow[j];
    }
  }
  bool ng = needs_grad(a) || needs_grad(b);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, a, b, M, K, N](Tape& t) {
      const Tensor& g = t.grad(self);
      if (t.needs_grad(a)) {
        t.ensure_grad(a);
        const auto& vb = t.val(b).v;
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            const double* grow = &g.v[static_cast<std::size_t>(i) * N];
            const double* brow = &vb[static_cast<std::size_t>(k) * N];
            double acc = 0.0;
            for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
            t.nodes_[a].grad.v[static_cast<std::size_t>(i) * K + k] += acc;
          }
      }
      if (t.needs_grad(b)) {
        t.ensure_grad(b);
        const auto& va = t.val(a).v;
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            double aik = va[static_cast<std::size_t>(i) * K + k];
            const double* grow = &g.v[static_cast<std::size_t>(i) * N];
            double* gbrow = &t.nodes_[b].grad.v[static_cast<std::size_t>(k) * N];
            for (int j = 0; j < N; ++j) gbrow[j] += aik * grow[j];
          }
      }
    };
  return self;
}

int Tape::linear(int x, int w, int b) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  if (tx.shape.size() != 2 || tw.shape.size() != 2 || tb.shape.size() != 1 ||
      tx.shape[1] != tw.shape[1] || tw.shape[0] != tb.shape[0])
    throw std::invalid_argument("linear: shape mismatch");
  int B = tx.shape[0], I = tx.shape[1], O = tw.shape[0];
  Tensor out({B, O});
  for (int r = 0; r < B; ++r) {
    const double* xr = &tx.v[static_cast<std::size_t>(r) * I];
    double* orow = &out.v[static_cast<std::size_t>(r) * O];
    for (int o = 0; o < O; ++o) {
      const double* wr = &tw.v[static_cast<std::size_t>(o) * I];
      double acc = tb.v[o];
      for (int i = 0; i < I; ++i) acc += xr[i] * wr[i];
      orow[o] = acc;
    }
  }
  bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, w, b, B, I, O](Tape& t) {
      const Tensor& g = t.grad(self);
      if (t.needs_grad(x)) {
        t.ensure_grad(x);
        const auto& vw = t.val(w).v;
        for (int r = 0; r < B; ++r) {
          double* gx = &t.nodes_[x].grad.v[static_cast<std::size_t>(r) * I];
          const double* gr = &g.v[static_cast<std::size_t>(r) * O];
          for (int o = 0; o < O; ++o) {
            double go = gr[o];
            if (go == 0.0) continue;
            const double* wr = &vw[static_cast<std::size_t>(o) * I];
            for (int i = 0; i < I; ++i) gx[i] += go * wr[i];
          }
        }
      }
      if (t.needs_grad(w)) {
        t.ensure_grad(w);
        const auto& vx = t.val(x).v;
        for (int r = 0; r < B; ++r) {
          const double* xr = &vx[static_cast<std::size_t>(r) * I];
          const double* gr = &g.v[static_cast<std::size_t>(r) * O];
          for (int o = 0; o < O; ++o) {
            double go = gr[o];
            if (go == 0.0) continue;
            double* gw = &t.nodes_[w].grad.v[static_cast<std::size_t>(o) * I];
            for (int i = 0; i < I; ++i) gw[i] += go * xr[i];
          }
        }
      }
      if (t.needs_grad(b)) {
        t.ensure_grad(b);
        for (int r = 0; r < B; ++r) {
          const double* gr = &g.v[static_cast<std::size_t>(r) * O];
          for (int o = 0; o < O; ++o) t.nodes_[b].grad.v[o] += gr[o];
        }
      }
    };
  return self;
}

int Tape::conv2d_same(int x, int w) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  if (tx.shape.size() != 4 || tw.shape.size() != 4 || tx.shape[1] != tw.shape[1] ||
      tw.shape[2] % 2 == 0 || tw.shape[3] % 2 == 0)
    throw std::invalid_argument("conv2d_same: need x[B,C,H,W], w[F,C,odd,odd]");
  int B = tx.shape[0], C = tx.shape[1], H = tx.shape[2], W = tx.shape[3];
  int F = tw.shape[0], KH = tw.shape[2], KW = tw.shape[3];
  int ph = KH / 2, pw = KW / 2;
  Tensor out({B, F, H, W});

  auto xat = [&](int bb, int cc) {
    return &tx.v[((static_cast<std::size_t>(bb) * C + cc) * H) * W];
  };
  for (int bb = 0; bb < B; ++bb)
    for (int f = 0; f < F; ++f) {
      double* oplane = &out.v[((static_cast<std::size_t>(bb) * F + f) * H) * W];
      for (int c = 0; c < C; ++c) {
        const double* xplane = xat(bb, c);
        for (int di = 0; di < KH; ++di)
          for (int dj = 0; dj < KW; ++dj) {
            double coeff = tw.v[((static_cast<std::size_t>(f) * C + c) * KH + di) * KW + dj];
            if (coeff == 0.0) continue;
            int i_lo = std::max(0, ph - di), i_hi = std::min(H, H + ph - di);
            int j_lo = std::max(0, pw - dj), j_hi = std::min(W, W + pw - dj);
            for (int i = i_lo; i < i_hi; ++i) {
              const double* xrow = xplane + static_cast<std::size_t>(i + di - ph) * W + (dj - pw);
              double* orow = oplane + static_cast<std::size_t>(i) * W;
              for (int jj = j_lo; jj < j_hi; ++jj) orow[jj] += coeff * xrow[jj];
            }
          }
      }
    }
  bool ng = needs_grad(x) || needs_grad(w);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, w, B, C, H, W, F, KH, KW, ph, pw](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& tx2 = t.val(x);
      const Tensor& tw2 = t.val(w);
      bool gx_needed = t.needs_grad(x);
      bool gw_needed = t.needs_grad(w);
      if (gx_needed) t.ensure_grad(x);
      if (gw_needed) t.ensure_grad(w);
      for (int bb = 0; bb < B; ++bb)
        for (int f = 0; f < F; ++f) {
          const double* gplane = &g.v[((static_cast<std::size_t>(bb) * F + f) * H) * W];
          for (int c = 0; c < C; ++c) {
            const double* xplane =
                &tx2.v[((static_cast<std::size_t>(bb) * C + c) * H) * W];
            double* gxplane =
                gx_needed ? &t.nodes_[x].grad.v[((static_cast<std::size_t>(bb) * C + c) * H) * W]
                          : nullptr;
            for (int di = 0; di < KH; ++di)
              for (int dj = 0; dj < KW; ++dj) {
                std::size_t widx =
                    ((static_cast<std::size_t>(f) * C + c) * KH + di) * KW + dj;
                double coeff = tw2.v[widx];
                int i_lo = std::max(0, ph - di), i_hi = std::min(H, H + ph - di);
                int j_lo = std::max(0, pw - dj), j_hi = std::min(W, W + pw - dj);
                double wacc = 0.0;
                for (int i = i_lo; i < i_hi; ++i) {
                  const double* grow = gplane + static_cast<std::size_t>(i) * W;
                  const double* xrow =
                      xplane + static_cast<std::size_t>(i + di - ph) * W + (dj - pw);
                  if (gx_needed) {
                    double* gxrow =
                        gxplane + static_cast<std::size_t>(i + di - ph) * W + (dj - pw);
                    for (int jj = j_lo; jj < j_hi; ++jj) gxrow[jj] += coeff * grow[jj];
                  }
                  if (gw_needed)
                    for (int jj = j_lo; jj < j_hi; ++jj) wacc += grow[jj] * xrow[jj];
                }
                if (gw_needed) t.nodes_[w].grad.v[widx] += wacc;
              }
          }
        }
    };
  return self;
}

int Tape::channel_affine(int x, int gamma, int beta) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  if (tx.shape.size() != 4 || tg.shape.size() != 1 || tb.shape.size() != 1 ||
      tg.shape[0] != tx.shape[1] || tb.shape[0] != tx.shape[1])
    throw std::invalid_argument("channel_affine: shape mismatch");
  int B = tx.shape[0], C = tx.shape[1];
  std::size_t plane = static_cast<std::size_t>(tx.shape[2]) * tx.shape[3];
  Tensor out = tx;
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      double* p = &out.v[(static_cast<std::size_t>(bb) * C + c) * plane];
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * tg.v[c] + tb.v[c];
    }
  bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, gamma, beta, B, C, plane](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& tx2 = t.val(x);
      const Tensor& tg2 = t.val(gamma);
      if (t.needs_grad(x)) t.ensure_grad(x);
      if (t.needs_grad(gamma)) t.ensure_grad(gamma);
      if (t.needs_grad(beta)) t.ensure_grad(beta);
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
          const double* gp = &g.v[off];
          const double* xp = &tx2.v[off];
          if (t.needs_grad(x)) {
            double* gx = &t.nodes_[x].grad.v[off];
            for (std::size_t i = 0; i < plane; ++i) gx[i] += gp[i] * tg2.v[c];
          }
          if (t.needs_grad(gamma)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
            t.nodes_[gamma].grad.v[c] += acc;
          }
          if (t.needs_grad(beta)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
            t.nodes_[beta].grad.v[c] += acc;
          }
        }
    };
  return self;
}

int Tape::instance_norm(int x, int gamma, int beta, double eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  if (tx.shape.size() != 4 || tg.shape.size() != 1 || tb.shape.size() != 1 ||
      tg.shape[0] != tx.shape[1] || tb.shape[0] != tx.shape[1])
    throw std::invalid_argument("instance_norm: shape mismatch");
  int B = tx.shape[0], C = tx.shape[1];
  std::size_t plane = static_cast<std::size_t>(tx.shape[2]) * tx.shape[3];

  // Cache normalized activations and the inverse std per (example, channel).
  auto xhat = std::make_shared<std::vector<double>>(tx.v.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * C);
  Tensor out(tx.shape);
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
      double mean = 0.0;
      for (std::size_t i = 0; i < plane; ++i) mean += tx.v[off + i];
      mean /= static_cast<double>(plane);
      double var = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        double d = tx.v[off + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(plane);
      double inv = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(bb) * C + c] = inv;
      for (std::size_t i = 0; i < plane; ++i) {
        double h = (tx.v[off + i] - mean) * inv;
        (*xhat)[off + i] = h;
        out.v[off + i] = h * tg.v[c] + tb.v[c];
      }
    }

  bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, gamma, beta, B, C, plane, xhat,
                             inv_std](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& tg2 = t.val(gamma);
      if (t.needs_grad(x)) t.ensure_grad(x);
      if (t.needs_grad(gamma)) t.ensure_grad(gamma);
      if (t.needs_grad(beta)) t.ensure_grad(beta);
      double n = static_cast<double>(plane);
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
          const double* gp = &g.v[off];
          const double* hp = &(*xhat)[off];
          if (t.needs_grad(gamma)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * hp[i];
            t.nodes_[gamma].grad.v[c] += acc;
          }
          if (t.needs_grad(beta)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
            t.nodes_[beta].grad.v[c] += acc;
          }
          if (t.needs_grad(x)) {
            // dL/dx = inv/n * gamma * (n*g - sum(g) - xhat * sum(g*xhat)).
            double sum_g = 0.0, sum_gh = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += gp[i];
              sum_gh += gp[i] * hp[i];
            }
            double inv = (*inv_std)[static_cast<std::size_t>(bb) * C + c];
            double scale = tg2.v[c] * inv / n;
            double* gx = &t.nodes_[x].grad.v[off];
            for (std::size_t i = 0; i < plane; ++i)
              gx[i] += scale * (n * gp[i] - sum_g - hp[i] * sum_gh);
          }
        }
    };
  return self;
}

int Tape::maxpool2(int x) {
  const Tensor& tx = val(x);
  if (tx.shape.size() != 4) throw std::invalid_argument("maxpool2: need [B,C,H,W]");
  int B = tx.shape[0], C = tx.shape[1], H = tx.shape[2], W = tx.shape[3];
  int H2 = H / 2, W2 = W / 2;
  if (H2 == 0 || W2 == 0) throw std::invalid_argument("maxpool2: input too small");
  Tensor out({B, C, H2, W2});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.v.size());
  std::size_t oidx = 0;
  for (int bc = 0; bc < B * C; ++bc) {
    const double* plane = &tx.v[static_cast<std::size_t>(bc) * H * W];
    for (int i = 0; i < H2; ++i)
      for (int j = 0; j < W2; ++j, ++oidx) {
        std::size_t base = static_cast<std::size_t>(bc) * H * W;
        std::size_t best = base + static_cast<std::size_t>(2 * i) * W + 2 * j;
        double bv = tx.v[best];
        // Fixed scan order keeps tie-breaking deterministic.
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            std::size_t idx = base + static_cast<std::size_t>(2 * i + di) * W + 2 * j + dj;
            if (tx.v[idx] > bv) {
              bv = tx.v[idx];
              best = idx;
            }
          }
        out.v[oidx] = bv;
        (*argmax)[oidx] = best;
      }
    (void)plane;
  }
  bool ng = needs_grad(x);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, argmax](Tape& t) {
      const Tensor& g = t.grad(self);
      t.ensure_grad(x);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        t.nodes_[x].grad.v[(*argmax)[i]] += g.v[i];
    };
  return self;
}

// --- LSTM cell ---

int Tape::lstm_cell(int x, int h, int c, int wx, int wh, int b) {
  const Tensor& tx = val(x);
  const Tensor& th = val(h);
  const Tensor& tc = val(c);
  const Tensor& twx = val(wx);
  const Tensor& twh = val(wh);
  const Tensor& tb = val(b);
  int B = tx.shape[0], X = tx.shape[1];
  int H = th.shape[1];
  if (twx.shape[0] != 4 * H || twx.shape[1] != X || twh.shape[0] != 4 * H ||
      twh.shape[1] != H || tb.shape[0] != 4 * H || tc.shape[1] != H ||
      th.shape[0] != B || tc.shape[0] != B)
    throw std::invalid_argument("lstm_cell: shape mismatch");

  // Pre-activations, then gate activations cached for backward.
  auto acts = std::make_shared<Tensor>(Tensor({B, 4 * H}));
  for (int r = 0; r < B; ++r) {
    const double* xr = &tx.v[static_cast<std::size_t>(r) * X];
    const double* hr = &th.v[static_cast<std::size_t>(r) * H];
    double* ar = &acts->v[static_cast<std::size_t>(r) * 4 * H];
    for (int o = 0; o < 4 * H; ++o) {
      const double* wxr = &twx.v[static_cast<std::size_t>(o) * X];
      const double* whr = &twh.v[static_cast<std::size_t>(o) * H];
      double acc = tb.v[o];
      for (int i = 0; i < X; ++i) acc += xr[i] * wxr[i];
      for (int i = 0; i < H; ++i) acc += hr[i] * whr[i];
      ar[o] = acc;
    }
  }
  Tensor out({B, 2 * H});
  for (int r = 0; r < B; ++r) {
    double* ar = &acts->v[static_cast<std::size_t>(r) * 4 * H];
    const double* cr = &tc.v[static_cast<std::size_t>(r) * H];
    double* orow = &out.v[static_cast<std::size_t>(r) * 2 * H];
    for (int i = 0; i < H; ++i) {
      double gi = sigmoid(ar[i]);
      double gf = sigmoid(ar[H + i]);
      double gg = std::tanh(ar[2 * H + i]);
      double go = sigmoid(ar[3 * H + i]);
      double cn = gf * cr[i] + gi * gg;
      orow[i] = go * std::tanh(cn);  // h'
      orow[H + i] = cn;              // c'
      ar[i] = gi;                    // overwrite pre-activations with activations
      ar[H + i] = gf;
      ar[2 * H + i] = gg;
      ar[3 * H + i] = go;
    }
  }
  bool ng = needs_grad(x) || needs_grad(h) || needs_grad(c) || needs_grad(wx) ||
            needs_grad(wh) || needs_grad(b);
  int self = push(std::move(out), ng, nullptr);
  if (ng)
    nodes_[self].backward = [self, x, h, c, wx, wh, b, B, X, H, acts](Tape& t) {
      const Tensor& g = t.grad(self);
      const Tensor& out2 = t.val(self);
      const Tensor& tc2 = t.val(c);
      Tensor da({B, 4 * H});
      Tensor gc_prev({B, H});
      for (int r = 0; r < B; ++r) {
        const double* gr = &g.v[static_cast<std::size_t>(r) * 2 * H];
        const double* orow = &out2.v[static_cast<std::size_t>(r) * 2 * H];
        const double* ar = &acts->v[static_cast<std::size_t>(r) * 4 * H];
        const double* cr = &tc2.v[static_cast<std::size_t>(r) * H];
        double* dar = &da.v[static_cast<std::size_t>(r) * 4 * H];
        double* gcp = &gc_prev.v[static_cast<std::size_t>(r) * H];
        for (int i = 0; i < H; ++i) {
          double gi = ar[i], gf = ar[H + i], gg = ar[2 * H + i], go = ar[3 * H + i];
          double cn = orow[H + i];
          double tcn = std::tanh(cn);
          double gh = gr[i];
          double gc = gr[H + i] + gh * go * (1.0 - tcn * tcn);
          double g_o = gh * tcn;
          dar[i] = gc * gg * gi * (1.0 - gi);
          dar[H + i] = gc * cr[i] * gf * (1.0 - gf);
          dar[2 * H + i] = gc * gi * (1.0 - gg * gg);
          dar[3 * H + i] = g_o * go * (1.0 - go);
          gcp[i] = gc * gf;
        }
      }
      const Tensor& tx2 = t.val(x);
      const Tensor& th2 = t.val(h);
      const Tensor& twx2 = t.val(wx);
      const Tensor& twh2 = t.val(wh);
      if (t.needs_grad(c)) {
        t.ensure_grad(c);
        for (std::size_t i = 0; i < gc_prev.v.size(); ++i)
          t.nodes_[c].grad.v[i] += gc_prev.v[i];
      }
      if (t.needs_grad(x)) {
        t.ensure_grad(x);
        for (int r = 0; r < B; ++r) {
          const double* dar = &da.v[static_cast<std::size_t>(r) * 4 * H];
          double* gx = &t.nodes_[x].grad.v[static_cast<std::size_t>(r) * X];
          for (int o = 0; o < 4 * H; ++o) {
            double d = dar[o];
            if (d == 0.0) continue;
            const double* wxr = &twx2.v[static_cast<std::size_t>(o) * X];
            for (int i = 0; i < X; ++i) gx[i] += d * wxr[i];
          }
        }
      }
      if (t.needs_grad(h)) {
        t.ensure_grad(h);
        for (int r = 0; r < B; ++r) {
          const double* dar = &da.v[static_cast<std::size_t>(r) * 4 * H];
          double* ghp = &t.nodes_[h].grad.v[static_cast<std::size_t>(r) * H];
          for (int o = 0; o < 4 * H; ++o) {
            double d = dar[o];
            if (d == 0.0) continue;
            const double* whr = &twh2.v[static_cast<std::size_t>(o) * H];
            for (int i = 0; i < H; ++i) ghp[i] += d * whr[i];
          }
        }
      }
      if (t.needs_grad(wx)) {
        t.ensure_grad(wx);
        for (int r = 0; r < B; ++r) {
          const double* dar = &da.v[static_cast<std::size_t>(r) * 4 * H];
          const double* xr = &tx2.v[static_cast<std::size_t>(r) * X];
          for (int o = 0; o < 4 * H; ++o) {
            double d = dar[o];
            if (d == 0.0) continue;
            double* gw = &t.nodes_[wx].grad.v[static_cast<std::size_t>(o) * X];
            for (int i = 0; i < X; ++i) gw[i] += d * xr[i];
          }
        }
      }
      if (t.needs_grad(wh)) {
        t.ensure_grad(wh);
        for (int r = 0; r < B; ++r) {
          const double* dar = &da.v[static_cast<std::size_t>(r) * 4 * H];
          const double* hr = &th2.v[static_cast<std::size_t>(r) * H];
          for (int o = 0; o < 4 * H; ++o) {
            double d = dar[o];
            if (d == 0.0) continue;
            double* gw = &t.nodes_[wh].grad.v[static_cast<std::size_t>(o) * H];
            for (int i = 0; i < H; ++i) gw[i] += d * hr[i];
          }
        }
      }
      if (t.needs_grad(b)) {
        t.ensure_grad(b);
        for (int r = 0; r < B; ++r) {
          const double* dar = &da.v[static_cast<std::size_t>(r) * 4 * H];
          for (int o = 0; o < 4 * H; ++o) t.nodes_[b].grad.v[o] += dar[o];
        }
      }
    };
  return self;
}

}  // namespace skem
