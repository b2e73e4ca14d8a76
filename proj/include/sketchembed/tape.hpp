#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sketchembed/mdn.hpp"
#include "sketchembed/raster.hpp"
#include "sketchembed/rng.hpp"
#include "sketchembed/tensor.hpp"

namespace skem {

// Reverse-mode autodiff over a per-step computation graph. Nodes are created
// in evaluation order, which is therefore a topological order; backward()
// visits them exactly once in reverse. The tape is rebuilt every training
// step and is single-threaded by design.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand during backward
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  int input(Tensor value, bool needs_grad = false);

  const Tensor& val(int id) const { return nodes_[id].value; }
  const Tensor& grad(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(root)=1 and propagates; root must be scalar (numel 1).
  void backward(int root);

  // --- elementwise / shape ---
  int add(int a, int b);
  int mul(int a, int b);
  int scale(int a, double s);
  int relu(int a);
  int tanh_(int a);
  int sigmoid_(int a);
  int exp_(int a);
  int log_(int a);
  int concat_cols(int a, int b);
  int slice_cols(int x, int from, int len);
  int flatten2(int x);  // [B, ...] -> [B, rest]

  // --- reductions / rows ---
  int softmax_rows(int x);
  int logsumexp_rows(int x);  // [B,N] -> [B,1]
  int mean_all(int x);        // -> [1]

  // --- linear algebra / conv ---
  int matmul(int a, int b);                  // [M,K]x[K,N]
  int linear(int x, int w, int b);           // x[B,I], w[O,I], b[O] -> [B,O]
  int conv2d_same(int x, int w);             // x[B,C,H,W], w[F,C,kh,kw]
  int channel_affine(int x, int gamma, int beta);
  // Per-example, per-channel normalization (mean 0, variance 1 over the
  // spatial extent) followed by the gamma/beta affine. Statistics never cross
  // examples, so train and eval behave identically.
  int instance_norm(int x, int gamma, int beta, double eps = 1e-5);
  int maxpool2(int x);

  // --- recurrent ---
  // x[B,X], h[B,H], c[B,H], wx[4H,X], wh[4H,H], b[4H] -> [B,2H] with h' in
  // columns [0,H) and c' in [H,2H). Gate order i,f,g,o.
  int lstm_cell(int x, int h, int c, int wx, int wh, int b);

  // --- fused loss heads (all return [1]) ---
  // Sum over the batch of -log p(offset | mixture) for masked rows; raw is
  // the 6M+3 head output for one decoder step.
  int mdn_stroke_nll_step(int raw, std::size_t m,
                          std::span<const double> target_dx,
                          std::span<const double> target_dy,
                          std::span<const int> mask);
  // Sum over the batch of 3-way pen cross-entropy for one step.
  int mdn_pen_ce_step(int raw, std::size_t m, std::span<const int> target_state);
  // Mean over batch of sum over dims of 0.5(mu^2 + sigma^2 - 1 - log sigma^2).
  int kl_standard_normal(int mu, int logsigma);
  // Mean over batch of summed-per-pixel stable BCE between logits and targets.
  int bce_with_logits(int logits, const Tensor& targets);

  // Reparameterized sample from the mixture head: offsets [B,2]. Gradients
  // flow into the selected component's mu / log-sigma / rho-raw entries; the
  // component choice and pen state (written to pen_out) are not
  // differentiated.
  int mdn_sample(int raw, std::size_t m, double temperature, Rng& rng,
                 std::vector<int>& pen_out);

  // Pixel loss of sampled offset sequences against ground-truth sketches,
  // averaged over the batch. offset_steps[t] is the [B,2] sample node for
  // decoder step t+1; pen_down[b][t] the sampled pen-down flag. Backward uses
  // the raster module's analytic gradient.
  int pixel_loss_node(std::span<const int> offset_steps,
                      const std::vector<std::vector<int>>& pen_down,
                      const std::vector<Sketch>& gt,
                      const std::vector<ScaleShift>& ss, int h, int w,
                      double sigma);

 private:
  int push(Tensor value, bool needs_grad, std::function<void(Tape&)> back);
  void ensure_grad(int id);
  std::vector<Node> nodes_;
};

}  // namespace skem
