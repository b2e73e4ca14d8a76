#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sketchembed/model.hpp"

namespace skem {

struct StepMetrics {
  long long step = 0;
  double alpha = 0.0;
  double l_pen = 0.0;
  double l_stroke = 0.0;
  double l_pixel = 0.0;
  double l_total = 0.0;
  double grad_norm = 0.0;  // global L2 norm before clipping
  double lr = 0.0;
};

// One training example after preprocessing: normalized offsets, padded
// targets, rendered encoder input.
struct TrainExample {
  PixelImage image;
  Sketch padded;    // 1 + t_max strokes
  Sketch original;  // normalized, unpadded (drives the pixel-loss target)
  ScaleShift ss;    // fitted to the ground-truth points
};

// Normalizes offsets across the corpus, pads to cfg.t_max, renders any
// missing images and records offset_std into cfg. Sketches longer than t_max
// are rejected.
std::vector<TrainExample> prepare_training_set(
    const std::vector<CorpusExample>& corpus, TrainConfig& cfg);

// Elementwise clamp of every gradient value to [-c, c].
void clip_grads(std::span<double> grads, double c);

// Standard bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8); t >= 1.
void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
               double lr, long long t, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

// Forward + backward + clip + Adam on one batch. Model.step advances by one;
// alpha and lr follow the schedules at the pre-increment step index.
StepMetrics train_step(Model& model, std::span<const TrainExample* const> batch,
                       Rng& rng);

using MetricsSink = std::function<void(const StepMetrics&)>;

// Full training loop: deterministic batch selection from (seed, step).
void train(Model& model, const std::vector<TrainExample>& examples,
           const MetricsSink& sink);

// Conv-VAE baseline: same encoder, dense pixel-logit decoder, BCE + KL loss.
// Uses the same train()/train_step() entry points via cfg.model == "vae".
StepMetrics vae_train_step(Model& model, std::span<const TrainExample* const> batch,
                           Rng& rng);

}  // namespace skem
