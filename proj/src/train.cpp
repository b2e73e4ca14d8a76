#include "sketchembed/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace skem {

std::vector<TrainExample> prepare_training_set(
    const std::vector<CorpusExample>& corpus, TrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("prepare_training_set: empty corpus");
  std::vector<Sketch> sketches;
  sketches.reserve(corpus.size());
  for (const auto& ex : corpus) sketches.push_back(ex.sketch);
  auto [normalized, stats] = normalize_offsets(std::move(sketches));
  cfg.offset_std = stats.offset_std;

  std::vector<TrainExample> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    TrainExample ex;
    ex.original = normalized[i];
    ex.padded = pad_to(ex.original, cfg.t_max);
    ex.image = corpus[i].image.data.empty()
                   ? render_input_image(corpus[i].sketch, cfg.canvas_h, cfg.canvas_w, 0.10)
                   : corpus[i].image;
    ex.ss = scale_params(raster_points(ex.original), cfg.canvas_h, cfg.canvas_w);
    out.push_back(std::move(ex));
  }
  return out;
}

void clip_grads(std::span<double> grads, double c) {
  if (c <= 0.0) throw std::invalid_argument("clip_grads: clip value must be > 0");
  for (double& g : grads) g = std::clamp(g, -c, c);
}

void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
               double lr, long long t, double beta1, double beta2, double eps) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.v.size(); ++i) {
    double g = grad.v[i];
    m.v[i] = beta1 * m.v[i] + (1.0 - beta1) * g;
    v.v[i] = beta2 * v.v[i] + (1.0 - beta2) * g * g;
    double mhat = m.v[i] / bc1;
    double vhat = v.v[i] / bc2;
    param.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

namespace {

double lr_at(const TrainConfig& cfg, long long step) {
  long long k = cfg.lr_interval > 0 ? step / cfg.lr_interval : 0;
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(k));
}

Tensor batch_images(const TrainConfig& cfg,
                    std::span<const TrainExample* const> batch) {
  int B = static_cast<int>(batch.size());
  Tensor images({B, 1, cfg.canvas_h, cfg.canvas_w});
  std::size_t px = static_cast<std::size_t>(cfg.canvas_h) * cfg.canvas_w;
  for (int bb = 0; bb < B; ++bb) {
    const PixelImage& img = batch[bb]->image;
    if (img.h != cfg.canvas_h || img.w != cfg.canvas_w)
      throw std::invalid_argument("train_step: image dims do not match config");
    std::memcpy(&images.v[static_cast<std::size_t>(bb) * px], img.data.data(),
                px * sizeof(double));
  }
  return images;
}

// Applies clipping and Adam to every parameter with a gradient; returns the
// pre-clip global L2 norm.
double apply_grads(Model& model, Tape& tape, const ParamNodes& pn, double lr) {
  double sq = 0.0;
  for (auto& e : model.params.entries()) {
    int id = pn.id.at(e.name);
    const Tensor& g = tape.grad(id);
    if (g.v.empty()) continue;
    for (double v : g.v) sq += v * v;
  }
  for (auto& e : model.params.entries()) {
    int id = pn.id.at(e.name);
    Tensor g = tape.grad(id);
    if (g.v.empty()) g = Tensor(e.value.shape);
    clip_grads(g.v, model.cfg.clip);
    adam_step(e.value, g, e.m, e.v, lr, model.step + 1);
  }
  return std::sqrt(sq);
}

}  // namespace

StepMetrics train_step(Model& model, std::span<const TrainExample* const> batch,
                       Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  if (model.cfg.model == "vae") return vae_train_step(model, batch, rng);
  const TrainConfig& cfg = model.cfg;
  const int B = static_cast<int>(batch.size());
  const int T = cfg.t_max;
  const std::size_t m = static_cast<std::size_t>(cfg.mixtures);

  Tape tape;
  ParamNodes pn = push_params(tape, model, true);
  EncodeIds enc = encode_on_tape(tape, pn, model, batch_images(cfg, batch), false, &rng);

  std::vector<Sketch> targets;
  targets.reserve(batch.size());
  for (const TrainExample* ex : batch) targets.push_back(ex->padded);
  std::vector<int> raw_steps = decode_teacher_forced_on_tape(tape, pn, model, enc.z, targets);

  // Per-step masks and targets, batch-major.
  std::vector<std::vector<int>> masks(B);
  for (int bb = 0; bb < B; ++bb) masks[bb] = stroke_mask(targets[bb]);

  int l_stroke_sum = -1;
  int l_pen_sum = -1;
  std::vector<double> tdx(B), tdy(B);
  std::vector<int> tmask(B), tpen(B);
  for (int t = 0; t < T; ++t) {
    for (int bb = 0; bb < B; ++bb) {
      const Stroke5& s = targets[bb].strokes[t + 1];
      tdx[bb] = s.dx;
      tdy[bb] = s.dy;
      tmask[bb] = masks[bb][t];
      tpen[bb] = s.s1 ? 0 : (s.s2 ? 1 : 2);
    }
    int nll = tape.mdn_stroke_nll_step(raw_steps[t], m, tdx, tdy, tmask);
    int ce = tape.mdn_pen_ce_step(raw_steps[t], m, tpen);
    l_stroke_sum = t == 0 ? nll : tape.add(l_stroke_sum, nll);
    l_pen_sum = t == 0 ? ce : tape.add(l_pen_sum, ce);
  }
  double norm = 1.0 / (static_cast<double>(B) * T);
  int l_stroke = tape.scale(l_stroke_sum, norm);
  int l_pen = tape.scale(l_pen_sum, norm);

  // Sampled sequences for the pixel loss; the scaling always comes from the
  // ground truth.
  std::vector<ScaleShift> ss;
  std::vector<Sketch> originals;
  for (const TrainExample* ex : batch) {
    ss.push_back(ex->ss);
    originals.push_back(ex->original);
  }
  int l_pixel = -1;
  for (int rep = 0; rep < cfg.pixel_samples; ++rep) {
    std::vector<int> sample_steps(T);
    std::vector<std::vector<int>> pen_down(B, std::vector<int>(T, 0));
    std::vector<int> pen_states;
    for (int t = 0; t < T; ++t) {
      sample_steps[t] = tape.mdn_sample(raw_steps[t], m, 1.0, rng, pen_states);
      for (int bb = 0; bb < B; ++bb) pen_down[bb][t] = pen_states[bb] == 0;
    }
    int rep_loss = tape.pixel_loss_node(sample_steps, pen_down, originals, ss,
                                        cfg.canvas_h, cfg.canvas_w, cfg.blur_sigma);
    l_pixel = rep == 0 ? rep_loss : tape.add(l_pixel, rep_loss);
  }
  if (cfg.pixel_samples > 1)
    l_pixel = tape.scale(l_pixel, 1.0 / cfg.pixel_samples);

  double alpha = alpha_at(model.step, cfg.alpha);
  int total = tape.add(tape.add(l_pen, tape.scale(l_stroke, 1.0 - alpha)),
                       tape.scale(l_pixel, alpha));
  if (cfg.kl_weight > 0.0)
    total = tape.add(total, tape.scale(tape.kl_standard_normal(enc.mu, enc.logsigma),
                                       cfg.kl_weight));

  StepMetrics metrics;
  metrics.step = model.step;
  metrics.alpha = alpha;
  metrics.l_pen = tape.val(l_pen).v[0];
  metrics.l_stroke = tape.val(l_stroke).v[0];
  metrics.l_pixel = tape.val(l_pixel).v[0];
  metrics.l_total = tape.val(total).v[0];
  metrics.lr = lr_at(cfg, model.step);
  if (!std::isfinite(metrics.l_total))
    throw std::runtime_error(
        "train_step: non-finite loss at step " + std::to_string(model.step) +
        " (pen " + std::to_string(metrics.l_pen) + ", stroke " +
        std::to_string(metrics.l_stroke) + ", pixel " +
        std::to_string(metrics.l_pixel) + ")");

  tape.backward(total);
  metrics.grad_norm = apply_grads(model, tape, pn, metrics.lr);
  model.step += 1;
  return metrics;
}

StepMetrics vae_train_step(Model& model, std::span<const TrainExample* const> batch,
                           Rng& rng) {
  const TrainConfig& cfg = model.cfg;
  Tape tape;
  ParamNodes pn = push_params(tape, model, true);
  Tensor images = batch_images(cfg, batch);
  Tensor flat_targets({static_cast<int>(batch.size()), cfg.canvas_h * cfg.canvas_w});
  flat_targets.v = images.v;
  EncodeIds enc = encode_on_tape(tape, pn, model, std::move(images), false, &rng);

  int hdn = tape.relu(tape.linear(enc.z, pn("vae.fc1.w"), pn("vae.fc1.b")));
  int logits = tape.linear(hdn, pn("vae.fc2.w"), pn("vae.fc2.b"));
  int bce = tape.bce_with_logits(logits, flat_targets);
  int kl = tape.kl_standard_normal(enc.mu, enc.logsigma);
  int total = tape.add(bce, kl);

  StepMetrics metrics;
  metrics.step = model.step;
  metrics.l_pixel = tape.val(bce).v[0];
  metrics.l_stroke = tape.val(kl).v[0];
  metrics.l_total = tape.val(total).v[0];
  metrics.lr = lr_at(cfg, model.step);
  if (!std::isfinite(metrics.l_total))
    throw std::runtime_error("vae_train_step: non-finite loss at step " +
                             std::to_string(model.step));
  tape.backward(total);
  metrics.grad_norm = apply_grads(model, tape, pn, metrics.lr);
  model.step += 1;
  return metrics;
}

void train(Model& model, const std::vector<TrainExample>& examples,
           const MetricsSink& sink) {
  if (examples.empty()) throw std::invalid_argument("train: no examples");
  const TrainConfig& cfg = model.cfg;
  for (long long step = model.step; step < cfg.steps; ++step) {
    Rng batch_rng = Rng::derive(cfg.seed, "batch", static_cast<std::uint64_t>(step));
    std::vector<const TrainExample*> batch(cfg.batch);
    for (int i = 0; i < cfg.batch; ++i)
      batch[i] = &examples[batch_rng.below(examples.size())];
    Rng step_rng = Rng::derive(cfg.seed, "step", static_cast<std::uint64_t>(step));
    StepMetrics metrics = train_step(model, batch, step_rng);
    if (sink) sink(metrics);
  }
}

}  // namespace skem
