#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sketchembed/ingest.hpp"
#include "sketchembed/mdn.hpp"
#include "sketchembed/tape.hpp"
#include "sketchembed/tensor.hpp"

namespace skem {

struct TrainConfig {
  std::string model = "sketchembed";  // "sketchembed" | "vae"
  int batch = 16;
  long long steps = 3000;
  double lr = 1e-3;
  double lr_decay = 0.85;
  long long lr_interval = 15000;
  double clip = 1.0;
  int mixtures = 5;
  int t_max = 32;
  int latent = 32;
  int hidden = 96;
  std::vector<int> conv_filters = {16, 32, 32, 64};
  AlphaSchedule alpha;
  std::uint64_t seed = 0;
  int canvas_h = 28;
  int canvas_w = 28;
  double blur_sigma = 2.0;
  double kl_weight = 0.0;  // optional KL-to-standard-normal term
  int pixel_samples = 1;   // sampled sequences averaged in L_pixel
  int vae_hidden = 128;
  double offset_std = 1.0;  // recorded by the training pipeline

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Named trainable tensors plus Adam moments, in fixed insertion order (the
// checkpoint tensor order).
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor m;
    Tensor v;
  };

  Tensor& add(const std::string& name, std::vector<int> shape);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Model {
  TrainConfig cfg;
  ParamStore params;
  long long step = 0;
};

// Fresh model with Glorot-uniform weights drawn from cfg.seed.
Model make_model(const TrainConfig& cfg);

// Parameter tape nodes for one forward pass, insertion order preserved.
struct ParamNodes {
  std::unordered_map<std::string, int> id;
  int operator()(const std::string& name) const { return id.at(name); }
};
ParamNodes push_params(Tape& tape, Model& model, bool needs_grad);

struct EncodeIds {
  int mu = -1;
  int logsigma = -1;
  int z = -1;
};

// Conv4 encoder; images is [B,1,H,W]. Stochastic z = mu + sigma * eps draws
// eps from rng; deterministic z = mu.
EncodeIds encode_on_tape(Tape& tape, const ParamNodes& pn, const Model& model,
                         Tensor images, bool deterministic, Rng* rng);

// Teacher-forced decoder: returns the 6M+3 raw head node for each of t_max
// steps. Targets must be padded to 1 + t_max strokes.
std::vector<int> decode_teacher_forced_on_tape(Tape& tape, const ParamNodes& pn,
                                               const Model& model, int z,
                                               const std::vector<Sketch>& targets);

// Deterministic embedding (z = mu) for a batch of images.
std::vector<std::vector<double>> embed_images(Model& model,
                                              const std::vector<PixelImage>& images);

// Autoregressive generation from a latent code.
Sketch decode_autoregressive(Model& model, const std::vector<double>& z,
                             Rng& rng, double temperature, int t_max);

// Checkpoint: "SKEM" magic, u32 version, length-prefixed config JSON, then
// named tensors (name, rank, dims, little-endian f64 data).
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace skem
