#include "sketchembed/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace skem {

using json = nlohmann::ordered_json;

// --- config ---

std::string TrainConfig::to_json() const {
  json doc;
  doc["model"] = model;
  doc["batch"] = batch;
  doc["steps"] = steps;
  doc["lr"] = lr;
  doc["lr_decay"] = lr_decay;
  doc["lr_interval"] = lr_interval;
  doc["clip"] = clip;
  doc["mixtures"] = mixtures;
  doc["t_max"] = t_max;
  doc["latent"] = latent;
  doc["hidden"] = hidden;
  doc["conv_filters"] = conv_filters;
  doc["alpha_step"] = alpha.step_size;
  doc["alpha_interval"] = alpha.interval;
  doc["alpha_max"] = alpha.alpha_max;
  doc["seed"] = seed;
  doc["canvas_h"] = canvas_h;
  doc["canvas_w"] = canvas_w;
  doc["blur_sigma"] = blur_sigma;
  doc["kl_weight"] = kl_weight;
  doc["pixel_samples"] = pixel_samples;
  doc["vae_hidden"] = vae_hidden;
  doc["offset_std"] = offset_std;
  return doc.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json doc = json::parse(text);
  TrainConfig c;
  c.model = doc.at("model").get<std::string>();
  c.batch = doc.at("batch").get<int>();
  c.steps = doc.at("steps").get<long long>();
  c.lr = doc.at("lr").get<double>();
  c.lr_decay = doc.at("lr_decay").get<double>();
  c.lr_interval = doc.at("lr_interval").get<long long>();
  c.clip = doc.at("clip").get<double>();
  c.mixtures = doc.at("mixtures").get<int>();
  c.t_max = doc.at("t_max").get<int>();
  c.latent = doc.at("latent").get<int>();
  c.hidden = doc.at("hidden").get<int>();
  c.conv_filters = doc.at("conv_filters").get<std::vector<int>>();
  c.alpha.step_size = doc.at("alpha_step").get<double>();
  c.alpha.interval = doc.at("alpha_interval").get<int>();
  c.alpha.alpha_max = doc.at("alpha_max").get<double>();
  c.seed = doc.at("seed").get<std::uint64_t>();
  c.canvas_h = doc.at("canvas_h").get<int>();
  c.canvas_w = doc.at("canvas_w").get<int>();
  c.blur_sigma = doc.at("blur_sigma").get<double>();
  c.kl_weight = doc.at("kl_weight").get<double>();
  c.pixel_samples = doc.at("pixel_samples").get<int>();
  c.vae_hidden = doc.at("vae_hidden").get<int>();
  c.offset_std = doc.at("offset_std").get<double>();
  return c;
}

// --- params ---

Tensor& ParamStore::add(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, Tensor(shape), Tensor(shape), Tensor(shape)});
  return entries_.back().value;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: missing " + name);
  return entries_[it->second].value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: missing " + name);
  return entries_[it->second].value;
}

namespace {

void glorot_fill(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : t.v) v = rng.uniform(-limit, limit);
}

// Spatial size after the four conv->pool blocks.
int pooled_dim(int d) {
  for (int i = 0; i < 4; ++i) d /= 2;
  return d;
}

int encoder_flat_dim(const TrainConfig& cfg) {
  int hh = pooled_dim(cfg.canvas_h);
  int ww = pooled_dim(cfg.canvas_w);
  if (hh < 1 || ww < 1)
    throw std::invalid_argument("encoder: canvas too small for 4 pooling stages");
  return cfg.conv_filters.at(3) * hh * ww;
}

}  // namespace

Model make_model(const TrainConfig& cfg) {
  if (cfg.conv_filters.size() != 4)
    throw std::invalid_argument("make_model: conv_filters must list 4 block widths");
  Model model;
  model.cfg = cfg;
  Rng rng = Rng::derive(cfg.seed, "param-init");
  ParamStore& p = model.params;

  int in_ch = 1;
  for (int blk = 0; blk < 4; ++blk) {
    int out_ch = cfg.conv_filters[blk];
    std::string base = "enc.conv" + std::to_string(blk + 1);
    Tensor& w = p.add(base + ".w", {out_ch, in_ch, 3, 3});
    glorot_fill(w, in_ch * 9, out_ch * 9, rng);
    Tensor& gamma = p.add(base + ".gamma", {out_ch});
    for (double& v : gamma.v) v = 1.0;
    p.add(base + ".beta", {out_ch});
    in_ch = out_ch;
  }
  int flat = encoder_flat_dim(cfg);
  int d = cfg.latent;
  glorot_fill(p.add("enc.mu.w", {d, flat}), flat, d, rng);
  p.add("enc.mu.b", {d});
  glorot_fill(p.add("enc.logsigma.w", {d, flat}), flat, d, rng);
  p.add("enc.logsigma.b", {d});

  if (cfg.model == "sketchembed") {
    int h = cfg.hidden;
    int x_dim = d + 5;
    int out_w = static_cast<int>(mdn_raw_width(cfg.mixtures));
    glorot_fill(p.add("dec.init.w", {2 * h, d}), d, 2 * h, rng);
    p.add("dec.init.b", {2 * h});
    glorot_fill(p.add("dec.lstm.wx", {4 * h, x_dim}), x_dim, 4 * h, rng);
    glorot_fill(p.add("dec.lstm.wh", {4 * h, h}), h, 4 * h, rng);
    Tensor& bias = p.add("dec.lstm.b", {4 * h});
    for (int i = h; i < 2 * h; ++i) bias.v[i] = 1.0;  // forget gate bias
    glorot_fill(p.add("dec.out.w", {out_w, h}), h, out_w, rng);
    p.add("dec.out.b", {out_w});
  } else if (cfg.model == "vae") {
    int px = cfg.canvas_h * cfg.canvas_w;
    glorot_fill(p.add("vae.fc1.w", {cfg.vae_hidden, d}), d, cfg.vae_hidden, rng);
    p.add("vae.fc1.b", {cfg.vae_hidden});
    glorot_fill(p.add("vae.fc2.w", {px, cfg.vae_hidden}), cfg.vae_hidden, px, rng);
    p.add("vae.fc2.b", {px});
  } else {
    throw std::invalid_argument("make_model: unknown model kind " + cfg.model);
  }
  return model;
}

ParamNodes push_params(Tape& tape, Model& model, bool needs_grad) {
  ParamNodes pn;
  for (auto& e : model.params.entries())
    pn.id[e.name] = tape.input(e.value, needs_grad);
  return pn;
}

EncodeIds encode_on_tape(Tape& tape, const ParamNodes& pn, const Model& model,
                         Tensor images, bool deterministic, Rng* rng) {
  const TrainConfig& cfg = model.cfg;
  if (images.shape.size() != 4 || images.shape[1] != 1 ||
      images.shape[2] != cfg.canvas_h || images.shape[3] != cfg.canvas_w)
    throw std::invalid_argument("encode: image batch dims do not match config");
  int B = images.shape[0];
  int x = tape.input(std::move(images), false);
  for (int blk = 1; blk <= 4; ++blk) {
    std::string base = "enc.conv" + std::to_string(blk);
    x = tape.conv2d_same(x, pn(base + ".w"));
    x = tape.instance_norm(x, pn(base + ".gamma"), pn(base + ".beta"));
    x = tape.relu(x);
    x = tape.maxpool2(x);
  }
  int flat = tape.flatten2(x);
  EncodeIds ids;
  ids.mu = tape.linear(flat, pn("enc.mu.w"), pn("enc.mu.b"));
  ids.logsigma = tape.linear(flat, pn("enc.logsigma.w"), pn("enc.logsigma.b"));
  if (deterministic) {
    ids.z = ids.mu;
  } else {
    if (!rng) throw std::invalid_argument("encode: stochastic pass needs an rng");
    Tensor eps({B, cfg.latent});
    for (double& v : eps.v) v = rng->normal();
    int eps_id = tape.input(std::move(eps), false);
    int sigma = tape.exp_(ids.logsigma);
    ids.z = tape.add(ids.mu, tape.mul(sigma, eps_id));
  }
  return ids;
}

std::vector<int> decode_teacher_forced_on_tape(Tape& tape, const ParamNodes& pn,
                                               const Model& model, int z,
                                               const std::vector<Sketch>& targets) {
  const TrainConfig& cfg = model.cfg;
  const int B = tape.val(z).shape[0];
  const int t_max = cfg.t_max;
  if (targets.size() != static_cast<std::size_t>(B))
    throw std::invalid_argument("decode: target batch mismatch");
  for (const Sketch& s : targets)
    if (s.strokes.size() != static_cast<std::size_t>(t_max) + 1)
      throw std::invalid_argument("decode: target not padded to t_max");

  int h = cfg.hidden;
  int init = tape.tanh_(tape.linear(z, pn("dec.init.w"), pn("dec.init.b")));
  int h_state = tape.slice_cols(init, 0, h);
  int c_state = tape.slice_cols(init, h, h);

  std::vector<int> raw_steps;
  raw_steps.reserve(t_max);
  for (int t = 1; t <= t_max; ++t) {
    Tensor prev({B, 5});
    for (int bb = 0; bb < B; ++bb) {
      const Stroke5& s = targets[bb].strokes[t - 1];
      double* row = &prev.v[static_cast<std::size_t>(bb) * 5];
      row[0] = s.dx;
      row[1] = s.dy;
      row[2] = s.s1;
      row[3] = s.s2;
      row[4] = s.s3;
    }
    int prev_id = tape.input(std::move(prev), false);
    int x_t = tape.concat_cols(z, prev_id);
    int hc = tape.lstm_cell(x_t, h_state, c_state, pn("dec.lstm.wx"),
                            pn("dec.lstm.wh"), pn("dec.lstm.b"));
    h_state = tape.slice_cols(hc, 0, h);
    c_state = tape.slice_cols(hc, h, h);
    raw_steps.push_back(tape.linear(h_state, pn("dec.out.w"), pn("dec.out.b")));
  }
  return raw_steps;
}

std::vector<std::vector<double>> embed_images(Model& model,
                                              const std::vector<PixelImage>& images) {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  const int chunk = 32;
  for (std::size_t at = 0; at < images.size(); at += chunk) {
    std::size_t n = std::min<std::size_t>(chunk, images.size() - at);
    Tensor batch({static_cast<int>(n), 1, model.cfg.canvas_h, model.cfg.canvas_w});
    std::size_t px = static_cast<std::size_t>(model.cfg.canvas_h) * model.cfg.canvas_w;
    for (std::size_t i = 0; i < n; ++i) {
      const PixelImage& img = images[at + i];
      if (img.h != model.cfg.canvas_h || img.w != model.cfg.canvas_w)
        throw std::invalid_argument("embed_images: image dims do not match config");
      std::memcpy(&batch.v[i * px], img.data.data(), px * sizeof(double));
    }
    Tape tape;
    ParamNodes pn = push_params(tape, model, false);
    EncodeIds ids = encode_on_tape(tape, pn, model, std::move(batch), true, nullptr);
    const Tensor& mu = tape.val(ids.mu);
    for (std::size_t i = 0; i < n; ++i)
      out.emplace_back(mu.v.begin() + i * model.cfg.latent,
                       mu.v.begin() + (i + 1) * model.cfg.latent);
  }
  return out;
}

Sketch decode_autoregressive(Model& model, const std::vector<double>& z,
                             Rng& rng, double temperature, int t_max) {
  if (model.cfg.model != "sketchembed")
    throw std::invalid_argument("decode_autoregressive: not a sketchembed checkpoint");
  if (static_cast<int>(z.size()) != model.cfg.latent)
    throw std::invalid_argument("decode_autoregressive: latent dim mismatch");
  int h = model.cfg.hidden;
  std::size_t m = static_cast<std::size_t>(model.cfg.mixtures);

  Tape tape;
  ParamNodes pn = push_params(tape, model, false);
  Tensor zt({1, model.cfg.latent});
  zt.v = z;
  int z_id = tape.input(std::move(zt), false);
  int init = tape.tanh_(tape.linear(z_id, pn("dec.init.w"), pn("dec.init.b")));
  int h_state = tape.slice_cols(init, 0, h);
  int c_state = tape.slice_cols(init, h, h);

  Sketch out;
  out.strokes.push_back(start_token());
  Stroke5 prev = start_token();
  for (int t = 0; t < t_max; ++t) {
    Tensor pv({1, 5}, {prev.dx, prev.dy, double(prev.s1), double(prev.s2), double(prev.s3)});
    int x_t = tape.concat_cols(z_id, tape.input(std::move(pv), false));
    int hc = tape.lstm_cell(x_t, h_state, c_state, pn("dec.lstm.wx"),
                            pn("dec.lstm.wh"), pn("dec.lstm.b"));
    h_state = tape.slice_cols(hc, 0, h);
    c_state = tape.slice_cols(hc, h, h);
    int raw = tape.linear(h_state, pn("dec.out.w"), pn("dec.out.b"));
    const Tensor& rv = tape.val(raw);
    MdnParams params = mdn_split(std::span<const double>(rv.v.data(), rv.v.size()), m);
    OffsetSample s = sample_offsets(params, temperature, rng);
    int pen = sample_pen_state(params, temperature, rng);
    Stroke5 stroke;
    stroke.dx = s.dx;
    stroke.dy = s.dy;
    stroke.s1 = pen == 0;
    stroke.s2 = pen == 1;
    stroke.s3 = pen == 2;
    out.strokes.push_back(stroke);
    if (pen == 2) break;
    prev = stroke;
  }
  return out;
}

// --- checkpoint ---

namespace {

constexpr char kMagic[4] = {'S', 'K', 'E', 'M'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(std::string("load_checkpoint: truncated ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  std::string cfg = model.cfg.to_json();
  write_pod(out, static_cast<std::uint64_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  write_pod(out, static_cast<std::int64_t>(model.step));
  write_pod(out, static_cast<std::uint32_t>(model.params.entries().size()));
  for (const auto& e : model.params.entries()) {
    write_pod(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_pod(out, static_cast<std::uint32_t>(e.value.shape.size()));
    for (int d : e.value.shape) write_pod(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(e.value.v.data()),
              static_cast<std::streamsize>(e.value.v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  auto cfg_len = read_pod<std::uint64_t>(in, "config length");
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw std::runtime_error("load_checkpoint: truncated config");

  Model model = make_model(TrainConfig::from_json(cfg_text));
  model.step = read_pod<std::int64_t>(in, "step");
  auto n_tensors = read_pod<std::uint32_t>(in, "tensor count");
  if (n_tensors != model.params.entries().size())
    throw std::runtime_error("load_checkpoint: shape mismatch (tensor count)");
  for (auto& e : model.params.entries()) {
    auto name_len = read_pod<std::uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != e.name)
      throw std::runtime_error("load_checkpoint: shape mismatch (tensor " + name + ")");
    auto rank = read_pod<std::uint32_t>(in, "rank");
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(read_pod<std::uint32_t>(in, "dim"));
    if (dims != e.value.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch (tensor " + name + ")");
    in.read(reinterpret_cast<char*>(e.value.v.data()),
            static_cast<std::streamsize>(e.value.v.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated tensor data");
  }
  return model;
}

}  // namespace skem
