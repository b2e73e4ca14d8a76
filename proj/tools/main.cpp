// sketchembed command-line tool: ingest -> train -> generate -> embed ->
// fewshot -> probe -> gradcheck. Exit codes: 0 ok, 1 check failure,
// 2 usage/IO error, 3 numeric divergence.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sketchembed/fewshot.hpp"
#include "sketchembed/gradcheck.hpp"
#include "sketchembed/ingest.hpp"
#include "sketchembed/model.hpp"
#include "sketchembed/probes.hpp"
#include "sketchembed/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// JSON flavor of CLI11's config file: a flat {"option": value} object per
// subcommand. Reruns from the emitted effective-config file reproduce the
// run byte for byte (all randomness hangs off --seed).
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool,
                        std::string) const override {
    ordered_json doc;
    for (const CLI::Option* opt : app->get_options({})) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames()[0];
      if (opt->count() >= 1) {
        if (opt->results().size() == 1)
          doc[name] = opt->results()[0];
        else
          doc[name] = opt->results();
      } else if (default_also) {
        if (opt->get_expected_min() == 0)
          doc[name] = "false";  // unset flag
        else if (!opt->get_default_str().empty())
          doc[name] = opt->get_default_str();
      }
    }
    return doc.dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json doc = json::parse(input);
    std::vector<CLI::ConfigItem> items;
    for (auto& [key, value] : doc.items()) {
      CLI::ConfigItem item;
      item.name = key;
      if (value.is_array())
        for (auto& v : value)
          item.inputs.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      else
        item.inputs.push_back(value.is_string() ? value.get<std::string>()
                                                : value.dump());
      items.push_back(std::move(item));
    }
    return items;
  }
};

void setup_config(CLI::App* sub) {
  sub->option_defaults()->always_capture_default();
  // Config values are injected before explicit flags, so the flags win.
  sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  sub->config_formatter(std::make_shared<JsonConfig>());
}

// Replaces "--config file.json" in the argument list with the file's
// key/value pairs, placed right after the subcommand so later explicit flags
// override them.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    std::size_t erase_count = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      erase_count = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      erase_count = 1;
    } else {
      continue;
    }
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json doc = json::parse(in);
    std::vector<std::string> inject;
    for (auto& [key, value] : doc.items())
      inject.push_back("--" + key + "=" +
                       (value.is_string() ? value.get<std::string>() : value.dump()));
    args.erase(args.begin() + static_cast<long>(i),
               args.begin() + static_cast<long>(i + erase_count));
    args.insert(args.begin() + 1, inject.begin(), inject.end());
    break;
  }
  return args;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
}

void write_effective_config(const CLI::App* sub, const fs::path& path) {
  write_text(path.string(), sub->config_to_str(true, false));
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
               ? c
               : '-';
  return out.empty() ? std::string("x") : out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Sorted .pgm paths under a file-or-directory input.
std::vector<fs::path> collect_pgms(const std::string& input) {
  std::vector<fs::path> paths;
  if (fs::is_directory(input)) {
    for (const auto& entry : fs::directory_iterator(input))
      if (entry.path().extension() == ".pgm") paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
  } else {
    paths.emplace_back(input);
  }
  return paths;
}

struct NamedImage {
  std::string id;
  std::optional<std::string> class_id;
  skem::PixelImage image;
};

// Loads encoder inputs either from canonical sketch JSONL (rendered at the
// model's canvas) or from PGM files whose names follow class__id.pgm.
std::vector<NamedImage> load_inputs(const std::string& input, int h, int w) {
  std::vector<NamedImage> out;
  if (!fs::exists(input)) throw std::runtime_error("input not found: " + input);
  if (!fs::is_directory(input) && fs::path(input).extension() != ".pgm") {
    auto sketches = skem::read_sketch_jsonl(input);
    for (std::size_t i = 0; i < sketches.size(); ++i) {
      NamedImage ni;
      ni.id = sketches[i].source_id.empty() ? "sketch_" + std::to_string(i)
                                            : sketches[i].source_id;
      ni.class_id = sketches[i].class_id;
      ni.image = skem::render_input_image(sketches[i], h, w, 0.10);
      out.push_back(std::move(ni));
    }
    return out;
  }
  for (const fs::path& p : collect_pgms(input)) {
    NamedImage ni;
    std::string stem = p.stem().string();
    auto sep = stem.find("__");
    if (sep != std::string::npos && sep > 0) {
      ni.class_id = stem.substr(0, sep);
      ni.id = stem.substr(sep + 2);
    } else {
      ni.id = stem;
    }
    ni.image = skem::read_pgm(p.string());
    if (ni.image.h != h || ni.image.w != w)
      throw std::runtime_error(p.string() + ": image is " +
                               std::to_string(ni.image.w) + "x" +
                               std::to_string(ni.image.h) + ", model expects " +
                               std::to_string(w) + "x" + std::to_string(h));
    out.push_back(std::move(ni));
  }
  if (out.empty()) throw std::runtime_error("no inputs under " + input);
  return out;
}

skem::CorpusSpec corpus_spec(const std::string& classes_csv, int per_class,
                             int image_size, double jitter) {
  skem::CorpusSpec spec;
  spec.classes = split_csv(classes_csv);
  if (spec.classes.empty()) throw std::runtime_error("no classes given");
  spec.per_class = per_class;
  spec.image_h = image_size;
  spec.image_w = image_size;
  spec.jitter = jitter;
  return spec;
}

// ---------------------------------------------------------------------------
// ingest

struct IngestArgs {
  std::string quickdraw, svg, points, gen_classes;
  std::string out;
  std::string class_override;
  int per_class = 64;
  double jitter = 0.04;
  int svg_samples = 32;
  double rdp_epsilon = 0.0;
  double filter_len = 0.02;
  double filter_disp = 0.01;
  bool normalize = false;
  std::string render_dir;
  int image_size = 28;
  double pad = 0.10;
  std::uint64_t seed = 0;
};

std::vector<skem::Polyline> points_json_to_polylines(const json& doc) {
  std::vector<skem::Polyline> lines;
  for (const auto& line : doc.at("points")) {
    skem::Polyline pl;
    for (const auto& pt : line)
      pl.points.emplace_back(pt[0].get<double>(), pt[1].get<double>());
    lines.push_back(std::move(pl));
  }
  return lines;
}

int cmd_ingest(const IngestArgs& args, const CLI::App* sub) {
  int modes = int(!args.quickdraw.empty()) + int(!args.svg.empty()) +
              int(!args.points.empty()) + int(!args.gen_classes.empty());
  if (modes != 1) {
    std::cerr << "ingest: pass exactly one of --quickdraw/--svg/--points/--gen-classes\n";
    return 2;
  }

  std::vector<skem::Sketch> sketches;
  std::vector<std::optional<skem::SceneFactors>> factors;

  auto simplify_and_convert = [&](std::vector<skem::Polyline> lines,
                                  std::optional<std::string> cls, std::string id) {
    if (args.filter_len > 0.0 || args.filter_disp > 0.0)
      lines = skem::filter_strokes(lines, args.filter_len, args.filter_disp);
    if (args.rdp_epsilon > 0.0)
      for (auto& l : lines) l = skem::rdp_simplify(l, args.rdp_epsilon);
    sketches.push_back(skem::polylines_to_sketch(lines, std::move(cls), std::move(id)));
    factors.emplace_back();
  };

  if (!args.quickdraw.empty()) {
    std::ifstream in(args.quickdraw);
    if (!in) throw std::runtime_error("cannot open " + args.quickdraw);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        skem::Sketch sk = skem::parse_quickdraw_line(line);
        if (sk.source_id.empty()) sk.source_id = "qd_" + std::to_string(lineno);
        sketches.push_back(std::move(sk));
        factors.emplace_back();
      } catch (const std::exception& e) {
        throw std::runtime_error(args.quickdraw + ":" + std::to_string(lineno) +
                                 ": " + e.what());
      }
    }
  } else if (!args.svg.empty()) {
    std::vector<fs::path> files;
    if (fs::is_directory(args.svg)) {
      for (const auto& entry : fs::directory_iterator(args.svg))
        if (entry.path().extension() == ".svg") files.push_back(entry.path());
      std::sort(files.begin(), files.end());
    } else {
      files.emplace_back(args.svg);
    }
    if (files.empty()) throw std::runtime_error("no .svg files under " + args.svg);
    for (const fs::path& f : files) {
      std::ifstream in(f);
      if (!in) throw std::runtime_error("cannot open " + f.string());
      std::string text((std::istreambuf_iterator<char>(in)), {});
      auto lines = skem::sample_svg_paths(text, args.svg_samples);
      std::optional<std::string> cls;
      if (!args.class_override.empty()) cls = args.class_override;
      simplify_and_convert(std::move(lines), cls, f.stem().string());
    }
  } else if (!args.points.empty()) {
    std::ifstream in(args.points);
    if (!in) throw std::runtime_error("cannot open " + args.points);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        json doc = json::parse(line);
        std::optional<std::string> cls;
        if (doc.contains("class") && doc["class"].is_string())
          cls = doc["class"].get<std::string>();
        if (!args.class_override.empty()) cls = args.class_override;
        std::string id = doc.value("id", "pts_" + std::to_string(lineno));
        simplify_and_convert(points_json_to_polylines(doc), cls, id);
      } catch (const std::exception& e) {
        throw std::runtime_error(args.points + ":" + std::to_string(lineno) + ": " +
                                 e.what());
      }
    }
  } else {
    auto corpus = skem::gen_shape_corpus(
        corpus_spec(args.gen_classes, args.per_class, args.image_size, args.jitter),
        args.seed);
    for (auto& ex : corpus) {
      sketches.push_back(ex.sketch);
      factors.push_back(ex.factors);
    }
  }

  if (sketches.empty()) throw std::runtime_error("ingest: no sketches produced");

  if (args.normalize) {
    auto [normed, stats] = skem::normalize_offsets(std::move(sketches));
    sketches = std::move(normed);
    write_text(args.out + ".stats.json", skem::stats_to_json(stats) + "\n");
  }

  skem::write_sketch_jsonl(sketches, args.out);

  bool any_factors = false;
  for (const auto& f : factors) any_factors |= f.has_value();
  if (any_factors) {
    std::ofstream out(args.out + ".factors.jsonl");
    for (std::size_t i = 0; i < sketches.size(); ++i) {
      if (!factors[i]) continue;
      ordered_json doc;
      doc["id"] = sketches[i].source_id;
      doc["angle"] = factors[i]->angle;
      doc["distance"] = factors[i]->distance;
      doc["size"] = factors[i]->size;
      out << doc.dump() << "\n";
    }
  }

  if (!args.render_dir.empty()) {
    fs::create_directories(args.render_dir);
    for (std::size_t i = 0; i < sketches.size(); ++i) {
      const skem::Sketch& sk = sketches[i];
      skem::PixelImage img =
          skem::render_input_image(sk, args.image_size, args.image_size, args.pad);
      std::string cls = sk.class_id ? sanitize(*sk.class_id) : "none";
      std::string id = sk.source_id.empty() ? std::to_string(i) : sanitize(sk.source_id);
      skem::write_pgm(img,
                      (fs::path(args.render_dir) / (cls + "__" + id + ".pgm")).string());
    }
  }

  write_effective_config(sub, args.out + ".config.json");
  std::cout << "ingest: wrote " << sketches.size() << " sketches to " << args.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string sketches, gen_classes;
  std::string out;
  int per_class = 64;
  double jitter = 0.04;
  long long ckpt_interval = 1000;
  skem::TrainConfig cfg;
};

int cmd_train(const TrainArgs& args, const CLI::App* sub) {
  if (args.sketches.empty() == args.gen_classes.empty()) {
    std::cerr << "train: pass exactly one of --sketches or --gen-classes\n";
    return 2;
  }
  fs::create_directories(args.out);

  std::vector<skem::CorpusExample> corpus;
  if (!args.gen_classes.empty()) {
    corpus = skem::gen_shape_corpus(
        corpus_spec(args.gen_classes, args.per_class, args.cfg.canvas_h, args.jitter),
        args.cfg.seed);
  } else {
    for (auto& sk : skem::read_sketch_jsonl(args.sketches)) {
      skem::CorpusExample ex;
      ex.class_id = sk.class_id.value_or("");
      ex.sketch = std::move(sk);
      corpus.push_back(std::move(ex));
    }
  }
  // Drop over-length drawings rather than fail the run.
  std::size_t before = corpus.size();
  std::erase_if(corpus, [&](const skem::CorpusExample& ex) {
    return skem::drawn_length(ex.sketch) > static_cast<std::size_t>(args.cfg.t_max);
  });
  if (corpus.size() < before)
    std::cerr << "train: discarded " << before - corpus.size()
              << " drawings longer than t_max\n";
  if (corpus.empty()) throw std::runtime_error("train: no usable examples");

  skem::Model model = skem::make_model(args.cfg);
  auto examples = skem::prepare_training_set(corpus, model.cfg);

  std::string csv_path = (fs::path(args.out) / "train.csv").string();
  std::string ckpt_path = (fs::path(args.out) / "checkpoint.skem").string();
  std::ofstream csv(csv_path, std::ios::binary);
  csv << "step,alpha,l_pen,l_stroke,l_pixel,l_total,grad_norm,lr\n";

  write_effective_config(sub, fs::path(args.out) / "train.config.json");

  bool diverged = false;
  std::string divergence;
  try {
    skem::train(model, examples, [&](const skem::StepMetrics& m) {
      csv << m.step << "," << fmt_double(m.alpha) << "," << fmt_double(m.l_pen) << ","
          << fmt_double(m.l_stroke) << "," << fmt_double(m.l_pixel) << ","
          << fmt_double(m.l_total) << "," << fmt_double(m.grad_norm) << ","
          << fmt_double(m.lr) << "\n";
      if (args.ckpt_interval > 0 && m.step > 0 && (m.step + 1) % args.ckpt_interval == 0)
        skem::save_checkpoint(model, ckpt_path);
    });
  } catch (const std::runtime_error& e) {
    if (std::string(e.what()).find("non-finite") == std::string::npos) throw;
    diverged = true;
    divergence = e.what();
  }
  csv.close();
  if (diverged) {
    // The last periodic checkpoint stays on disk as the last-good state.
    std::cerr << "train: " << divergence << "\n";
    return 3;
  }
  skem::save_checkpoint(model, ckpt_path);
  std::cout << "train: " << model.step << " steps -> " << ckpt_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// generate / embed

struct GenerateArgs {
  std::string ckpt, input, out;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int t_max = 0;  // 0: use checkpoint t_max
  bool sample_z = false;
};

int cmd_generate(const GenerateArgs& args, const CLI::App* sub) {
  skem::Model model = skem::load_checkpoint(args.ckpt);
  auto inputs = load_inputs(args.input, model.cfg.canvas_h, model.cfg.canvas_w);
  fs::create_directories(args.out);
  int t_max = args.t_max > 0 ? args.t_max : model.cfg.t_max;

  std::vector<skem::PixelImage> images;
  for (const auto& ni : inputs) images.push_back(ni.image);
  auto embeds = skem::embed_images(model, images);

  std::vector<skem::Sketch> generated;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> z = embeds[i];
    if (args.sample_z) {
      // The deterministic path uses mu only; the stochastic draw goes back
      // through the encoder's sigma head.
      skem::Tape tape;
      skem::ParamNodes pn = skem::push_params(tape, model, false);
      skem::Tensor batch({1, 1, model.cfg.canvas_h, model.cfg.canvas_w});
      batch.v = inputs[i].image.data;
      skem::Rng zrng = skem::Rng::derive(args.seed, "generate-z", i);
      skem::EncodeIds ids =
          skem::encode_on_tape(tape, pn, model, std::move(batch), false, &zrng);
      z.assign(tape.val(ids.z).v.begin(), tape.val(ids.z).v.end());
    }
    skem::Rng rng = skem::Rng::derive(args.seed, "generate", i);
    skem::Sketch sk =
        skem::decode_autoregressive(model, z, rng, args.temperature, t_max);
    sk.source_id = inputs[i].id;
    sk.class_id = inputs[i].class_id;
    generated.push_back(std::move(sk));
  }

  skem::write_sketch_jsonl(generated, (fs::path(args.out) / "generated.jsonl").string());
  for (const auto& sk : generated) {
    skem::PixelImage img =
        skem::render_input_image(sk, model.cfg.canvas_h, model.cfg.canvas_w, 0.10);
    std::string cls = sk.class_id ? sanitize(*sk.class_id) : "none";
    skem::write_pgm(
        img, (fs::path(args.out) / (cls + "__" + sanitize(sk.source_id) + ".pgm")).string());
  }
  write_effective_config(sub, fs::path(args.out) / "generate.config.json");
  std::cout << "generate: wrote " << generated.size() << " sketches to " << args.out
            << "\n";
  return 0;
}

struct EmbedArgs {
  std::string ckpt, input, out;
};

int cmd_embed(const EmbedArgs& args, const CLI::App* sub) {
  skem::Model model = skem::load_checkpoint(args.ckpt);
  auto inputs = load_inputs(args.input, model.cfg.canvas_h, model.cfg.canvas_w);
  std::vector<skem::PixelImage> images;
  for (const auto& ni : inputs) images.push_back(ni.image);
  auto embeds = skem::embed_images(model, images);

  std::vector<skem::LabeledEmbedding> out;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    out.push_back(skem::LabeledEmbedding{inputs[i].id,
                                         inputs[i].class_id.value_or(""), embeds[i]});
  skem::write_embedding_jsonl(out, args.out);
  write_effective_config(sub, args.out + ".config.json");
  std::cout << "embed: wrote " << out.size() << " embeddings to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fewshot

struct FewshotArgs {
  std::string embeddings, out;
  int n = 5, k = 1, q = 5, episodes = 500;
  std::uint64_t seed = 0;
};

int cmd_fewshot(const FewshotArgs& args, const CLI::App* sub) {
  auto pool = skem::read_embedding_jsonl(args.embeddings);
  skem::EvalReport report =
      skem::run_eval(pool, args.n, args.k, args.q, args.episodes, args.seed);
  std::string csv = "n_way,k_shot,q_query,episodes,accuracy,ci95\n" +
                    skem::report_to_csv_row(report) + "\n";
  write_text(args.out + ".csv", csv);
  write_text(args.out + ".json", skem::report_to_json(report) + "\n");
  write_effective_config(sub, args.out + ".config.json");
  char line[128];
  std::snprintf(line, sizeof(line), "%d-way %d-shot: %.2f +/- %.2f (%d episodes)\n",
                report.n_way, report.k_shot, report.mean_accuracy, report.ci95,
                report.episodes);
  std::cout << line;
  return 0;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  std::string probe;
  std::string ckpt, embeddings, out;
  std::string classes;
  int examples = 1600;
  int per_class = 40;
  int steps = 5;
  double jitter = 0.04;
  std::uint64_t seed = 0;
};

skem::Model require_ckpt(const ProbeArgs& args) {
  if (args.ckpt.empty())
    throw std::runtime_error("probe " + args.probe + " needs --ckpt");
  return skem::load_checkpoint(args.ckpt);
}

std::vector<std::vector<double>> embed_corpus(
    skem::Model& model, const std::vector<skem::CorpusExample>& corpus) {
  std::vector<skem::PixelImage> images;
  for (const auto& ex : corpus) images.push_back(ex.image);
  return skem::embed_images(model, images);
}

int cmd_probe(const ProbeArgs& args, const CLI::App* sub) {
  std::vector<std::string> report_lines;
  auto add_report = [&](ordered_json doc) {
    doc["seed"] = args.seed;
    report_lines.push_back(doc.dump());
  };

  if (args.probe == "angle" || args.probe == "distance" || args.probe == "size") {
    skem::Model model = require_ckpt(args);
    skem::CorpusSpec spec =
        corpus_spec("pair_" + args.probe, 1, model.cfg.canvas_h, args.jitter);
    spec.per_class = args.examples;
    auto corpus = skem::gen_shape_corpus(spec, args.seed);
    auto embeds = embed_corpus(model, corpus);
    std::vector<double> targets;
    for (const auto& ex : corpus)
      targets.push_back(args.probe == "angle"
                            ? ex.factors->angle
                            : (args.probe == "distance" ? ex.factors->distance
                                                        : ex.factors->size));
    for (int n_train : {100, 1000}) {
      if (n_train + 100 > static_cast<int>(embeds.size()))
        throw std::runtime_error("probe: need more --examples for n_train " +
                                 std::to_string(n_train));
      skem::ReadoutResult lin = skem::linear_readout(embeds, targets, n_train);
      skem::ReadoutResult non =
          skem::nonlinear_readout(embeds, targets, n_train, args.seed);
      for (const skem::ReadoutResult& r : {lin, non}) {
        ordered_json doc;
        doc["probe"] = "latent_recovery";
        doc["factor_kind"] = args.probe;
        doc["model_kind"] = r.model_kind;
        doc["n_train"] = r.n_train;
        doc["r2"] = r.r2;
        doc["mse"] = r.mse;
        add_report(std::move(doc));
      }
    }
  } else if (args.probe == "arrangement") {
    skem::Model model = require_ckpt(args);
    std::string classes =
        args.classes.empty() ? "snowman,snowman3,boxstack,boxstack3" : args.classes;
    auto corpus = skem::gen_shape_corpus(
        corpus_spec(classes, args.per_class, model.cfg.canvas_h, args.jitter),
        args.seed);
    auto embeds = embed_corpus(model, corpus);
    std::vector<std::string> labels;
    for (const auto& ex : corpus) labels.push_back(ex.class_id);
    double acc = skem::arrangement_separability(embeds, labels, args.seed);
    ordered_json doc;
    doc["probe"] = "arrangement";
    doc["classes"] = classes;
    doc["accuracy"] = acc;
    add_report(std::move(doc));
  } else if (args.probe == "pca") {
    if (args.embeddings.empty())
      throw std::runtime_error("probe pca needs --embeddings");
    auto pool = skem::read_embedding_jsonl(args.embeddings);
    std::vector<std::vector<double>> embeds;
    for (const auto& e : pool) embeds.push_back(e.z);
    skem::PcaResult pca = skem::pca_project(embeds, 2);
    std::string csv = "id,class,u,v\n";
    for (std::size_t i = 0; i < pool.size(); ++i)
      csv += pool[i].id + "," + pool[i].class_id + "," +
             fmt_double(pca.coords[i][0]) + "," + fmt_double(pca.coords[i][1]) + "\n";
    write_text(args.out + ".csv", csv);
    ordered_json doc;
    doc["probe"] = "pca";
    doc["explained_ratio"] = pca.explained_ratio;
    add_report(std::move(doc));
  } else if (args.probe == "concept") {
    skem::Model model = require_ckpt(args);
    std::string classes = args.classes.empty() ? "snowman,circle,square" : args.classes;
    auto names = split_csv(classes);
    if (names.size() != 3)
      throw std::runtime_error("probe concept needs exactly 3 classes a,b,c");
    auto corpus =
        skem::gen_shape_corpus(corpus_spec(classes, 1, model.cfg.canvas_h, args.jitter),
                               args.seed);
    auto embeds = embed_corpus(model, corpus);
    std::map<std::string, std::vector<double>> by_class;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      by_class[corpus[i].class_id] = embeds[i];
    auto z = skem::concept_arithmetic(by_class[names[0]], by_class[names[1]],
                                      by_class[names[2]]);
    skem::Rng rng = skem::Rng::derive(args.seed, "concept-decode");
    skem::Sketch sk = skem::decode_autoregressive(model, z, rng, 0.4, model.cfg.t_max);
    sk.source_id = names[0] + "-" + names[1] + "+" + names[2];
    skem::write_sketch_jsonl({sk}, args.out + ".jsonl");
    skem::write_pgm(
        skem::render_input_image(sk, model.cfg.canvas_h, model.cfg.canvas_w, 0.10),
        args.out + ".pgm");
    ordered_json doc;
    doc["probe"] = "concept";
    doc["expression"] = sk.source_id;
    doc["strokes"] = skem::drawn_length(sk);
    add_report(std::move(doc));
  } else if (args.probe == "interp") {
    skem::Model model = require_ckpt(args);
    std::string classes =
        args.classes.empty() ? "circle,square,triangle,zigzag" : args.classes;
    auto names = split_csv(classes);
    if (names.size() != 4)
      throw std::runtime_error("probe interp needs 4 corner classes");
    auto corpus =
        skem::gen_shape_corpus(corpus_spec(classes, 1, model.cfg.canvas_h, args.jitter),
                               args.seed);
    auto embeds = embed_corpus(model, corpus);
    auto grid = skem::interpolate_grid({embeds[0], embeds[1], embeds[2], embeds[3]},
                                       args.steps);
    std::vector<skem::Sketch> decoded;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      skem::Rng rng = skem::Rng::derive(args.seed, "interp-decode", g);
      skem::Sketch sk =
          skem::decode_autoregressive(model, grid[g], rng, 0.4, model.cfg.t_max);
      sk.source_id = "cell_" + std::to_string(g / args.steps) + "_" +
                     std::to_string(g % args.steps);
      skem::write_pgm(
          skem::render_input_image(sk, model.cfg.canvas_h, model.cfg.canvas_w, 0.10),
          args.out + "_" + sk.source_id + ".pgm");
      decoded.push_back(std::move(sk));
    }
    skem::write_sketch_jsonl(decoded, args.out + ".jsonl");
    ordered_json doc;
    doc["probe"] = "interp";
    doc["steps"] = args.steps;
    add_report(std::move(doc));
  } else if (args.probe == "recognizability") {
    skem::Model model = require_ckpt(args);
    std::string classes =
        args.classes.empty() ? "circle,square,triangle,zigzag,line" : args.classes;
    auto corpus = skem::gen_shape_corpus(
        corpus_spec(classes, args.per_class, model.cfg.canvas_h, args.jitter),
        args.seed);
    auto embeds = embed_corpus(model, corpus);
    std::vector<skem::LabeledImage> gt, gen;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      gt.push_back(skem::LabeledImage{corpus[i].sketch.source_id, corpus[i].class_id,
                                      corpus[i].image});
      skem::Rng rng = skem::Rng::derive(args.seed, "recog-gen", i);
      skem::Sketch sk =
          skem::decode_autoregressive(model, embeds[i], rng, 0.4, model.cfg.t_max);
      skem::PixelImage img =
          skem::render_input_image(sk, model.cfg.canvas_h, model.cfg.canvas_w, 0.10);
      gen.push_back(skem::LabeledImage{"gen__" + corpus[i].sketch.source_id,
                                       corpus[i].class_id, std::move(img)});
    }
    skem::RecognizabilityResult r = skem::recognizability(gt, gen, args.seed);
    ordered_json doc;
    doc["probe"] = "recognizability";
    doc["train_acc"] = r.train_acc;
    doc["gen_acc"] = r.gen_acc;
    add_report(std::move(doc));
  } else {
    std::cerr << "probe: unknown probe kind \"" << args.probe << "\"\n";
    return 2;
  }

  std::string joined;
  for (const auto& line : report_lines) {
    joined += line + "\n";
    std::cout << line << "\n";
  }
  write_text(args.out + ".report.jsonl", joined);
  write_effective_config(sub, args.out + ".config.json");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  double tol = 1e-3;
  double tol_ops = 1e-4;
  std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradcheckArgs& args) {
  auto results = skem::run_gradchecks(args.tol_ops, args.tol, args.seed);
  bool all_pass = true;
  std::printf("%-26s %10s %14s %10s  %s\n", "check", "instances", "max_rel_err",
              "tol", "status");
  for (const auto& r : results) {
    std::printf("%-26s %10d %14.3e %10.1e  %s\n", r.name.c_str(), r.instances,
                r.max_rel_err, r.tol, r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  std::printf("gradcheck: %s\n", all_pass ? "PASS" : "FAIL");
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SketchEmbedNet pipeline: stroke-imitation embeddings at desk scale"};
  app.require_subcommand(1);

  IngestArgs ingest;
  CLI::App* sub_ingest = app.add_subcommand("ingest", "parse / generate sketch data");
  setup_config(sub_ingest);
  sub_ingest->add_option("--quickdraw", ingest.quickdraw, "Quickdraw raw NDJSON file");
  sub_ingest->add_option("--svg", ingest.svg, "SVG file or directory");
  sub_ingest->add_option("--points", ingest.points, "point-list JSONL file");
  sub_ingest->add_option("--gen-classes", ingest.gen_classes,
                         "comma list of procedural shape classes");
  sub_ingest->add_option("--out", ingest.out, "output canonical sketch JSONL")
      ->required();
  sub_ingest->add_option("--class", ingest.class_override, "class label override");
  sub_ingest->add_option("--per-class", ingest.per_class, "examples per class");
  sub_ingest->add_option("--jitter", ingest.jitter, "procedural vertex jitter");
  sub_ingest->add_option("--svg-samples", ingest.svg_samples, "samples per Bezier");
  sub_ingest->add_option("--rdp-epsilon", ingest.rdp_epsilon,
                         "RDP tolerance (0 disables)");
  sub_ingest->add_option("--filter-len", ingest.filter_len,
                         "min path length / sketch scale");
  sub_ingest->add_option("--filter-disp", ingest.filter_disp,
                         "min displacement / sketch scale");
  sub_ingest->add_flag("--normalize", ingest.normalize,
                       "divide offsets by the pooled std");
  sub_ingest->add_option("--render-dir", ingest.render_dir, "write PGM renders here");
  sub_ingest->add_option("--image-size", ingest.image_size, "render canvas size");
  sub_ingest->add_option("--pad", ingest.pad, "render padding fraction");
  sub_ingest->add_option("--seed", ingest.seed, "corpus seed");

  TrainArgs train;
  CLI::App* sub_train = app.add_subcommand("train", "train a model");
  setup_config(sub_train);
  sub_train->add_option("--sketches", train.sketches, "canonical sketch JSONL");
  sub_train->add_option("--gen-classes", train.gen_classes, "procedural classes");
  sub_train->add_option("--out", train.out, "output directory")->required();
  sub_train->add_option("--per-class", train.per_class, "examples per class");
  sub_train->add_option("--jitter", train.jitter, "procedural vertex jitter");
  sub_train->add_option("--ckpt-interval", train.ckpt_interval,
                        "steps between checkpoints");
  sub_train->add_option("--model", train.cfg.model, "sketchembed | vae");
  sub_train->add_option("--steps", train.cfg.steps, "training steps");
  sub_train->add_option("--batch", train.cfg.batch, "batch size");
  sub_train->add_option("--lr", train.cfg.lr, "initial learning rate");
  sub_train->add_option("--lr-decay", train.cfg.lr_decay, "decay factor");
  sub_train->add_option("--lr-interval", train.cfg.lr_interval, "decay interval");
  sub_train->add_option("--clip", train.cfg.clip, "gradient value clip");
  sub_train->add_option("--mixtures", train.cfg.mixtures, "mixture count M");
  sub_train->add_option("--t-max", train.cfg.t_max, "max decoder steps");
  sub_train->add_option("--latent", train.cfg.latent, "latent dimension D");
  sub_train->add_option("--hidden", train.cfg.hidden, "LSTM hidden size");
  sub_train->add_option("--alpha-step", train.cfg.alpha.step_size, "alpha increment");
  sub_train->add_option("--alpha-interval", train.cfg.alpha.interval,
                        "steps per alpha increment");
  sub_train->add_option("--alpha-max", train.cfg.alpha.alpha_max, "alpha cap");
  sub_train->add_option("--seed", train.cfg.seed, "training seed");
  sub_train->add_option("--canvas", train.cfg.canvas_h, "canvas size (square)");
  sub_train->add_option("--blur-sigma", train.cfg.blur_sigma, "pixel-loss blur sigma");
  sub_train->add_option("--kl-weight", train.cfg.kl_weight, "optional KL weight");
  sub_train->add_option("--pixel-samples", train.cfg.pixel_samples,
                        "sampled sequences per pixel loss");

  GenerateArgs generate;
  CLI::App* sub_generate = app.add_subcommand("generate", "autoregressive sketching");
  setup_config(sub_generate);
  sub_generate->add_option("--ckpt", generate.ckpt, "checkpoint")->required();
  sub_generate->add_option("--input", generate.input, "sketch JSONL or PGM input")
      ->required();
  sub_generate->add_option("--out", generate.out, "output directory")->required();
  sub_generate->add_option("--temperature", generate.temperature,
                           "sampling temperature");
  sub_generate->add_option("--seed", generate.seed, "sampling seed");
  sub_generate->add_option("--t-max", generate.t_max, "decode step cap (0: model)");
  sub_generate->add_flag("--sample-z", generate.sample_z, "sample z instead of mu");

  EmbedArgs embed;
  CLI::App* sub_embed = app.add_subcommand("embed", "deterministic embeddings");
  setup_config(sub_embed);
  sub_embed->add_option("--ckpt", embed.ckpt, "checkpoint")->required();
  sub_embed->add_option("--input", embed.input, "sketch JSONL or PGM input")
      ->required();
  sub_embed->add_option("--out", embed.out, "output embeddings JSONL")->required();

  FewshotArgs fewshot;
  CLI::App* sub_fewshot = app.add_subcommand("fewshot", "episodic evaluation");
  setup_config(sub_fewshot);
  sub_fewshot->add_option("--embeddings", fewshot.embeddings, "embedding JSONL")
      ->required();
  sub_fewshot->add_option("--out", fewshot.out, "report path prefix")->required();
  sub_fewshot->add_option("--n", fewshot.n, "ways");
  sub_fewshot->add_option("--k", fewshot.k, "shots");
  sub_fewshot->add_option("--q", fewshot.q, "queries per class");
  sub_fewshot->add_option("--episodes", fewshot.episodes, "episode count");
  sub_fewshot->add_option("--seed", fewshot.seed, "episode seed");

  ProbeArgs probe;
  CLI::App* sub_probe = app.add_subcommand("probe", "embedding-property probes");
  setup_config(sub_probe);
  sub_probe
      ->add_option("--probe", probe.probe,
                   "angle|distance|size|arrangement|pca|concept|interp|recognizability")
      ->required();
  sub_probe->add_option("--ckpt", probe.ckpt, "checkpoint");
  sub_probe->add_option("--embeddings", probe.embeddings, "embedding JSONL (pca)");
  sub_probe->add_option("--out", probe.out, "output path prefix")->required();
  sub_probe->add_option("--classes", probe.classes, "probe-specific class list");
  sub_probe->add_option("--examples", probe.examples, "factor-probe examples");
  sub_probe->add_option("--per-class", probe.per_class, "examples per class");
  sub_probe->add_option("--steps", probe.steps, "interp grid steps");
  sub_probe->add_option("--jitter", probe.jitter, "corpus jitter");
  sub_probe->add_option("--seed", probe.seed, "probe seed");

  GradcheckArgs gradcheck;
  CLI::App* sub_gradcheck = app.add_subcommand("gradcheck", "finite-difference checks");
  setup_config(sub_gradcheck);
  sub_gradcheck->add_option("--tol", gradcheck.tol, "raster / end-to-end tolerance");
  sub_gradcheck->add_option("--tol-ops", gradcheck.tol_ops, "per-op tolerance");
  sub_gradcheck->add_option("--seed", gradcheck.seed, "instance seed");

  // Help-only placeholder; expand_config() consumes the real thing.
  for (CLI::App* sub : app.get_subcommands({}))
    sub->add_option("--config", "JSON config file (flags override)")
        ->configurable(false);

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<const char*> argp{argv[0]};
  for (const std::string& a : args) argp.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argp.size()), argp.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sub_ingest->parsed()) return cmd_ingest(ingest, sub_ingest);
    if (sub_train->parsed()) {
      train.cfg.canvas_w = train.cfg.canvas_h;
      return cmd_train(train, sub_train);
    }
    if (sub_generate->parsed()) return cmd_generate(generate, sub_generate);
    if (sub_embed->parsed()) return cmd_embed(embed, sub_embed);
    if (sub_fewshot->parsed()) return cmd_fewshot(fewshot, sub_fewshot);
    if (sub_probe->parsed()) return cmd_probe(probe, sub_probe);
    if (sub_gradcheck->parsed()) return cmd_gradcheck(gradcheck);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
