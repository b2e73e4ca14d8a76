#include "sketchembed/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace skem {

using json = nlohmann::json;

Episode sample_episode(const std::vector<LabeledEmbedding>& pool, int n, int k,
                       int q, Rng& rng) {
  if (n < 2 || k < 1 || q < 1)
    throw std::invalid_argument("sample_episode: need n >= 2, k >= 1, q >= 1");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i)
    by_class[pool[i].class_id].push_back(i);

  std::vector<std::string> eligible;
  for (const auto& [cls, idx] : by_class)
    if (static_cast<int>(idx.size()) >= k + q) eligible.push_back(cls);
  if (static_cast<int>(eligible.size()) < n) {
    // Name a class that blocks the episode.
    for (const auto& [cls, idx] : by_class)
      if (static_cast<int>(idx.size()) < k + q)
        throw std::runtime_error("sample_episode: class \"" + cls + "\" has " +
                                 std::to_string(idx.size()) + " examples, needs " +
                                 std::to_string(k + q));
    throw std::runtime_error("sample_episode: only " +
                             std::to_string(eligible.size()) + " classes, need " +
                             std::to_string(n));
  }

  rng.shuffle(eligible);
  eligible.resize(n);

  Episode ep;
  ep.n_way = n;
  ep.k_shot = k;
  ep.q_query = q;
  for (int label = 0; label < n; ++label) {
    std::vector<std::size_t> idx = by_class[eligible[label]];
    rng.shuffle(idx);
    for (int i = 0; i < k; ++i) ep.support.push_back({pool[idx[i]].z, label});
    for (int i = 0; i < q; ++i) ep.query.push_back({pool[idx[k + i]].z, label});
  }
  return ep;
}

LinearHead fit_linear(const std::vector<std::pair<std::vector<double>, int>>& support,
                      int n_classes, int epochs, double lr) {
  if (support.empty()) throw std::invalid_argument("fit_linear: empty support");
  int dim = static_cast<int>(support[0].first.size());
  LinearHead head;
  head.n_classes = n_classes;
  head.dim = dim;
  head.weights.assign(static_cast<std::size_t>(n_classes) * dim, 0.0);
  head.bias.assign(n_classes, 0.0);

  std::vector<double> logits(n_classes);
  std::vector<double> gw(head.weights.size());
  std::vector<double> gb(n_classes);
  double inv_n = 1.0 / static_cast<double>(support.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (const auto& [x, y] : support) {
      for (int c = 0; c < n_classes; ++c) {
        double acc = head.bias[c];
        const double* w = &head.weights[static_cast<std::size_t>(c) * dim];
        for (int i = 0; i < dim; ++i) acc += w[i] * x[i];
        logits[c] = acc;
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double sum = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        sum += l;
      }
      for (int c = 0; c < n_classes; ++c) {
        double p = logits[c] / sum;
        double g = (p - (c == y ? 1.0 : 0.0)) * inv_n;
        double* gwr = &gw[static_cast<std::size_t>(c) * dim];
        for (int i = 0; i < dim; ++i) gwr[i] += g * x[i];
        gb[c] += g;
      }
    }
    for (std::size_t i = 0; i < gw.size(); ++i) head.weights[i] -= lr * gw[i];
    for (int c = 0; c < n_classes; ++c) head.bias[c] -= lr * gb[c];
  }
  return head;
}

double eval_episode(const Episode& ep, const LinearHead& head) {
  if (ep.query.empty()) throw std::invalid_argument("eval_episode: empty query");
  int correct = 0;
  for (const auto& [x, y] : ep.query) {
    if (static_cast<int>(x.size()) != head.dim)
      throw std::invalid_argument("eval_episode: embedding dim mismatch");
    int best = 0;
    double best_score = -1e300;
    for (int c = 0; c < head.n_classes; ++c) {
      double acc = head.bias[c];
      const double* w = &head.weights[static_cast<std::size_t>(c) * head.dim];
      for (int i = 0; i < head.dim; ++i) acc += w[i] * x[i];
      if (acc > best_score) {  // strict: ties keep the lowest class index
        best_score = acc;
        best = c;
      }
    }
    if (best == y) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

EvalReport run_eval(const std::vector<LabeledEmbedding>& pool, int n, int k,
                    int q, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("run_eval: episodes < 1");
  std::vector<double> accs(episodes);
  for (int e = 0; e < episodes; ++e) {
    Rng rng = Rng::derive(seed, "episode", static_cast<std::uint64_t>(e));
    Episode ep = sample_episode(pool, n, k, q, rng);
    LinearHead head = fit_linear(ep.support, n);
    accs[e] = eval_episode(ep, head);
  }
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= episodes;
  double var = 0.0;
  for (double a : accs) var += (a - mean) * (a - mean);
  var = episodes > 1 ? var / (episodes - 1) : 0.0;
  double stderr_ = std::sqrt(var / episodes);

  EvalReport r;
  r.mean_accuracy = 100.0 * mean;
  r.ci95 = 100.0 * 1.96 * stderr_;
  r.episodes = episodes;
  r.n_way = n;
  r.k_shot = k;
  r.q_query = q;
  r.seed = seed;
  return r;
}

// --- serialization ---

std::string embedding_to_jsonl(const LabeledEmbedding& e) {
  json doc;
  doc["id"] = e.id;
  doc["class"] = e.class_id;
  doc["z"] = e.z;
  return doc.dump();
}

LabeledEmbedding embedding_from_jsonl(const std::string& line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("embedding_from_jsonl: parse error at byte " +
                             std::to_string(e.byte));
  }
  LabeledEmbedding e;
  e.id = doc.value("id", std::string{});
  if (doc.contains("class") && doc["class"].is_string())
    e.class_id = doc["class"].get<std::string>();
  e.z = doc.at("z").get<std::vector<double>>();
  return e;
}

std::vector<LabeledEmbedding> read_embedding_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_embedding_jsonl: cannot open " + path);
  std::vector<LabeledEmbedding> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(embedding_from_jsonl(line));
  return out;
}

void write_embedding_jsonl(const std::vector<LabeledEmbedding>& embeds,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_embedding_jsonl: cannot open " + path);
  for (const auto& e : embeds) out << embedding_to_jsonl(e) << "\n";
}

std::string report_to_json(const EvalReport& r) {
  json doc;
  doc["mean_accuracy"] = r.mean_accuracy;
  doc["ci95"] = r.ci95;
  doc["episodes"] = r.episodes;
  doc["n_way"] = r.n_way;
  doc["k_shot"] = r.k_shot;
  doc["q_query"] = r.q_query;
  doc["seed"] = r.seed;
  return doc.dump();
}

std::string report_to_csv_row(const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%.2f,%.2f", r.n_way, r.k_shot,
                r.q_query, r.episodes, r.mean_accuracy, r.ci95);
  return buf;
}

}  // namespace skem
