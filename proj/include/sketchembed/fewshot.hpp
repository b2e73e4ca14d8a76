#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sketchembed/rng.hpp"

namespace skem {

struct LabeledEmbedding {
  std::string id;
  std::string class_id;
  std::vector<double> z;
};

// N-way K-shot episode with episode-local labels in 0..N-1; support and
// query ids are disjoint by construction.
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  int q_query = 0;
  std::vector<std::pair<std::vector<double>, int>> support;
  std::vector<std::pair<std::vector<double>, int>> query;
};

struct EvalReport {
  double mean_accuracy = 0.0;  // percent
  double ci95 = 0.0;           // 1.96 * stderr half-width, percent
  int episodes = 0;
  int n_way = 0;
  int k_shot = 0;
  int q_query = 0;
  std::uint64_t seed = 0;
};

struct LinearHead {
  int n_classes = 0;
  int dim = 0;
  std::vector<double> weights;  // n_classes x dim
  std::vector<double> bias;     // n_classes
};

// Draws n classes without replacement, then k+q distinct examples per class.
// Throws naming the deficient class when the pool cannot support the split.
Episode sample_episode(const std::vector<LabeledEmbedding>& pool, int n, int k,
                       int q, Rng& rng);

// Full-batch softmax cross-entropy gradient descent from zero init;
// deterministic in its inputs.
LinearHead fit_linear(const std::vector<std::pair<std::vector<double>, int>>& support,
                      int n_classes, int epochs = 100, double lr = 0.5);

// Fraction of argmax-correct query predictions; ties resolve to the lowest
// class index.
double eval_episode(const Episode& ep, const LinearHead& head);

EvalReport run_eval(const std::vector<LabeledEmbedding>& pool, int n, int k,
                    int q, int episodes, std::uint64_t seed);

// Embedding JSONL: {"id", "class", "z": [...]}.
std::string embedding_to_jsonl(const LabeledEmbedding& e);
LabeledEmbedding embedding_from_jsonl(const std::string& line);
std::vector<LabeledEmbedding> read_embedding_jsonl(const std::string& path);
void write_embedding_jsonl(const std::vector<LabeledEmbedding>& embeds,
                           const std::string& path);

std::string report_to_json(const EvalReport& r);
std::string report_to_csv_row(const EvalReport& r);

}  // namespace skem
