#include "sketchembed/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include <Eigen/Dense>

#include "sketchembed/fewshot.hpp"
#include "sketchembed/tape.hpp"
#include "sketchembed/train.hpp"

namespace skem {

namespace {

struct Split {
  Eigen::MatrixXd x_train, x_test;
  Eigen::VectorXd y_train, y_test;
};

Split make_split_matrices(const std::vector<std::vector<double>>& embeds,
                          const std::vector<double>& targets, int n_train) {
  if (embeds.size() != targets.size())
    throw std::invalid_argument("readout: embeds/targets size mismatch");
  int n = static_cast<int>(embeds.size());
  if (n_train < 1 || n_train >= n)
    throw std::invalid_argument("readout: need n_train in [1, n)");
  double tmin = *std::min_element(targets.begin(), targets.end());
  double tmax = *std::max_element(targets.begin(), targets.end());
  if (tmax - tmin <= 0.0)
    throw std::invalid_argument("readout: constant targets, R^2 undefined");

  int d = static_cast<int>(embeds[0].size());
  Split s;
  s.x_train.resize(n_train, d);
  s.y_train.resize(n_train);
  s.x_test.resize(n - n_train, d);
  s.y_test.resize(n - n_train);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(embeds[i].size()) != d)
      throw std::invalid_argument("readout: ragged embeddings");
    for (int j = 0; j < d; ++j)
      (i < n_train ? s.x_train(i, j) : s.x_test(i - n_train, j)) = embeds[i][j];
    (i < n_train ? s.y_train(i) : s.y_test(i - n_train)) = targets[i];
  }
  return s;
}

ReadoutResult score(const Eigen::VectorXd& pred, const Eigen::VectorXd& y,
                    const std::string& kind, int n_train) {
  double mean = y.mean();
  double ss_res = (y - pred).squaredNorm();
  double ss_tot = (y.array() - mean).matrix().squaredNorm();
  ReadoutResult r;
  r.r2 = 1.0 - ss_res / ss_tot;
  r.mse = ss_res / static_cast<double>(y.size());
  r.model_kind = kind;
  r.n_train = n_train;
  return r;
}

}  // namespace

namespace {

Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& x_train,
                            const Eigen::VectorXd& y_train) {
  int d = static_cast<int>(x_train.cols());
  // Append a bias column; ridge with lambda 1e-6 for conditioning.
  Eigen::MatrixXd xt(x_train.rows(), d + 1);
  xt << x_train, Eigen::VectorXd::Ones(x_train.rows());
  Eigen::MatrixXd a = xt.transpose() * xt;
  a.diagonal().array() += 1e-6;
  return a.ldlt().solve(xt.transpose() * y_train);
}

}  // namespace

ReadoutResult linear_readout(const std::vector<std::vector<double>>& embeds,
                             const std::vector<double>& targets, int n_train) {
  Split s = make_split_matrices(embeds, targets, n_train);
  int d = static_cast<int>(s.x_train.cols());
  Eigen::VectorXd w = ridge_solve(s.x_train, s.y_train);
  Eigen::MatrixXd xq(s.x_test.rows(), d + 1);
  xq << s.x_test, Eigen::VectorXd::Ones(s.x_test.rows());
  return score(xq * w, s.y_test, "linear", n_train);
}

std::vector<double> ridge_coefficients(const std::vector<std::vector<double>>& embeds,
                                       const std::vector<double>& targets,
                                       int n_train) {
  Split s = make_split_matrices(embeds, targets, n_train);
  Eigen::VectorXd w = ridge_solve(s.x_train, s.y_train);
  return std::vector<double>(w.data(), w.data() + w.size());
}

ReadoutResult nonlinear_readout(const std::vector<std::vector<double>>& embeds,
                                const std::vector<double>& targets, int n_train,
                                std::uint64_t seed) {
  Split s = make_split_matrices(embeds, targets, n_train);
  int d = static_cast<int>(s.x_train.cols());
  int n = static_cast<int>(s.x_train.rows());
  const int hidden = 64;

  // Standardize inputs and target on the training split.
  Eigen::VectorXd x_mean = s.x_train.colwise().mean();
  Eigen::VectorXd x_std(d);
  for (int j = 0; j < d; ++j) {
    double var = (s.x_train.col(j).array() - x_mean(j)).square().mean();
    x_std(j) = std::sqrt(std::max(var, 1e-12));
  }
  double y_mean = s.y_train.mean();
  double y_std = std::sqrt(std::max((s.y_train.array() - y_mean).square().mean(), 1e-12));

  auto standardize = [&](const Eigen::MatrixXd& x) {
    Tensor t({static_cast<int>(x.rows()), d});
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < d; ++j)
        t.v[static_cast<std::size_t>(i) * d + j] = (x(i, j) - x_mean(j)) / x_std(j);
    return t;
  };

  Rng rng = Rng::derive(seed, "nonlinear-readout");
  Tensor w1({hidden, d}), b1({hidden}), w2({1, hidden}), b2({1});
  double lim1 = std::sqrt(6.0 / (d + hidden));
  for (double& v : w1.v) v = rng.uniform(-lim1, lim1);
  double lim2 = std::sqrt(6.0 / (hidden + 1));
  for (double& v : w2.v) v = rng.uniform(-lim2, lim2);
  Tensor m1(w1.shape), v1(w1.shape), mb1(b1.shape), vb1(b1.shape);
  Tensor m2(w2.shape), v2(w2.shape), mb2(b2.shape), vb2(b2.shape);

  Tensor x_in = standardize(s.x_train);
  Tensor y_in({n, 1});
  for (int i = 0; i < n; ++i) y_in.v[i] = (s.y_train(i) - y_mean) / y_std;

  const int epochs = 500;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    Tape tape;
    int x = tape.input(x_in, false);
    int y = tape.input(y_in, false);
    int iw1 = tape.input(w1, true), ib1 = tape.input(b1, true);
    int iw2 = tape.input(w2, true), ib2 = tape.input(b2, true);
    int hid = tape.tanh_(tape.linear(x, iw1, ib1));
    int pred = tape.linear(hid, iw2, ib2);
    int diff = tape.add(pred, tape.scale(y, -1.0));
    int loss = tape.mean_all(tape.mul(diff, diff));
    tape.backward(loss);
    adam_step(w1, tape.grad(iw1), m1, v1, 0.01, epoch);
    adam_step(b1, tape.grad(ib1), mb1, vb1, 0.01, epoch);
    adam_step(w2, tape.grad(iw2), m2, v2, 0.01, epoch);
    adam_step(b2, tape.grad(ib2), mb2, vb2, 0.01, epoch);
  }

  // Held-out predictions, un-standardized.
  Tape tape;
  int x = tape.input(standardize(s.x_test), false);
  int hid = tape.tanh_(tape.linear(x, tape.input(w1, false), tape.input(b1, false)));
  int pred = tape.linear(hid, tape.input(w2, false), tape.input(b2, false));
  Eigen::VectorXd yhat(s.x_test.rows());
  for (int i = 0; i < s.x_test.rows(); ++i)
    yhat(i) = tape.val(pred).v[i] * y_std + y_mean;
  return score(yhat, s.y_test, "nonlinear", n_train);
}

double arrangement_separability(const std::vector<std::vector<double>>& embeds,
                                const std::vector<std::string>& labels,
                                std::uint64_t seed) {
  if (embeds.size() != labels.size())
    throw std::invalid_argument("arrangement_separability: size mismatch");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2)
    throw std::invalid_argument("arrangement_separability: need >= 2 classes");
  for (const auto& [cls, idx] : by_class)
    if (idx.size() < 10)
      throw std::invalid_argument("arrangement_separability: class \"" + cls +
                                  "\" has fewer than 10 examples");

  std::map<std::string, int> class_index;
  for (const auto& [cls, idx] : by_class)
    class_index.emplace(cls, static_cast<int>(class_index.size()));
  int n_classes = static_cast<int>(class_index.size());

  // Stratified folds: per-class shuffle, then round-robin assignment.
  const int k_folds = 5;
  std::vector<int> fold_of(embeds.size(), 0);
  for (auto& [cls, idx] : by_class) {
    Rng rng = Rng::derive(seed, "cv-folds", Rng::fnv1a(cls));
    std::vector<std::size_t> shuffled = idx;
    rng.shuffle(shuffled);
    for (std::size_t i = 0; i < shuffled.size(); ++i)
      fold_of[shuffled[i]] = static_cast<int>(i % k_folds);
  }

  double acc_sum = 0.0;
  for (int fold = 0; fold < k_folds; ++fold) {
    std::vector<std::pair<std::vector<double>, int>> train, test;
    for (std::size_t i = 0; i < embeds.size(); ++i) {
      auto item = std::make_pair(embeds[i], class_index[labels[i]]);
      (fold_of[i] == fold ? test : train).push_back(std::move(item));
    }
    LinearHead head = fit_linear(train, n_classes);
    int correct = 0;
    for (const auto& [x, y] : test) {
      int best = 0;
      double best_score = -1e300;
      for (int c = 0; c < n_classes; ++c) {
        double acc = head.bias[c];
        const double* w = &head.weights[static_cast<std::size_t>(c) * head.dim];
        for (int i = 0; i < head.dim; ++i) acc += w[i] * x[i];
        if (acc > best_score) {
          best_score = acc;
          best = c;
        }
      }
      if (best == y) ++correct;
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(test.size());
  }
  return acc_sum / k_folds;
}

std::vector<double> concept_arithmetic(const std::vector<double>& z_a,
                                       const std::vector<double>& z_b,
                                       const std::vector<double>& z_c) {
  if (z_a.size() != z_b.size() || z_a.size() != z_c.size())
    throw std::invalid_argument("concept_arithmetic: dim mismatch");
  std::vector<double> out(z_a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z_a[i] - z_b[i] + z_c[i];
  return out;
}

std::vector<std::vector<double>> interpolate_grid(
    const std::vector<std::vector<double>>& corners, int steps) {
  if (corners.size() != 4) throw std::invalid_argument("interpolate_grid: need 4 corners");
  if (steps < 2) throw std::invalid_argument("interpolate_grid: steps < 2");
  std::size_t d = corners[0].size();
  for (const auto& c : corners)
    if (c.size() != d) throw std::invalid_argument("interpolate_grid: dim mismatch");

  std::vector<std::vector<double>> grid;
  grid.reserve(static_cast<std::size_t>(steps) * steps);
  for (int i = 0; i < steps; ++i) {
    double v = static_cast<double>(i) / (steps - 1);
    for (int j = 0; j < steps; ++j) {
      double u = static_cast<double>(j) / (steps - 1);
      std::vector<double> z(d);
      for (std::size_t k = 0; k < d; ++k)
        z[k] = (1 - u) * (1 - v) * corners[0][k] + u * (1 - v) * corners[1][k] +
               (1 - u) * v * corners[2][k] + u * v * corners[3][k];
      grid.push_back(std::move(z));
    }
  }
  return grid;
}

PcaResult pca_project(const std::vector<std::vector<double>>& embeds, int dims) {
  int n = static_cast<int>(embeds.size());
  if (n < dims + 1) throw std::invalid_argument("pca_project: need >= dims+1 examples");
  int d = static_cast<int>(embeds[0].size());
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = embeds[i][j];
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success)
    throw std::runtime_error("pca_project: eigendecomposition failed");

  // Eigenvalues ascend; walk from the top.
  Eigen::VectorXd evals = eig.eigenvalues();
  double total = std::max(evals.sum(), 0.0);
  double tol = 1e-12 * std::max(1.0, evals(d - 1));
  PcaResult res;
  Eigen::MatrixXd axes(d, dims);
  for (int k = 0; k < dims; ++k) {
    int src = d - 1 - k;
    if (evals(src) <= tol)
      throw std::runtime_error("pca_project: rank deficiency below requested dims");
    Eigen::VectorXd axis = eig.eigenvectors().col(src);
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(axis(j)) > std::abs(axis(arg))) arg = j;
    if (axis(arg) < 0) axis = -axis;
    axes.col(k) = axis;
    res.explained_ratio.push_back(total > 0 ? evals(src) / total : 0.0);
  }
  Eigen::MatrixXd proj = x * axes;
  res.coords.resize(n);
  for (int i = 0; i < n; ++i) {
    res.coords[i].resize(dims);
    for (int k = 0; k < dims; ++k) res.coords[i][k] = proj(i, k);
  }
  return res;
}

// --- recognizability ---

namespace {

struct ConvClassifier {
  Tensor w1{{8, 1, 3, 3}}, g1{{8}}, be1{{8}};
  Tensor w2{{16, 8, 3, 3}}, g2{{16}}, be2{{16}};
  Tensor wfc, bfc;
  int n_classes = 0;
  int h = 0, w = 0;

  std::vector<Tensor*> all() { return {&w1, &g1, &be1, &w2, &g2, &be2, &wfc, &bfc}; }
};

int classifier_logits(Tape& tape, ConvClassifier& net, const std::vector<int>& ids,
                      Tensor images) {
  int x = tape.input(std::move(images), false);
  x = tape.maxpool2(tape.relu(tape.instance_norm(tape.conv2d_same(x, ids[0]), ids[1], ids[2])));
  x = tape.maxpool2(tape.relu(tape.instance_norm(tape.conv2d_same(x, ids[3]), ids[4], ids[5])));
  return tape.linear(tape.flatten2(x), ids[6], ids[7]);
}

Tensor images_tensor(const std::vector<const LabeledImage*>& batch, int h, int w) {
  Tensor t({static_cast<int>(batch.size()), 1, h, w});
  std::size_t px = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->image.h != h || batch[i]->image.w != w)
      throw std::invalid_argument("recognizability: image dims differ");
    std::memcpy(&t.v[i * px], batch[i]->image.data.data(), px * sizeof(double));
  }
  return t;
}

double classify_accuracy(ConvClassifier& net,
                         const std::vector<const LabeledImage*>& items,
                         const std::map<std::string, int>& class_index) {
  if (items.empty()) return 0.0;
  int correct = 0;
  const int chunk = 64;
  for (std::size_t at = 0; at < items.size(); at += chunk) {
    std::size_t n = std::min<std::size_t>(chunk, items.size() - at);
    std::vector<const LabeledImage*> batch(items.begin() + at, items.begin() + at + n);
    Tape tape;
    std::vector<int> ids;
    for (Tensor* p : net.all()) ids.push_back(tape.input(*p, false));
    int logits = classifier_logits(tape, net, ids, images_tensor(batch, net.h, net.w));
    const Tensor& lv = tape.val(logits);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = &lv.v[i * net.n_classes];
      int best = 0;
      for (int c = 1; c < net.n_classes; ++c)
        if (row[c] > row[best]) best = c;
      if (best == class_index.at(batch[i]->class_id)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

}  // namespace

RecognizabilityResult recognizability(const std::vector<LabeledImage>& train_renders,
                                      const std::vector<LabeledImage>& gen_renders,
                                      std::uint64_t seed, int train_steps) {
  if (train_renders.empty() || gen_renders.empty())
    throw std::invalid_argument("recognizability: empty input");
  std::map<std::string, int> class_index;
  for (const auto& r : train_renders)
    class_index.emplace(r.class_id, static_cast<int>(class_index.size()));
  for (const auto& r : gen_renders)
    if (!class_index.count(r.class_id))
      throw std::invalid_argument("recognizability: class count mismatch (\"" +
                                  r.class_id + "\" unseen in training renders)");

  int h = train_renders[0].image.h;
  int w = train_renders[0].image.w;
  ConvClassifier net;
  net.n_classes = static_cast<int>(class_index.size());
  net.h = h;
  net.w = w;
  int flat = 16 * (h / 4) * (w / 4);
  net.wfc = Tensor({net.n_classes, flat});
  net.bfc = Tensor({net.n_classes});
  Rng rng = Rng::derive(seed, "recognizability-init");
  auto glorot = [&rng](Tensor& t, int fin, int fout) {
    double lim = std::sqrt(6.0 / (fin + fout));
    for (double& v : t.v) v = rng.uniform(-lim, lim);
  };
  glorot(net.w1, 9, 8 * 9);
  glorot(net.w2, 8 * 9, 16 * 9);
  glorot(net.wfc, flat, net.n_classes);
  for (double& v : net.g1.v) v = 1.0;
  for (double& v : net.g2.v) v = 1.0;

  // Train/held-out split of the ground-truth renders, disjoint by id.
  std::vector<const LabeledImage*> items;
  for (const auto& r : train_renders) items.push_back(&r);
  Rng split_rng = Rng::derive(seed, "recognizability-split");
  split_rng.shuffle(items);
  std::size_t n_held = std::max<std::size_t>(1, items.size() / 5);
  std::vector<const LabeledImage*> held(items.begin(), items.begin() + n_held);
  std::vector<const LabeledImage*> train(items.begin() + n_held, items.end());

  std::vector<Tensor> adam_m, adam_v;
  for (Tensor* p : net.all()) {
    adam_m.emplace_back(p->shape);
    adam_v.emplace_back(p->shape);
  }

  const int batch_size = 32;
  for (int step = 1; step <= train_steps; ++step) {
    Rng brng = Rng::derive(seed, "recognizability-batch", step);
    std::vector<const LabeledImage*> batch(batch_size);
    for (int i = 0; i < batch_size; ++i)
      batch[i] = train[brng.below(train.size())];

    Tape tape;
    std::vector<int> ids;
    for (Tensor* p : net.all()) ids.push_back(tape.input(*p, true));
    int logits = classifier_logits(tape, net, ids, images_tensor(batch, h, w));

    // Softmax CE from logsumexp and a one-hot pick:
    // mean_b LSE_b  -  (N / BN) * sum(one_hot .* logits).
    Tensor onehot({batch_size, net.n_classes});
    for (int i = 0; i < batch_size; ++i)
      onehot.v[static_cast<std::size_t>(i) * net.n_classes +
               class_index.at(batch[i]->class_id)] = 1.0;
    int lse = tape.logsumexp_rows(logits);
    int picked = tape.mul(logits, tape.input(std::move(onehot), false));
    int loss = tape.add(tape.mean_all(lse),
                        tape.scale(tape.mean_all(picked), -double(net.n_classes)));
    tape.backward(loss);

    auto params = net.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor g = tape.grad(ids[i]);
      if (g.v.empty()) g = Tensor(params[i]->shape);
      clip_grads(g.v, 1.0);
      adam_step(*params[i], g, adam_m[i], adam_v[i], 1e-3, step);
    }
  }

  // Generated items that share an id with a training example would leak the
  // classifier's own training data into gen_acc; drop them.
  std::set<std::string> trained_ids;
  for (const LabeledImage* r : train) trained_ids.insert(r->id);
  std::vector<const LabeledImage*> gen_items;
  for (const auto& r : gen_renders)
    if (!trained_ids.count(r.id)) gen_items.push_back(&r);

  RecognizabilityResult res;
  res.train_acc = classify_accuracy(net, held, class_index);
  res.gen_acc = classify_accuracy(net, gen_items, class_index);
  return res;
}

}  // namespace skem
