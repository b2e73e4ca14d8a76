#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sketchembed/raster.hpp"

namespace skem {

struct ReadoutResult {
  double r2 = 0.0;
  double mse = 0.0;
  std::string model_kind;  // "linear" | "nonlinear"
  int n_train = 0;
};

// Ridge least squares (lambda 1e-6, bias column) on the first n_train rows;
// R^2 and MSE on the held-out remainder. Throws on constant targets.
ReadoutResult linear_readout(const std::vector<std::vector<double>>& embeds,
                             const std::vector<double>& targets, int n_train);

// The fitted ridge weights (bias last), exposed so the fit itself can be
// checked against a normal-equations oracle.
std::vector<double> ridge_coefficients(const std::vector<std::vector<double>>& embeds,
                                       const std::vector<double>& targets,
                                       int n_train);

// One-hidden-layer (64 tanh units) regressor trained with Adam at a fixed
// seed; same split and metrics as linear_readout.
ReadoutResult nonlinear_readout(const std::vector<std::vector<double>>& embeds,
                                const std::vector<double>& targets, int n_train,
                                std::uint64_t seed = 0);

// 5-fold cross-validated linear-probe accuracy; folds are stratified and
// deterministic in seed. Needs >= 10 examples per class.
double arrangement_separability(const std::vector<std::vector<double>>& embeds,
                                const std::vector<std::string>& labels,
                                std::uint64_t seed = 0);

// z_a - z_b + z_c.
std::vector<double> concept_arithmetic(const std::vector<double>& z_a,
                                       const std::vector<double>& z_b,
                                       const std::vector<double>& z_c);

// Bilinear interpolation over the unit square; corners ordered top-left,
// top-right, bottom-left, bottom-right; result is row-major steps x steps.
std::vector<std::vector<double>> interpolate_grid(
    const std::vector<std::vector<double>>& corners, int steps);

struct PcaResult {
  std::vector<std::vector<double>> coords;  // n x dims
  std::vector<double> explained_ratio;      // per selected component
};

// Mean-centered projection onto the top principal axes; the largest-magnitude
// loading of each axis is made positive.
PcaResult pca_project(const std::vector<std::vector<double>>& embeds, int dims = 2);

struct LabeledImage {
  std::string id;
  std::string class_id;
  PixelImage image;
};

struct RecognizabilityResult {
  double train_acc = 0.0;  // held-out ground-truth accuracy
  double gen_acc = 0.0;    // accuracy on generated renders
};

// Trains a small conv classifier on rendered ground-truth sketches (80/20
// split, disjoint by id) and reports held-out accuracy plus accuracy on
// generated renders. Generated items whose id was part of the classifier's
// training split are excluded from gen_acc, so copies of the ground truth
// score exactly the held-out accuracy. Classes in gen_renders must all
// appear in train_renders.
RecognizabilityResult recognizability(const std::vector<LabeledImage>& train_renders,
                                      const std::vector<LabeledImage>& gen_renders,
                                      std::uint64_t seed = 0, int train_steps = 400);

}  // namespace skem
