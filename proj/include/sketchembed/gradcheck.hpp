#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace skem {

struct GradCheckResult {
  std::string name;
  int instances = 0;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Central finite-difference verification of every tape op, the raster
// pixel-loss gradient and the end-to-end alpha=0 objective on a tiny model.
// Raster and end-to-end checks run at tol_raster, op checks at tol_ops.
std::vector<GradCheckResult> run_gradchecks(double tol_ops, double tol_raster,
                                            std::uint64_t seed);

}  // namespace skem
