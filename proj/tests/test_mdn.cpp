#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sketchembed/mdn.hpp"
#include "sketchembed/rng.hpp"

using namespace skem;

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;

std::vector<double> random_raw(std::size_t m, Rng& rng, double span = 2.0) {
  std::vector<double> raw(mdn_raw_width(m));
  for (double& v : raw) v = rng.uniform(-span, span);
  return raw;
}

// Mixture NLL without log-sum-exp: direct density accumulation. Kept as the
// independent oracle for stroke_nll.
double brute_force_nll(const MdnParams& p, double dx, double dy) {
  double density = 0.0;
  for (std::size_t j = 0; j < p.mixtures(); ++j)
    density += p.pi[j] * bivariate_density(dx, dy, p.mu_x[j], p.mu_y[j],
                                           p.sigma_x[j], p.sigma_y[j], p.rho[j]);
  return -std::log(density);
}

}  // namespace

TEST_CASE("mdn_split at zero input gives the neutral mixture") {
  std::vector<double> raw(mdn_raw_width(2), 0.0);
  MdnParams p = mdn_split(raw, 2);
  CHECK(p.pi[0] == doctest::Approx(0.5));
  CHECK(p.pi[1] == doctest::Approx(0.5));
  CHECK(p.sigma_x[0] == doctest::Approx(1.0));
  CHECK(p.sigma_y[1] == doctest::Approx(1.0));
  CHECK(p.rho[0] == doctest::Approx(0.0));
  for (int i = 0; i < 3; ++i) CHECK(p.pen[i] == doctest::Approx(1.0 / 3));
}

TEST_CASE("mdn_split pi is invariant to a constant logit shift") {
  Rng rng(1);
  auto raw = random_raw(4, rng);
  MdnParams a = mdn_split(raw, 4);
  for (std::size_t j = 0; j < 4; ++j) raw[j] += 7.25;
  MdnParams b = mdn_split(raw, 4);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(a.pi[j] == doctest::Approx(b.pi[j]).epsilon(1e-12));
}

TEST_CASE("mdn_split invariants hold over random draws") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    auto raw = random_raw(30, rng, 6.0);
    MdnParams p = mdn_split(raw, 30);
    double pi_sum = std::accumulate(p.pi.begin(), p.pi.end(), 0.0);
    CHECK(pi_sum == doctest::Approx(1.0).epsilon(1e-6));
    double pen_sum = p.pen[0] + p.pen[1] + p.pen[2];
    CHECK(pen_sum == doctest::Approx(1.0).epsilon(1e-6));
    for (std::size_t j = 0; j < 30; ++j) {
      CHECK(p.pi[j] >= 0.0);
      CHECK(p.sigma_x[j] > 0.0);
      CHECK(p.sigma_y[j] > 0.0);
      CHECK(std::abs(p.rho[j]) < 1.0);
    }
  }
}

TEST_CASE("mdn_split rejects wrong-length input") {
  std::vector<double> raw(10, 0.0);
  CHECK_THROWS(mdn_split(raw, 2));
}

TEST_CASE("bivariate density at the mean equals 1/(2 pi sx sy sqrt(1-r^2))") {
  CHECK(bivariate_density(0, 0, 0, 0, 1, 1, 0) == doctest::Approx(1.0 / kTwoPi));
  CHECK(bivariate_density(3, -2, 3, -2, 0.5, 2.0, 0.6) ==
        doctest::Approx(1.0 / (kTwoPi * 0.5 * 2.0 * std::sqrt(1 - 0.36))));
}

TEST_CASE("bivariate density factorizes when rho is zero") {
  auto normal1d = [](double x, double mu, double s) {
    return std::exp(-0.5 * (x - mu) * (x - mu) / (s * s)) / (s * std::sqrt(kTwoPi));
  };
  double got = bivariate_density(0.7, -1.2, 0.3, 0.4, 1.4, 0.8, 0.0);
  double want = normal1d(0.7, 0.3, 1.4) * normal1d(-1.2, 0.4, 0.8);
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("bivariate density integrates to one") {
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    double mx = rng.uniform(-1, 1), my = rng.uniform(-1, 1);
    double sx = rng.uniform(0.5, 2), sy = rng.uniform(0.5, 2);
    double rho = rng.uniform(-0.8, 0.8);
    const int n = 400;
    double span_x = 8 * sx, span_y = 8 * sy;
    double hx = 2 * span_x / n, hy = 2 * span_y / n;
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double x = mx - span_x + (i + 0.5) * hx;
        double y = my - span_y + (j + 0.5) * hy;
        acc += bivariate_density(x, y, mx, my, sx, sy, rho);
      }
    acc *= hx * hy;
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("stroke_nll worked example: single component at its mean") {
  std::vector<double> raw(mdn_raw_width(1), 0.0);
  MdnParams p = mdn_split(raw, 1);
  Sketch target;
  target.strokes.push_back(start_token());
  target.strokes.push_back(Stroke5{0, 0, 0, 0, 1});
  std::vector<MdnParams> seq{p};
  std::vector<int> mask{1};
  CHECK(stroke_nll(seq, target, mask) == doctest::Approx(std::log(kTwoPi)).epsilon(1e-12));
}

TEST_CASE("duplicating a component at half weight leaves the NLL unchanged") {
  Rng rng(4);
  auto raw = random_raw(1, rng);
  MdnParams one = mdn_split(raw, 1);
  MdnParams two = one;
  two.pi = {0.5, 0.5};
  for (auto* f : {&two.mu_x, &two.mu_y, &two.sigma_x, &two.sigma_y, &two.rho})
    f->push_back((*f)[0]);
  CHECK(mixture_log_density(one, 0.3, -0.7) ==
        doctest::Approx(mixture_log_density(two, 0.3, -0.7)).epsilon(1e-12));
}

TEST_CASE("NLL increases as the target moves away from all means") {
  std::vector<double> raw(mdn_raw_width(2), 0.0);
  MdnParams p = mdn_split(raw, 2);
  double prev = -1e300;
  for (double r = 0.0; r < 4.0; r += 0.5) {
    double nll = -mixture_log_density(p, r, r);
    CHECK(nll > prev);
    prev = nll;
  }
}

TEST_CASE("stroke_nll matches the brute-force oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t m = 1 + trial % 5;
    auto raw = random_raw(m, rng, 1.5);
    MdnParams p = mdn_split(raw, m);
    double dx = rng.uniform(-2, 2), dy = rng.uniform(-2, 2);
    double via_lse = -mixture_log_density(p, dx, dy);
    double via_sum = brute_force_nll(p, dx, dy);
    CHECK(via_lse == doctest::Approx(via_sum).epsilon(1e-9));
  }
}

TEST_CASE("stroke_nll averages only masked steps but divides by T") {
  std::vector<double> raw(mdn_raw_width(1), 0.0);
  MdnParams p = mdn_split(raw, 1);
  Sketch target;
  target.strokes.push_back(start_token());
  target.strokes.push_back(Stroke5{0, 0, 0, 0, 1});
  target.strokes.push_back(padding_token());
  target.strokes.push_back(padding_token());
  std::vector<MdnParams> seq{p, p, p};
  std::vector<int> mask = stroke_mask(target);
  REQUIRE(mask == std::vector<int>{1, 0, 0});
  CHECK(stroke_nll(seq, target, mask) ==
        doctest::Approx(std::log(kTwoPi) / 3.0).epsilon(1e-12));
}

TEST_CASE("pen_loss worked examples") {
  std::vector<double> raw(mdn_raw_width(1), 0.0);
  MdnParams uniform = mdn_split(raw, 1);
  MdnParams perfect = uniform;
  perfect.pen[0] = 1.0;
  perfect.pen[1] = 0.0;
  perfect.pen[2] = 0.0;
  MdnParams clamped = uniform;
  clamped.pen[0] = 1e-7;
  clamped.pen[1] = 1.0 - 2e-7;
  clamped.pen[2] = 1e-7;

  std::vector<int> target{0};
  CHECK(pen_loss(std::vector<MdnParams>{perfect}, target) == doctest::Approx(0.0));
  CHECK(pen_loss(std::vector<MdnParams>{uniform}, target) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(pen_loss(std::vector<MdnParams>{clamped}, target) ==
        doctest::Approx(16.118).epsilon(1e-3));
}

TEST_CASE("sample_offsets degenerates to the mean at tiny sigma") {
  MdnParams p;
  p.pi = {1.0};
  p.mu_x = {1.5};
  p.mu_y = {-2.5};
  p.sigma_x = {1e-12};
  p.sigma_y = {1e-12};
  p.rho = {0.0};
  p.pen[0] = 1;
  Rng rng(6);
  OffsetSample s = sample_offsets(p, 1.0, rng);
  CHECK(s.dx == doctest::Approx(1.5).epsilon(1e-9));
  CHECK(s.dy == doctest::Approx(-2.5).epsilon(1e-9));
}

TEST_CASE("sampled offsets reproduce the component correlation") {
  MdnParams p;
  p.pi = {1.0};
  p.mu_x = {0.0};
  p.mu_y = {0.0};
  p.sigma_x = {1.0};
  p.sigma_y = {1.0};
  p.rho = {0.8};
  p.pen[0] = 1;
  Rng rng(7);
  const int n = 100000;
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    OffsetSample s = sample_offsets(p, 1.0, rng);
    sx += s.dx;
    sy += s.dy;
    sxx += s.dx * s.dx;
    syy += s.dy * s.dy;
    sxy += s.dx * s.dy;
  }
  double mx = sx / n, my = sy / n;
  double corr = (sxy / n - mx * my) /
                std::sqrt((sxx / n - mx * mx) * (syy / n - my * my));
  CHECK(corr == doctest::Approx(0.8).epsilon(0.025));
}

TEST_CASE("component frequencies track pi") {
  MdnParams p;
  p.pi = {0.6, 0.3, 0.1};
  p.mu_x = {0, 0, 0};
  p.mu_y = {0, 0, 0};
  p.sigma_x = {1, 1, 1};
  p.sigma_y = {1, 1, 1};
  p.rho = {0, 0, 0};
  p.pen[0] = 1;
  Rng rng(8);
  const int n = 100000;
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[sample_offsets(p, 1.0, rng).component];
  for (int j = 0; j < 3; ++j)
    CHECK(static_cast<double>(counts[j]) / n == doctest::Approx(p.pi[j]).epsilon(0.07));
}

TEST_CASE("total_loss applies the exact curriculum weighting") {
  CHECK(total_loss(1.0, 2.0, 4.0, 0.0) == doctest::Approx(3.0));
  CHECK(total_loss(1.0, 2.0, 4.0, 1.0) == doctest::Approx(5.0));
  CHECK(total_loss(1.0, 2.0, 4.0, 0.5) == doctest::Approx(4.0));
  CHECK_THROWS(total_loss(1, 1, 1, 1.5));
}

TEST_CASE("total_loss is affine in each component") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    double a = rng.uniform(0, 1);
    double p = rng.uniform(-2, 2), s = rng.uniform(-2, 2), x = rng.uniform(-2, 2);
    CHECK(total_loss(p, s, x, a) ==
          doctest::Approx(p + (1 - a) * s + a * x).epsilon(1e-12));
  }
}

TEST_CASE("alpha schedule reproduces the published curve") {
  AlphaSchedule sched;  // 0.05 per 10k, cap 0.5
  CHECK(alpha_at(0, sched) == doctest::Approx(0.0));
  CHECK(alpha_at(9999, sched) == doctest::Approx(0.0));
  CHECK(alpha_at(10000, sched) == doctest::Approx(0.05));
  CHECK(alpha_at(1000000000LL, sched) == doctest::Approx(0.5));
  sched.alpha_max = 0.75;
  CHECK(alpha_at(1000000000LL, sched) == doctest::Approx(0.75));
}

TEST_CASE("alpha schedule is non-decreasing and capped") {
  AlphaSchedule sched;
  sched.step_size = 0.05;
  sched.interval = 250;
  sched.alpha_max = 0.5;
  double prev = -1.0;
  for (long long step = 0; step < 5000; step += 50) {
    double a = alpha_at(step, sched);
    CHECK(a >= prev);
    CHECK(a <= 0.5);
    prev = a;
  }
}
