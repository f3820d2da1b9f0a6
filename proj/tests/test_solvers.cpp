#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "bncde/control_path.hpp"
#include "bncde/rng.hpp"
#include "bncde/solvers.hpp"

using namespace bncde;
using solvers::Mat;
using solvers::SdeOptions;
using solvers::TimeGrid;
using solvers::Vec;

namespace {

controlpath::HermitePath line_path(double horizon) {
  // X(t) = t, exactly representable by the spline.
  controlpath::SamplePath s;
  s.timestamps = Vec::LinSpaced(2, 0.0, horizon);
  s.channels = s.timestamps;
  return controlpath::build_hermite(s);
}

}  // namespace

TEST_CASE("make_grid examples and properties") {
  const TimeGrid g1 = solvers::make_grid({0.0, 55.0}, 55.0, 55.0);
  CHECK(g1.num_points() == 2);
  CHECK(g1.points[0] == 0.0);
  CHECK(g1.points[1] == 55.0);

  const TimeGrid g2 = solvers::make_grid({0.0, 1.0, 2.0}, 2.0, 0.5);
  REQUIRE(g2.num_points() == 5);
  for (int i = 0; i < 5; ++i) CHECK(g2.points[i] == doctest::Approx(0.5 * i));
  CHECK(g2.is_observation[0]);
  CHECK_FALSE(g2.is_observation[1]);

  Rng rng(1);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<double> obs;
    const double horizon = 5.0 + 20.0 * rng.uniform();
    const int n = 1 + static_cast<int>(rng.next_u64() % 8);
    for (int i = 0; i < n; ++i) obs.push_back(horizon * rng.uniform());
    const double h_max = 0.2 + rng.uniform();
    const TimeGrid g = solvers::make_grid(obs, horizon, h_max);
    for (int k = 0; k + 1 < g.num_points(); ++k)
      CHECK(g.points[k + 1] - g.points[k] <= h_max + 1e-9);
    for (double t : obs) {
      bool found = false;
      for (int k = 0; k < g.num_points(); ++k)
        if (std::abs(g.points[k] - t) < 1e-9) found = true;
      CHECK(found);
    }
  }

  CHECK_THROWS_AS((void)solvers::make_grid({}, 0.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS((void)solvers::make_grid({}, -1.0, 0.5), std::invalid_argument);
}

TEST_CASE("path-space KL oracle") {
  const TimeGrid grid = solvers::make_grid({}, 7.0, 0.25);
  auto prior = [](const Vec& w, double) -> Vec { return -w; };

  SUBCASE("matching drifts accumulate exactly zero") {
    Rng rng(2);
    SdeOptions opts{0.05, false, 1.0};
    const auto s = solvers::euler_maruyama(prior, prior, Vec::Ones(4), grid, opts, rng);
    CHECK(s.kl_accumulator == 0.0);
  }
  SUBCASE("constant drift offset integrates to (|c|/sigma)^2 T") {
    Rng rng(3);
    Vec c(3);
    c << 0.4, -0.1, 0.25;
    auto drift = [&](const Vec& w, double) -> Vec { return -w + c; };
    const double sigma = 0.07;
    SdeOptions opts{sigma, false, 1.0};
    const auto s = solvers::euler_maruyama(drift, prior, Vec::Zero(3), grid, opts, rng);
    const double expected = c.squaredNorm() / (sigma * sigma) * 7.0;
    CHECK(std::abs(s.kl_accumulator - expected) / expected < 1e-10);
  }
  SUBCASE("half-factor flag rescales the accumulator") {
    Vec c(2);
    c << 0.3, 0.5;
    auto drift = [&](const Vec& w, double) -> Vec { return -w + c; };
    Rng rng_a(4), rng_b(4);
    SdeOptions full{0.1, false, 1.0}, half{0.1, true, 1.0};
    const auto a = solvers::euler_maruyama(drift, prior, Vec::Zero(2), grid, full, rng_a);
    const auto b = solvers::euler_maruyama(drift, prior, Vec::Zero(2), grid, half, rng_b);
    CHECK(b.kl_accumulator == doctest::Approx(0.5 * a.kl_accumulator).epsilon(1e-12));
  }
  SUBCASE("KL is non-negative for random drifts") {
    Rng rng(5);
    for (int rep = 0; rep < 100; ++rep) {
      const double scale = rng.uniform();
      auto drift = [&](const Vec& w, double t) -> Vec {
        return (-w).array().sin().matrix() * scale + Vec::Constant(w.size(), 0.1 * t);
      };
      SdeOptions opts{0.01 + rng.uniform(), rng.uniform() < 0.5, 1.0};
      Rng path_rng(rng.next_u64());
      const auto s =
          solvers::euler_maruyama(drift, prior, Vec::Zero(2), grid, opts, path_rng);
      CHECK(s.kl_accumulator >= 0.0);
    }
  }
}

TEST_CASE("Brownian increment variance is sigma^2 T") {
  // g == 0 makes omega a pure Brownian path after the initial draw.
  const TimeGrid grid = solvers::make_grid({}, 1.0, 0.05);
  auto zero_drift = [](const Vec& w, double) -> Vec { return Vec::Zero(w.size()); };
  const double sigma = 0.1;
  SdeOptions opts{sigma, false, 1.0};

  const int n_paths = 10000;
  const int d = 3;
  Mat increments(n_paths, d);
  Rng rng(6);
  for (int p = 0; p < n_paths; ++p) {
    Rng path_rng(rng.next_u64());
    const auto s =
        solvers::euler_maruyama(zero_drift, zero_drift, Vec::Zero(d), grid, opts, path_rng);
    increments.row(p) = s.weights_at_grid.row(s.weights_at_grid.rows() - 1) -
                        s.weights_at_grid.row(0);
  }
  for (int c = 0; c < d; ++c) {
    const double mean = increments.col(c).mean();
    const double var =
        (increments.col(c).array() - mean).square().sum() / (n_paths - 1);
    const double expected = sigma * sigma * 1.0;
    const double se = expected * std::sqrt(2.0 / (n_paths - 1));
    CHECK(std::abs(var - expected) < 3.0 * se);
  }
}

TEST_CASE("cde basics") {
  const TimeGrid grid = solvers::make_grid({}, 1.0, 0.1);
  solvers::SdePathSample unused;
  unused.weights_at_grid = Mat::Zero(grid.num_points(), 1);

  SUBCASE("zero field leaves the state constant") {
    auto field = [](const Vec&, double, const Vec&) -> Vec { return Vec::Zero(1); };
    Vec z0(1);
    z0 << 2.5;
    const Mat z = solvers::integrate_cde(field, line_path(1.0), z0, unused, grid, 1, 1);
    for (int k = 0; k < grid.num_points(); ++k) CHECK(z(k, 0) == 2.5);
  }
  SUBCASE("unit field against X(t) = t telescopes to z0 + T") {
    auto field = [](const Vec&, double, const Vec&) -> Vec { return Vec::Ones(1); };
    Vec z0(1);
    z0 << -0.75;
    const Mat z = solvers::integrate_cde(field, line_path(1.0), z0, unused, grid, 1, 1);
    CHECK(z(grid.num_points() - 1, 0) == doctest::Approx(-0.75 + 1.0).epsilon(1e-12));
  }
  SUBCASE("grid mismatch is a contract error") {
    auto field = [](const Vec&, double, const Vec&) -> Vec { return Vec::Ones(1); };
    solvers::SdePathSample bad;
    bad.weights_at_grid = Mat::Zero(3, 1);
    Vec z0(1);
    z0 << 0.0;
    CHECK_THROWS_AS(
        (void)solvers::integrate_cde(field, line_path(1.0), z0, bad, grid, 1, 1),
        std::logic_error);
  }
}

TEST_CASE("euler order: global error halves with the step") {
  // dz = z dt via a CDE controlled by X(t) = t; exact solution e * z0 at T=1.
  const double z0v = 1.3;
  auto field = [](const Vec& z, double, const Vec&) -> Vec { return z; };
  const auto path = line_path(1.0);

  std::vector<double> errors;
  for (double h : {0.1, 0.05, 0.025, 0.0125}) {
    const TimeGrid grid = solvers::make_grid({}, 1.0, h);
    solvers::SdePathSample unused;
    unused.weights_at_grid = Mat::Zero(grid.num_points(), 1);
    Vec z0(1);
    z0 << z0v;
    const Mat z = solvers::integrate_cde(field, path, z0, unused, grid, 1, 1);
    errors.push_back(std::abs(z(grid.num_points() - 1, 0) - std::exp(1.0) * z0v));
  }
  for (std::size_t i = 0; i + 1 < errors.size(); ++i) {
    const double ratio = errors[i] / errors[i + 1];
    CHECK(ratio > 1.7);
    CHECK(ratio < 2.3);
  }
}

TEST_CASE("coupled integration equals euler_maruyama followed by integrate_cde") {
  const TimeGrid grid = solvers::make_grid({0.4, 1.1}, 2.0, 0.3);
  auto drift = [](const Vec& w, double t) -> Vec {
    return -w + Vec::Constant(w.size(), 0.2 * std::sin(t));
  };
  auto prior = [](const Vec& w, double) -> Vec { return -w; };
  auto field = [](const Vec& z, double, const Vec& w) -> Vec {
    Vec f(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) f[i] = std::tanh(z[i] + w[0]);
    return f;
  };
  SdeOptions opts{0.05, false, 1.0};
  Vec nu = Vec::Constant(2, 0.3);
  Vec z0(1);
  z0 << 0.9;

  Rng rng_a(77);
  const auto coupled =
      solvers::coupled_integrate(drift, prior, nu, field, line_path(2.0), z0, grid,
                                 opts, rng_a, 1, 1);
  Rng rng_b(77);
  const auto sde = solvers::euler_maruyama(drift, prior, nu, grid, opts, rng_b);
  const Mat z = solvers::integrate_cde(field, line_path(2.0), z0, sde, grid, 1, 1);

  CHECK(coupled.sde.kl_accumulator == sde.kl_accumulator);
  CHECK((coupled.sde.weights_at_grid - sde.weights_at_grid).norm() == 0.0);
  CHECK((coupled.z_at_grid - z).norm() == 0.0);
}

TEST_CASE("endpoint integration matches the materializing path bitwise") {
  const TimeGrid grid = solvers::make_grid({0.7}, 2.0, 0.3);
  auto drift = [](const Vec& w, double t) -> Vec {
    return -w + Vec::Constant(w.size(), 0.1 * std::cos(t));
  };
  auto prior = [](const Vec& w, double) -> Vec { return -w; };
  auto field = [](const Vec& z, double, const Vec& w) -> Vec {
    Vec f(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) f[i] = std::tanh(z[i] - w[0]);
    return f;
  };
  SdeOptions opts{0.08, false, 1.0};
  Vec nu = Vec::Constant(3, 0.2);
  Vec z0(1);
  z0 << 0.4;
  Rng a(31), b(31);
  const auto full = solvers::coupled_integrate(drift, prior, nu, field, line_path(2.0),
                                               z0, grid, opts, a, 1, 1);
  const auto endpoint = solvers::coupled_integrate_endpoint(
      drift, prior, nu, field, line_path(2.0), z0, grid, opts, b, 1, 1);
  CHECK(endpoint.z_final[0] == full.z_at_grid(full.z_at_grid.rows() - 1, 0));
  CHECK(endpoint.kl == full.sde.kl_accumulator);
}

TEST_CASE("same seed reproduces the path bitwise") {
  const TimeGrid grid = solvers::make_grid({}, 1.5, 0.25);
  auto drift = [](const Vec& w, double) -> Vec { return -0.5 * w; };
  auto prior = [](const Vec& w, double) -> Vec { return -w; };
  SdeOptions opts{0.2, false, 1.0};
  Rng a(123), b(123);
  const auto s1 = solvers::euler_maruyama(drift, prior, Vec::Ones(3), grid, opts, a);
  const auto s2 = solvers::euler_maruyama(drift, prior, Vec::Ones(3), grid, opts, b);
  CHECK((s1.weights_at_grid - s2.weights_at_grid).norm() == 0.0);
  CHECK(s1.kl_accumulator == s2.kl_accumulator);
}

TEST_CASE("tape and numeric integration agree and gradients match finite differences") {
  // Tiny coupled configuration at h = 0.25: drift network is a 1-layer affine
  // map of [omega, t], field is tanh(w0 * z + w1).
  const TimeGrid grid = solvers::make_grid({}, 1.0, 0.25);
  const int d_omega = 2;
  SdeOptions opts{0.15, false, 1.0};
  Vec theta0(d_omega * (d_omega + 1) + d_omega);  // affine [d+1 -> d]
  theta0 << 0.3, -0.2, 0.1, 0.05, 0.2, -0.1, 0.02, -0.03;
  const Vec nu0 = Vec::Constant(d_omega, 0.4);
  Vec z0(1);
  z0 << 0.8;
  const auto control = line_path(1.0);

  auto run_numeric = [&](const Vec& theta, const Vec& nu, std::uint64_t seed) {
    auto drift = [&](const Vec& w, double t) -> Vec {
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>
          W(theta.data(), d_omega, d_omega + 1);
      return W.leftCols(d_omega) * w + t * W.col(d_omega) +
             theta.segment(d_omega * (d_omega + 1), d_omega) - w;
    };
    auto prior = [](const Vec& w, double) -> Vec { return -w; };
    auto field = [&](const Vec& z, double, const Vec& w) -> Vec {
      Vec f(1);
      f[0] = std::tanh(w[0] * z[0] + w[1]);
      return f;
    };
    Rng rng(seed);
    const auto res = solvers::coupled_integrate(drift, prior, nu, field, control, z0,
                                                grid, opts, rng, 1, 1);
    // Scalar loss: z(T)^2 + KL.
    const double zT = res.z_at_grid(res.z_at_grid.rows() - 1, 0);
    return zT * zT + res.sde.kl_accumulator;
  };

  auto run_tape = [&](const Vec& theta, const Vec& nu, std::uint64_t seed, Vec* g_theta,
                      Vec* g_nu) {
    autodiff::Tape tape;
    const auto theta_id = tape.leaf(theta);
    const auto nu_id = tape.leaf(nu);
    auto drift = [&](autodiff::Tape& t, autodiff::NodeId w, double time) {
      return t.sub(t.affine_flat_time(theta_id, 0, d_omega, d_omega + 1, w, time), w);
    };
    auto prior = [](autodiff::Tape& t, autodiff::NodeId w, double) { return t.neg(w); };
    auto field = [&](autodiff::Tape& t, autodiff::NodeId z, double, autodiff::NodeId w) {
      // tanh(w0 * z + w1) expressed with flat-affine ops: weights come from
      // the SDE state node itself.
      return t.tanh(t.affine_flat(w, 0, 1, 1, z));
    };
    Rng rng(seed);
    const auto res = solvers::coupled_integrate(tape, drift, prior, nu_id, field,
                                                control, tape.constant(z0), grid, opts,
                                                rng, 1, 1);
    const auto root = tape.add(tape.squared_norm(res.z.back()), res.sde.kl);
    const double value = tape.value(root)[0];
    tape.backward(root);
    if (g_theta) *g_theta = tape.grad(theta_id);
    if (g_nu) *g_nu = tape.grad(nu_id);
    return value;
  };

  const std::uint64_t seed = 4242;
  Vec g_theta, g_nu;
  const double v_tape = run_tape(theta0, nu0, seed, &g_theta, &g_nu);
  const double v_num = run_numeric(theta0, nu0, seed);
  CHECK(v_tape == doctest::Approx(v_num).epsilon(1e-12));

  const double h = 1e-5;
  for (Eigen::Index i = 0; i < theta0.size(); ++i) {
    Vec tp = theta0, tm = theta0;
    tp[i] += h;
    tm[i] -= h;
    const double fd = (run_numeric(tp, nu0, seed) - run_numeric(tm, nu0, seed)) / (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(g_theta[i]), 1e-6});
    CHECK(std::abs(fd - g_theta[i]) / scale < 1e-3);
  }
  // Gradient w.r.t. the initial-condition mean.
  for (Eigen::Index i = 0; i < nu0.size(); ++i) {
    Vec np = nu0, nm = nu0;
    np[i] += h;
    nm[i] -= h;
    const double fd = (run_numeric(theta0, np, seed) - run_numeric(theta0, nm, seed)) /
                      (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(g_nu[i]), 1e-6});
    CHECK(std::abs(fd - g_nu[i]) / scale < 1e-3);
  }
}
