#include "bncde/solvers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bncde::solvers {

namespace {
constexpr double kTimeTol = 1e-9;

void check_sde_options(const SdeOptions& opts) {
  if (!(opts.sigma > 0.0)) throw std::domain_error("euler_maruyama: sigma must be > 0");
  if (!(opts.time_scale > 0.0))
    throw std::domain_error("euler_maruyama: time_scale must be > 0");
}

}  // namespace

void fill_normal(Rng& rng, double* dst, Eigen::Index n) {
  // Marsaglia polar method with the log/sqrt batch-vectorized; sin/cos have
  // no packet math for doubles, so plain Box-Muller stays scalar-bound.
  const Eigen::Index pairs = n / 2;
  if (pairs > 0) {
    Eigen::ArrayXd u(pairs), v(pairs), s(pairs);
    for (Eigen::Index p = 0; p < pairs; ++p) {
      double a, b, q;
      do {
        a = 2.0 * rng.uniform() - 1.0;
        b = 2.0 * rng.uniform() - 1.0;
        q = a * a + b * b;
      } while (q >= 1.0 || q == 0.0);
      u[p] = a;
      v[p] = b;
      s[p] = q;
    }
    const Eigen::ArrayXd f = (-2.0 * s.log() / s).sqrt();
    for (Eigen::Index p = 0; p < pairs; ++p) {
      dst[2 * p] = u[p] * f[p];
      dst[2 * p + 1] = v[p] * f[p];
    }
  }
  if (n % 2 == 1) dst[n - 1] = rng.normal();
}

Vec normal_vector(Rng& rng, Eigen::Index n) {
  Vec v(n);
  fill_normal(rng, v.data(), n);
  return v;
}

TimeGrid make_grid(const std::vector<double>& obs_times, double horizon, double h_max) {
  if (!(horizon > 0.0)) throw std::invalid_argument("make_grid: horizon must be > 0");
  if (!(h_max > 0.0)) throw std::invalid_argument("make_grid: h_max must be > 0");
  for (double t : obs_times)
    if (t < -kTimeTol || t > horizon + kTimeTol)
      throw std::invalid_argument("make_grid: obs time outside [0, horizon]");

  std::vector<double> anchors(obs_times);
  anchors.push_back(0.0);
  anchors.push_back(horizon);
  std::sort(anchors.begin(), anchors.end());
  anchors.erase(std::unique(anchors.begin(), anchors.end(),
                            [](double a, double b) { return std::abs(a - b) < kTimeTol; }),
                anchors.end());

  std::vector<double> points;
  std::vector<bool> is_obs;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    points.push_back(anchors[i]);
    is_obs.push_back(true);
    if (i + 1 == anchors.size()) break;
    const double gap = anchors[i + 1] - anchors[i];
    if (gap > h_max + kTimeTol) {
      const int pieces = static_cast<int>(std::ceil(gap / h_max - kTimeTol));
      for (int j = 1; j < pieces; ++j) {
        points.push_back(anchors[i] + gap * j / pieces);
        is_obs.push_back(false);
      }
    }
  }

  TimeGrid grid;
  grid.points = Eigen::Map<const Vec>(points.data(), static_cast<Eigen::Index>(points.size()));
  grid.is_observation = std::move(is_obs);
  return grid;
}

SdePathSample euler_maruyama(const DriftFn& drift, const DriftFn& prior_drift,
                             const Vec& init_mean, const TimeGrid& grid,
                             const SdeOptions& opts, Rng& rng) {
  check_sde_options(opts);
  const Eigen::Index d = init_mean.size();
  const int n = grid.num_points();

  SdePathSample out;
  out.weights_at_grid.resize(n, d);

  Vec omega = init_mean + opts.sigma * normal_vector(rng, d);
  out.weights_at_grid.row(0) = omega.transpose();
  double kl = 0.0;
  const double kl_base = (opts.kl_half_factor ? 0.5 : 1.0) / (opts.sigma * opts.sigma);

  for (int k = 0; k + 1 < n; ++k) {
    const double t = grid.points[k];
    const double dt = (grid.points[k + 1] - grid.points[k]) * opts.time_scale;
    const Vec g = drift(omega, t);
    const Vec diff = g - prior_drift(omega, t);
    kl += kl_base * dt * diff.squaredNorm();
    omega += dt * g + (opts.sigma * std::sqrt(dt)) * normal_vector(rng, d);
    out.weights_at_grid.row(k + 1) = omega.transpose();
  }
  out.kl_accumulator = kl;
  return out;
}

Mat integrate_cde(const FieldFn& field, const controlpath::HermitePath& control,
                  const Vec& z0, const SdePathSample& weight_path, const TimeGrid& grid,
                  int d_z, int d_control) {
  if (weight_path.weights_at_grid.rows() != grid.num_points())
    throw std::logic_error("integrate_cde: weight path does not match the grid");
  if (z0.size() != d_z) throw std::invalid_argument("integrate_cde: z0 size mismatch");

  const int n = grid.num_points();
  Mat z_path(n, d_z);
  Vec z = z0;
  z_path.row(0) = z.transpose();
  for (int k = 0; k + 1 < n; ++k) {
    const double t = grid.points[k];
    const Vec omega = weight_path.weights_at_grid.row(k).transpose();
    const Vec f = field(z, t, omega);
    if (f.size() != static_cast<Eigen::Index>(d_z) * d_control)
      throw std::invalid_argument("integrate_cde: field output size mismatch");
    const Vec dx = control.increment(grid.points[k], grid.points[k + 1]);
    if (dx.size() != d_control)
      throw std::invalid_argument("integrate_cde: control channel count mismatch");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        F(f.data(), d_z, d_control);
    z += F * dx;
    z_path.row(k + 1) = z.transpose();
  }
  return z_path;
}

CoupledResult coupled_integrate(const DriftFn& drift, const DriftFn& prior_drift,
                                const Vec& init_mean, const FieldFn& field,
                                const controlpath::HermitePath& control, const Vec& z0,
                                const TimeGrid& grid, const SdeOptions& opts, Rng& rng,
                                int d_z, int d_control) {
  // Lock-step interleaving is arithmetically identical to integrating the
  // weight SDE first and replaying the stored path through the CDE; the
  // z-update at step k reads the pre-step weights omega_k either way.
  CoupledResult out;
  out.sde = euler_maruyama(drift, prior_drift, init_mean, grid, opts, rng);
  out.z_at_grid = integrate_cde(field, control, z0, out.sde, grid, d_z, d_control);
  return out;
}

CoupledEndpoint coupled_integrate_endpoint(const DriftFn& drift,
                                           const DriftFn& prior_drift,
                                           const Vec& init_mean, const FieldFn& field,
                                           const controlpath::HermitePath& control,
                                           const Vec& z0, const TimeGrid& grid,
                                           const SdeOptions& opts, Rng& rng, int d_z,
                                           int d_control) {
  check_sde_options(opts);
  const Eigen::Index d = init_mean.size();
  const int n = grid.num_points();
  const double kl_base = (opts.kl_half_factor ? 0.5 : 1.0) / (opts.sigma * opts.sigma);

  CoupledEndpoint out;
  Vec omega = init_mean + opts.sigma * normal_vector(rng, d);
  Vec z = z0;
  double kl = 0.0;
  for (int k = 0; k + 1 < n; ++k) {
    const double t = grid.points[k];
    const double dt = (grid.points[k + 1] - grid.points[k]) * opts.time_scale;
    const Vec g = drift(omega, t);
    const Vec diff = g - prior_drift(omega, t);
    kl += kl_base * dt * diff.squaredNorm();
    // The z-update reads the pre-step weights, as in integrate_cde.
    const Vec f = field(z, t, omega);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        F(f.data(), d_z, d_control);
    z += F * control.increment(grid.points[k], grid.points[k + 1]);
    omega += dt * g + (opts.sigma * std::sqrt(dt)) * normal_vector(rng, d);
  }
  out.z_final = std::move(z);
  out.kl = kl;
  return out;
}

SdeTapeResult euler_maruyama(autodiff::Tape& tape, const DriftNodeFn& drift,
                             const DriftNodeFn& prior_drift, autodiff::NodeId init_mean,
                             const TimeGrid& grid, const SdeOptions& opts, Rng& rng) {
  check_sde_options(opts);
  const Eigen::Index d = tape.value(init_mean).size();
  const int n = grid.num_points();
  const double kl_base = (opts.kl_half_factor ? 0.5 : 1.0) / (opts.sigma * opts.sigma);

  SdeTapeResult out;
  out.omega.reserve(n);
  out.omega.push_back(
      tape.add_scaled_shift(init_mean, init_mean, 0.0,
                            opts.sigma * normal_vector(rng, d)));
  out.kl = tape.constant_scalar(0.0);

  for (int k = 0; k + 1 < n; ++k) {
    const double t = grid.points[k];
    const double dt = (grid.points[k + 1] - grid.points[k]) * opts.time_scale;
    const autodiff::NodeId omega_k = out.omega.back();
    const autodiff::NodeId g = drift(tape, omega_k, t);
    const autodiff::NodeId diff = tape.sub(g, prior_drift(tape, omega_k, t));
    out.kl = tape.add_scaled(out.kl, tape.squared_norm(diff), kl_base * dt);
    out.omega.push_back(tape.add_scaled_shift(
        omega_k, g, dt, (opts.sigma * std::sqrt(dt)) * normal_vector(rng, d)));
  }
  return out;
}

std::vector<autodiff::NodeId> integrate_cde(autodiff::Tape& tape,
                                            const FieldNodeFn& field,
                                            const controlpath::HermitePath& control,
                                            autodiff::NodeId z0,
                                            const std::vector<autodiff::NodeId>& omega,
                                            const TimeGrid& grid, int d_z,
                                            int d_control) {
  if (static_cast<int>(omega.size()) != grid.num_points())
    throw std::logic_error("integrate_cde: weight path does not match the grid");

  const int n = grid.num_points();
  std::vector<autodiff::NodeId> z;
  z.reserve(n);
  z.push_back(z0);
  for (int k = 0; k + 1 < n; ++k) {
    const double t = grid.points[k];
    const autodiff::NodeId f = field(tape, z.back(), t, omega[k]);
    const Vec dx = control.increment(grid.points[k], grid.points[k + 1]);
    z.push_back(tape.add(z.back(), tape.matvec_flat(f, d_z, d_control, dx)));
  }
  return z;
}

CoupledTapeResult coupled_integrate(autodiff::Tape& tape, const DriftNodeFn& drift,
                                    const DriftNodeFn& prior_drift,
                                    autodiff::NodeId init_mean, const FieldNodeFn& field,
                                    const controlpath::HermitePath& control,
                                    autodiff::NodeId z0, const TimeGrid& grid,
                                    const SdeOptions& opts, Rng& rng, int d_z,
                                    int d_control) {
  CoupledTapeResult out;
  out.sde = euler_maruyama(tape, drift, prior_drift, init_mean, grid, opts, rng);
  out.z = integrate_cde(tape, field, control, z0, out.sde.omega, grid, d_z, d_control);
  return out;
}

}  // namespace bncde::solvers
