#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

#include "bncde/control_path.hpp"
#include "bncde/rng.hpp"
#include "bncde/tape.hpp"

namespace bncde::solvers {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Strictly increasing integration times including 0 and the horizon, with
// provenance flags.  Every observation timestamp is a grid point and no step
// exceeds the configured h_max.
struct TimeGrid {
  Vec points;
  std::vector<bool> is_observation;

  int num_points() const { return static_cast<int>(points.size()); }
  int num_steps() const { return num_points() - 1; }
  double horizon() const { return points[points.size() - 1]; }
};

// Union of obs_times, {0, horizon} and a uniform refinement of every gap
// wider than h_max.  obs_times must lie in [0, horizon]; horizon and h_max
// must be positive.
TimeGrid make_grid(const std::vector<double>& obs_times, double horizon, double h_max);

// Standard normal draws in bulk: Box-Muller on uniform pairs with vectorized
// transcendentals.  Every solver noise draw goes through this, so sequential
// and column-batched integrations see identical streams.
void fill_normal(Rng& rng, double* dst, Eigen::Index n);
Vec normal_vector(Rng& rng, Eigen::Index n);

struct SdeOptions {
  double sigma = 0.001;        // constant diffusion coefficient, > 0
  bool kl_half_factor = false; // multiply the KL integrand by 1/2 (Girsanov variant)
  double time_scale = 1.0;     // SDE time units per grid unit (see model notes)
};

// One sampled weight path of d(omega) = g dt + sigma dB together with the
// accumulated path-space KL integral sum_k |(g - h)/sigma|^2 dt between the
// variational drift g and the prior drift h.
struct SdePathSample {
  Mat weights_at_grid;     // [grid_points x d_omega]
  double kl_accumulator = 0.0;
  std::uint64_t noise_seed = 0;
};

using DriftFn = std::function<Vec(const Vec& omega, double t)>;
// Field returns the flattened [d_z x d_control] matrix for state z at time t
// given weights omega.
using FieldFn = std::function<Vec(const Vec& z, double t, const Vec& omega)>;

// Plain (non-differentiable) integrators; used for inference and oracles.
SdePathSample euler_maruyama(const DriftFn& drift, const DriftFn& prior_drift,
                             const Vec& init_mean, const TimeGrid& grid,
                             const SdeOptions& opts, Rng& rng);

// z_{k+1} = z_k + F(z_k, t_k | omega_k) (X(t_{k+1}) - X(t_k)); omega_k is the
// pre-step weight value.  Throws std::logic_error if the weight path does not
// match the grid.
Mat integrate_cde(const FieldFn& field, const controlpath::HermitePath& control,
                  const Vec& z0, const SdePathSample& weight_path, const TimeGrid& grid,
                  int d_z, int d_control);

struct CoupledResult {
  Mat z_at_grid;  // [grid_points x d_z]
  SdePathSample sde;
};

CoupledResult coupled_integrate(const DriftFn& drift, const DriftFn& prior_drift,
                                const Vec& init_mean, const FieldFn& field,
                                const controlpath::HermitePath& control, const Vec& z0,
                                const TimeGrid& grid, const SdeOptions& opts, Rng& rng,
                                int d_z, int d_control);

// Endpoint-only variant: identical arithmetic and noise stream, but neither
// trajectory is materialized.  Bitwise-equal final state and KL; the fast
// path for Monte Carlo inference.
struct CoupledEndpoint {
  Vec z_final;
  double kl = 0.0;
};

CoupledEndpoint coupled_integrate_endpoint(const DriftFn& drift,
                                           const DriftFn& prior_drift,
                                           const Vec& init_mean, const FieldFn& field,
                                           const controlpath::HermitePath& control,
                                           const Vec& z0, const TimeGrid& grid,
                                           const SdeOptions& opts, Rng& rng, int d_z,
                                           int d_control);

// ---------------------------------------------------------------------------
// Differentiable twins on an autodiff tape.  Noise is drawn in the same order
// as in the plain versions, so a shared seed yields the same sample path;
// gradients flow through drifts, fields and initial conditions by pathwise
// reparameterization (noise held fixed).

using DriftNodeFn =
    std::function<autodiff::NodeId(autodiff::Tape&, autodiff::NodeId omega, double t)>;
using FieldNodeFn = std::function<autodiff::NodeId(
    autodiff::Tape&, autodiff::NodeId z, double t, autodiff::NodeId omega)>;

struct SdeTapeResult {
  std::vector<autodiff::NodeId> omega;  // one node per grid point
  autodiff::NodeId kl;                  // scalar node, >= 0
};

SdeTapeResult euler_maruyama(autodiff::Tape& tape, const DriftNodeFn& drift,
                             const DriftNodeFn& prior_drift, autodiff::NodeId init_mean,
                             const TimeGrid& grid, const SdeOptions& opts, Rng& rng);

std::vector<autodiff::NodeId> integrate_cde(autodiff::Tape& tape,
                                            const FieldNodeFn& field,
                                            const controlpath::HermitePath& control,
                                            autodiff::NodeId z0,
                                            const std::vector<autodiff::NodeId>& omega,
                                            const TimeGrid& grid, int d_z,
                                            int d_control);

struct CoupledTapeResult {
  std::vector<autodiff::NodeId> z;
  SdeTapeResult sde;
};

CoupledTapeResult coupled_integrate(autodiff::Tape& tape, const DriftNodeFn& drift,
                                    const DriftNodeFn& prior_drift,
                                    autodiff::NodeId init_mean, const FieldNodeFn& field,
                                    const controlpath::HermitePath& control,
                                    autodiff::NodeId z0, const TimeGrid& grid,
                                    const SdeOptions& opts, Rng& rng, int d_z,
                                    int d_control);

}  // namespace bncde::solvers
