#pragma once

#include <vector>

#include "bncde/dataset.hpp"
#include "bncde/rng.hpp"

namespace bncde::sim {

// Parameter sampling per the tumor model tables: rho ~ N(7.00e-5, 7.23e-3),
// K = 30, alpha_r ~ N(0.0398, 0.168), beta_r = 10 * alpha_r,
// alpha_c ~ N(0.028, 7.00e-4), with the second entry read as a variance.
// Subgroup 1 inflates mean(alpha_r) by 10%, subgroup 2 inflates mean(alpha_c)
// by 10%.  With reject_negative_kill the kill coefficients are redrawn until
// non-negative (off by default; it shifts the sample means).
TumorParams sample_params(Rng& rng, int subgroup, bool reject_negative_kill = false);

// Deterministic treatment arms on [0, 55]: sequential = weekly chemo on days
// {0,7,14,21,28} then radio on {35,42,49}; concurrent = chemo and radio both
// on days {0,14,28,42}.  Cycle days beyond day 55 are dropped.
std::vector<TreatmentEvent> treatment_schedule(Arm arm);

struct SimOptions {
  double h_sim = 0.05;
  double noise_var = 1e-4;
  double growth_offset = 1.0;
  double chemo_dose = 1.0;    // unit dose, exponential decay with 1-day half-life
  double radio_dose = 1.0;    // unit-amplitude pulse lasting the application day
  double volume_floor = 1e-3;
  double volume_cap = 1e12;   // numeric guard; keeps heavy-tail draws finite
  double horizon = 60.0;      // 55-day window plus the 5-day prediction band
};

// Tumor volume on the uniform fine grid t = k * h_sim.
struct OutcomePath {
  double h = 0.05;
  std::vector<double> y;

  double at_time(double t) const;
  double horizon() const { return h * static_cast<double>(y.size() - 1); }
};

// Euler integration of
//   dY = [offset + rho log(K/Y) - alpha_c c_t - (alpha_r d_t + beta_r d_t^2)
//         + eps_t] Y dt
// with eps_t ~ N(0, noise_var) redrawn per step and Y clamped to
// [volume_floor, volume_cap].  Throws std::invalid_argument for y0 <= 0.
OutcomePath simulate_outcome(const TumorParams& params,
                             const std::vector<TreatmentEvent>& schedule, double y0,
                             Rng& noise_rng, const SimOptions& opts);

// zeta = sigmoid(gamma (Dbar / D - 1/2)) with D = 13 cm; Dbar is the average
// tumor diameter over the trailing 15 days, diameter via the sphere formula
// D(t) = (6 Y / pi)^(1/3).
double observation_intensity(double mean_diameter_cm, double gamma);

// Trailing 15-day mean diameter at integer days 0..last_day.
std::vector<double> trailing_mean_diameter(const OutcomePath& path, int last_day);

// Daily Bernoulli thinning: integer days 0..55, day d accepted with
// probability zeta(d); day 0 is always included.
std::vector<int> observation_times(const OutcomePath& path, double gamma, Rng& rng);

// Full generator: samples patients, splits arms randomly, simulates factual
// (and, for the test split, counterfactual) outcomes with common random
// numbers, draws observation times, assembles targets for delta = 1..5 and
// standardizes outcomes/covariates with training-split statistics.
Dataset generate_dataset(const SimConfig& config);

}  // namespace bncde::sim
