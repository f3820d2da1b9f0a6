#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace bncde::eval {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Fraction of outcomes y with lo <= y <= hi (closed interval).  Throws
// std::invalid_argument on length mismatch.
double empirical_coverage(const std::vector<Interval>& intervals,
                          const std::vector<double>& outcomes);

// Median of hi - lo; empty input is an argument error.
double median_width(const std::vector<Interval>& intervals);

// Mean squared difference; lengths must match.
double point_mse(const std::vector<double>& predicted,
                 const std::vector<double>& observed);

// For each rate r in [0, 1): drop the ceil(r * n) patients with the largest
// uncertainty and report the MSE of the remainder divided by the MSE at r = 0.
// Dropping everything is an argument error.  Ties break by patient index so
// the curve is deterministic.
std::vector<double> deferral_curve(const std::vector<double>& model_uncertainty,
                                   const std::vector<double>& squared_errors,
                                   const std::vector<double>& rates);

// Pearson correlation; needs n >= 3 and nonzero variance on both sides
// (throws std::domain_error otherwise).
double uncertainty_error_correlation(const std::vector<double>& mean_outcome_variance,
                                     const std::vector<double>& abs_errors);

// One evaluation run for a single prediction window.
struct EvalReport {
  int delta = 1;
  std::uint64_t seed = 0;
  int mc_samples = 100;
  double noise_var = 1e-4;  // noise level of the evaluated dataset

  std::vector<std::pair<double, double>> coverage;       // confidence level -> coverage
  std::vector<std::pair<double, double>> median_widths;  // confidence level -> width
  double mse = 0.0;
  std::vector<std::pair<double, double>> deferral;       // rate -> normalized TE MSE
  double uncertainty_correlation = 0.0;
};

// alpha grid {0.01, ..., 0.05} as confidence levels {0.99, ..., 0.95}.
std::vector<double> default_confidence_levels();
std::vector<double> default_deferral_rates();

std::string report_to_json(const EvalReport& report);
// Flat CSV, one row per metric point: metric,key,value.  Values are written
// with round-trip precision so the CSV parses back losslessly.
std::string report_to_csv(const EvalReport& report);
EvalReport report_from_csv(const std::string& csv);

}  // namespace bncde::eval
