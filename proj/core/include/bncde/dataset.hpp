#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace bncde::sim {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Arm { kSequential, kConcurrent };
Arm arm_from_string(const std::string& s);
std::string to_string(Arm a);

inline constexpr int kChemo = 0;
inline constexpr int kRadio = 1;
inline constexpr int kNumTreatments = 2;
inline constexpr int kNumSubgroups = 3;
inline constexpr double kObservationWindowDays = 55.0;
inline constexpr int kMaxDelta = 5;

// Covariate channel layout: per-treatment cumulative counts, subgroup one-hot,
// time in days.  Kept in this order everywhere (files, model controls).
inline constexpr int kNumCovariates = kNumTreatments + kNumSubgroups + 1;
std::vector<std::string> covariate_channel_names();

struct TreatmentEvent {
  double day = 0.0;
  int kind = kChemo;
};

struct TumorParams {
  double rho = 0.0;
  double carrying_capacity = 30.0;
  double alpha_c = 0.0;
  double alpha_r = 0.0;
  double beta_r = 0.0;  // always 10 * alpha_r
  int subgroup = 0;
};

struct FutureTarget {
  int delta = 1;          // days ahead of t_bar, 1..5
  double y = 0.0;         // outcome at t_bar + delta (standardized in datasets)
  int observed = 0;       // observation-process acceptance of day t_bar + delta
};

// One patient: irregularly timestamped outcomes/covariates, the fully known
// treatment event list, the arm label and per-window prediction targets.
// Test records additionally carry the counterfactual twin simulated under the
// other arm with common random numbers.
struct PatientRecord {
  int id = 0;
  int subgroup = 0;
  Arm arm = Arm::kSequential;
  TumorParams params;

  std::vector<double> obs_times;  // strictly increasing, starts at day 0
  Vec y;                          // outcomes at obs times
  Mat x;                          // covariates [num_obs x kNumCovariates]
  std::vector<TreatmentEvent> treatments;
  std::vector<FutureTarget> targets;

  bool has_counterfactual = false;
  Arm arm_cf = Arm::kConcurrent;
  Vec y_cf;
  Mat x_cf;
  std::vector<TreatmentEvent> treatments_cf;
  std::vector<FutureTarget> targets_cf;

  double t_bar() const { return obs_times.back(); }
  int num_obs() const { return static_cast<int>(obs_times.size()); }
};

// Training-split z-scoring constants; stored as a dataset sidecar so model
// outputs can be mapped back to raw outcome units.
struct Standardization {
  double y_mean = 0.0;
  double y_std = 1.0;
  Vec x_mean;
  Vec x_std;

  double standardize_y(double y) const { return (y - y_mean) / y_std; }
  double destandardize_mean(double mu) const { return mu * y_std + y_mean; }
  double destandardize_var(double var) const { return var * y_std * y_std; }
};

struct SimConfig {
  int n_train = 10000;
  int n_val = 1000;
  int n_test = 10000;
  double gamma = 1.0;       // observation-intensity informativeness
  double noise_var = 1e-4;  // Var(eps_t), default 0.01^2
  std::uint64_t seed = 0;
  double h_sim = 0.05;      // simulation step in days
  double growth_offset = 1.0;
  double chemo_dose = 1.0;
  double radio_dose = 1.0;
  double y0_min = 0.1;      // initial volume range (cm^3)
  double y0_max = 1.0;
  double volume_floor = 1e-3;
  double volume_cap = 1e12;
  bool reject_negative_kill = false;
  int threads = 1;
};

struct Dataset {
  SimConfig config;
  Standardization stats;
  std::vector<PatientRecord> train;
  std::vector<PatientRecord> val;
  std::vector<PatientRecord> test;
};

// JSON-lines persistence: <dir>/{train,val,test}.jsonl plus
// <dir>/standardization.json.  Field names are part of the public format and
// documented in the README.  I/O failures raise IoError naming the path.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);
Standardization load_standardization(const std::string& path);
PatientRecord record_from_json_string(const std::string& line);
std::string record_to_json_string(const PatientRecord& r);

}  // namespace bncde::sim
