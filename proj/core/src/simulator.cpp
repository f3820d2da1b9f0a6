#include "bncde/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace bncde::sim {

namespace {

constexpr double kReferenceDiameterCm = 13.0;
constexpr double kDiameterWindowDays = 15.0;
constexpr int kLastLabelDay = 60;  // acceptance labels cover targets at t_bar + 5

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double sphere_diameter(double volume) { return std::cbrt(6.0 * volume / M_PI); }

}  // namespace

TumorParams sample_params(Rng& rng, int subgroup, bool reject_negative_kill) {
  if (subgroup < 0 || subgroup >= kNumSubgroups)
    throw std::invalid_argument("sample_params: subgroup must be in {0, 1, 2}");

  // Table values are (mean, variance).
  const double rho_mean = 7.00e-5, rho_sd = std::sqrt(7.23e-3);
  double alpha_r_mean = 0.0398;
  const double alpha_r_sd = std::sqrt(0.168);
  double alpha_c_mean = 0.028;
  const double alpha_c_sd = std::sqrt(7.00e-4);
  if (subgroup == 1) alpha_r_mean *= 1.1;
  if (subgroup == 2) alpha_c_mean *= 1.1;

  TumorParams p;
  p.subgroup = subgroup;
  p.carrying_capacity = 30.0;
  p.rho = rng.normal(rho_mean, rho_sd);
  p.alpha_r = rng.normal(alpha_r_mean, alpha_r_sd);
  p.alpha_c = rng.normal(alpha_c_mean, alpha_c_sd);
  if (reject_negative_kill) {
    while (p.alpha_r < 0.0) p.alpha_r = rng.normal(alpha_r_mean, alpha_r_sd);
    while (p.alpha_c < 0.0) p.alpha_c = rng.normal(alpha_c_mean, alpha_c_sd);
  }
  p.beta_r = 10.0 * p.alpha_r;
  return p;
}

std::vector<TreatmentEvent> treatment_schedule(Arm arm) {
  std::vector<TreatmentEvent> events;
  if (arm == Arm::kSequential) {
    for (int d = 0; d < 35; d += 7) events.push_back({static_cast<double>(d), kChemo});
    for (int d = 35; d <= 55; d += 7) events.push_back({static_cast<double>(d), kRadio});
  } else {
    for (int d = 0; d <= 55; d += 14) {
      events.push_back({static_cast<double>(d), kChemo});
      events.push_back({static_cast<double>(d), kRadio});
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const TreatmentEvent& a, const TreatmentEvent& b) {
                     return a.day < b.day;
                   });
  return events;
}

double OutcomePath::at_time(double t) const {
  const auto k = static_cast<std::size_t>(std::lround(t / h));
  if (k >= y.size()) throw std::invalid_argument("OutcomePath: time beyond horizon");
  return y[k];
}

OutcomePath simulate_outcome(const TumorParams& params,
                             const std::vector<TreatmentEvent>& schedule, double y0,
                             Rng& noise_rng, const SimOptions& opts) {
  if (!(y0 > 0.0)) throw std::invalid_argument("simulate_outcome: y0 must be > 0");
  if (!(opts.h_sim > 0.0)) throw std::invalid_argument("simulate_outcome: h_sim <= 0");

  const double h = opts.h_sim;
  const int n_steps = static_cast<int>(std::lround(opts.horizon / h));
  const int steps_per_day = static_cast<int>(std::lround(1.0 / h));
  const double chemo_decay = std::pow(2.0, -h);  // 1-day half-life
  const double noise_sd = std::sqrt(opts.noise_var);

  // Dose bookkeeping on step indices; event days are integers so they land on
  // grid points exactly.
  std::vector<double> chemo_dose_at(n_steps + 1, 0.0);
  std::vector<char> radio_on(n_steps + 1, 0);
  for (const auto& ev : schedule) {
    const int k = static_cast<int>(std::lround(ev.day / h));
    if (k < 0 || k > n_steps) continue;
    if (ev.kind == kChemo) {
      chemo_dose_at[k] += opts.chemo_dose;
    } else {
      for (int j = k; j < std::min(k + steps_per_day, n_steps + 1); ++j) radio_on[j] = 1;
    }
  }

  OutcomePath path;
  path.h = h;
  path.y.resize(n_steps + 1);
  double y = y0;
  double chemo = 0.0;
  path.y[0] = y;
  for (int k = 0; k < n_steps; ++k) {
    chemo = chemo * chemo_decay + chemo_dose_at[k];
    const double d = radio_on[k] ? opts.radio_dose : 0.0;
    const double eps = noise_rng.normal(0.0, noise_sd);
    const double bracket = opts.growth_offset +
                           params.rho * std::log(params.carrying_capacity / y) -
                           params.alpha_c * chemo -
                           (params.alpha_r * d + params.beta_r * d * d) + eps;
    y += bracket * y * h;
    y = std::min(std::max(y, opts.volume_floor), opts.volume_cap);
    path.y[k + 1] = y;
  }
  return path;
}

double observation_intensity(double mean_diameter_cm, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("observation_intensity: gamma < 0");
  return sigmoid(gamma * (mean_diameter_cm / kReferenceDiameterCm - 0.5));
}

std::vector<double> trailing_mean_diameter(const OutcomePath& path, int last_day) {
  const int steps_per_day = static_cast<int>(std::lround(1.0 / path.h));
  std::vector<double> out(last_day + 1);
  // Prefix sums of the per-step diameters.
  std::vector<double> prefix(path.y.size() + 1, 0.0);
  for (std::size_t k = 0; k < path.y.size(); ++k)
    prefix[k + 1] = prefix[k] + sphere_diameter(path.y[k]);
  const int window_steps = static_cast<int>(kDiameterWindowDays * steps_per_day);
  for (int d = 0; d <= last_day; ++d) {
    const int k_end = d * steps_per_day;
    const int k_begin = std::max(0, k_end - window_steps);
    const int n = k_end - k_begin + 1;
    out[d] = (prefix[k_end + 1] - prefix[k_begin]) / n;
  }
  return out;
}

namespace {

// Acceptance flags for integer days 0..last_day; day 0 is always accepted.
// Draws exactly last_day uniforms regardless of the outcome path.
std::vector<char> acceptance_flags(const OutcomePath& path, double gamma, Rng& rng,
                                   int last_day) {
  const auto dbar = trailing_mean_diameter(path, last_day);
  std::vector<char> accepted(last_day + 1, 0);
  accepted[0] = 1;
  for (int d = 1; d <= last_day; ++d)
    accepted[d] = rng.uniform() < observation_intensity(dbar[d], gamma) ? 1 : 0;
  return accepted;
}

}  // namespace

std::vector<int> observation_times(const OutcomePath& path, double gamma, Rng& rng) {
  const auto accepted =
      acceptance_flags(path, gamma, rng, static_cast<int>(kObservationWindowDays));
  std::vector<int> days;
  for (int d = 0; d <= static_cast<int>(kObservationWindowDays); ++d)
    if (accepted[d]) days.push_back(d);
  return days;
}

namespace {

Mat covariates_at(const std::vector<double>& days,
                  const std::vector<TreatmentEvent>& schedule, int subgroup) {
  Mat x = Mat::Zero(static_cast<Eigen::Index>(days.size()), kNumCovariates);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double d = days[i];
    for (const auto& ev : schedule)
      if (ev.day <= d) x(i, ev.kind) += 1.0;
    x(i, kNumTreatments + subgroup) = 1.0;
    x(i, kNumTreatments + kNumSubgroups) = d;
  }
  return x;
}

std::vector<FutureTarget> make_targets(const OutcomePath& path, double t_bar,
                                       const std::vector<char>& accepted) {
  std::vector<FutureTarget> targets;
  for (int delta = 1; delta <= kMaxDelta; ++delta) {
    FutureTarget tgt;
    tgt.delta = delta;
    tgt.y = path.at_time(t_bar + delta);
    const int day = static_cast<int>(std::lround(t_bar + delta));
    tgt.observed = day < static_cast<int>(accepted.size()) ? accepted[day] : 0;
    targets.push_back(tgt);
  }
  return targets;
}

PatientRecord simulate_patient(const SimConfig& cfg, int id, bool with_counterfactual) {
  Rng rng(cfg.seed + static_cast<std::uint64_t>(id));
  PatientRecord rec;
  rec.id = id;
  rec.subgroup = static_cast<int>(rng.next_u64() % kNumSubgroups);
  rec.params = sample_params(rng, rec.subgroup, cfg.reject_negative_kill);
  rec.arm = rng.uniform() < 0.5 ? Arm::kSequential : Arm::kConcurrent;
  rec.arm_cf = rec.arm == Arm::kSequential ? Arm::kConcurrent : Arm::kSequential;
  const double y0 = rng.uniform(cfg.y0_min, cfg.y0_max);
  const std::uint64_t noise_seed = rng.next_u64();

  SimOptions opts;
  opts.h_sim = cfg.h_sim;
  opts.noise_var = cfg.noise_var;
  opts.growth_offset = cfg.growth_offset;
  opts.chemo_dose = cfg.chemo_dose;
  opts.radio_dose = cfg.radio_dose;
  opts.volume_floor = cfg.volume_floor;
  opts.volume_cap = cfg.volume_cap;
  opts.horizon = kObservationWindowDays + kMaxDelta;

  rec.treatments = treatment_schedule(rec.arm);
  Rng factual_noise(noise_seed);
  const OutcomePath path = simulate_outcome(rec.params, rec.treatments, y0,
                                            factual_noise, opts);

  // Observation process evaluated on the factual trajectory; acceptance draws
  // extend past day 55 to label the prediction-window targets.
  const auto accepted = acceptance_flags(path, cfg.gamma, rng, kLastLabelDay);
  for (int d = 0; d <= static_cast<int>(kObservationWindowDays); ++d)
    if (accepted[d]) rec.obs_times.push_back(static_cast<double>(d));

  rec.y.resize(static_cast<Eigen::Index>(rec.obs_times.size()));
  for (std::size_t i = 0; i < rec.obs_times.size(); ++i)
    rec.y[static_cast<Eigen::Index>(i)] = path.at_time(rec.obs_times[i]);
  rec.x = covariates_at(rec.obs_times, rec.treatments, rec.subgroup);
  rec.targets = make_targets(path, rec.t_bar(), accepted);

  if (with_counterfactual) {
    rec.has_counterfactual = true;
    rec.treatments_cf = treatment_schedule(rec.arm_cf);
    // Common random numbers: the twin re-uses the factual noise stream.
    Rng twin_noise(noise_seed);
    const OutcomePath path_cf = simulate_outcome(rec.params, rec.treatments_cf, y0,
                                                 twin_noise, opts);
    rec.y_cf.resize(rec.y.size());
    for (std::size_t i = 0; i < rec.obs_times.size(); ++i)
      rec.y_cf[static_cast<Eigen::Index>(i)] = path_cf.at_time(rec.obs_times[i]);
    rec.x_cf = covariates_at(rec.obs_times, rec.treatments_cf, rec.subgroup);
    rec.targets_cf = make_targets(path_cf, rec.t_bar(), accepted);
  }
  return rec;
}

void standardize_record(PatientRecord& rec, const Standardization& st) {
  for (Eigen::Index i = 0; i < rec.y.size(); ++i) rec.y[i] = st.standardize_y(rec.y[i]);
  for (Eigen::Index i = 0; i < rec.x.rows(); ++i)
    rec.x.row(i) = ((rec.x.row(i).transpose() - st.x_mean).array() /
                    st.x_std.array()).matrix().transpose();
  for (auto& tgt : rec.targets) tgt.y = st.standardize_y(tgt.y);
  if (rec.has_counterfactual) {
    for (Eigen::Index i = 0; i < rec.y_cf.size(); ++i)
      rec.y_cf[i] = st.standardize_y(rec.y_cf[i]);
    for (Eigen::Index i = 0; i < rec.x_cf.rows(); ++i)
      rec.x_cf.row(i) = ((rec.x_cf.row(i).transpose() - st.x_mean).array() /
                         st.x_std.array()).matrix().transpose();
    for (auto& tgt : rec.targets_cf) tgt.y = st.standardize_y(tgt.y);
  }
}

}  // namespace

Dataset generate_dataset(const SimConfig& cfg) {
  if (cfg.n_train < 1 || cfg.n_val < 1 || cfg.n_test < 1)
    throw std::invalid_argument("generate_dataset: split sizes must be >= 1");

  const int total = cfg.n_train + cfg.n_val + cfg.n_test;
  std::vector<PatientRecord> all(static_cast<std::size_t>(total));

  // Patients are independent given their per-index seed, so parallel
  // generation is bit-identical to serial generation.
  const int threads = std::max(1, cfg.threads);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  auto worker = [&](int first) {
    try {
      for (int id = first; id < total; id += threads) {
        const bool is_test = id >= cfg.n_train + cfg.n_val;
        all[static_cast<std::size_t>(id)] = simulate_patient(cfg, id, is_test);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(first)] = std::current_exception();
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  Dataset ds;
  ds.config = cfg;
  ds.train.assign(all.begin(), all.begin() + cfg.n_train);
  ds.val.assign(all.begin() + cfg.n_train, all.begin() + cfg.n_train + cfg.n_val);
  ds.test.assign(all.begin() + cfg.n_train + cfg.n_val, all.end());

  // Training-split statistics over pooled observed outcomes and covariates.
  double sum = 0.0, sum2 = 0.0;
  Vec xsum = Vec::Zero(kNumCovariates), xsum2 = Vec::Zero(kNumCovariates);
  std::int64_t n = 0;
  for (const auto& rec : ds.train) {
    for (Eigen::Index i = 0; i < rec.y.size(); ++i) {
      sum += rec.y[i];
      sum2 += rec.y[i] * rec.y[i];
      xsum += rec.x.row(i).transpose();
      xsum2 += rec.x.row(i).transpose().cwiseAbs2();
      ++n;
    }
  }
  Standardization st;
  st.y_mean = sum / static_cast<double>(n);
  const double y_var = sum2 / static_cast<double>(n) - st.y_mean * st.y_mean;
  st.y_std = y_var > 1e-24 ? std::sqrt(y_var) : 1.0;
  st.x_mean = xsum / static_cast<double>(n);
  st.x_std.resize(kNumCovariates);
  for (int c = 0; c < kNumCovariates; ++c) {
    const double v = xsum2[c] / static_cast<double>(n) - st.x_mean[c] * st.x_mean[c];
    st.x_std[c] = v > 1e-24 ? std::sqrt(v) : 1.0;
  }
  ds.stats = st;

  for (auto* split : {&ds.train, &ds.val, &ds.test})
    for (auto& rec : *split) standardize_record(rec, st);
  return ds;
}

}  // namespace bncde::sim
