#include "bncde/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <tuple>

#include "bncde/errors.hpp"
#include "bncde/simulator.hpp"

namespace bncde::model {

using nets::MlpSpec;

namespace {
constexpr double kTimeTol = 1e-9;
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "bncde") return ModelKind::kBncde;
  if (s == "tecde") return ModelKind::kTecde;
  throw std::invalid_argument("unknown model kind: '" + s + "'");
}

std::string to_string(ModelKind kind) {
  return kind == ModelKind::kBncde ? "bncde" : "tecde";
}

SdeTime sde_time_from_string(const std::string& s) {
  if (s == "days") return SdeTime::kDays;
  if (s == "normalized") return SdeTime::kNormalized;
  throw std::invalid_argument("unknown sde_time: '" + s + "'");
}

std::string to_string(SdeTime t) { return t == SdeTime::kDays ? "days" : "normalized"; }

int encoder_control_channels() {
  return 1 + sim::kNumCovariates + sim::kNumTreatments + 1;
}

int decoder_control_channels() { return 1 + 2 * sim::kNumTreatments; }

ModelSpecs derive_specs(const ModelConfig& cfg) {
  if (cfg.d_z <= 0) throw std::invalid_argument("ModelConfig: d_z must be positive");
  if (!(cfg.sigma > 0.0)) throw std::invalid_argument("ModelConfig: sigma must be > 0");
  if (!(cfg.var_floor > 0.0))
    throw std::invalid_argument("ModelConfig: var_floor must be > 0");
  if (cfg.delta < 1 || cfg.delta > sim::kMaxDelta)
    throw std::invalid_argument("ModelConfig: delta must be in 1..5");

  const int d_in = 1 + sim::kNumCovariates + sim::kNumTreatments;

  ModelSpecs s;
  s.embedding.layer_sizes = {d_in, cfg.d_z};

  s.head.layer_sizes = {cfg.d_z, cfg.kind == ModelKind::kBncde ? 2 : 1};

  s.enc_field.layer_sizes = {cfg.d_z + 1};
  for (int h : cfg.cde_hidden) s.enc_field.layer_sizes.push_back(h);
  s.enc_field.layer_sizes.push_back(cfg.d_z * encoder_control_channels());
  s.enc_field.hidden_activation = nets::Activation::kRelu;
  s.enc_field.output_activation = nets::Activation::kTanh;

  s.dec_field = s.enc_field;
  s.dec_field.layer_sizes.back() = cfg.d_z * decoder_control_channels();

  s.d_omega_enc = nets::param_count(s.enc_field);
  s.d_omega_dec = nets::param_count(s.dec_field);

  s.enc_drift.layer_sizes = {static_cast<int>(s.d_omega_enc) + 1};
  for (int h : cfg.sde_hidden) s.enc_drift.layer_sizes.push_back(h);
  s.enc_drift.layer_sizes.push_back(static_cast<int>(s.d_omega_enc));
  s.enc_drift.hidden_activation = nets::Activation::kRelu;

  s.dec_drift.layer_sizes = {static_cast<int>(s.d_omega_dec) + 1};
  for (int h : cfg.sde_hidden) s.dec_drift.layer_sizes.push_back(h);
  s.dec_drift.layer_sizes.push_back(static_cast<int>(s.d_omega_dec));
  s.dec_drift.hidden_activation = nets::Activation::kRelu;

  s.intensity_head.layer_sizes = {cfg.d_z, 1};
  s.balance_head.layer_sizes = {cfg.d_z, sim::kNumTreatments};
  return s;
}

int ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < groups.size(); ++i)
    if (groups[i].name == name) return static_cast<int>(i);
  return -1;
}

Vec& ParamStore::data(const std::string& name) {
  const int i = index_of(name);
  if (i < 0) throw std::invalid_argument("ParamStore: no group named '" + name + "'");
  return groups[static_cast<std::size_t>(i)].data;
}

const Vec& ParamStore::data(const std::string& name) const {
  const int i = index_of(name);
  if (i < 0) throw std::invalid_argument("ParamStore: no group named '" + name + "'");
  return groups[static_cast<std::size_t>(i)].data;
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& g : groups) n += g.data.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out = *this;
  for (auto& g : out.groups) g.data.setZero();
  return out;
}

namespace {

// Drift nets start as g(omega, t) = -omega: every layer is initialized as
// usual except the output layer, which starts at zero; the -omega skip is
// applied at call sites.
Vec init_drift(const MlpSpec& spec, Rng& rng) {
  Vec w = nets::init_uniform(spec, rng).data;
  const std::int64_t last = nets::layer_offset(spec, spec.num_layers() - 1);
  w.segment(last, w.size() - last).setZero();
  return w;
}

}  // namespace

Model make_model(const ModelConfig& cfg, const sim::Standardization& stats) {
  Model m;
  m.config = cfg;
  m.specs = derive_specs(cfg);
  m.stats = stats;

  Rng rng(mix_seed(cfg.seed, 0x9e1dULL));
  auto add = [&](const std::string& name, Vec data, double lr,
                 std::optional<MlpSpec> spec) {
    m.params.groups.push_back({name, std::move(data), lr, std::move(spec)});
  };

  add("embedding", nets::init_uniform(m.specs.embedding, rng).data, cfg.lr_embedding,
      m.specs.embedding);
  add("prediction_head", nets::init_uniform(m.specs.head, rng).data, cfg.lr_prediction,
      m.specs.head);
  if (cfg.kind == ModelKind::kBncde) {
    add("encoder_drift", init_drift(m.specs.enc_drift, rng), cfg.lr_sde,
        m.specs.enc_drift);
    add("decoder_drift", init_drift(m.specs.dec_drift, rng), cfg.lr_sde,
        m.specs.dec_drift);
    // The initial-condition means are themselves CDE weight vectors.
    add("encoder_init_mean", nets::init_uniform(m.specs.enc_field, rng).data, cfg.lr_sde,
        std::nullopt);
    add("decoder_init_mean", nets::init_uniform(m.specs.dec_field, rng).data, cfg.lr_sde,
        std::nullopt);
  } else {
    add("encoder_field", nets::init_uniform(m.specs.enc_field, rng).data, cfg.lr_cde,
        m.specs.enc_field);
    add("decoder_field", nets::init_uniform(m.specs.dec_field, rng).data, cfg.lr_cde,
        m.specs.dec_field);
  }
  if (cfg.intensity_weighting)
    add("intensity_head", nets::init_uniform(m.specs.intensity_head, rng).data,
        cfg.lr_prediction, m.specs.intensity_head);
  if (cfg.balancing_alpha != 0.0)
    add("balance_head", nets::init_uniform(m.specs.balance_head, rng).data,
        cfg.lr_prediction, m.specs.balance_head);
  return m;
}

// ---------------------------------------------------------------------------
// Record preparation.

namespace {

struct RecordView {
  const std::vector<double>* obs_times;
  const Vec* y;
  const Mat* x;
  const std::vector<sim::TreatmentEvent>* treatments;
  const std::vector<sim::FutureTarget>* targets;
};

RecordView view_of(const sim::PatientRecord& rec, bool use_counterfactual) {
  if (use_counterfactual) {
    if (!rec.has_counterfactual)
      throw std::invalid_argument("record has no counterfactual twin");
    return {&rec.obs_times, &rec.y_cf, &rec.x_cf, &rec.treatments_cf, &rec.targets_cf};
  }
  return {&rec.obs_times, &rec.y, &rec.x, &rec.treatments, &rec.targets};
}

Vec raw_covariates_at(double day, const std::vector<sim::TreatmentEvent>& events,
                      int subgroup) {
  Vec x = Vec::Zero(sim::kNumCovariates);
  for (const auto& ev : events)
    if (ev.day <= day + kTimeTol) x[ev.kind] += 1.0;
  x[sim::kNumTreatments + subgroup] = 1.0;
  x[sim::kNumTreatments + sim::kNumSubgroups] = day;
  return x;
}

}  // namespace

PreparedRecord prepare_record(const Model& model, const sim::PatientRecord& record,
                              int delta, bool use_counterfactual) {
  if (record.obs_times.empty())
    throw std::invalid_argument("prepare_record: record has no observations");
  if (delta < 1 || delta > sim::kMaxDelta)
    throw std::invalid_argument("prepare_record: delta must be in 1..5");
  const RecordView view = view_of(record, use_counterfactual);
  if (static_cast<int>(view.targets->size()) < delta)
    throw std::invalid_argument("prepare_record: record lacks the requested window");

  const ModelConfig& cfg = model.config;
  PreparedRecord prep;
  prep.record_id = record.id;
  prep.delta = delta;
  prep.t_bar = view.obs_times->back();
  const auto& target = (*view.targets)[static_cast<std::size_t>(delta - 1)];
  prep.y_target = target.y;
  prep.obs_indicator = target.observed;

  // Treatment-decision timestamps for the balancing head: candidate days of
  // both arms up to t_bar, labeled by what this record actually received.
  std::vector<double> decision_days;
  if (cfg.balancing_alpha != 0.0) {
    for (auto arm : {sim::Arm::kSequential, sim::Arm::kConcurrent})
      for (const auto& ev : sim::treatment_schedule(arm))
        if (ev.day <= prep.t_bar + kTimeTol) decision_days.push_back(ev.day);
    std::sort(decision_days.begin(), decision_days.end());
    decision_days.erase(std::unique(decision_days.begin(), decision_days.end()),
                        decision_days.end());
  }

  // Encoder control sample grid: observation times plus every treatment time
  // up to t_bar (treatments are fully known), plus decision days.
  std::vector<double> times = *view.obs_times;
  for (const auto& ev : *view.treatments)
    if (ev.day <= prep.t_bar + kTimeTol) times.push_back(ev.day);
  times.insert(times.end(), decision_days.begin(), decision_days.end());
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end(),
                          [](double a, double b) { return std::abs(a - b) < kTimeTol; }),
              times.end());

  const int d_ctrl = encoder_control_channels();
  prep.has_encoder = prep.t_bar > 0.0 && times.size() >= 2;
  if (prep.has_encoder) {
    controlpath::SamplePath path;
    path.timestamps = Eigen::Map<const Vec>(times.data(),
                                            static_cast<Eigen::Index>(times.size()));
    path.channels = Mat::Zero(static_cast<Eigen::Index>(times.size()), d_ctrl);
    std::size_t obs_idx = 0;
    for (std::size_t i = 0; i < times.size(); ++i) {
      const double t = times[i];
      while (obs_idx + 1 < view.obs_times->size() &&
             (*view.obs_times)[obs_idx + 1] <= t + kTimeTol)
        ++obs_idx;
      const bool at_obs = std::abs((*view.obs_times)[obs_idx] - t) < kTimeTol;
      const auto row = static_cast<Eigen::Index>(i);
      // Outcome: observed value, forward-filled between observations.
      path.channels(row, 0) = (*view.y)[static_cast<Eigen::Index>(obs_idx)];
      if (at_obs) {
        path.channels.block(row, 1, 1, sim::kNumCovariates) =
            view.x->row(static_cast<Eigen::Index>(obs_idx));
      } else {
        const Vec raw = raw_covariates_at(t, *view.treatments, record.subgroup);
        path.channels.block(row, 1, 1, sim::kNumCovariates) =
            ((raw - model.stats.x_mean).array() / model.stats.x_std.array())
                .matrix()
                .transpose();
      }
      for (const auto& ev : *view.treatments)
        if (std::abs(ev.day - t) < kTimeTol)
          path.channels(row, 1 + sim::kNumCovariates + ev.kind) = 1.0;
      path.channels(row, d_ctrl - 1) = t / sim::kObservationWindowDays;
    }
    prep.enc_control = controlpath::build_hermite(path);
    prep.enc_grid = solvers::make_grid(times, prep.t_bar, cfg.h_max);
  }

  // Decoder control from the future treatments in (t_bar, t_bar + delta].
  std::vector<std::pair<double, int>> future;
  std::vector<double> future_taus;
  for (const auto& ev : *view.treatments) {
    const double tau = ev.day - prep.t_bar;
    if (tau > kTimeTol && tau <= delta + kTimeTol) {
      future.emplace_back(tau, ev.kind);
      future_taus.push_back(tau);
    }
  }
  prep.dec_grid = solvers::make_grid(future_taus, static_cast<double>(delta), cfg.h_max);
  prep.dec_control = controlpath::build_decoder_control(
      future, sim::kNumTreatments, static_cast<double>(delta), prep.dec_grid.points);

  // Embedding input [y_0, x_0, a_0].
  prep.embed_input.resize(1 + sim::kNumCovariates + sim::kNumTreatments);
  prep.embed_input[0] = (*view.y)[0];
  prep.embed_input.segment(1, sim::kNumCovariates) = view.x->row(0).transpose();
  prep.embed_input.segment(1 + sim::kNumCovariates, sim::kNumTreatments).setZero();
  for (const auto& ev : *view.treatments)
    if (std::abs(ev.day - (*view.obs_times)[0]) < kTimeTol)
      prep.embed_input[1 + sim::kNumCovariates + ev.kind] = 1.0;

  for (double day : decision_days) {
    Vec labels = Vec::Zero(sim::kNumTreatments);
    for (const auto& ev : *view.treatments)
      if (std::abs(ev.day - day) < kTimeTol) labels[ev.kind] = 1.0;
    int grid_idx = -1;
    if (prep.has_encoder) {
      for (int g = 0; g < prep.enc_grid.num_points(); ++g)
        if (std::abs(prep.enc_grid.points[g] - day) < kTimeTol) {
          grid_idx = g;
          break;
        }
    }
    prep.decisions.emplace_back(day, labels, grid_idx);
  }
  return prep;
}

// ---------------------------------------------------------------------------
// Numeric forward (inference path).

namespace {

struct SdeScales {
  double enc = 1.0;
  double dec = 1.0;
};

SdeScales sde_scales(const ModelConfig& cfg, int delta) {
  if (cfg.sde_time == SdeTime::kDays) return {1.0, 1.0};
  return {1.0 / sim::kObservationWindowDays, 1.0 / static_cast<double>(delta)};
}

}  // namespace

ParticleResult forward_particle(const Model& model, const PreparedRecord& prep,
                                Rng& rng) {
  const ModelConfig& cfg = model.config;
  const ModelSpecs& specs = model.specs;
  if (cfg.kind != ModelKind::kBncde)
    throw std::logic_error("forward_particle: BNCDE only");
  const auto scales = sde_scales(cfg, prep.delta);
  const double t_horizon = sim::kObservationWindowDays;

  const Vec& enc_drift_w = model.params.data("encoder_drift");
  const Vec& dec_drift_w = model.params.data("decoder_drift");

  Vec z = nets::mlp_forward(specs.embedding, model.params.data("embedding"),
                            prep.embed_input);
  double kl_enc = 0.0;
  if (prep.has_encoder) {
    solvers::SdeOptions opts{cfg.sigma, cfg.kl_half_factor, scales.enc};
    auto drift = [&](const Vec& w, double t) -> Vec {
      return nets::mlp_forward_time(specs.enc_drift, enc_drift_w, w, t / t_horizon) - w;
    };
    auto prior = [](const Vec& w, double) -> Vec { return -w; };
    auto field = [&](const Vec& zz, double t, const Vec& w) -> Vec {
      return nets::mlp_forward_time(specs.enc_field, w, zz, t / t_horizon);
    };
    auto res = solvers::coupled_integrate_endpoint(
        drift, prior, model.params.data("encoder_init_mean"), field,
        *prep.enc_control, z, prep.enc_grid, opts, rng, cfg.d_z,
        encoder_control_channels());
    z = std::move(res.z_final);
    kl_enc = res.kl;
  }

  solvers::SdeOptions opts{cfg.sigma, cfg.kl_half_factor, scales.dec};
  const double delta_days = static_cast<double>(prep.delta);
  auto drift = [&](const Vec& w, double t) -> Vec {
    return nets::mlp_forward_time(specs.dec_drift, dec_drift_w, w, t / delta_days) - w;
  };
  auto prior = [](const Vec& w, double) -> Vec { return -w; };
  auto field = [&](const Vec& zz, double t, const Vec& w) -> Vec {
    return nets::mlp_forward_time(specs.dec_field, w, zz, t / delta_days);
  };
  auto res = solvers::coupled_integrate_endpoint(
      drift, prior, model.params.data("decoder_init_mean"), field, prep.dec_control, z,
      prep.dec_grid, opts, rng, cfg.d_z, decoder_control_channels());

  const Vec out = nets::mlp_forward(specs.head, model.params.data("prediction_head"),
                                    res.z_final);
  ParticleResult r;
  r.mu = out[0];
  r.var = autodiff::softplus_stable(out[1]) + cfg.var_floor;
  r.kl_enc = kl_enc;
  r.kl_dec = res.kl;
  return r;
}

namespace {

// One affine layer applied to a column-batch, with an optional fixed time
// entry folded into the bias.
Mat affine_cols(const Vec& flat, std::int64_t off, int rows, int cols, const Mat& x,
                double t, bool with_time) {
  using ConstRowMajor =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>;
  ConstRowMajor W(flat.data() + off, rows, cols);
  const int xin = with_time ? cols - 1 : cols;
  Vec shift = flat.segment(off + static_cast<std::int64_t>(rows) * cols, rows);
  if (with_time) shift += t * W.col(cols - 1);
  Mat y = W.leftCols(xin) * x;
  y.colwise() += shift;
  return y;
}

Mat mlp_cols(const nets::MlpSpec& spec, const Vec& flat, const Mat& x, double t) {
  Mat h = x;
  std::int64_t off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int rows = spec.layer_sizes[l + 1];
    const int cols = spec.layer_sizes[l];
    h = affine_cols(flat, off, rows, cols, h, t, l == 0);
    off += static_cast<std::int64_t>(rows) * cols + rows;
    if (l + 1 < spec.num_layers()) {
      if (spec.hidden_activation == nets::Activation::kRelu)
        h = h.cwiseMax(0.0);
      else
        h = h.array().tanh().matrix();
    } else if (spec.output_activation) {
      h = h.array().tanh().matrix();
    }
  }
  return h;
}

struct StageState {
  Mat omega;  // [d_omega x K]
  Mat z;      // [d_z x K]
  Vec kl;     // per particle
};

void advance_stage(const Model& model, const nets::MlpSpec& drift_spec,
                   const Vec& drift_w, const nets::MlpSpec& field_spec,
                   const controlpath::HermitePath& control,
                   const solvers::TimeGrid& grid, double time_norm, double time_scale,
                   std::vector<Rng>& rngs, StageState& st, int d_control) {
  const ModelConfig& cfg = model.config;
  const auto d = st.omega.rows();
  const auto K = st.omega.cols();
  const double kl_base =
      (cfg.kl_half_factor ? 0.5 : 1.0) / (cfg.sigma * cfg.sigma);
  Mat noise(d, K);

  for (int k = 0; k + 1 < grid.num_points(); ++k) {
    const double t = grid.points[k];
    const double dt = (grid.points[k + 1] - grid.points[k]) * time_scale;
    const Mat net = mlp_cols(drift_spec, drift_w, st.omega, t / time_norm);
    // With drift g = net - omega and OU prior -omega, the KL integrand's
    // drift difference is the raw network output.
    for (Eigen::Index c = 0; c < K; ++c)
      st.kl[c] += kl_base * dt * net.col(c).squaredNorm();

    const Vec dx = control.increment(grid.points[k], grid.points[k + 1]);
    for (Eigen::Index c = 0; c < K; ++c) {
      const Vec f = nets::mlp_forward_time(field_spec, st.omega.col(c), st.z.col(c),
                                           t / time_norm);
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>
          F(f.data(), st.z.rows(), d_control);
      st.z.col(c) += F * dx;
    }
    for (Eigen::Index c = 0; c < K; ++c)
      solvers::fill_normal(rngs[static_cast<std::size_t>(c)], noise.col(c).data(), d);
    // omega += dt (net - omega) + sigma sqrt(dt) xi, fused into one sweep.
    st.omega = (1.0 - dt) * st.omega + dt * net + (cfg.sigma * std::sqrt(dt)) * noise;
  }
}

}  // namespace

std::vector<ParticleResult> forward_particles(const Model& model,
                                              const PreparedRecord& prep, int count,
                                              std::uint64_t base_seed) {
  const ModelConfig& cfg = model.config;
  const ModelSpecs& specs = model.specs;
  if (cfg.kind != ModelKind::kBncde)
    throw std::logic_error("forward_particles: BNCDE only");
  if (count < 1) throw std::invalid_argument("forward_particles: count must be >= 1");
  const auto scales = sde_scales(cfg, prep.delta);

  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k)
    rngs.emplace_back(base_seed + static_cast<std::uint64_t>(k));

  const Vec z0 = nets::mlp_forward(specs.embedding, model.params.data("embedding"),
                                   prep.embed_input);

  StageState st;
  st.z = z0.replicate(1, count);
  st.kl = Vec::Zero(count);
  Vec kl_enc = Vec::Zero(count);

  if (prep.has_encoder) {
    const Vec& nu = model.params.data("encoder_init_mean");
    st.omega.resize(nu.size(), count);
    for (int c = 0; c < count; ++c) {
      solvers::fill_normal(rngs[static_cast<std::size_t>(c)], st.omega.col(c).data(),
                           nu.size());
      st.omega.col(c) = nu + cfg.sigma * st.omega.col(c);
    }
    advance_stage(model, specs.enc_drift, model.params.data("encoder_drift"),
                  specs.enc_field, *prep.enc_control, prep.enc_grid,
                  sim::kObservationWindowDays, scales.enc, rngs, st,
                  encoder_control_channels());
    kl_enc = st.kl;
  }

  st.kl = Vec::Zero(count);
  const Vec& nu_dec = model.params.data("decoder_init_mean");
  st.omega.resize(nu_dec.size(), count);
  for (int c = 0; c < count; ++c) {
    solvers::fill_normal(rngs[static_cast<std::size_t>(c)], st.omega.col(c).data(),
                         nu_dec.size());
    st.omega.col(c) = nu_dec + cfg.sigma * st.omega.col(c);
  }
  advance_stage(model, specs.dec_drift, model.params.data("decoder_drift"),
                specs.dec_field, prep.dec_control, prep.dec_grid,
                static_cast<double>(prep.delta), scales.dec, rngs, st,
                decoder_control_channels());

  const Vec& head = model.params.data("prediction_head");
  std::vector<ParticleResult> out(static_cast<std::size_t>(count));
  for (int c = 0; c < count; ++c) {
    const Vec o = nets::mlp_forward(specs.head, head, st.z.col(c));
    out[static_cast<std::size_t>(c)].mu = o[0];
    out[static_cast<std::size_t>(c)].var =
        autodiff::softplus_stable(o[1]) + cfg.var_floor;
    out[static_cast<std::size_t>(c)].kl_enc = kl_enc[c];
    out[static_cast<std::size_t>(c)].kl_dec = st.kl[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Posterior predictive.

double PosteriorPredictive::mean() const {
  double m = 0.0;
  for (const auto& [mu, var] : components) m += mu;
  return m / static_cast<double>(components.size());
}

double PosteriorPredictive::variance() const {
  const double m = mean();
  double ev = 0.0, vm = 0.0;
  for (const auto& [mu, var] : components) {
    ev += var;
    vm += (mu - m) * (mu - m);
  }
  const auto k = static_cast<double>(components.size());
  return ev / k + vm / k;
}

double PosteriorPredictive::model_uncertainty() const {
  const double m = mean();
  double vm = 0.0;
  for (const auto& [mu, var] : components) vm += (mu - m) * (mu - m);
  return vm / static_cast<double>(components.size());
}

double PosteriorPredictive::cdf(double y) const {
  double acc = 0.0;
  for (const auto& [mu, var] : components)
    acc += 0.5 * std::erfc(-(y - mu) / std::sqrt(2.0 * var));
  return acc / static_cast<double>(components.size());
}

PosteriorPredictive posterior_predictive(const Model& model,
                                         const sim::PatientRecord& record, int delta,
                                         int mc_samples, std::uint64_t seed,
                                         bool use_counterfactual) {
  if (mc_samples < 1)
    throw std::invalid_argument("posterior_predictive: need at least one sample");
  const PreparedRecord prep = prepare_record(model, record, delta, use_counterfactual);

  PosteriorPredictive pp;
  pp.components.reserve(static_cast<std::size_t>(mc_samples));
  for (const auto& r : forward_particles(model, prep, mc_samples, seed))
    pp.components.emplace_back(model.stats.destandardize_mean(r.mu),
                               model.stats.destandardize_var(r.var));
  return pp;
}

std::vector<double> tecde_point_predictions(const Model& model,
                                            const PreparedRecord& prep, double dropout_p,
                                            int mc_samples, std::uint64_t seed) {
  const ModelConfig& cfg = model.config;
  const ModelSpecs& specs = model.specs;
  const double t_horizon = sim::kObservationWindowDays;
  const double delta_days = static_cast<double>(prep.delta);

  const Vec& enc_w = model.params.data("encoder_field");
  const Vec& dec_w = model.params.data("decoder_field");

  Vec z = nets::mlp_forward(specs.embedding, model.params.data("embedding"),
                            prep.embed_input);
  if (prep.has_encoder) {
    auto field = [&](const Vec& zz, double t, const Vec&) -> Vec {
      return nets::mlp_forward_time(specs.enc_field, enc_w, zz, t / t_horizon);
    };
    solvers::SdePathSample dummy;
    dummy.weights_at_grid = Mat::Zero(prep.enc_grid.num_points(), 1);
    const Mat z_path = solvers::integrate_cde(field, *prep.enc_control, z, dummy,
                                              prep.enc_grid, cfg.d_z,
                                              encoder_control_channels());
    z = z_path.row(z_path.rows() - 1).transpose();
  }
  auto field = [&](const Vec& zz, double t, const Vec&) -> Vec {
    return nets::mlp_forward_time(specs.dec_field, dec_w, zz, t / delta_days);
  };
  solvers::SdePathSample dummy;
  dummy.weights_at_grid = Mat::Zero(prep.dec_grid.num_points(), 1);
  const Mat z_path = solvers::integrate_cde(field, prep.dec_control, z, dummy,
                                            prep.dec_grid, cfg.d_z,
                                            decoder_control_channels());
  const Vec z_final = z_path.row(z_path.rows() - 1).transpose();

  Rng rng(seed);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(mc_samples));
  const Vec& head = model.params.data("prediction_head");
  for (int m = 0; m < mc_samples; ++m) {
    const Vec dropped = nets::mc_dropout(z_final, dropout_p, rng);
    out.push_back(nets::mlp_forward(specs.head, head, dropped)[0]);
  }
  return out;
}

std::vector<double> tecde_forward(const Model& model, const sim::PatientRecord& record,
                                  int delta, double dropout_p, int mc_samples,
                                  std::uint64_t seed) {
  if (model.config.kind != ModelKind::kTecde)
    throw std::logic_error("tecde_forward: TE-CDE only");
  const PreparedRecord prep = prepare_record(model, record, delta, false);
  return tecde_point_predictions(model, prep, dropout_p, mc_samples, seed);
}

PosteriorPredictive tecde_predictive(const Model& model, const sim::PatientRecord& record,
                                     int delta, int mc_samples, std::uint64_t seed,
                                     bool use_counterfactual) {
  const PreparedRecord prep = prepare_record(model, record, delta, use_counterfactual);
  const auto points = tecde_point_predictions(model, prep, model.config.dropout_p,
                                              mc_samples, seed);
  PosteriorPredictive pp;
  const double tiny = model.stats.destandardize_var(model.config.var_floor);
  for (double p : points)
    pp.components.emplace_back(model.stats.destandardize_mean(p), tiny);
  return pp;
}

eval::Interval credible_interval(const PosteriorPredictive& pp, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("credible_interval: alpha must be in (0, 1)");
  if (pp.components.empty())
    throw std::invalid_argument("credible_interval: empty mixture");

  double lo = pp.components[0].first, hi = pp.components[0].first;
  for (const auto& [mu, var] : pp.components) {
    const double s = std::sqrt(var);
    lo = std::min(lo, mu - 10.0 * s);
    hi = std::max(hi, mu + 10.0 * s);
  }

  auto quantile = [&](double target) {
    double a = lo, b = hi;
    double mid = 0.5 * (a + b);
    for (int it = 0; it < 300; ++it) {
      mid = 0.5 * (a + b);
      const double f = pp.cdf(mid);
      if (std::abs(f - target) <= 1e-8) break;
      (f < target ? a : b) = mid;
    }
    return mid;
  };
  return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

// ---------------------------------------------------------------------------
// Checkpoints.

using nlohmann::json;

namespace {

json spec_to_json(const MlpSpec& s) {
  json j;
  j["layer_sizes"] = s.layer_sizes;
  j["hidden_activation"] = nets::to_string(s.hidden_activation);
  j["output_activation"] =
      s.output_activation ? json(nets::to_string(*s.output_activation)) : json(nullptr);
  return j;
}

MlpSpec spec_from_json(const json& j) {
  MlpSpec s;
  s.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  s.hidden_activation =
      nets::activation_from_string(j.at("hidden_activation").get<std::string>());
  if (!j.at("output_activation").is_null())
    s.output_activation =
        nets::activation_from_string(j.at("output_activation").get<std::string>());
  return s;
}

json config_to_json(const ModelConfig& c) {
  json j;
  j["kind"] = to_string(c.kind);
  j["delta"] = c.delta;
  j["d_z"] = c.d_z;
  j["cde_hidden"] = c.cde_hidden;
  j["sde_hidden"] = c.sde_hidden;
  j["sigma"] = c.sigma;
  j["mc_train"] = c.mc_train;
  j["mc_predict"] = c.mc_predict;
  j["var_floor"] = c.var_floor;
  j["dropout_p"] = c.dropout_p;
  j["lr_embedding"] = c.lr_embedding;
  j["lr_prediction"] = c.lr_prediction;
  j["lr_sde"] = c.lr_sde;
  j["lr_cde"] = c.lr_cde;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["h_max"] = c.h_max;
  j["kl_half_factor"] = c.kl_half_factor;
  j["sde_time"] = to_string(c.sde_time);
  j["intensity_weighting"] = c.intensity_weighting;
  j["intensity_clamp"] = c.intensity_clamp;
  j["balancing_alpha"] = c.balancing_alpha;
  j["full_mc_grid"] = c.full_mc_grid;
  j["mc_decoder"] = c.mc_decoder;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.kind = model_kind_from_string(j.at("kind").get<std::string>());
  c.delta = j.at("delta").get<int>();
  c.d_z = j.at("d_z").get<int>();
  c.cde_hidden = j.at("cde_hidden").get<std::vector<int>>();
  c.sde_hidden = j.at("sde_hidden").get<std::vector<int>>();
  c.sigma = j.at("sigma").get<double>();
  c.mc_train = j.at("mc_train").get<int>();
  c.mc_predict = j.at("mc_predict").get<int>();
  c.var_floor = j.at("var_floor").get<double>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.lr_embedding = j.at("lr_embedding").get<double>();
  c.lr_prediction = j.at("lr_prediction").get<double>();
  c.lr_sde = j.at("lr_sde").get<double>();
  c.lr_cde = j.at("lr_cde").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.h_max = j.at("h_max").get<double>();
  c.kl_half_factor = j.at("kl_half_factor").get<bool>();
  c.sde_time = sde_time_from_string(j.at("sde_time").get<std::string>());
  c.intensity_weighting = j.at("intensity_weighting").get<bool>();
  c.intensity_clamp = j.at("intensity_clamp").get<double>();
  c.balancing_alpha = j.at("balancing_alpha").get<double>();
  c.full_mc_grid = j.at("full_mc_grid").get<bool>();
  c.mc_decoder = j.at("mc_decoder").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.threads = j.at("threads").get<int>();
  return c;
}

}  // namespace

std::string checkpoint_to_json(const Model& model) {
  json j;
  j["format"] = "bncde-checkpoint-v1";
  j["config"] = config_to_json(model.config);
  j["standardization"] = json{{"y_mean", model.stats.y_mean},
                              {"y_std", model.stats.y_std},
                              {"x_mean", std::vector<double>(
                                             model.stats.x_mean.data(),
                                             model.stats.x_mean.data() +
                                                 model.stats.x_mean.size())},
                              {"x_std", std::vector<double>(
                                            model.stats.x_std.data(),
                                            model.stats.x_std.data() +
                                                model.stats.x_std.size())}};
  json groups = json::object();
  for (const auto& g : model.params.groups) {
    json entry;
    entry["lr"] = g.lr;
    entry["spec"] = g.spec ? spec_to_json(*g.spec) : json(nullptr);
    entry["data"] = std::vector<double>(g.data.data(), g.data.data() + g.data.size());
    groups[g.name] = std::move(entry);
  }
  j["groups"] = std::move(groups);
  return j.dump();
}

Model model_from_checkpoint_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed checkpoint: ") + e.what());
  }
  if (j.value("format", "") != "bncde-checkpoint-v1")
    throw std::invalid_argument("checkpoint: unknown format tag");

  sim::Standardization stats;
  const json& st = j.at("standardization");
  stats.y_mean = st.at("y_mean").get<double>();
  stats.y_std = st.at("y_std").get<double>();
  const auto xm = st.at("x_mean").get<std::vector<double>>();
  const auto xs = st.at("x_std").get<std::vector<double>>();
  stats.x_mean = Eigen::Map<const Vec>(xm.data(), static_cast<Eigen::Index>(xm.size()));
  stats.x_std = Eigen::Map<const Vec>(xs.data(), static_cast<Eigen::Index>(xs.size()));

  Model m = make_model(config_from_json(j.at("config")), stats);
  for (auto& g : m.params.groups) {
    const json& entry = j.at("groups").at(g.name);
    const auto data = entry.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != g.data.size())
      throw std::invalid_argument("checkpoint: group '" + g.name + "' size mismatch");
    g.data = Eigen::Map<const Vec>(data.data(), static_cast<Eigen::Index>(data.size()));
  }
  return m;
}

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << checkpoint_to_json(model) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return model_from_checkpoint_json(text);
}

}  // namespace bncde::model
