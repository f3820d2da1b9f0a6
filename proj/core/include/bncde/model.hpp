#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bncde/control_path.hpp"
#include "bncde/dataset.hpp"
#include "bncde/metrics.hpp"
#include "bncde/nets.hpp"
#include "bncde/rng.hpp"
#include "bncde/solvers.hpp"
#include "bncde/tape.hpp"

namespace bncde::model {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class ModelKind { kBncde, kTecde };
ModelKind model_kind_from_string(const std::string& s);
std::string to_string(ModelKind kind);

// How the weight SDEs parameterize time.  kDays integrates the SDE over raw
// days ([0, t_bar] and [0, delta]); kNormalized rescales both horizons to
// [0, 1], which keeps the OU prior's pull toward zero from flattening the
// weight paths over long observation windows.
enum class SdeTime { kDays, kNormalized };
SdeTime sde_time_from_string(const std::string& s);
std::string to_string(SdeTime t);

struct ModelConfig {
  ModelKind kind = ModelKind::kBncde;
  int delta = 1;

  int d_z = 8;
  std::vector<int> cde_hidden = {128, 128};
  std::vector<int> sde_hidden = {16, 64, 64, 64, 16};
  double sigma = 0.001;
  int mc_train = 10;    // J, paired encoder/decoder particles
  int mc_predict = 100; // K
  double var_floor = 1e-6;
  double dropout_p = 0.1;  // TE-CDE prediction head

  double lr_embedding = 1e-3;
  double lr_prediction = 1e-3;
  double lr_sde = 1e-4;
  double lr_cde = 1e-4;  // TE-CDE vector fields
  int batch_size = 64;
  int max_epochs = 500;
  int patience = 10;

  double h_max = 0.5;
  bool kl_half_factor = false;
  SdeTime sde_time = SdeTime::kDays;

  bool intensity_weighting = false;
  double intensity_clamp = 0.05;
  double balancing_alpha = 0.0;  // 0 disables the balancing head

  // Pair encoder/decoder particles 1:1 (default) or run the full J x K grid.
  bool full_mc_grid = false;
  int mc_decoder = 0;  // decoder draws per encoder draw when full_mc_grid; 0 -> J

  std::uint64_t seed = 0;
  int threads = 1;
};

// Encoder control channel count: outcome, covariates, treatment indicators,
// normalized time.
int encoder_control_channels();
int decoder_control_channels();

struct ModelSpecs {
  nets::MlpSpec embedding;    // [1 + d_x + d_a, d_z]
  nets::MlpSpec head;         // [d_z, 2] for BNCDE, [d_z, 1] for TE-CDE
  nets::MlpSpec enc_field;    // [d_z + 1, hidden..., d_z * d_control_enc], tanh out
  nets::MlpSpec dec_field;
  nets::MlpSpec enc_drift;    // [d_omega_e + 1, hidden..., d_omega_e], linear out
  nets::MlpSpec dec_drift;
  nets::MlpSpec intensity_head;  // [d_z, 1], sigmoid applied at use site
  nets::MlpSpec balance_head;    // [d_z, d_a]
  std::int64_t d_omega_enc = 0;
  std::int64_t d_omega_dec = 0;
};

ModelSpecs derive_specs(const ModelConfig& cfg);

// Named flat parameter groups with per-group learning rates; the unit of
// checkpointing and optimizer state.
struct ParamGroup {
  std::string name;
  Vec data;
  double lr = 1e-3;
  std::optional<nets::MlpSpec> spec;
};

struct ParamStore {
  std::vector<ParamGroup> groups;

  int index_of(const std::string& name) const;
  Vec& data(const std::string& name);
  const Vec& data(const std::string& name) const;
  std::int64_t total_size() const;
  ParamStore zeros_like() const;
};

struct Model {
  ModelConfig config;
  ModelSpecs specs;
  ParamStore params;
  sim::Standardization stats;
};

// Fresh parameters: deterministic uniform(-sqrt(1/fan_in), sqrt(1/fan_in))
// initialization from the seed; drift-net output layers start at zero plus an
// explicit -omega skip so g(omega, t) = -omega (the OU prior) at
// initialization; initial-condition means are drawn like field weights.
Model make_model(const ModelConfig& cfg, const sim::Standardization& stats);

// ---------------------------------------------------------------------------
// Record preparation: control paths and integration grids for one patient and
// one prediction window.

struct PreparedRecord {
  int record_id = 0;
  bool has_encoder = false;
  std::optional<controlpath::HermitePath> enc_control;
  solvers::TimeGrid enc_grid;
  controlpath::HermitePath dec_control{Vec::LinSpaced(2, 0.0, 1.0), Mat::Zero(2, 1), {}};
  solvers::TimeGrid dec_grid;
  Vec embed_input;
  int delta = 1;
  double y_target = 0.0;    // standardized outcome at t_bar + delta
  int obs_indicator = 0;    // intensity-head label
  double t_bar = 0.0;
  // Balancing supervision: decision day, per-treatment 0/1 labels, encoder
  // grid index of the decision time.
  std::vector<std::tuple<double, Vec, int>> decisions;
};

// use_counterfactual reads the twin's outcomes/covariates/treatments instead
// of the factual ones (test split only).  Throws std::invalid_argument for an
// empty record or a missing window.
PreparedRecord prepare_record(const Model& model, const sim::PatientRecord& record,
                              int delta, bool use_counterfactual = false);

// ---------------------------------------------------------------------------
// Forward passes.

struct ParticleResult {
  double mu = 0.0;       // standardized prediction mean
  double var = 0.0;      // standardized likelihood variance (>= var_floor)
  double kl_enc = 0.0;
  double kl_dec = 0.0;
};

// One Monte Carlo particle, plain arithmetic (inference path).
ParticleResult forward_particle(const Model& model, const PreparedRecord& prep,
                                Rng& rng);

// All K particles advanced in lockstep as matrix columns, so each step reads
// the drift weights once instead of K times.  Particle k draws its noise from
// Rng(base_seed + k), matching the sequential path's streams.
std::vector<ParticleResult> forward_particles(const Model& model,
                                              const PreparedRecord& prep, int count,
                                              std::uint64_t base_seed);

struct ElboBreakdown {
  double expected_loglik = 0.0;
  double kl_encoder = 0.0;
  double kl_decoder = 0.0;
  double elbo = 0.0;  // always expected_loglik - kl_encoder - kl_decoder
};

struct ElboOptions {
  int mc_particles = 0;  // 0 -> config.mc_train
  // Test hook: replaces the estimated observation intensity by a constant.
  std::optional<double> fixed_zeta;
};

struct ElboResult {
  ElboBreakdown breakdown;   // intensity-weighted when weighting is enabled
  double intensity_bce = 0.0;
  double balance_bce = 0.0;  // (1/m) sum [a log p + (1-a) log(1-p)], <= 0
  double mse = 0.0;          // TE-CDE training loss (weighted)
  double objective = 0.0;    // maximized: elbo + alpha_bal * balance_bce
};

// Lower-level batch entry points over cached prepared records (the training
// loop reuses control paths and grids across epochs).
ElboResult elbo_batch_prepared(const Model& model,
                               const std::vector<const PreparedRecord*>& batch,
                               std::uint64_t base_seed, const ElboOptions& opts = {},
                               ParamStore* grads = nullptr, int threads = 1);
ElboResult mse_batch_prepared(const Model& model,
                              const std::vector<const PreparedRecord*>& batch,
                              std::uint64_t base_seed, const ElboOptions& opts = {},
                              ParamStore* grads = nullptr, int threads = 1);

// Monte Carlo ELBO over a batch.  When `grads` is non-null it accumulates
// d(-objective)/d(theta) for every parameter group (the training gradient).
// Deterministic given (params, records, base_seed, threads).
ElboResult elbo_batch(const Model& model, const std::vector<const sim::PatientRecord*>& batch,
                      std::uint64_t base_seed, const ElboOptions& opts = {},
                      ParamStore* grads = nullptr, int threads = 1);

// TE-CDE: mean squared error in place of the ELBO; dropout active in the
// prediction head.  Reported breakdown carries -MSE in `objective`.
ElboResult mse_batch(const Model& model, const std::vector<const sim::PatientRecord*>& batch,
                     std::uint64_t base_seed, const ElboOptions& opts = {},
                     ParamStore* grads = nullptr, int threads = 1);

// ---------------------------------------------------------------------------
// Posterior predictive.

// K Gaussian mixture components with uniform weights, in raw outcome units.
struct PosteriorPredictive {
  std::vector<std::pair<double, double>> components;  // (mu_k, var_k), var_k > 0

  double mean() const;
  double variance() const;        // law of total variance
  double model_uncertainty() const;  // variance of the mu_k
  double cdf(double y) const;
};

// K paired encoder/decoder weight-path draws, de-standardized.
PosteriorPredictive posterior_predictive(const Model& model,
                                         const sim::PatientRecord& record, int delta,
                                         int mc_samples, std::uint64_t seed,
                                         bool use_counterfactual = false);

// M MC-dropout point predictions in raw units (mixture of near-Dirac
// components with variance var_floor * y_std^2).
PosteriorPredictive tecde_predictive(const Model& model, const sim::PatientRecord& record,
                                     int delta, int mc_samples, std::uint64_t seed,
                                     bool use_counterfactual = false);

// M dropout head samples (standardized units) on an already prepared record.
std::vector<double> tecde_point_predictions(const Model& model,
                                            const PreparedRecord& prep,
                                            double dropout_p, int mc_samples,
                                            std::uint64_t seed);

// Raw M point predictions (standardized units) for one record.
std::vector<double> tecde_forward(const Model& model, const sim::PatientRecord& record,
                                  int delta, double dropout_p, int mc_samples,
                                  std::uint64_t seed);

// Equal-tailed (1 - alpha) credible interval of the mixture: quantiles at
// alpha/2 and 1 - alpha/2 by bisection to |F - target| <= 1e-8 on the bracket
// [min mu - 10 sigma, max mu + 10 sigma].
eval::Interval credible_interval(const PosteriorPredictive& pp, double alpha);

// ---------------------------------------------------------------------------
// Checkpoints: JSON object mapping parameter-group name -> {spec, data} plus
// the config and standardization echo (format documented in the README).

std::string checkpoint_to_json(const Model& model);
Model model_from_checkpoint_json(const std::string& text);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace bncde::model
