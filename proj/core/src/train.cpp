#include "bncde/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>
#include <tuple>

#include "bncde/errors.hpp"

namespace bncde::model {

using autodiff::NodeId;
using autodiff::Tape;

namespace {

constexpr std::uint64_t kValStream = 0x76616cULL;      // validation noise
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kDecoderGridStream = 1000003ULL;

struct BatchAccum {
  double w_loglik = 0.0;
  double w_kl_enc = 0.0;
  double w_kl_dec = 0.0;
  double intensity_bce = 0.0;
  double balance_bce = 0.0;  // spec sign, <= 0
  double mse = 0.0;

  void operator+=(const BatchAccum& o) {
    w_loglik += o.w_loglik;
    w_kl_enc += o.w_kl_enc;
    w_kl_dec += o.w_kl_dec;
    intensity_bce += o.intensity_bce;
    balance_bce += o.balance_bce;
    mse += o.mse;
  }
};

struct LeafIds {
  std::vector<NodeId> by_group;  // parallel to ParamStore::groups
  NodeId of(const ParamStore& params, const std::string& name) const {
    return by_group[static_cast<std::size_t>(params.index_of(name))];
  }
};

LeafIds bind_params(Tape& tape, const ParamStore& params) {
  LeafIds ids;
  ids.by_group.reserve(params.groups.size());
  for (const auto& g : params.groups) ids.by_group.push_back(tape.leaf(g.data));
  return ids;
}

void collect_grads(const Tape& tape, const LeafIds& ids, ParamStore& grads) {
  for (std::size_t g = 0; g < grads.groups.size(); ++g) {
    const Vec& gr = tape.grad(ids.by_group[g]);
    if (gr.size() > 0) grads.groups[g].data += gr;
  }
}

// Balancing term node: mean binary cross-entropy loss of the treatment head
// over the record's decision timestamps (to be added to the minimized root
// with weight +alpha).
NodeId balance_loss_node(Tape& tape, const Model& model, const PreparedRecord& prep,
                         NodeId balance_w, NodeId z0,
                         const std::vector<NodeId>& enc_z) {
  const int d_z = model.config.d_z;
  NodeId loss = tape.constant_scalar(0.0);
  const double factor =
      1.0 / (static_cast<double>(prep.decisions.size()) * sim::kNumTreatments);
  for (const auto& [day, labels, grid_idx] : prep.decisions) {
    const NodeId z = grid_idx >= 0 ? enc_z[static_cast<std::size_t>(grid_idx)] : z0;
    const NodeId logits =
        tape.affine_flat(balance_w, 0, sim::kNumTreatments, d_z, z);
    for (int k = 0; k < sim::kNumTreatments; ++k)
      loss = tape.add_scaled(loss, tape.sigmoid_bce(tape.slice(logits, k, 1), labels[k]),
                             factor);
  }
  return loss;
}

struct IntensityEval {
  double weight = 1.0;
  NodeId bce = autodiff::kNoNode;  // present only when the head is live
  double bce_value = 0.0;
};

// Observation-intensity weighting: the weight is 1 / clamp(zeta_hat) treated
// as a constant, and the head's BCE loss sees only the detached decoder state
// (the stop-gradient contract).
IntensityEval intensity_eval(Tape& tape, const Model& model, const PreparedRecord& prep,
                             const ElboOptions& opts, NodeId intensity_w,
                             NodeId z_final) {
  IntensityEval out;
  const double clamp = model.config.intensity_clamp;
  if (opts.fixed_zeta) {
    out.weight = 1.0 / std::max(*opts.fixed_zeta, clamp);
    return out;
  }
  const NodeId z_detached = tape.constant(tape.value(z_final));
  const NodeId logit =
      tape.affine_flat(intensity_w, 0, 1, model.config.d_z, z_detached);
  const double x = tape.value(logit)[0];
  const double zeta = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                               : std::exp(x) / (1.0 + std::exp(x));
  out.weight = 1.0 / std::max(zeta, clamp);
  out.bce = tape.sigmoid_bce(logit, static_cast<double>(prep.obs_indicator));
  out.bce_value = tape.value(out.bce)[0];
  return out;
}

// One BNCDE record: J encoder particles, each with one (paired) or K (full
// grid) decoder draws.  Returns the accumulated metric sums; when grads is
// non-null, runs backward with contribution weight 1/(batch * J).
void bncde_record(const Model& model, const PreparedRecord& prep,
                  std::uint64_t record_seed, int mc_particles, double inv_batch,
                  const ElboOptions& opts, ParamStore* grads, BatchAccum& acc) {
  const ModelConfig& cfg = model.config;
  const ModelSpecs& specs = model.specs;
  const int d_z = cfg.d_z;
  const double t_horizon = sim::kObservationWindowDays;
  const double delta_days = static_cast<double>(prep.delta);
  const double enc_scale =
      cfg.sde_time == SdeTime::kDays ? 1.0 : 1.0 / sim::kObservationWindowDays;
  const double dec_scale = cfg.sde_time == SdeTime::kDays ? 1.0 : 1.0 / delta_days;
  const int dec_draws =
      cfg.full_mc_grid ? (cfg.mc_decoder > 0 ? cfg.mc_decoder : mc_particles) : 1;
  const bool use_intensity = cfg.intensity_weighting || opts.fixed_zeta.has_value();
  const bool use_balancing = cfg.balancing_alpha != 0.0;

  const std::size_t enc_steps =
      prep.has_encoder ? static_cast<std::size_t>(prep.enc_grid.num_steps()) : 0;
  const std::size_t dec_steps = static_cast<std::size_t>(prep.dec_grid.num_steps());
  const std::size_t node_estimate =
      25 * (enc_steps + 2) + (25 * (dec_steps + 2) + 16) * static_cast<std::size_t>(dec_draws) + 32;

  for (int j = 0; j < mc_particles; ++j) {
    Rng rng(record_seed + static_cast<std::uint64_t>(j));
    Tape tape;
    tape.reserve(node_estimate);
    const LeafIds leaves = bind_params(tape, model.params);
    const NodeId embed_w = leaves.of(model.params, "embedding");
    const NodeId head_w = leaves.of(model.params, "prediction_head");
    const NodeId enc_drift_w = leaves.of(model.params, "encoder_drift");
    const NodeId dec_drift_w = leaves.of(model.params, "decoder_drift");
    const NodeId nu_enc = leaves.of(model.params, "encoder_init_mean");
    const NodeId nu_dec = leaves.of(model.params, "decoder_init_mean");

    const NodeId x0 = tape.constant(prep.embed_input);
    const NodeId z0 = tape.affine_flat(embed_w, 0, d_z,
                                       static_cast<int>(prep.embed_input.size()), x0);

    NodeId z_enc_final = z0;
    NodeId kl_enc = tape.constant_scalar(0.0);
    std::vector<NodeId> enc_z;
    if (prep.has_encoder) {
      auto drift = [&](Tape& t, NodeId w, double time) {
        return t.sub(nets::mlp_apply_time(t, specs.enc_drift, enc_drift_w, w,
                                          time / t_horizon),
                     w);
      };
      auto prior = [](Tape& t, NodeId w, double) { return t.neg(w); };
      auto field = [&](Tape& t, NodeId z, double time, NodeId w) {
        return nets::mlp_apply_time(t, specs.enc_field, w, z, time / t_horizon);
      };
      solvers::SdeOptions sde{cfg.sigma, cfg.kl_half_factor, enc_scale};
      auto res = solvers::coupled_integrate(tape, drift, prior, nu_enc, field,
                                            *prep.enc_control, z0, prep.enc_grid, sde,
                                            rng, d_z, encoder_control_channels());
      z_enc_final = res.z.back();
      kl_enc = res.sde.kl;
      enc_z = std::move(res.z);
    }

    auto dec_drift = [&](Tape& t, NodeId w, double time) {
      return t.sub(nets::mlp_apply_time(t, specs.dec_drift, dec_drift_w, w,
                                        time / delta_days),
                   w);
    };
    auto dec_prior = [](Tape& t, NodeId w, double) { return t.neg(w); };
    auto dec_field = [&](Tape& t, NodeId z, double time, NodeId w) {
      return nets::mlp_apply_time(t, specs.dec_field, w, z, time / delta_days);
    };
    solvers::SdeOptions dec_sde{cfg.sigma, cfg.kl_half_factor, dec_scale};

    NodeId root = autodiff::kNoNode;
    const double inv_draws = 1.0 / static_cast<double>(dec_draws);
    for (int k = 0; k < dec_draws; ++k) {
      Rng grid_rng(mix_seed(record_seed + static_cast<std::uint64_t>(j),
                            kDecoderGridStream + static_cast<std::uint64_t>(k)));
      Rng& dec_rng = cfg.full_mc_grid ? grid_rng : rng;
      auto res = solvers::coupled_integrate(tape, dec_drift, dec_prior, nu_dec,
                                            dec_field, prep.dec_control, z_enc_final,
                                            prep.dec_grid, dec_sde, dec_rng, d_z,
                                            decoder_control_channels());
      const NodeId z_final = res.z.back();
      const NodeId out = tape.affine_flat(head_w, 0, 2, d_z, z_final);
      const NodeId mu = tape.slice(out, 0, 1);
      const NodeId var =
          tape.add_const(tape.softplus(tape.slice(out, 1, 1)), cfg.var_floor);
      const NodeId loglik = tape.gauss_log_density(prep.y_target, mu, var);
      const NodeId elbo_part = tape.sub(tape.sub(loglik, kl_enc), res.sde.kl);

      IntensityEval intensity;
      if (use_intensity)
        intensity = intensity_eval(tape, model, prep, opts,
                                   cfg.intensity_weighting
                                       ? leaves.of(model.params, "intensity_head")
                                       : autodiff::kNoNode,
                                   z_final);

      const NodeId term = tape.scale(elbo_part, -intensity.weight * inv_draws);
      root = root == autodiff::kNoNode ? term : tape.add(root, term);
      if (intensity.bce != autodiff::kNoNode)
        root = tape.add_scaled(root, intensity.bce, inv_draws);

      const double particle_norm = inv_draws / static_cast<double>(mc_particles);
      acc.w_loglik += intensity.weight * tape.value(loglik)[0] * particle_norm;
      acc.w_kl_enc += intensity.weight * tape.value(kl_enc)[0] * particle_norm;
      acc.w_kl_dec += intensity.weight * tape.value(res.sde.kl)[0] * particle_norm;
      acc.intensity_bce += intensity.bce_value * particle_norm;
    }

    if (use_balancing) {
      const NodeId bal = balance_loss_node(
          tape, model, prep, leaves.of(model.params, "balance_head"), z0, enc_z);
      root = tape.add_scaled(root, bal, cfg.balancing_alpha);
      acc.balance_bce += -tape.value(bal)[0] / static_cast<double>(mc_particles);
    }

    if (grads != nullptr) {
      tape.backward(root, inv_batch / static_cast<double>(mc_particles));
      collect_grads(tape, leaves, *grads);
    }
  }
}

// One TE-CDE record: deterministic CDEs, MC dropout in the head, squared
// error loss.
void tecde_record(const Model& model, const PreparedRecord& prep,
                  std::uint64_t record_seed, double inv_batch, const ElboOptions& opts,
                  ParamStore* grads, BatchAccum& acc) {
  const ModelConfig& cfg = model.config;
  const ModelSpecs& specs = model.specs;
  const int d_z = cfg.d_z;
  const double t_horizon = sim::kObservationWindowDays;
  const double delta_days = static_cast<double>(prep.delta);
  const bool use_intensity = cfg.intensity_weighting || opts.fixed_zeta.has_value();
  const bool use_balancing = cfg.balancing_alpha != 0.0;

  Rng rng(record_seed);
  Tape tape;
  tape.reserve(12 * static_cast<std::size_t>(
                        (prep.has_encoder ? prep.enc_grid.num_steps() : 0) +
                        prep.dec_grid.num_steps() + 8) + 32);
  const LeafIds leaves = bind_params(tape, model.params);
  const NodeId embed_w = leaves.of(model.params, "embedding");
  const NodeId head_w = leaves.of(model.params, "prediction_head");
  const NodeId enc_field_w = leaves.of(model.params, "encoder_field");
  const NodeId dec_field_w = leaves.of(model.params, "decoder_field");

  const NodeId x0 = tape.constant(prep.embed_input);
  const NodeId z0 = tape.affine_flat(embed_w, 0, d_z,
                                     static_cast<int>(prep.embed_input.size()), x0);
  NodeId z_enc_final = z0;
  std::vector<NodeId> enc_z;
  if (prep.has_encoder) {
    auto field = [&](Tape& t, NodeId z, double time, NodeId w) {
      return nets::mlp_apply_time(t, specs.enc_field, w, z, time / t_horizon);
    };
    const std::vector<NodeId> omega(
        static_cast<std::size_t>(prep.enc_grid.num_points()), enc_field_w);
    enc_z = solvers::integrate_cde(tape, field, *prep.enc_control, z0, omega,
                                   prep.enc_grid, d_z, encoder_control_channels());
    z_enc_final = enc_z.back();
  }
  auto field = [&](Tape& t, NodeId z, double time, NodeId w) {
    return nets::mlp_apply_time(t, specs.dec_field, w, z, time / delta_days);
  };
  const std::vector<NodeId> omega(
      static_cast<std::size_t>(prep.dec_grid.num_points()), dec_field_w);
  const auto dec_z = solvers::integrate_cde(tape, field, prep.dec_control, z_enc_final,
                                            omega, prep.dec_grid, d_z,
                                            decoder_control_channels());
  const NodeId z_final = dec_z.back();

  const Vec mask = nets::dropout_mask(d_z, cfg.dropout_p, rng);
  const NodeId out =
      tape.affine_flat(head_w, 0, 1, d_z, tape.mul_mask(z_final, mask));
  const NodeId diff = tape.add_const(out, -prep.y_target);
  const NodeId sq = tape.squared_norm(diff);

  IntensityEval intensity;
  if (use_intensity)
    intensity = intensity_eval(tape, model, prep, opts,
                               cfg.intensity_weighting
                                   ? leaves.of(model.params, "intensity_head")
                                   : autodiff::kNoNode,
                               z_final);

  NodeId root = tape.scale(sq, intensity.weight);
  if (intensity.bce != autodiff::kNoNode) root = tape.add(root, intensity.bce);
  if (use_balancing) {
    const NodeId bal = balance_loss_node(
        tape, model, prep, leaves.of(model.params, "balance_head"), z0, enc_z);
    root = tape.add_scaled(root, bal, cfg.balancing_alpha);
    acc.balance_bce += -tape.value(bal)[0];
  }

  acc.mse += intensity.weight * tape.value(sq)[0];
  acc.intensity_bce += intensity.bce_value;

  if (grads != nullptr) {
    tape.backward(root, inv_batch);
    collect_grads(tape, leaves, *grads);
  }
}

ElboResult batch_core(const Model& model,
                      const std::vector<const PreparedRecord*>& batch,
                      std::uint64_t base_seed, const ElboOptions& opts,
                      ParamStore* grads, int threads) {
  if (batch.empty()) throw std::invalid_argument("elbo_batch: empty batch");
  const ModelConfig& cfg = model.config;
  const bool is_bncde = cfg.kind == ModelKind::kBncde;
  const int mc_particles =
      opts.mc_particles > 0 ? opts.mc_particles : cfg.mc_train;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  const int nthreads =
      std::max(1, std::min<int>(threads, static_cast<int>(batch.size())));
  std::vector<BatchAccum> accums(static_cast<std::size_t>(nthreads));
  std::vector<ParamStore> grad_buffers;
  if (grads != nullptr)
    grad_buffers.assign(static_cast<std::size_t>(nthreads), grads->zeros_like());

  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nthreads));
  auto worker = [&](int tid) {
    try {
      BatchAccum& acc = accums[static_cast<std::size_t>(tid)];
      ParamStore* local =
          grads != nullptr ? &grad_buffers[static_cast<std::size_t>(tid)] : nullptr;
      for (std::size_t i = static_cast<std::size_t>(tid); i < batch.size();
           i += static_cast<std::size_t>(nthreads)) {
        const PreparedRecord& prep = *batch[i];
        const std::uint64_t record_seed =
            mix_seed(base_seed, static_cast<std::uint64_t>(prep.record_id));
        if (is_bncde) {
          bncde_record(model, prep, record_seed, mc_particles, inv_batch, opts, local,
                       acc);
        } else {
          tecde_record(model, prep, record_seed, inv_batch, opts, local, acc);
        }
      }
    } catch (...) {
      errors[static_cast<std::size_t>(tid)] = std::current_exception();
    }
  };

  if (nthreads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  // Fixed-order reduction keeps results bit-reproducible for a given thread
  // count.
  BatchAccum total;
  for (const auto& acc : accums) total += acc;
  if (grads != nullptr)
    for (const auto& buf : grad_buffers)
      for (std::size_t g = 0; g < grads->groups.size(); ++g)
        grads->groups[g].data += buf.groups[g].data;

  ElboResult result;
  if (is_bncde) {
    result.breakdown.expected_loglik = total.w_loglik * inv_batch;
    result.breakdown.kl_encoder = total.w_kl_enc * inv_batch;
    result.breakdown.kl_decoder = total.w_kl_dec * inv_batch;
    result.breakdown.elbo = result.breakdown.expected_loglik -
                            result.breakdown.kl_encoder - result.breakdown.kl_decoder;
    result.intensity_bce = total.intensity_bce * inv_batch;
    result.balance_bce = total.balance_bce * inv_batch;
    result.objective = result.breakdown.elbo + cfg.balancing_alpha * result.balance_bce;
  } else {
    result.mse = total.mse * inv_batch;
    result.intensity_bce = total.intensity_bce * inv_batch;
    result.balance_bce = total.balance_bce * inv_batch;
    result.objective = -result.mse + cfg.balancing_alpha * result.balance_bce;
  }
  return result;
}

}  // namespace

ElboResult elbo_batch_prepared(const Model& model,
                               const std::vector<const PreparedRecord*>& batch,
                               std::uint64_t base_seed, const ElboOptions& opts,
                               ParamStore* grads, int threads) {
  if (model.config.kind != ModelKind::kBncde)
    throw std::logic_error("elbo_batch: BNCDE only; use mse_batch for TE-CDE");
  return batch_core(model, batch, base_seed, opts, grads, threads);
}

ElboResult mse_batch_prepared(const Model& model,
                              const std::vector<const PreparedRecord*>& batch,
                              std::uint64_t base_seed, const ElboOptions& opts,
                              ParamStore* grads, int threads) {
  if (model.config.kind != ModelKind::kTecde)
    throw std::logic_error("mse_batch: TE-CDE only");
  return batch_core(model, batch, base_seed, opts, grads, threads);
}

ElboResult elbo_batch(const Model& model,
                      const std::vector<const sim::PatientRecord*>& batch,
                      std::uint64_t base_seed, const ElboOptions& opts,
                      ParamStore* grads, int threads) {
  std::vector<PreparedRecord> prepared;
  prepared.reserve(batch.size());
  for (const auto* rec : batch)
    prepared.push_back(prepare_record(model, *rec, model.config.delta));
  std::vector<const PreparedRecord*> ptrs;
  for (const auto& p : prepared) ptrs.push_back(&p);
  return elbo_batch_prepared(model, ptrs, base_seed, opts, grads, threads);
}

ElboResult mse_batch(const Model& model,
                     const std::vector<const sim::PatientRecord*>& batch,
                     std::uint64_t base_seed, const ElboOptions& opts,
                     ParamStore* grads, int threads) {
  std::vector<PreparedRecord> prepared;
  prepared.reserve(batch.size());
  for (const auto* rec : batch)
    prepared.push_back(prepare_record(model, *rec, model.config.delta));
  std::vector<const PreparedRecord*> ptrs;
  for (const auto& p : prepared) ptrs.push_back(&p);
  return mse_batch_prepared(model, ptrs, base_seed, opts, grads, threads);
}

// ---------------------------------------------------------------------------
// Optimizer and training loop.

AdamState make_adam_state(const ParamStore& params) {
  AdamState st;
  for (const auto& g : params.groups) {
    st.m.push_back(Vec::Zero(g.data.size()));
    st.v.push_back(Vec::Zero(g.data.size()));
  }
  return st;
}

void adam_step(ParamStore& params, const ParamStore& grads, AdamState& st) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t g = 0; g < params.groups.size(); ++g) {
    Vec& m = st.m[g];
    Vec& v = st.v[g];
    const Vec& grad = grads.groups[g].data;
    m = st.beta1 * m + (1.0 - st.beta1) * grad;
    v = st.beta2 * v + (1.0 - st.beta2) * grad.cwiseAbs2();
    params.groups[g].data.array() -=
        params.groups[g].lr * (m.array() / bc1) /
        ((v.array() / bc2).sqrt() + st.eps);
  }
}

double validation_metric(const Model& model,
                         const std::vector<const PreparedRecord*>& records,
                         std::uint64_t seed) {
  if (records.empty()) throw std::invalid_argument("validation_metric: empty set");
  const ModelConfig& cfg = model.config;
  double total = 0.0;
  if (cfg.kind == ModelKind::kBncde) {
    for (const auto* prep : records) {
      const std::uint64_t rec_seed =
          mix_seed(seed, static_cast<std::uint64_t>(prep->record_id));
      double ll = 0.0, kle = 0.0, kld = 0.0;
      for (const auto& r : forward_particles(model, *prep, cfg.mc_train, rec_seed)) {
        ll += autodiff::gaussian_log_density(prep->y_target, r.mu, r.var);
        kle += r.kl_enc;
        kld += r.kl_dec;
      }
      const double inv = 1.0 / static_cast<double>(cfg.mc_train);
      total += (ll - kle - kld) * inv;
    }
  } else {
    for (const auto* prep : records) {
      const std::uint64_t rec_seed =
          mix_seed(seed, static_cast<std::uint64_t>(prep->record_id));
      const auto points =
          tecde_point_predictions(model, *prep, cfg.dropout_p, cfg.mc_train, rec_seed);
      double mean = 0.0;
      for (double p : points) mean += p;
      mean /= static_cast<double>(points.size());
      const double err = mean - prep->y_target;
      total += err * err;
    }
  }
  return total / static_cast<double>(records.size());
}

TrainResult train_model(Model& model, const sim::Dataset& dataset) {
  const ModelConfig& cfg = model.config;
  if (dataset.train.empty() || dataset.val.empty())
    throw std::invalid_argument("train_model: dataset needs train and val splits");

  std::vector<PreparedRecord> train_prep, val_prep;
  train_prep.reserve(dataset.train.size());
  for (const auto& rec : dataset.train)
    train_prep.push_back(prepare_record(model, rec, cfg.delta));
  val_prep.reserve(dataset.val.size());
  for (const auto& rec : dataset.val)
    val_prep.push_back(prepare_record(model, rec, cfg.delta));
  std::vector<const PreparedRecord*> val_ptrs;
  for (const auto& p : val_prep) val_ptrs.push_back(&p);

  const bool maximize = cfg.kind == ModelKind::kBncde;
  const std::uint64_t val_seed = mix_seed(cfg.seed, kValStream);

  AdamState adam = make_adam_state(model.params);
  ParamStore best_params = model.params;
  double best_val = maximize ? -std::numeric_limits<double>::infinity()
                             : std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int stale_epochs = 0;

  TrainResult result;
  std::vector<std::size_t> order(train_prep.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    Rng shuffle_rng(mix_seed(cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng.next_u64() % i);
      std::swap(order[i - 1], order[j]);
    }

    const std::uint64_t epoch_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
    double epoch_metric = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const PreparedRecord*> batch;
      for (std::size_t i = start;
           i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
           ++i)
        batch.push_back(&train_prep[order[i]]);

      ParamStore grads = model.params.zeros_like();
      ElboResult res;
      try {
        res = batch_core(model, batch, epoch_seed, {}, &grads, cfg.threads);
      } catch (const std::domain_error& e) {
        // Mid-training domain failures (NaN variances etc.) are divergence.
        throw NumericalError("train: diverged at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batches) + ": " + e.what());
      }
      if (!std::isfinite(res.objective))
        throw NumericalError("train: non-finite loss at epoch " +
                             std::to_string(epoch) + ", batch " +
                             std::to_string(batches));
      adam_step(model.params, grads, adam);
      epoch_metric += maximize ? res.breakdown.elbo : res.mse;
      ++batches;
    }
    epoch_metric /= static_cast<double>(batches);

    const double val_metric = validation_metric(model, val_ptrs, val_seed);
    const auto t1 = std::chrono::steady_clock::now();

    EpochLog log;
    log.epoch = epoch;
    log.train_metric = epoch_metric;
    log.val_metric = val_metric;
    log.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    result.log.push_back(log);

    const bool improved = maximize ? val_metric > best_val : val_metric < best_val;
    if (improved) {
      best_val = val_metric;
      best_epoch = epoch;
      best_params = model.params;
      stale_epochs = 0;
    } else {
      ++stale_epochs;
      if (stale_epochs >= cfg.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }

  model.params = best_params;
  result.best_epoch = best_epoch;
  result.best_val_metric = best_val;
  return result;
}

}  // namespace bncde::model
