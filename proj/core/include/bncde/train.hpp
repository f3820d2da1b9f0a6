#pragma once

#include <cstdint>
#include <vector>

#include "bncde/dataset.hpp"
#include "bncde/model.hpp"

namespace bncde::model {

struct EpochLog {
  int epoch = 0;           // 1-based
  double train_metric = 0; // mean ELBO (BNCDE) or mean MSE (TE-CDE)
  double val_metric = 0;
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_metric = 0.0;
  bool early_stopped = false;
};

// Adam with per-group learning rates.
struct AdamState {
  std::vector<Vec> m;
  std::vector<Vec> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(const ParamStore& params);
void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state);

// Plain validation metric (no extension terms): mean ELBO for BNCDE, mean MSE
// for TE-CDE, with fixed per-record seeds derived from `seed`.
double validation_metric(const Model& model,
                         const std::vector<const PreparedRecord*>& records,
                         std::uint64_t seed);

// Full training loop: minibatch Adam on -objective, early stopping on the
// validation metric with the configured patience, best-parameter restore.
// Deterministic given (model seed, dataset, threads).  Throws NumericalError
// on a non-finite loss.
TrainResult train_model(Model& model, const sim::Dataset& dataset);

}  // namespace bncde::model
