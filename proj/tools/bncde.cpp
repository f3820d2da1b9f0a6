// bncde: simulate / train / evaluate / predict / benchmark for the Bayesian
// neural controlled differential equation and its TE-CDE baseline.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include "bncde/errors.hpp"
#include "bncde/metrics.hpp"
#include "bncde/model.hpp"
#include "bncde/simulator.hpp"
#include "bncde/train.hpp"
#include "commands.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void write_echo(CLI::App* cmd, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  bncde::cli::write_text_file(out_dir + "/" + cmd->get_name() + "_config_echo.cfg",
                              bncde::cli::echo_config(cmd));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  bncde::sim::SimConfig cfg;
  std::string out;
  int threads = 0;
};

int cmd_simulate(CLI::App* cmd, SimulateArgs& args) {
  const std::string out = bncde::cli::resolve_out_dir(args.out, "simulate");
  args.cfg.threads = resolve_threads(args.threads);
  write_echo(cmd, out);
  const bncde::sim::Dataset ds = bncde::sim::generate_dataset(args.cfg);
  bncde::sim::write_dataset(ds, out);
  std::cout << "simulate: wrote " << ds.train.size() << "/" << ds.val.size() << "/"
            << ds.test.size() << " train/val/test records to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string model = "bncde";
  std::string data;
  std::string sde_time = "days";
  std::string out;
  bncde::model::ModelConfig cfg;
  int threads = 0;
};

int cmd_train(CLI::App* cmd, TrainArgs& args) {
  const std::string out = bncde::cli::resolve_out_dir(args.out, "train");
  args.cfg.kind = bncde::model::model_kind_from_string(args.model);
  args.cfg.sde_time = bncde::model::sde_time_from_string(args.sde_time);
  args.cfg.threads = resolve_threads(args.threads);
  write_echo(cmd, out);

  const bncde::sim::Dataset ds = bncde::sim::load_dataset(args.data);
  bncde::model::Model m = bncde::model::make_model(args.cfg, ds.stats);
  const bncde::model::TrainResult result = bncde::model::train_model(m, ds);

  bncde::model::save_checkpoint(m, out + "/checkpoint.json");
  std::ostringstream log;
  log << "epoch,train_metric,val_metric,wall_seconds\n";
  for (const auto& row : result.log)
    log << row.epoch << "," << fmt_double(row.train_metric) << ","
        << fmt_double(row.val_metric) << "," << fmt_double(row.wall_seconds) << "\n";
  bncde::cli::write_text_file(out + "/training_log.csv", log.str());

  std::cout << "train: " << result.log.size() << " epochs (best epoch "
            << result.best_epoch << ", val metric "
            << fmt_double(result.best_val_metric) << ")"
            << (result.early_stopped ? ", early stopped" : "") << "; checkpoint at "
            << out << "/checkpoint.json\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::vector<int> deltas = {1};
  int mc_samples = 100;
  std::vector<double> deferral_rates = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  bool no_deferral = false;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out;
};

int cmd_evaluate(CLI::App* cmd, EvaluateArgs& args) {
  const std::string out = bncde::cli::resolve_out_dir(args.out, "evaluate");
  const int threads = resolve_threads(args.threads);
  write_echo(cmd, out);

  const bncde::model::Model m = bncde::model::load_checkpoint(args.checkpoint);
  const bncde::sim::Dataset ds = bncde::sim::load_dataset(args.data);
  const std::vector<double> rates =
      args.no_deferral ? std::vector<double>{} : args.deferral_rates;

  for (int delta : args.deltas) {
    const bncde::eval::EvalReport report =
        bncde::cli::run_evaluate(m, ds, delta, args.mc_samples, args.seed, threads,
                                 rates);
    const std::string stem = out + "/report_delta" + std::to_string(delta);
    bncde::cli::write_text_file(stem + ".json", bncde::eval::report_to_json(report));
    bncde::cli::write_text_file(stem + ".csv", bncde::eval::report_to_csv(report));
    std::cout << "evaluate: delta=" << delta
              << " coverage@0.95=" << fmt_double(report.coverage.front().second)
              << " mse=" << fmt_double(report.mse) << " -> " << stem << ".{json,csv}\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string record_path;
  int delta = 1;
  std::vector<double> alphas = {0.05};
  bool replace_future = false;
  std::vector<double> future_chemo;
  std::vector<double> future_radio;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_predict(CLI::App* cmd, PredictArgs& args) {
  const std::string out = bncde::cli::resolve_out_dir(args.out, "predict");
  write_echo(cmd, out);

  const bncde::model::Model m = bncde::model::load_checkpoint(args.checkpoint);
  const std::string line = bncde::cli::read_text_file(args.record_path);
  bncde::sim::PatientRecord rec = bncde::sim::record_from_json_string(line);

  if (args.replace_future || !args.future_chemo.empty() || !args.future_radio.empty()) {
    const double t_bar = rec.t_bar();
    std::vector<bncde::sim::TreatmentEvent> events;
    for (const auto& ev : rec.treatments)
      if (ev.day <= t_bar) events.push_back(ev);
    for (double day : args.future_chemo) {
      if (day <= t_bar)
        throw std::invalid_argument("predict: future treatment day must exceed t_bar");
      events.push_back({day, bncde::sim::kChemo});
    }
    for (double day : args.future_radio) {
      if (day <= t_bar)
        throw std::invalid_argument("predict: future treatment day must exceed t_bar");
      events.push_back({day, bncde::sim::kRadio});
    }
    rec.treatments = std::move(events);
  }

  const std::string json =
      bncde::cli::run_predict(m, rec, args.delta, args.alphas, args.seed);
  bncde::cli::write_text_file(out + "/prediction.json", json + "\n");
  std::cout << json << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchmarkArgs {
  int n = 8;
  int d_z = 8;
  std::vector<int> cde_hidden = {32, 32};
  std::vector<int> sde_hidden = {8, 16, 8};
  int mc = 5;
  double h_max = 0.5;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out;
};

int cmd_benchmark(CLI::App* cmd, BenchmarkArgs& args) {
  const std::string out = bncde::cli::resolve_out_dir(args.out, "benchmark");
  write_echo(cmd, out);
  std::cout << bncde::cli::run_benchmark(args.n, args.d_z, args.cde_hidden,
                                         args.sde_hidden, args.mc, args.h_max,
                                         args.seed, resolve_threads(args.threads));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural CDE: tumor-growth simulation, training and evaluation"};
  app.require_subcommand(1);

  SimulateArgs sim_args;
  auto* sim_cmd = app.add_subcommand("simulate", "Generate a tumor-growth dataset");
  sim_cmd->option_defaults()->always_capture_default(true);
  sim_cmd->add_option("--config", "Flat key=value config file; flags override");
  sim_cmd->add_option("--n-train", sim_args.cfg.n_train, "Training patients");
  sim_cmd->add_option("--n-val", sim_args.cfg.n_val, "Validation patients");
  sim_cmd->add_option("--n-test", sim_args.cfg.n_test, "Test patients");
  sim_cmd->add_option("--gamma", sim_args.cfg.gamma, "Observation informativeness");
  sim_cmd->add_option("--noise-var", sim_args.cfg.noise_var, "Var(eps_t)");
  sim_cmd->add_option("--seed", sim_args.cfg.seed, "Dataset seed");
  sim_cmd->add_option("--h-sim", sim_args.cfg.h_sim, "Simulation step (days)");
  sim_cmd->add_option("--growth-offset", sim_args.cfg.growth_offset,
                      "Constant inside the growth bracket (0 = classical Gompertz)");
  sim_cmd->add_option("--chemo-dose", sim_args.cfg.chemo_dose, "Chemo dose scale");
  sim_cmd->add_option("--radio-dose", sim_args.cfg.radio_dose, "Radio dose scale");
  sim_cmd->add_option("--y0-min", sim_args.cfg.y0_min, "Initial volume lower bound");
  sim_cmd->add_option("--y0-max", sim_args.cfg.y0_max, "Initial volume upper bound");
  sim_cmd->add_option("--volume-floor", sim_args.cfg.volume_floor, "Positivity floor");
  sim_cmd->add_option("--volume-cap", sim_args.cfg.volume_cap, "Numeric volume cap");
  sim_cmd->add_flag("--reject-negative-kill", sim_args.cfg.reject_negative_kill,
                    "Redraw negative kill coefficients (shifts sample means)");
  sim_cmd->add_option("--threads", sim_args.threads, "Worker threads (0 = auto)");
  sim_cmd->add_option("--out", sim_args.out, "Output directory");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train BNCDE or the TE-CDE baseline");
  train_cmd->option_defaults()->always_capture_default(true);
  train_cmd->add_option("--config", "Flat key=value config file; flags override");
  train_cmd->add_option("--model", train_args.model, "bncde | tecde")
      ->check(CLI::IsMember({"bncde", "tecde"}));
  train_cmd->add_option("--data", train_args.data, "Dataset directory")->required();
  train_cmd->add_option("--delta", train_args.cfg.delta, "Prediction window (days)");
  train_cmd->add_option("--d-z", train_args.cfg.d_z, "Hidden state size");
  train_cmd->add_option("--cde-hidden", train_args.cfg.cde_hidden,
                        "CDE field hidden sizes");
  train_cmd->add_option("--sde-hidden", train_args.cfg.sde_hidden,
                        "SDE drift hidden sizes");
  train_cmd->add_option("--sigma", train_args.cfg.sigma, "Diffusion coefficient");
  train_cmd->add_option("--mc-train", train_args.cfg.mc_train, "Training particles J");
  train_cmd->add_option("--mc-predict", train_args.cfg.mc_predict,
                        "Prediction particles K");
  train_cmd->add_option("--var-floor", train_args.cfg.var_floor, "Likelihood var floor");
  train_cmd->add_option("--dropout", train_args.cfg.dropout_p,
                        "TE-CDE head dropout probability");
  train_cmd->add_option("--lr-embedding", train_args.cfg.lr_embedding,
                        "Embedding learning rate");
  train_cmd->add_option("--lr-prediction", train_args.cfg.lr_prediction,
                        "Prediction head learning rate");
  train_cmd->add_option("--lr-sde", train_args.cfg.lr_sde, "SDE drift learning rate");
  train_cmd->add_option("--lr-cde", train_args.cfg.lr_cde,
                        "TE-CDE vector field learning rate");
  train_cmd->add_option("--batch", train_args.cfg.batch_size, "Batch size");
  train_cmd->add_option("--epochs", train_args.cfg.max_epochs, "Max epochs");
  train_cmd->add_option("--patience", train_args.cfg.patience, "Early-stop patience");
  train_cmd->add_option("--h-max", train_args.cfg.h_max, "Max solver step (days)");
  train_cmd->add_flag("--kl-half-factor", train_args.cfg.kl_half_factor,
                      "Use the 1/2-scaled path KL");
  train_cmd->add_option("--sde-time", train_args.sde_time, "days | normalized")
      ->check(CLI::IsMember({"days", "normalized"}));
  train_cmd->add_flag("--intensity-weighting", train_args.cfg.intensity_weighting,
                      "Inverse observation-intensity weighting");
  train_cmd->add_option("--intensity-clamp", train_args.cfg.intensity_clamp,
                        "Lower clamp for the estimated intensity");
  train_cmd->add_option("--balancing-alpha", train_args.cfg.balancing_alpha,
                        "Balancing BCE weight (0 = off)");
  train_cmd->add_flag("--full-mc-grid", train_args.cfg.full_mc_grid,
                      "Full J x K Monte Carlo grid instead of paired draws");
  train_cmd->add_option("--mc-decoder", train_args.cfg.mc_decoder,
                        "Decoder draws per encoder draw (full grid)");
  train_cmd->add_option("--seed", train_args.cfg.seed, "Training seed");
  train_cmd->add_option("--threads", train_args.threads, "Worker threads (0 = auto)");
  train_cmd->add_option("--out", train_args.out, "Output directory");

  EvaluateArgs eval_args;
  auto* eval_cmd =
      app.add_subcommand("evaluate", "Coverage, widths, MSE, deferral, correlation");
  eval_cmd->option_defaults()->always_capture_default(true);
  eval_cmd->add_option("--config", "Flat key=value config file; flags override");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint path")
      ->required();
  eval_cmd->add_option("--data", eval_args.data, "Dataset directory")->required();
  eval_cmd->add_option("--deltas", eval_args.deltas, "Prediction windows");
  eval_cmd->add_option("--mc-samples", eval_args.mc_samples, "Mixture components K");
  eval_cmd->add_option("--deferral-rates", eval_args.deferral_rates, "Deferral rates");
  eval_cmd->add_flag("--no-deferral", eval_args.no_deferral,
                     "Skip the deferral curve (no counterfactuals needed)");
  eval_cmd->add_option("--seed", eval_args.seed, "Evaluation seed");
  eval_cmd->add_option("--threads", eval_args.threads, "Worker threads (0 = auto)");
  eval_cmd->add_option("--out", eval_args.out, "Output directory");

  PredictArgs pred_args;
  auto* pred_cmd =
      app.add_subcommand("predict", "Posterior predictive for one patient record");
  pred_cmd->option_defaults()->always_capture_default(true);
  pred_cmd->add_option("--config", "Flat key=value config file; flags override");
  pred_cmd->add_option("--checkpoint", pred_args.checkpoint, "Checkpoint path")
      ->required();
  pred_cmd->add_option("--record", pred_args.record_path,
                       "File with one dataset-schema JSON record")
      ->required();
  pred_cmd->add_option("--delta", pred_args.delta, "Prediction window (days)");
  pred_cmd->add_option("--alphas", pred_args.alphas, "Credible-interval alphas");
  pred_cmd->add_flag("--replace-future", pred_args.replace_future,
                     "Drop the record's own future treatments");
  pred_cmd->add_option("--future-chemo", pred_args.future_chemo,
                       "Future chemo days (absolute, > t_bar)");
  pred_cmd->add_option("--future-radio", pred_args.future_radio,
                       "Future radio days (absolute, > t_bar)");
  pred_cmd->add_option("--seed", pred_args.seed, "Prediction seed");
  pred_cmd->add_option("--out", pred_args.out, "Output directory");

  BenchmarkArgs bench_args;
  auto* bench_cmd = app.add_subcommand("benchmark", "Informal runtime probe");
  bench_cmd->option_defaults()->always_capture_default(true);
  bench_cmd->add_option("--config", "Flat key=value config file; flags override");
  bench_cmd->add_option("--n", bench_args.n, "Synthetic records");
  bench_cmd->add_option("--d-z", bench_args.d_z, "Hidden state size");
  bench_cmd->add_option("--cde-hidden", bench_args.cde_hidden, "CDE hidden sizes");
  bench_cmd->add_option("--sde-hidden", bench_args.sde_hidden, "SDE hidden sizes");
  bench_cmd->add_option("--mc", bench_args.mc, "Monte Carlo particles");
  bench_cmd->add_option("--h-max", bench_args.h_max, "Max solver step");
  bench_cmd->add_option("--seed", bench_args.seed, "Seed");
  bench_cmd->add_option("--threads", bench_args.threads, "Worker threads (0 = auto)");
  bench_cmd->add_option("--out", bench_args.out, "Output directory (config echo)");

  std::vector<std::string> args;
  try {
    args = bncde::cli::expand_config_args(app, argc, argv);
  } catch (const bncde::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  }
  if (std::getenv("BNCDE_DEBUG_ARGS") != nullptr) {
    for (const auto& a : args) std::cerr << "[arg] " << a << "\n";
  }
  std::vector<const char*> cargs;
  cargs.reserve(args.size());
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (sim_cmd->parsed()) return cmd_simulate(sim_cmd, sim_args);
    if (train_cmd->parsed()) return cmd_train(train_cmd, train_args);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_cmd, eval_args);
    if (pred_cmd->parsed()) return cmd_predict(pred_cmd, pred_args);
    if (bench_cmd->parsed()) return cmd_benchmark(bench_cmd, bench_args);
  } catch (const bncde::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const bncde::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::domain_error& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return 0;
}
