#include "commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "bncde/errors.hpp"
#include "bncde/rng.hpp"
#include "bncde/simulator.hpp"
#include "bncde/train.hpp"

namespace bncde::cli {

std::string resolve_out_dir(const std::string& out_flag, const std::string& command) {
  if (!out_flag.empty()) return out_flag;
  if (const char* root = std::getenv("BNCDE_OUT_ROOT"))
    return std::string(root) + "/" + command;
  return "out_" + command;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

// Values may be bare, quoted, bracketed ([a,b]) or whitespace/comma lists.
std::vector<std::string> tokenize_value(std::string v) {
  v = trim(v);
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']')
    v = v.substr(1, v.size() - 2);
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  for (auto& t : out)
    if (t.size() >= 2 && t.front() == '"' && t.back() == '"')
      t = t.substr(1, t.size() - 2);
  return out;
}

}  // namespace

std::vector<std::string> expand_config_args(CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (argc < 2 || args[1].empty() || args[1][0] == '-') return args;

  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args[1]);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }

  // Which long options did the user pass, and where is --config?
  std::vector<std::string> user_tokens;
  std::vector<std::string> user_keys;
  std::string config_path;
  for (int i = 2; i < argc; ++i) {
    std::string tok = args[static_cast<std::size_t>(i)];
    if (tok.rfind("--", 0) == 0) {
      const auto eq = tok.find('=');
      const std::string key = tok.substr(2, eq == std::string::npos ? std::string::npos
                                                                    : eq - 2);
      if (key == "config") {
        if (eq != std::string::npos) {
          config_path = tok.substr(eq + 1);
        } else if (i + 1 < argc) {
          config_path = args[static_cast<std::size_t>(++i)];
        } else {
          throw std::invalid_argument("--config expects a file path");
        }
        continue;
      }
      user_keys.push_back(key);
    }
    user_tokens.push_back(tok);
  }
  if (config_path.empty()) return args;

  std::istringstream file(read_text_file(config_path));
  std::vector<std::string> injected;
  std::string line;
  while (std::getline(file, line)) {
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#' || stripped[0] == ';') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line is not key=value: '" + stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    if (key == "config") continue;
    if (std::find(user_keys.begin(), user_keys.end(), key) != user_keys.end())
      continue;  // command-line flags override the file
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr)
      throw std::invalid_argument("unknown key in " + config_path + ": '" + key + "'");
    const auto values = tokenize_value(stripped.substr(eq + 1));
    if (values.empty()) continue;  // empty value means unset
    if (opt->get_expected_min() == 0) {
      injected.push_back("--" + key + "=" + values[0]);
    } else if (!values.empty()) {
      injected.push_back("--" + key);
      injected.insert(injected.end(), values.begin(), values.end());
    }
  }

  std::vector<std::string> out;
  out.push_back(args[0]);
  out.push_back(args[1]);
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), user_tokens.begin(), user_tokens.end());
  return out;
}

std::string echo_config(const CLI::App* cmd) {
  std::ostringstream out;
  for (const CLI::Option* opt : cmd->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "config" || name == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& results = opt->results();
      for (std::size_t i = 0; i < results.size(); ++i)
        value += (i == 0 ? "" : " ") + results[i];
    } else {
      value = opt->get_default_str();
    }
    if (opt->get_expected_min() == 0 && value.empty()) value = "false";
    out << name << " = " << value << "\n";
  }
  return out.str();
}

namespace {

struct PatientEval {
  std::vector<eval::Interval> intervals;  // one per confidence level
  double mean = 0.0;
  double outcome = 0.0;
  double mean_outcome_variance = 0.0;
  double te_uncertainty = 0.0;
  double te_sq_error = 0.0;
};

model::PosteriorPredictive predictive_of(const model::Model& m,
                                         const sim::PatientRecord& rec, int delta,
                                         int mc_samples, std::uint64_t seed,
                                         bool counterfactual) {
  if (m.config.kind == model::ModelKind::kBncde)
    return model::posterior_predictive(m, rec, delta, mc_samples, seed, counterfactual);
  return model::tecde_predictive(m, rec, delta, mc_samples, seed, counterfactual);
}

}  // namespace

eval::EvalReport run_evaluate(const model::Model& m, const sim::Dataset& ds, int delta,
                              int mc_samples, std::uint64_t seed, int threads,
                              const std::vector<double>& deferral_rates) {
  if (ds.test.empty()) throw std::invalid_argument("evaluate: empty test split");
  const auto levels = eval::default_confidence_levels();
  const bool want_deferral = !deferral_rates.empty();
  if (want_deferral)
    for (const auto& rec : ds.test)
      if (!rec.has_counterfactual)
        throw std::invalid_argument(
            "evaluate: deferral curves need counterfactual twins, but record " +
            std::to_string(rec.id) + " has none");

  std::vector<PatientEval> rows(ds.test.size());
  const int nthreads = std::max(1, threads);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nthreads));
  auto worker = [&](int tid) {
    try {
    for (std::size_t i = static_cast<std::size_t>(tid); i < ds.test.size();
         i += static_cast<std::size_t>(nthreads)) {
      const auto& rec = ds.test[i];
      const std::uint64_t rec_seed = mix_seed(seed, static_cast<std::uint64_t>(rec.id));
      PatientEval row;

      const auto pp = predictive_of(m, rec, delta, mc_samples, rec_seed, false);
      row.mean = pp.mean();
      row.outcome = m.stats.destandardize_mean(
          rec.targets[static_cast<std::size_t>(delta - 1)].y);
      if (m.config.kind == model::ModelKind::kBncde) {
        row.mean_outcome_variance = 0.0;
        for (const auto& [mu, var] : pp.components) row.mean_outcome_variance += var;
        row.mean_outcome_variance /= static_cast<double>(pp.components.size());
      } else {
        // TE-CDE has no likelihood variance; its only per-patient uncertainty
        // is the MC-dropout spread.
        row.mean_outcome_variance = pp.model_uncertainty();
      }
      for (double level : levels)
        row.intervals.push_back(model::credible_interval(pp, 1.0 - level));

      if (want_deferral) {
        // Common random numbers: the twin reuses the factual seed so the k-th
        // weight-path draws pair up.
        const auto pp_cf = predictive_of(m, rec, delta, mc_samples, rec_seed, true);
        double te_mean = 0.0, te_m2 = 0.0;
        const auto k = pp.components.size();
        for (std::size_t c = 0; c < k; ++c) {
          const double te = pp.components[c].first - pp_cf.components[c].first;
          te_mean += te;
          te_m2 += te * te;
        }
        te_mean /= static_cast<double>(k);
        row.te_uncertainty = te_m2 / static_cast<double>(k) - te_mean * te_mean;
        const double te_true =
            row.outcome - m.stats.destandardize_mean(
                              rec.targets_cf[static_cast<std::size_t>(delta - 1)].y);
        row.te_sq_error = (te_mean - te_true) * (te_mean - te_true);
      }
      rows[i] = std::move(row);
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

  eval::EvalReport report;
  report.delta = delta;
  report.seed = seed;
  report.mc_samples = mc_samples;
  report.noise_var = ds.config.noise_var;

  std::vector<double> outcomes, means, unc, sqerr, mean_vars, abs_errors;
  for (const auto& row : rows) {
    outcomes.push_back(row.outcome);
    means.push_back(row.mean);
    mean_vars.push_back(row.mean_outcome_variance);
    abs_errors.push_back(std::abs(row.mean - row.outcome));
    if (want_deferral) {
      unc.push_back(row.te_uncertainty);
      sqerr.push_back(row.te_sq_error);
    }
  }
  for (std::size_t l = 0; l < levels.size(); ++l) {
    std::vector<eval::Interval> ivs;
    for (const auto& row : rows) ivs.push_back(row.intervals[l]);
    report.coverage.emplace_back(levels[l], eval::empirical_coverage(ivs, outcomes));
    report.median_widths.emplace_back(levels[l], eval::median_width(ivs));
  }
  report.mse = eval::point_mse(means, outcomes);
  if (want_deferral) {
    const auto curve = eval::deferral_curve(unc, sqerr, deferral_rates);
    for (std::size_t r = 0; r < deferral_rates.size(); ++r)
      report.deferral.emplace_back(deferral_rates[r], curve[r]);
  }
  report.uncertainty_correlation =
      eval::uncertainty_error_correlation(mean_vars, abs_errors);
  return report;
}

std::string run_predict(const model::Model& m, const sim::PatientRecord& record,
                        int delta, const std::vector<double>& alphas,
                        std::uint64_t seed) {
  const auto pp = predictive_of(m, record, delta, m.config.mc_predict, seed, false);
  nlohmann::json j;
  j["delta"] = delta;
  j["seed"] = seed;
  j["model"] = model::to_string(m.config.kind);
  j["mc_samples"] = m.config.mc_predict;
  nlohmann::json mus = nlohmann::json::array(), vars = nlohmann::json::array();
  for (const auto& [mu, var] : pp.components) {
    mus.push_back(mu);
    vars.push_back(var);
  }
  j["mu"] = std::move(mus);
  j["sigma2"] = std::move(vars);
  j["mean"] = pp.mean();
  j["variance"] = pp.variance();
  j["model_uncertainty"] = pp.model_uncertainty();
  nlohmann::json cris = nlohmann::json::array();
  for (double alpha : alphas) {
    const auto iv = model::credible_interval(pp, alpha);
    cris.push_back(nlohmann::json{{"alpha", alpha}, {"lo", iv.lo}, {"hi", iv.hi}});
  }
  j["credible_intervals"] = std::move(cris);
  return j.dump(2);
}

std::string run_benchmark(int n_records, int d_z, const std::vector<int>& cde_hidden,
                          const std::vector<int>& sde_hidden, int mc, double h_max,
                          std::uint64_t seed, int threads) {
  model::ModelConfig cfg;
  cfg.d_z = d_z;
  cfg.cde_hidden = cde_hidden;
  cfg.sde_hidden = sde_hidden;
  cfg.mc_train = mc;
  cfg.mc_predict = mc;
  cfg.h_max = h_max;
  cfg.seed = seed;
  cfg.threads = threads;

  sim::SimConfig scfg;
  scfg.n_train = n_records;
  scfg.n_val = 1;
  scfg.n_test = 1;
  scfg.seed = seed;
  scfg.growth_offset = 0.0;
  const sim::Dataset ds = sim::generate_dataset(scfg);

  sim::Standardization stats = ds.stats;
  model::Model m = model::make_model(cfg, stats);

  std::vector<model::PreparedRecord> preps;
  for (const auto& rec : ds.train) preps.push_back(model::prepare_record(m, rec, 1));
  std::vector<const model::PreparedRecord*> batch;
  for (const auto& p : preps) batch.push_back(&p);

  std::ostringstream out;
  out << "benchmark: " << n_records << " records, d_z=" << d_z << ", d_omega_enc="
      << m.specs.d_omega_enc << ", J=" << mc << ", threads=" << threads << "\n";

  auto time_it = [](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
  };

  const double fwd = time_it([&] {
    (void)model::elbo_batch_prepared(m, batch, seed, {}, nullptr, threads);
  });
  model::ParamStore grads = m.params.zeros_like();
  const double fwdbwd = time_it([&] {
    (void)model::elbo_batch_prepared(m, batch, seed, {}, &grads, threads);
  });
  const double pred = time_it([&] {
    for (const auto& rec : ds.train)
      (void)model::posterior_predictive(m, rec, 1, mc, seed);
  });

  out << "  elbo forward            " << fwd << " s  (" << fwd / n_records
      << " s/record)\n";
  out << "  elbo forward + backward " << fwdbwd << " s  (" << fwdbwd / n_records
      << " s/record)\n";
  out << "  posterior predictive    " << pred << " s  (" << pred / n_records
      << " s/record, K=" << mc << ")\n";
  return out.str();
}

}  // namespace bncde::cli
