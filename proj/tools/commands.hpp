#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace CLI {
class App;
}

#include "bncde/dataset.hpp"
#include "bncde/metrics.hpp"
#include "bncde/model.hpp"

namespace bncde::cli {

// Resolved output directory: --out if given, else $BNCDE_OUT_ROOT/<command>,
// else ./out_<command>.
std::string resolve_out_dir(const std::string& out_flag, const std::string& command);

// Flat key=value run configuration.  expand_config_args() splices the file's
// entries into the token stream ahead of the user's flags (flags always win);
// echo_config() serializes every option of a parsed subcommand back into the
// same format, so a run can be reproduced from its echo alone.
std::vector<std::string> expand_config_args(CLI::App& app, int argc, char** argv);
std::string echo_config(const CLI::App* cmd);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// One evaluation pass for a single prediction window.
eval::EvalReport run_evaluate(const model::Model& m, const sim::Dataset& ds, int delta,
                              int mc_samples, std::uint64_t seed, int threads,
                              const std::vector<double>& deferral_rates);

// Posterior predictive summary of a single record as a JSON string.
std::string run_predict(const model::Model& m, const sim::PatientRecord& record,
                        int delta, const std::vector<double>& alphas,
                        std::uint64_t seed);

// Informal runtime probe; returns a human-readable table.
std::string run_benchmark(int n_records, int d_z, const std::vector<int>& cde_hidden,
                          const std::vector<int>& sde_hidden, int mc, double h_max,
                          std::uint64_t seed, int threads);

}  // namespace bncde::cli
