#include "bncde/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bncde::eval {

double empirical_coverage(const std::vector<Interval>& intervals,
                          const std::vector<double>& outcomes) {
  if (intervals.size() != outcomes.size())
    throw std::invalid_argument("empirical_coverage: length mismatch");
  if (intervals.empty()) throw std::invalid_argument("empirical_coverage: empty input");
  std::size_t covered = 0;
  for (std::size_t i = 0; i < intervals.size(); ++i)
    if (intervals[i].lo <= outcomes[i] && outcomes[i] <= intervals[i].hi) ++covered;
  return static_cast<double>(covered) / static_cast<double>(intervals.size());
}

double median_width(const std::vector<Interval>& intervals) {
  if (intervals.empty()) throw std::invalid_argument("median_width: empty group");
  std::vector<double> widths(intervals.size());
  for (std::size_t i = 0; i < intervals.size(); ++i)
    widths[i] = intervals[i].hi - intervals[i].lo;
  std::sort(widths.begin(), widths.end());
  const std::size_t n = widths.size();
  return n % 2 == 1 ? widths[n / 2] : 0.5 * (widths[n / 2 - 1] + widths[n / 2]);
}

double point_mse(const std::vector<double>& predicted,
                 const std::vector<double>& observed) {
  if (predicted.size() != observed.size())
    throw std::invalid_argument("point_mse: length mismatch");
  if (predicted.empty()) throw std::invalid_argument("point_mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - observed[i];
    acc += d * d;
  }
  return acc / static_cast<double>(predicted.size());
}

std::vector<double> deferral_curve(const std::vector<double>& model_uncertainty,
                                   const std::vector<double>& squared_errors,
                                   const std::vector<double>& rates) {
  const std::size_t n = model_uncertainty.size();
  if (n != squared_errors.size())
    throw std::invalid_argument("deferral_curve: length mismatch");
  if (n == 0) throw std::invalid_argument("deferral_curve: empty input");
  for (double r : rates)
    if (r < 0.0 || r >= 1.0)
      throw std::invalid_argument("deferral_curve: rates must lie in [0, 1)");

  // Patient indices ordered by increasing uncertainty; the most uncertain
  // patients sit at the back and are withheld first.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return model_uncertainty[a] < model_uncertainty[b];
  });

  std::vector<double> prefix_mse(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    prefix_mse[i + 1] = prefix_mse[i] + squared_errors[order[i]];

  const double base = prefix_mse[n] / static_cast<double>(n);
  std::vector<double> out;
  out.reserve(rates.size());
  for (double r : rates) {
    const auto dropped =
        static_cast<std::size_t>(std::ceil(r * static_cast<double>(n)));
    const std::size_t kept = n - dropped;
    if (kept == 0) throw std::invalid_argument("deferral_curve: all patients dropped");
    out.push_back((prefix_mse[kept] / static_cast<double>(kept)) / base);
  }
  return out;
}

double uncertainty_error_correlation(const std::vector<double>& mean_outcome_variance,
                                     const std::vector<double>& abs_errors) {
  const std::size_t n = mean_outcome_variance.size();
  if (n != abs_errors.size())
    throw std::invalid_argument("uncertainty_error_correlation: length mismatch");
  if (n < 3) throw std::invalid_argument("uncertainty_error_correlation: need n >= 3");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += mean_outcome_variance[i];
    my += abs_errors[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = mean_outcome_variance[i] - mx;
    const double dy = abs_errors[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0)
    throw std::domain_error("uncertainty_error_correlation: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> default_confidence_levels() {
  return {0.95, 0.96, 0.97, 0.98, 0.99};
}

std::vector<double> default_deferral_rates() {
  return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["delta"] = r.delta;
  j["seed"] = r.seed;
  j["mc_samples"] = r.mc_samples;
  j["noise_var"] = r.noise_var;
  j["mse"] = r.mse;
  j["uncertainty_correlation"] = r.uncertainty_correlation;
  nlohmann::json cov = nlohmann::json::array();
  for (const auto& [level, value] : r.coverage)
    cov.push_back(nlohmann::json{{"level", level}, {"coverage", value}});
  j["coverage"] = cov;
  nlohmann::json widths = nlohmann::json::array();
  for (const auto& [level, value] : r.median_widths)
    widths.push_back(nlohmann::json{{"level", level}, {"median_width", value}});
  j["median_widths"] = widths;
  nlohmann::json deferral = nlohmann::json::array();
  for (const auto& [rate, value] : r.deferral)
    deferral.push_back(nlohmann::json{{"rate", rate}, {"normalized_te_mse", value}});
  j["deferral"] = deferral;
  return j.dump(2);
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "metric,key,value\n";
  out << "delta," << r.delta << "," << r.delta << "\n";
  out << "seed," << r.seed << "," << r.seed << "\n";
  out << "mc_samples," << r.mc_samples << "," << r.mc_samples << "\n";
  out << "noise_var," << fmt(r.noise_var) << "," << fmt(r.noise_var) << "\n";
  for (const auto& [level, value] : r.coverage)
    out << "coverage," << fmt(level) << "," << fmt(value) << "\n";
  for (const auto& [level, value] : r.median_widths)
    out << "median_width," << fmt(level) << "," << fmt(value) << "\n";
  out << "mse," << fmt(r.noise_var) << "," << fmt(r.mse) << "\n";
  for (const auto& [rate, value] : r.deferral)
    out << "deferral," << fmt(rate) << "," << fmt(value) << "\n";
  out << "uncertainty_correlation,pearson," << fmt(r.uncertainty_correlation) << "\n";
  return out.str();
}

EvalReport report_from_csv(const std::string& csv) {
  EvalReport r;
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "metric,key,value")
    throw std::invalid_argument("report_from_csv: missing header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw std::invalid_argument("report_from_csv: malformed row: " + line);
    const std::string metric = line.substr(0, c1);
    const std::string key = line.substr(c1 + 1, c2 - c1 - 1);
    const std::string value = line.substr(c2 + 1);
    if (metric == "delta") {
      r.delta = std::stoi(value);
    } else if (metric == "seed") {
      r.seed = std::stoull(value);
    } else if (metric == "mc_samples") {
      r.mc_samples = std::stoi(value);
    } else if (metric == "noise_var") {
      r.noise_var = std::stod(value);
    } else if (metric == "coverage") {
      r.coverage.emplace_back(std::stod(key), std::stod(value));
    } else if (metric == "median_width") {
      r.median_widths.emplace_back(std::stod(key), std::stod(value));
    } else if (metric == "mse") {
      r.mse = std::stod(value);
    } else if (metric == "deferral") {
      r.deferral.emplace_back(std::stod(key), std::stod(value));
    } else if (metric == "uncertainty_correlation") {
      r.uncertainty_correlation = std::stod(value);
    } else {
      throw std::invalid_argument("report_from_csv: unknown metric: " + metric);
    }
  }
  return r;
}

}  // namespace bncde::eval
