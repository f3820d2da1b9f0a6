#include "bncde/control_path.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bncde::controlpath {

namespace {
constexpr double kTimeTol = 1e-12;
}

HermitePath::HermitePath(Vec knots, Mat values, std::vector<std::string> channel_names)
    : knots_(std::move(knots)),
      values_(std::move(values)),
      channel_names_(std::move(channel_names)) {
  const Eigen::Index n = knots_.size();
  if (n < 2) throw std::invalid_argument("HermitePath: need at least 2 knots");
  if (values_.rows() != n)
    throw std::invalid_argument("HermitePath: values row count must match knots");
  for (Eigen::Index i = 1; i < n; ++i)
    if (!(knots_[i] > knots_[i - 1]))
      throw std::invalid_argument("HermitePath: knots must be strictly increasing");

  slopes_.resize(n, values_.cols());
  for (Eigen::Index i = 1; i < n; ++i)
    slopes_.row(i) = (values_.row(i) - values_.row(i - 1)) / (knots_[i] - knots_[i - 1]);
  slopes_.row(0) = slopes_.row(1);
}

Vec HermitePath::eval(double t) const {
  const Eigen::Index n = knots_.size();
  if (t <= knots_[0]) return values_.row(0).transpose();
  if (t >= knots_[n - 1]) return values_.row(n - 1).transpose();
  // Rightmost knot <= t.
  const double* begin = knots_.data();
  Eigen::Index i = std::upper_bound(begin, begin + n, t) - begin - 1;
  if (t == knots_[i]) return values_.row(i).transpose();
  const double h = knots_[i + 1] - knots_[i];
  const double s = (t - knots_[i]) / h;
  const double s2 = s * s, s3 = s2 * s;
  const double h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
  const double h10 = s3 - 2.0 * s2 + s;
  const double h01 = -2.0 * s3 + 3.0 * s2;
  const double h11 = s3 - s2;
  return (h00 * values_.row(i) + (h10 * h) * slopes_.row(i) +
          h01 * values_.row(i + 1) + (h11 * h) * slopes_.row(i + 1))
      .transpose();
}

Vec HermitePath::increment(double t0, double t1) const {
  if (t0 > t1) throw std::invalid_argument("HermitePath::increment: t0 > t1");
  return eval(t1) - eval(t0);
}

HermitePath build_hermite(const SamplePath& samples) {
  if (samples.timestamps.size() < 2)
    throw std::invalid_argument("build_hermite: need at least 2 sample points");
  return HermitePath(samples.timestamps, samples.channels, samples.channel_names);
}

Vec path_increment(const HermitePath& path, double t0, double t1) {
  return path.increment(t0, t1);
}

HermitePath build_decoder_control(const std::vector<std::pair<double, int>>& events,
                                  int num_treatments, double delta, const Vec& grid) {
  if (!(delta > 0.0)) throw std::invalid_argument("build_decoder_control: delta <= 0");
  if (num_treatments <= 0)
    throw std::invalid_argument("build_decoder_control: need at least one treatment");
  for (const auto& [tau, kind] : events) {
    if (tau <= 0.0 || tau > delta + kTimeTol)
      throw std::invalid_argument(
          "build_decoder_control: event outside the prediction window");
    if (kind < 0 || kind >= num_treatments)
      throw std::invalid_argument("build_decoder_control: treatment index out of range");
  }

  std::vector<double> times(grid.data(), grid.data() + grid.size());
  times.push_back(0.0);
  times.push_back(delta);
  for (const auto& [tau, kind] : events) times.push_back(tau);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end(),
                          [](double a, double b) { return std::abs(a - b) < kTimeTol; }),
              times.end());

  const int n = static_cast<int>(times.size());
  const int c = 1 + 2 * num_treatments;
  SamplePath path;
  path.timestamps = Eigen::Map<const Vec>(times.data(), n);
  path.channels = Mat::Zero(n, c);
  path.channel_names.push_back("time");
  for (int k = 0; k < num_treatments; ++k)
    path.channel_names.push_back("count" + std::to_string(k));
  for (int k = 0; k < num_treatments; ++k)
    path.channel_names.push_back("pulse" + std::to_string(k));

  for (int i = 0; i < n; ++i) {
    const double tau = times[i];
    path.channels(i, 0) = tau / delta;
    for (const auto& [te, kind] : events) {
      if (te <= tau + kTimeTol) path.channels(i, 1 + kind) += 1.0;
      if (std::abs(te - tau) < kTimeTol)
        path.channels(i, 1 + num_treatments + kind) = 1.0;
    }
  }
  return build_hermite(path);
}

}  // namespace bncde::controlpath
