#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

namespace bncde::controlpath {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Irregularly sampled multichannel observations.  timestamps must be strictly
// increasing with at least 2 points; channels has one row per timestamp.
struct SamplePath {
  Vec timestamps;
  Mat channels;  // [num_timestamps x num_channels]
  std::vector<std::string> channel_names;
};

// Per-channel cubic Hermite interpolant with backward-difference slopes
// m_i = (x_i - x_{i-1}) / (t_i - t_{i-1}), m_0 = m_1.  Queries outside
// [t_first, t_last] clamp to the boundary value.  Immutable once built; safe
// to evaluate concurrently.
class HermitePath {
 public:
  HermitePath(Vec knots, Mat values, std::vector<std::string> channel_names);

  int num_channels() const { return static_cast<int>(values_.cols()); }
  const Vec& knots() const { return knots_; }
  const std::vector<std::string>& channel_names() const { return channel_names_; }
  double t_first() const { return knots_[0]; }
  double t_last() const { return knots_[knots_.size() - 1]; }

  Vec eval(double t) const;
  // X(t1) - X(t0); additive over adjacent intervals.  Throws
  // std::invalid_argument if t0 > t1.
  Vec increment(double t0, double t1) const;

 private:
  Vec knots_;
  Mat values_;  // [n x c]
  Mat slopes_;  // [n x c]
  std::vector<std::string> channel_names_;
};

// Throws std::invalid_argument for fewer than 2 points or non-increasing
// timestamps (construction error).
HermitePath build_hermite(const SamplePath& samples);

// Equivalent to path.increment(t0, t1); kept as a free function to mirror the
// operation-level API.
Vec path_increment(const HermitePath& path, double t0, double t1);

// Control path for the decoder over a prediction window of length `delta`,
// built from future treatment events given in window-local time tau in
// (0, delta].  Channels, in order: normalized time tau/delta, one cumulative
// count per treatment, one instantaneous 0/1 indicator per treatment.  The
// sample grid is the union of `grid`, the event times, 0 and delta.
// Events outside the window are an argument error.
HermitePath build_decoder_control(const std::vector<std::pair<double, int>>& events,
                                  int num_treatments, double delta, const Vec& grid);

}  // namespace bncde::controlpath
