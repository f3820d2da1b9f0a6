#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "bncde/control_path.hpp"
#include "bncde/rng.hpp"

using namespace bncde;
using controlpath::HermitePath;
using controlpath::Mat;
using controlpath::SamplePath;
using controlpath::Vec;

namespace {

SamplePath path_of(std::vector<double> ts, std::vector<std::vector<double>> rows) {
  SamplePath p;
  p.timestamps = Eigen::Map<const Vec>(ts.data(), static_cast<Eigen::Index>(ts.size()));
  p.channels.resize(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c)
      p.channels(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  return p;
}

}  // namespace

TEST_CASE("interpolation reproduces samples at knots exactly") {
  const SamplePath s = path_of({0.0, 1.0, 2.5, 4.0},
                               {{1.0, -2.0}, {0.5, 3.25}, {-1.75, 0.125}, {2.0, 2.0}});
  const HermitePath h = controlpath::build_hermite(s);
  for (Eigen::Index i = 0; i < s.timestamps.size(); ++i) {
    const Vec v = h.eval(s.timestamps[i]);
    CHECK(v[0] == s.channels(i, 0));  // bit-level on exact inputs
    CHECK(v[1] == s.channels(i, 1));
  }
}

TEST_CASE("affine data is reproduced exactly") {
  // x(t) = 2t + 1 sampled at {0, 1, 3}; backward-difference slopes are all 2,
  // so the Hermite cubic collapses to the line itself.
  const SamplePath s = path_of({0.0, 1.0, 3.0}, {{1.0}, {3.0}, {7.0}});
  const HermitePath h = controlpath::build_hermite(s);
  CHECK(h.eval(2.0)[0] == doctest::Approx(5.0).epsilon(1e-13));
  CHECK(h.increment(1.0, 3.0)[0] == doctest::Approx(4.0).epsilon(1e-13));
  // Direct polynomial check against the line at off-knot query points.
  for (double t : {0.25, 0.9, 1.7, 2.2, 2.9})
    CHECK(h.eval(t)[0] == doctest::Approx(2.0 * t + 1.0).epsilon(1e-12));
}

TEST_CASE("random affine channels are reproduced") {
  Rng rng(99);
  for (int rep = 0; rep < 25; ++rep) {
    const int n = 3 + static_cast<int>(rng.next_u64() % 6);
    Vec ts(n);
    double t = 0.0;
    for (int i = 0; i < n; ++i) {
      t += 0.1 + rng.uniform();
      ts[i] = t;
    }
    const double a = rng.normal(), b = rng.normal();
    SamplePath s;
    s.timestamps = ts;
    s.channels.resize(n, 1);
    for (int i = 0; i < n; ++i) s.channels(i, 0) = a * ts[i] + b;
    const HermitePath h = controlpath::build_hermite(s);
    for (int q = 0; q < 10; ++q) {
      const double tq = ts[0] + (ts[n - 1] - ts[0]) * rng.uniform();
      CHECK(std::abs(h.eval(tq)[0] - (a * tq + b)) < 1e-9);
    }
  }
}

TEST_CASE("constant channel evaluates to the constant with zero increments") {
  const SamplePath s = path_of({0.0, 2.0, 5.0}, {{3.5}, {3.5}, {3.5}});
  const HermitePath h = controlpath::build_hermite(s);
  for (double t : {-1.0, 0.0, 1.3, 4.99, 5.0, 8.0}) CHECK(h.eval(t)[0] == 3.5);
  CHECK(h.increment(0.5, 4.5)[0] == 0.0);
}

TEST_CASE("increments") {
  const SamplePath s = path_of({0.0, 1.0, 2.0}, {{0.0}, {1.0}, {4.0}});
  const HermitePath h = controlpath::build_hermite(s);

  SUBCASE("t0 == t1 gives the zero vector") {
    CHECK(h.increment(1.3, 1.3)[0] == 0.0);
  }
  SUBCASE("additivity over adjacent intervals") {
    Rng rng(123);
    for (int rep = 0; rep < 50; ++rep) {
      double a = 2.0 * rng.uniform(), b = 2.0 * rng.uniform(), c = 2.0 * rng.uniform();
      if (a > b) std::swap(a, b);
      if (b > c) std::swap(b, c);
      if (a > b) std::swap(a, b);
      const double lhs = h.increment(a, b)[0] + h.increment(b, c)[0];
      CHECK(std::abs(lhs - h.increment(a, c)[0]) < 1e-12);
    }
  }
  SUBCASE("t0 > t1 is an argument error") {
    CHECK_THROWS_AS((void)h.increment(2.0, 1.0), std::invalid_argument);
  }
}

TEST_CASE("queries clamp to boundary values") {
  const SamplePath s = path_of({1.0, 2.0, 3.0}, {{5.0}, {6.0}, {9.0}});
  const HermitePath h = controlpath::build_hermite(s);
  CHECK(h.eval(0.0)[0] == 5.0);
  CHECK(h.eval(100.0)[0] == 9.0);
  CHECK(h.increment(-5.0, 1.0)[0] == 0.0);
}

TEST_CASE("construction errors") {
  CHECK_THROWS_AS((void)controlpath::build_hermite(path_of({0.0}, {{1.0}})),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)controlpath::build_hermite(
                      path_of({0.0, 0.0}, {{1.0}, {2.0}})),
                  std::invalid_argument);
}

TEST_CASE("decoder control") {
  const Vec grid = Vec::LinSpaced(3, 0.0, 1.0);  // {0, 0.5, 1}

  SUBCASE("no future treatments keeps count channels at zero") {
    const HermitePath h = controlpath::build_decoder_control({}, 2, 1.0, grid);
    for (double t : {0.0, 0.25, 0.5, 1.0}) {
      const Vec v = h.eval(t);
      CHECK(v[1] == 0.0);
      CHECK(v[2] == 0.0);
    }
  }
  SUBCASE("single chemo event at tau = 0.5") {
    const HermitePath h =
        controlpath::build_decoder_control({{0.5, 0}}, 2, 1.0, grid);
    CHECK(h.eval(0.0)[1] == 0.0);
    CHECK(h.eval(0.5)[1] == 1.0);
    CHECK(h.eval(1.0)[1] == 1.0);
    // Pulse channel spikes only at the event knot.
    CHECK(h.eval(0.5)[3] == 1.0);
    CHECK(h.eval(0.0)[3] == 0.0);
    CHECK(h.eval(1.0)[3] == 0.0);
  }
  SUBCASE("two radio events end with terminal count 2") {
    const HermitePath h = controlpath::build_decoder_control(
        {{0.3, 1}, {0.9, 1}}, 2, 1.0, grid);
    CHECK(h.eval(1.0)[2] == 2.0);
  }
  SUBCASE("count channels are non-decreasing at sample knots") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<std::pair<double, int>> events;
      const int n = 1 + static_cast<int>(rng.next_u64() % 5);
      for (int e = 0; e < n; ++e)
        events.emplace_back(0.05 + 0.95 * rng.uniform(),
                            static_cast<int>(rng.next_u64() % 2));
      const HermitePath h = controlpath::build_decoder_control(events, 2, 1.0, grid);
      const Vec& knots = h.knots();
      for (Eigen::Index i = 1; i < knots.size(); ++i) {
        CHECK(h.eval(knots[i])[1] >= h.eval(knots[i - 1])[1]);
        CHECK(h.eval(knots[i])[2] >= h.eval(knots[i - 1])[2]);
      }
    }
  }
  SUBCASE("events outside the window are rejected") {
    CHECK_THROWS_AS(
        (void)controlpath::build_decoder_control({{1.5, 0}}, 2, 1.0, grid),
        std::invalid_argument);
    CHECK_THROWS_AS(
        (void)controlpath::build_decoder_control({{-0.25, 0}}, 2, 1.0, grid),
        std::invalid_argument);
  }
}
