#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "bncde/nets.hpp"
#include "bncde/rng.hpp"

using namespace bncde;
using nets::Activation;
using nets::FlatWeights;
using nets::MlpSpec;
using nets::Vec;

namespace {

MlpSpec spec_of(std::vector<int> sizes, Activation hidden = Activation::kRelu,
                std::optional<Activation> out = std::nullopt) {
  MlpSpec s;
  s.layer_sizes = std::move(sizes);
  s.hidden_activation = hidden;
  s.output_activation = out;
  return s;
}

}  // namespace

TEST_CASE("param_count examples") {
  CHECK(nets::param_count(spec_of({2, 3, 1})) == 13);
  // Closed-form sum evaluated independently:
  // 9*128+128 + 128*128+128 + 128*48+48 = 23984.
  const std::vector<int> sizes = {9, 128, 128, 48};
  std::int64_t expected = 0;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i)
    expected += static_cast<std::int64_t>(sizes[i]) * sizes[i + 1] + sizes[i + 1];
  CHECK(expected == 23984);
  CHECK(nets::param_count(spec_of({9, 128, 128, 48})) == expected);

  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 1 + static_cast<int>(rng.next_u64() % 40);
    const int m = 1 + static_cast<int>(rng.next_u64() % 40);
    CHECK(nets::param_count(spec_of({n, m})) == static_cast<std::int64_t>(n) * m + m);
  }
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(nets::param_count(spec_of({4})), std::invalid_argument);
  CHECK_THROWS_AS(nets::param_count(spec_of({4, 0, 2})), std::invalid_argument);
  CHECK_THROWS_AS(nets::activation_from_string("swish"), std::invalid_argument);
}

TEST_CASE("pack and unpack are inverse bijections") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<int> sizes;
    const int layers = 2 + static_cast<int>(rng.next_u64() % 3);
    for (int l = 0; l < layers; ++l)
      sizes.push_back(1 + static_cast<int>(rng.next_u64() % 6));
    const MlpSpec spec = spec_of(sizes);

    const FlatWeights w = nets::init_uniform(spec, rng);
    const auto layers_out = nets::unpack(w);
    const FlatWeights repacked = nets::pack(spec, layers_out);
    CHECK(repacked.data == w.data);  // exact

    const auto roundtrip = nets::unpack(repacked);
    for (std::size_t l = 0; l < layers_out.size(); ++l) {
      CHECK(roundtrip[l].first == layers_out[l].first);
      CHECK(roundtrip[l].second == layers_out[l].second);
    }
  }
}

TEST_CASE("mlp forward basics") {
  const MlpSpec spec = spec_of({3, 4, 2});
  const FlatWeights zero = nets::zeros(spec);
  const Vec y = nets::mlp_forward(spec, zero.data, Vec::Ones(3));
  CHECK(y.isZero(0.0));

  // A single layer is an affine map followed by the output activation.
  Rng rng(3);
  const MlpSpec single = spec_of({3, 2}, Activation::kRelu, Activation::kTanh);
  const FlatWeights w = nets::init_uniform(single, rng);
  const Vec x = Vec::Random(3);
  const auto layers = nets::unpack(w);
  const Vec expected =
      (layers[0].first * x + layers[0].second).array().tanh().matrix();
  CHECK((nets::mlp_forward(single, w.data, x) - expected).norm() < 1e-14);
}

TEST_CASE("mlp tape and plain forward agree; gradient matches finite differences") {
  Rng rng(17);
  const MlpSpec spec = spec_of({3, 5, 2}, Activation::kTanh, Activation::kTanh);
  const FlatWeights w = nets::init_uniform(spec, rng);
  const Vec x = Vec::Random(3);

  autodiff::Tape tape;
  const auto wid = tape.leaf(w.data);
  const auto xid = tape.constant(x);
  const auto out = nets::mlp_apply(tape, spec, wid, xid);
  CHECK((tape.value(out) - nets::mlp_forward(spec, w.data, x)).norm() < 1e-14);

  const auto root = tape.squared_norm(out);
  tape.backward(root);
  const Vec analytic = tape.grad(wid);

  Vec numeric(w.data.size());
  for (Eigen::Index i = 0; i < w.data.size(); ++i) {
    Vec wp = w.data, wm = w.data;
    wp[i] += 1e-6;
    wm[i] -= 1e-6;
    numeric[i] = (nets::mlp_forward(spec, wp, x).squaredNorm() -
                  nets::mlp_forward(spec, wm, x).squaredNorm()) /
                 2e-6;
  }
  for (Eigen::Index i = 0; i < numeric.size(); ++i) {
    const double scale = std::max({std::abs(numeric[i]), std::abs(analytic[i]), 1e-8});
    CHECK(std::abs(numeric[i] - analytic[i]) / scale < 1e-5);
  }
}

TEST_CASE("mlp_forward_time feeds the trailing time column") {
  Rng rng(23);
  const MlpSpec spec = spec_of({4, 3, 2}, Activation::kTanh);
  const FlatWeights w = nets::init_uniform(spec, rng);
  const Vec x = Vec::Random(3);
  Vec xe(4);
  xe << x[0], x[1], x[2], 0.73;
  CHECK((nets::mlp_forward_time(spec, w.data, x, 0.73) -
         nets::mlp_forward(spec, w.data, xe)).norm() < 1e-14);
}

TEST_CASE("tanh output activation keeps coordinates in (-1, 1)") {
  Rng rng(29);
  const MlpSpec spec = spec_of({4, 8, 6}, Activation::kRelu, Activation::kTanh);
  for (int rep = 0; rep < 50; ++rep) {
    const FlatWeights w = nets::init_uniform(spec, rng);
    Vec x(4);
    for (int i = 0; i < 4; ++i) x[i] = 20.0 * rng.normal();
    const Vec y = nets::mlp_forward(spec, w.data, x);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      CHECK(y[i] > -1.0);
      CHECK(y[i] < 1.0);
    }
  }
}

TEST_CASE("mc_dropout") {
  Rng rng(31);
  Vec x(3);
  x << 1.0, -2.0, 3.0;

  SUBCASE("p = 0 leaves the input unchanged") {
    CHECK(nets::mc_dropout(x, 0.0, rng) == x);
  }
  SUBCASE("zero input stays zero") {
    CHECK(nets::mc_dropout(Vec::Zero(5), 0.4, rng).isZero(0.0));
  }
  SUBCASE("p outside [0, 1) is a domain error") {
    CHECK_THROWS_AS((void)nets::mc_dropout(x, 1.0, rng), std::domain_error);
    CHECK_THROWS_AS((void)nets::mc_dropout(x, -0.1, rng), std::domain_error);
  }
  SUBCASE("survivor scaling keeps the expectation") {
    // Monte Carlo mean over 1e5 draws within 3 standard errors per coordinate.
    const double p = 0.1;
    const int n = 100000;
    Vec mean = Vec::Zero(3);
    for (int k = 0; k < n; ++k) mean += nets::mc_dropout(x, p, rng);
    mean /= static_cast<double>(n);
    for (int i = 0; i < 3; ++i) {
      // Var of one draw of coordinate i: x_i^2 * p / (1 - p).
      const double se = std::sqrt(x[i] * x[i] * p / (1.0 - p) / n);
      CHECK(std::abs(mean[i] - x[i]) < 3.0 * se);
    }
  }
}
