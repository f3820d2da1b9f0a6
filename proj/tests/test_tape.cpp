#include <doctest.h>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "bncde/rng.hpp"
#include "bncde/tape.hpp"

using bncde::Rng;
using bncde::autodiff::NodeId;
using bncde::autodiff::Tape;
using bncde::autodiff::Vec;

namespace {

Vec make_vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

// Flat [rows x cols] row-major weights followed by the bias.
Vec flat_affine(const std::vector<std::vector<double>>& w, const std::vector<double>& b) {
  const auto rows = w.size(), cols = w[0].size();
  Vec flat(static_cast<Eigen::Index>(rows * cols + rows));
  Eigen::Index k = 0;
  for (const auto& row : w)
    for (double x : row) flat[k++] = x;
  for (double x : b) flat[k++] = x;
  return flat;
}

Vec random_vec(Eigen::Index n, Rng& rng, double scale = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

// Central finite differences of a scalar-valued rebuildable graph.
Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                double h = 1e-6) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

void check_close(const Vec& a, const Vec& b, double rel_tol) {
  REQUIRE(a.size() == b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    CHECK(std::abs(a[i] - b[i]) / scale < rel_tol);
  }
}

}  // namespace

TEST_CASE("affine forward matches hand arithmetic") {
  Tape tape;
  {
    const NodeId w = tape.leaf(flat_affine({{1, 0}, {0, 1}}, {0, 0}));
    const NodeId x = tape.constant(make_vec({3, -1}));
    const NodeId y = tape.affine_flat(w, 0, 2, 2, x);
    CHECK(tape.value(y)[0] == 3.0);
    CHECK(tape.value(y)[1] == -1.0);
  }
  {
    const NodeId w = tape.leaf(flat_affine({{1, 2}, {3, 4}}, {0, 0}));
    const NodeId x = tape.constant(make_vec({1, 1}));
    const NodeId y = tape.affine_flat(w, 0, 2, 2, x);
    CHECK(tape.value(y)[0] == 3.0);
    CHECK(tape.value(y)[1] == 7.0);
  }
  {
    const NodeId w = tape.leaf(flat_affine({{0, 0, 0}}, {5}));
    const NodeId x = tape.constant(make_vec({1.3, -2.7, 0.4}));
    const NodeId y = tape.affine_flat(w, 0, 1, 3, x);
    CHECK(tape.value(y)[0] == 5.0);
  }
}

TEST_CASE("affine rejects shape mismatch") {
  Tape tape;
  const NodeId w = tape.leaf(flat_affine({{1, 2}, {3, 4}}, {0, 0}));
  const NodeId x = tape.constant(make_vec({1, 1, 1}));
  CHECK_THROWS_AS((void)tape.affine_flat(w, 0, 2, 2, x), std::invalid_argument);
  // Weight slice exceeding the flat buffer is also a dimension error.
  const NodeId x2 = tape.constant(make_vec({1, 1}));
  CHECK_THROWS_AS((void)tape.affine_flat(w, 0, 3, 2, x2), std::invalid_argument);
}

TEST_CASE("activation examples") {
  Tape tape;
  const NodeId zero = tape.leaf(make_vec({0.0}));
  CHECK(tape.value(tape.tanh(zero))[0] == 0.0);
  CHECK(tape.value(tape.softplus(zero))[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const NodeId x = tape.leaf(make_vec({-1.0, 2.0}));
  const NodeId r = tape.relu(x);
  CHECK(tape.value(r)[0] == 0.0);
  CHECK(tape.value(r)[1] == 2.0);
}

TEST_CASE("softplus is overflow-safe") {
  Tape tape;
  const NodeId big = tape.leaf(make_vec({800.0, -800.0}));
  const NodeId y = tape.softplus(big);
  CHECK(tape.value(y)[0] == doctest::Approx(800.0));
  CHECK(tape.value(y)[1] == 0.0);
}

TEST_CASE("gaussian log density examples") {
  using bncde::autodiff::gaussian_log_density;
  CHECK(gaussian_log_density(0, 0, 1) ==
        doctest::Approx(-0.9189385332046727).epsilon(1e-12));
  CHECK(gaussian_log_density(1, 0, 1) ==
        doctest::Approx(-1.4189385332046727).epsilon(1e-12));
  for (double v : {0.25, 1.0, 7.5})
    CHECK(gaussian_log_density(2.5, 2.5, v) ==
          doctest::Approx(-0.5 * std::log(2.0 * M_PI * v)).epsilon(1e-12));
  CHECK_THROWS_AS(gaussian_log_density(0, 0, 0.0), std::domain_error);
  CHECK_THROWS_AS(gaussian_log_density(0, 0, -1.0), std::domain_error);
}

TEST_CASE("backward of tanh at zero is one") {
  Tape tape;
  const NodeId x = tape.leaf(make_vec({0.0}));
  const NodeId y = tape.tanh(x);
  tape.backward(y);
  CHECK(tape.grad(x)[0] == 1.0);
}

TEST_CASE("backward of a constant root leaves all grads zero") {
  Tape tape;
  const NodeId x = tape.leaf(make_vec({1.0, 2.0}));
  (void)tape.tanh(x);
  const NodeId root = tape.constant_scalar(4.2);
  tape.backward(root);
  CHECK(tape.grad(x).size() == 0);  // never touched == identically zero
}

TEST_CASE("backward contract violations") {
  Tape tape;
  const NodeId x = tape.leaf(make_vec({1.0, 2.0}));
  const NodeId y = tape.tanh(x);
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);  // non-scalar root
  Tape tape2;
  const NodeId s = tape2.squared_norm(tape2.leaf(make_vec({1.0, 2.0})));
  tape2.backward(s);
  CHECK_THROWS_AS(tape2.backward(s), std::logic_error);  // repeated call
}

TEST_CASE("reverse pass touches each node exactly once") {
  Tape tape;
  const NodeId x = tape.leaf(make_vec({0.3, -0.2, 0.9}));
  const NodeId h = tape.tanh(x);
  const NodeId s = tape.squared_norm(tape.add(h, x));
  tape.backward(s);
  CHECK(tape.last_backward_visits() == tape.size());
}

TEST_CASE("three-layer MLP gradient matches finite differences") {
  Rng rng(42);
  // Layers [3,4,4,1] with tanh activations, built directly on the tape.
  const int sizes[] = {3, 4, 4, 1};
  Eigen::Index n_params = 0;
  for (int l = 0; l < 3; ++l) n_params += sizes[l] * sizes[l + 1] + sizes[l + 1];
  const Vec theta0 = random_vec(n_params, rng, 0.6);
  const Vec input = random_vec(3, rng);

  auto eval = [&](const Vec& theta) {
    Tape tape;
    const NodeId w = tape.leaf(theta);
    NodeId h = tape.constant(input);
    int off = 0;
    for (int l = 0; l < 3; ++l) {
      h = tape.affine_flat(w, off, sizes[l + 1], sizes[l], h);
      off += sizes[l] * sizes[l + 1] + sizes[l + 1];
      if (l < 2) h = tape.tanh(h);
    }
    return std::pair<Tape, NodeId>(std::move(tape), h);
  };

  auto [tape, out] = eval(theta0);
  tape.backward(out);
  const Vec analytic = tape.grad(0);  // the flat weight leaf is node 0
  const Vec numeric = fd_gradient(
      [&](const Vec& th) {
        auto [t, o] = eval(th);
        return t.value(o)[0];
      },
      theta0, 1e-5);
  check_close(analytic, numeric, 1e-5);
}

TEST_CASE("backward is linear in the root") {
  Rng rng(7);
  const Vec x0 = random_vec(4, rng);
  const double a = 1.7, b = -0.6;

  auto grads = [&](bool combined, double wa, double wb) {
    Tape tape;
    const NodeId x = tape.leaf(x0);
    const NodeId f = tape.squared_norm(tape.tanh(x));
    const NodeId g = tape.squared_norm(tape.sigmoid(x));
    NodeId root;
    if (combined) {
      root = tape.add(tape.scale(f, wa), tape.scale(g, wb));
    } else {
      root = wa != 0.0 ? f : g;
    }
    tape.backward(root);
    return Vec(tape.grad(x));
  };

  const Vec gf = grads(false, 1.0, 0.0);
  const Vec gg = grads(false, 0.0, 1.0);
  const Vec gc = grads(true, a, b);
  check_close(gc, a * gf + b * gg, 1e-12);
}

TEST_CASE("every op's gradient matches finite differences on random instances") {
  Rng rng(2024);
  // Each builder maps a parameter vector to a scalar graph output; together
  // they cover every registered backward rule.
  struct OpCase {
    const char* name;
    Eigen::Index input_size;
    std::function<double(const Vec&, Tape*, Vec*)> run;  // returns value; fills grad
  };

  auto run_graph = [](Tape& tape, NodeId leaf, NodeId out, Vec* grad) {
    tape.backward(out);
    if (grad) *grad = tape.grad(leaf);
    return tape.value(out)[0];
  };

  std::vector<OpCase> cases;
  cases.push_back({"affine_flat", 11, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId w = t.leaf(p);
    const NodeId x = t.constant(make_vec({0.3, -1.2}));
    return run_graph(t, w, t.squared_norm(t.affine_flat(w, 1, 2, 2, x)), g);
  }});
  cases.push_back({"affine_flat_time", 8, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId w = t.leaf(p);
    const NodeId x = t.constant(make_vec({0.7, -0.4}));
    return run_graph(t, w, t.squared_norm(t.affine_flat_time(w, 0, 2, 3, x, 0.37)), g);
  }});
  cases.push_back({"matvec_flat", 6, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId f = t.leaf(p);
    return run_graph(t, f,
                     t.squared_norm(t.matvec_flat(f, 2, 3, make_vec({0.5, 1.5, -2.0}))),
                     g);
  }});
  cases.push_back({"tanh", 5, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    return run_graph(t, x, t.squared_norm(t.tanh(x)), g);
  }});
  cases.push_back({"relu", 5, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    return run_graph(t, x, t.squared_norm(t.relu(x)), g);
  }});
  cases.push_back({"sigmoid", 5, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    return run_graph(t, x, t.squared_norm(t.sigmoid(x)), g);
  }});
  cases.push_back({"softplus", 5, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    return run_graph(t, x, t.squared_norm(t.softplus(x)), g);
  }});
  cases.push_back({"add_sub_neg_scale", 4, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    const NodeId y = t.add(t.scale(x, 1.3), t.neg(t.sub(x, t.scale(x, 0.2))));
    return run_graph(t, x, t.squared_norm(y), g);
  }});
  cases.push_back({"add_scaled_shift", 4, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    const NodeId y = t.add_scaled_shift(x, t.tanh(x), 0.7, make_vec({1, -1, 2, 0.5}));
    return run_graph(t, x, t.squared_norm(t.add_scaled(y, x, -0.3)), g);
  }});
  cases.push_back({"mul_mask_slice_add_const", 4, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    const NodeId m = t.mul_mask(x, make_vec({2.0, 0.0, 1.0, 0.5}));
    return run_graph(t, x, t.squared_norm(t.add_const(t.slice(m, 1, 3), 0.4)), g);
  }});
  cases.push_back({"gauss_log_density", 2, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    const NodeId mu = t.slice(x, 0, 1);
    const NodeId var = t.add_const(t.softplus(t.slice(x, 1, 1)), 1e-3);
    return run_graph(t, x, t.gauss_log_density(0.3, mu, var), g);
  }});
  cases.push_back({"sigmoid_bce", 1, [&](const Vec& p, Tape*, Vec* g) {
    Tape t;
    const NodeId x = t.leaf(p);
    return run_graph(t, x, t.sigmoid_bce(x, 1.0), g);
  }});

  int instances = 0;
  for (const auto& c : cases) {
    for (int rep = 0; rep < 9; ++rep) {
      Vec p = random_vec(c.input_size, rng, 0.8);
      // Keep relu inputs away from the kink.
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (std::abs(p[i]) < 1e-3) p[i] = 0.1;
      Vec analytic;
      c.run(p, nullptr, &analytic);
      const Vec numeric =
          fd_gradient([&](const Vec& q) { return c.run(q, nullptr, nullptr); }, p);
      check_close(analytic, numeric, 1e-5);
      ++instances;
    }
  }
  CHECK(instances >= 100);
}
