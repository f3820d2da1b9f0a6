#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "bncde/dataset.hpp"
#include "bncde/rng.hpp"
#include "bncde/simulator.hpp"

using namespace bncde;
using sim::Arm;
using sim::OutcomePath;
using sim::SimOptions;
using sim::TumorParams;

TEST_CASE("parameter sampling matches the table") {
  Rng rng(101);
  const int n = 100000;

  SUBCASE("carrying capacity is the constant 30") {
    for (int i = 0; i < 100; ++i)
      CHECK(sim::sample_params(rng, static_cast<int>(rng.next_u64() % 3))
                .carrying_capacity == 30.0);
  }
  SUBCASE("beta_r is always ten times alpha_r") {
    for (int i = 0; i < 100; ++i) {
      const TumorParams p = sim::sample_params(rng, 0);
      CHECK(p.beta_r == 10.0 * p.alpha_r);
    }
  }
  SUBCASE("alpha_c mean within three standard errors") {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += sim::sample_params(rng, 0).alpha_c;
    const double se = std::sqrt(7.00e-4 / n);
    CHECK(std::abs(sum / n - 0.028) < 3.0 * se);
  }
  SUBCASE("subgroup 1 inflates the alpha_r mean by 10%") {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += sim::sample_params(rng, 1).alpha_r;
    const double se = std::sqrt(0.168 / n);
    CHECK(std::abs(sum / n - 0.04378) < 3.0 * se);
  }
  SUBCASE("subgroup 2 inflates the alpha_c mean by 10%") {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += sim::sample_params(rng, 2).alpha_c;
    const double se = std::sqrt(7.00e-4 / n);
    CHECK(std::abs(sum / n - 0.0308) < 3.0 * se);
  }
  SUBCASE("rho mean within three standard errors") {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += sim::sample_params(rng, 0).rho;
    const double se = std::sqrt(7.23e-3 / n);
    CHECK(std::abs(sum / n - 7.00e-5) < 3.0 * se);
  }
  SUBCASE("rejection variant keeps kill terms non-negative") {
    for (int i = 0; i < 200; ++i) {
      const TumorParams p = sim::sample_params(rng, 0, true);
      CHECK(p.alpha_r >= 0.0);
      CHECK(p.alpha_c >= 0.0);
    }
  }
}

TEST_CASE("treatment schedules") {
  const auto seq = sim::treatment_schedule(Arm::kSequential);
  CHECK(seq.front().day == 0.0);
  CHECK(seq.front().kind == sim::kChemo);
  int seq_chemo = 0, seq_radio = 0;
  for (const auto& ev : seq) {
    CHECK(ev.day <= 55.0);
    (ev.kind == sim::kChemo ? seq_chemo : seq_radio)++;
  }
  CHECK(seq_chemo == 5);  // days 0,7,14,21,28
  CHECK(seq_radio == 3);  // days 35,42,49

  const auto con = sim::treatment_schedule(Arm::kConcurrent);
  int con_chemo = 0, con_radio = 0;
  for (const auto& ev : con) {
    CHECK(ev.day <= 55.0);
    (ev.kind == sim::kChemo ? con_chemo : con_radio)++;
  }
  CHECK(con_chemo == con_radio);
  CHECK(con_chemo == 4);  // days 0,14,28,42
}

TEST_CASE("outcome simulation") {
  SimOptions opts;
  opts.noise_var = 0.0;
  opts.horizon = 2.0;

  SUBCASE("rho = 0, no treatment: exponential growth against the closed form") {
    TumorParams p;
    p.rho = 0.0;
    opts.h_sim = 0.01;
    Rng rng(1);
    const OutcomePath path = sim::simulate_outcome(p, {}, 1.0, rng, opts);
    for (double t : {0.5, 1.0, 1.5, 2.0}) {
      const double rel = std::abs(path.at_time(t) - std::exp(t)) / std::exp(t);
      CHECK(rel < 0.01);
    }
  }
  SUBCASE("y0 = K leaves the growth bracket at exactly the offset") {
    TumorParams p;
    p.rho = 0.13;
    Rng rng(1);
    opts.h_sim = 0.05;
    const OutcomePath path = sim::simulate_outcome(p, {}, 30.0, rng, opts);
    // First Euler step: y1 = y0 (1 + h (1 + rho log(K/K))) = y0 (1 + h).
    CHECK(path.y[1] == 30.0 * (1.0 + opts.h_sim));
  }
  SUBCASE("zero kill coefficients make treatments inert bitwise") {
    TumorParams p;
    p.rho = 0.02;
    p.alpha_c = p.alpha_r = p.beta_r = 0.0;
    opts.noise_var = 1e-4;
    opts.horizon = 10.0;
    Rng a(7), b(7);
    const auto with = sim::simulate_outcome(p, sim::treatment_schedule(Arm::kConcurrent),
                                            0.8, a, opts);
    const auto without = sim::simulate_outcome(p, {}, 0.8, b, opts);
    REQUIRE(with.y.size() == without.y.size());
    for (std::size_t k = 0; k < with.y.size(); ++k) CHECK(with.y[k] == without.y[k]);
  }
  SUBCASE("volumes never cross the floor") {
    TumorParams p;
    p.rho = 0.0;
    p.alpha_r = 3.0;  // extreme radio kill forces the clamp
    p.beta_r = 30.0;
    opts.horizon = 10.0;
    Rng rng(5);
    const auto path =
        sim::simulate_outcome(p, sim::treatment_schedule(Arm::kConcurrent), 0.01, rng, opts);
    for (double y : path.y) CHECK(y >= opts.volume_floor);
  }
  SUBCASE("nonpositive initial volume is rejected") {
    TumorParams p;
    Rng rng(5);
    CHECK_THROWS_AS((void)sim::simulate_outcome(p, {}, 0.0, rng, opts),
                    std::invalid_argument);
  }
}

TEST_CASE("observation intensity") {
  // Dbar = D/2 gives exactly 1/2 for any gamma, and gamma = 0 flattens the
  // intensity to 1/2 everywhere.
  for (double gamma : {0.0, 0.5, 1.0, 2.0, 7.0})
    CHECK(sim::observation_intensity(6.5, gamma) == 0.5);
  for (double dbar : {0.3, 2.0, 9.0, 25.0})
    CHECK(sim::observation_intensity(dbar, 0.0) == 0.5);
  CHECK_THROWS_AS((void)sim::observation_intensity(1.0, -1.0), std::invalid_argument);

  SUBCASE("higher gamma yields fewer observations below the midpoint") {
    // Constant small tumor: diameter well below 13/2 cm.
    OutcomePath path;
    path.h = 0.05;
    path.y.assign(1201, 1.0);
    Rng rng(17);
    int n1 = 0, n2 = 0;
    for (int rep = 0; rep < 300; ++rep) {
      Rng r1(rng.next_u64()), r2(rng.next_u64());
      n1 += static_cast<int>(sim::observation_times(path, 1.0, r1).size());
      n2 += static_cast<int>(sim::observation_times(path, 2.0, r2).size());
    }
    CHECK(n2 < n1);
  }
  SUBCASE("observation times start at day 0 and are strictly increasing") {
    OutcomePath path;
    path.h = 0.05;
    path.y.assign(1201, 5.0);
    Rng rng(23);
    for (int rep = 0; rep < 20; ++rep) {
      Rng r(rng.next_u64());
      const auto days = sim::observation_times(path, 1.0, r);
      REQUIRE(!days.empty());
      CHECK(days.front() == 0);
      for (std::size_t i = 1; i < days.size(); ++i) CHECK(days[i] > days[i - 1]);
      CHECK(days.back() <= 55);
    }
  }
}

TEST_CASE("dataset generation") {
  sim::SimConfig cfg;
  cfg.n_train = 40;
  cfg.n_val = 5;
  cfg.n_test = 12;
  cfg.seed = 99;
  cfg.threads = 1;

  const sim::Dataset ds = sim::generate_dataset(cfg);
  REQUIRE(ds.train.size() == 40);
  REQUIRE(ds.val.size() == 5);
  REQUIRE(ds.test.size() == 12);

  SUBCASE("standardized training outcomes have mean zero") {
    double sum = 0.0;
    std::int64_t n = 0;
    for (const auto& rec : ds.train) {
      sum += rec.y.sum();
      n += rec.y.size();
    }
    CHECK(std::abs(sum / static_cast<double>(n)) < 1e-6);
  }
  SUBCASE("every test record carries factual and counterfactual paths") {
    for (const auto& rec : ds.test) {
      CHECK(rec.has_counterfactual);
      CHECK(rec.y_cf.size() == rec.y.size());
      CHECK(rec.arm_cf != rec.arm);
      CHECK(rec.targets_cf.size() == rec.targets.size());
    }
    for (const auto& rec : ds.train) CHECK_FALSE(rec.has_counterfactual);
  }
  SUBCASE("observation times include day 0, targets cover deltas 1..5") {
    for (const auto& rec : ds.train) {
      CHECK(rec.obs_times.front() == 0.0);
      CHECK(rec.obs_times.back() <= 55.0);
      REQUIRE(rec.targets.size() == 5);
      for (int d = 0; d < 5; ++d) CHECK(rec.targets[d].delta == d + 1);
    }
  }
  SUBCASE("same seed is byte-identical; parallel equals serial") {
    const sim::Dataset again = sim::generate_dataset(cfg);
    sim::SimConfig par = cfg;
    par.threads = 2;
    const sim::Dataset parallel = sim::generate_dataset(par);
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      const std::string a = sim::record_to_json_string(ds.test[i]);
      CHECK(a == sim::record_to_json_string(again.test[i]));
      CHECK(a == sim::record_to_json_string(parallel.test[i]));
    }
  }
  SUBCASE("jsonl round trip preserves the record") {
    const auto& rec = ds.test[3];
    const auto back = sim::record_from_json_string(sim::record_to_json_string(rec));
    CHECK(back.id == rec.id);
    CHECK(back.arm == rec.arm);
    CHECK(back.obs_times == rec.obs_times);
    CHECK(back.y == rec.y);
    CHECK(back.x == rec.x);
    CHECK(back.has_counterfactual);
    CHECK(back.y_cf == rec.y_cf);
    CHECK(back.treatments.size() == rec.treatments.size());
    CHECK(back.targets[2].y == rec.targets[2].y);
    CHECK(back.params.alpha_r == rec.params.alpha_r);
  }
}

TEST_CASE("twins with identical schedules are bitwise equal") {
  // Common random numbers: re-running the factual schedule with the same
  // noise stream must reproduce the path exactly.
  TumorParams p;
  p.rho = 0.05;
  p.alpha_c = 0.03;
  p.alpha_r = 0.04;
  p.beta_r = 0.4;
  SimOptions opts;
  opts.horizon = 60.0;
  const auto schedule = sim::treatment_schedule(Arm::kSequential);
  Rng a(12345), b(12345);
  const auto path1 = sim::simulate_outcome(p, schedule, 0.5, a, opts);
  const auto path2 = sim::simulate_outcome(p, schedule, 0.5, b, opts);
  REQUIRE(path1.y.size() == path2.y.size());
  for (std::size_t k = 0; k < path1.y.size(); ++k) CHECK(path1.y[k] == path2.y[k]);
}
