#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lemma_util.hpp"
#include "testutil.hpp"
#include "udc/config.hpp"
#include "udc/dnas.hpp"
#include "udc/error.hpp"

using namespace udc;
using test::LemmaSpace;
using test::make_lemma_space;
using test::measure_le_zhat;
using test::onehot_pis;

TEST_CASE("schedule endpoints and monotonicity") {
  Schedule lin{ScheduleKind::linear, 0.0, 0.5, 100};
  CHECK(lin.value(0) == 0.0);
  CHECK(lin.value(100) == 0.5);
  CHECK(lin.value(150) == 0.5);  // clamps past the end
  Schedule expo{ScheduleKind::exponential, 0.66, 0.1, 10};
  CHECK(expo.value(0) == doctest::Approx(0.66));
  CHECK(expo.value(10) == doctest::Approx(0.1));
  Schedule cos{ScheduleKind::cosine, 0.1, 1e-4, 7};
  double prev = cos.value(0);
  for (int t = 1; t <= 7; ++t) {
    double v = cos.value(t);
    CHECK(v <= prev + 1e-15);
    prev = v;
  }
  CHECK_THROWS_AS((Schedule{ScheduleKind::exponential, 0.5, -0.5, 10}.value(5)), DomainError);
}

TEST_CASE("projection leaves in-set distributions untouched") {
  std::vector<double> uniform = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  CHECK(project_pi(uniform, 0.0) == uniform);
  CHECK(project_pi(uniform, 0.7) == uniform);
  std::vector<double> skew = {0.9, 0.05, 0.05};
  CHECK(project_pi(skew, 1.0 - 1.0 / 3) == skew);  // vacuous bound
}

TEST_CASE("projection hits the bound via temperature scaling") {
  std::vector<double> pi = {0.98, 0.01, 0.01};
  std::vector<double> p = project_pi(pi, 0.5);
  double bound = 1.0 / 3 + 0.5;
  CHECK(*std::max_element(p.begin(), p.end()) == doctest::Approx(bound).epsilon(1e-6));
  CHECK(*std::max_element(p.begin(), p.end()) <= bound + 1e-9);
  // independent bisection oracle on T over [1, 1e3]
  auto max_at = [&](double T) {
    double m = 0, s = 0;
    std::vector<double> e(3);
    for (int i = 0; i < 3; ++i) e[static_cast<size_t>(i)] = std::pow(pi[static_cast<size_t>(i)], 1.0 / T);
    for (double v : e) s += v;
    for (double v : e) m = std::max(m, v / s);
    return m;
  };
  double lo = 1, hi = 1e3;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (max_at(mid) <= bound ? hi : lo) = mid;
  }
  std::vector<double> oracle(3);
  double s = 0;
  for (int i = 0; i < 3; ++i) s += (oracle[static_cast<size_t>(i)] = std::pow(pi[static_cast<size_t>(i)], 1.0 / hi));
  for (double& v : oracle) v /= s;
  for (int i = 0; i < 3; ++i) CHECK(p[static_cast<size_t>(i)] == doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-6));
}

TEST_CASE("projection: 1e4 randomized membership, ordering and argmax preservation") {
  Philox rng(3, 0);
  for (int t = 0; t < 10000; ++t) {
    int k = 2 + static_cast<int>(rng.uniform_index(5));
    Tensor logits = test::random_tensor({k}, rng, -6, 6);
    Tensor pt = kernels::softmax_lastaxis(logits);
    std::vector<double> pi(pt.values().begin(), pt.values().end());
    double xi = rng.uniform(0.0, 1.0);
    std::vector<double> p = project_pi(pi, xi);
    double bound = 1.0 / k + xi;
    CHECK(*std::max_element(p.begin(), p.end()) <= bound + 1e-9);
    double sum = 0;
    for (double v : p) sum += v;
    CHECK(std::fabs(sum - 1.0) < 1e-9);
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j) {
        if (pi[static_cast<size_t>(i)] > pi[static_cast<size_t>(j)]) {
          CHECK(p[static_cast<size_t>(i)] >= p[static_cast<size_t>(j)] - 1e-12);
        }
      }
  }
}

TEST_CASE("projection with xi=0 returns exact uniform") {
  std::vector<double> pi = {0.999, 0.0005, 0.0005};
  std::vector<double> p = project_pi(pi, 0.0);
  for (double v : p) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("project_logits enforces the set on the stored parameterization") {
  Tensor logits({4}, {5.0, 0.0, 0.0, 0.0});
  CHECK(project_logits(logits, 0.3));
  Tensor p = kernels::softmax_lastaxis(logits);
  double mx = 0;
  for (int i = 0; i < 4; ++i) mx = std::max(mx, p[i]);
  CHECK(mx <= 0.25 + 0.3 + 1e-9);
  CHECK(!project_logits(logits, 0.9));  // now in-set, unchanged
}

TEST_CASE("rejection sampling keeps only argmax-matching samples") {
  Philox rng(11, 0);
  std::vector<double> pi = {0.2, 0.5, 0.3};
  for (int t = 0; t < 2000; ++t) {
    RejectionStats st;
    std::vector<double> z = rejection_sample(pi, 0.4, 8, rng, &st);
    int am = 0;
    for (int i = 1; i < 3; ++i)
      if (z[static_cast<size_t>(i)] > z[static_cast<size_t>(am)]) am = i;
    CHECK(am == 1);  // argmax(z) == argmax(pi), fallback included
    if (st.fallback) {
      CHECK(z == std::vector<double>{0.0, 1.0, 0.0});
    }
  }
}

TEST_CASE("near-one-hot pi accepts every draw") {
  Philox rng(13, 0);
  std::vector<double> pi = {1.0 - 2e-9, 1e-9, 1e-9};
  RejectionStats st;
  rejection_sample(pi, 0.5, 64, rng, &st);
  CHECK(st.accepted == 64);
}

TEST_CASE("acceptance frequency recovers the categorical probability") {
  // argmax of a Gumbel-softmax sample is a categorical draw, so the
  // acceptance rate estimates pi[k*]
  Philox rng(17, 0);
  std::vector<double> pi = {0.7, 0.3};
  RejectionStats st;
  rejection_sample(pi, 0.1, 100000, rng, &st);
  double rate = static_cast<double>(st.accepted) / st.drawn;
  CHECK(rate == doctest::Approx(0.7).epsilon(0.015));
}

TEST_CASE("forced zero acceptance falls back to a deterministic one-hot") {
  std::vector<double> pi = {0.45, 0.55};
  int fallbacks = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Philox rng(seed, 1);
    RejectionStats st;
    std::vector<double> z = rejection_sample(pi, 2.0, 1, rng, &st);
    if (st.fallback) {
      ++fallbacks;
      CHECK(z == std::vector<double>{0.0, 1.0});
    }
  }
  CHECK(fallbacks > 10);  // P(reject) = 0.45 per draw
}

TEST_CASE("graph rejection sampler matches the plain one on the same stream") {
  Tensor logits({3}, {0.4, 1.1, -0.2});
  Tensor pt = kernels::softmax_lastaxis(logits);
  std::vector<double> pi(pt.values().begin(), pt.values().end());
  Philox a(23, 4), b(23, 4);
  Graph g;
  Value z = rejection_sample(g, g.leaf(logits, false), pi, 0.5, 16, a);
  std::vector<double> zp = rejection_sample(pi, 0.5, 16, b);
  for (int i = 0; i < 3; ++i) CHECK(g.value(z)[i] == doctest::Approx(zp[i]).epsilon(1e-12));
}

TEST_CASE("optimizers descend a quadratic") {
  Tensor w = Tensor::scalar(4.0);
  std::vector<Tensor*> params = {&w};
  SgdMomentum sgd(0.9);
  for (int i = 0; i < 200; ++i) {
    std::vector<Tensor> g = {Tensor::scalar(2.0 * w[0])};
    sgd.step(params, g, 0.05);
  }
  CHECK(std::fabs(w[0]) < 1e-3);
  Tensor v = Tensor::scalar(-3.0);
  std::vector<Tensor*> params2 = {&v};
  Adam adam;
  for (int i = 0; i < 2000; ++i) {
    std::vector<Tensor> g = {Tensor::scalar(2.0 * v[0])};
    adam.step(params2, g, 0.01);
  }
  CHECK(std::fabs(v[0]) < 1e-3);
}

// ----------------------------------------------------------- search steps

namespace {

const char* kTinyConfig = R"json({
  "dataset": {"source": "blobs", "classes": 2, "shape": [1, 6, 6], "train_n": 64, "test_n": 32,
              "noise": 0.3, "seed": 99},
  "search_space": {
    "input": [1, 6, 6],
    "layers": [
      {"name": "b0", "type": "conv", "out": 4, "ops": ["conv3x3"], "widths": [0.5, 1.0],
       "sparsities": [0.5, 1.0], "bitwidths": [2, 8]},
      {"name": "head", "type": "dense", "out": 2, "widths": [1.0], "sparsities": [0.5, 1.0],
       "bitwidths": [2, 8]}
    ]
  },
  "constraint": {"size_bytes": 60, "tolerance": 0.05},
  "search": {"warmup_epochs": 1, "epochs": 2, "batch_size": 16, "mc_samples": 2, "rejection_samples": 4},
  "seed": 5
})json";

}  // namespace

TEST_CASE("search steps are deterministic given the seed") {
  SearchConfig cfg = parse_search_config(kTinyConfig);
  Dataset ds = load_dataset(cfg.dataset);
  auto run = [&]() {
    SearchNet net = build_search_net(cfg, cfg.seed);
    NetCostModel cost = build_cost_model(net, cfg.cost, cfg.input_shape);
    SearchOptions opts;
    opts.mc_samples = 4;
    opts.rejection_samples = 4;
    opts.e_star = cfg.e_star;
    opts.batch_size = 16;
    SearchEngine engine(net, cost, opts, cfg.seed);
    PhaseSchedules sched;
    sched.tau = {ScheduleKind::exponential, 0.66, 0.1, 6};
    sched.xi = {ScheduleKind::linear, 0.1, 1.0, 6};
    sched.theta_mix = {ScheduleKind::linear, 0.0, 0.5, 6};
    TrainData train = ds.train_view();
    return engine.run_phase(train, sched, 6, true);
  };
  auto h1 = run();
  auto h2 = run();
  REQUIRE(h1.size() == h2.size());
  for (size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].l_task == h2[i].l_task);  // bitwise equality
    CHECK(h1[i].l_e == h2[i].l_e);
    CHECK(h1[i].e_argmax == h2[i].e_argmax);
    CHECK(h1[i].max_pi == h2[i].max_pi);
  }
}

TEST_CASE("post-step pi satisfies the exploration-set bound") {
  SearchConfig cfg = parse_search_config(kTinyConfig);
  Dataset ds = load_dataset(cfg.dataset);
  SearchNet net = build_search_net(cfg, cfg.seed);
  NetCostModel cost = build_cost_model(net, cfg.cost, cfg.input_shape);
  SearchOptions opts;
  opts.mc_samples = 2;
  opts.e_star = cfg.e_star;
  opts.batch_size = 16;
  SearchEngine engine(net, cost, opts, cfg.seed);
  PhaseSchedules sched;
  sched.xi = {ScheduleKind::linear, 0.05, 0.4, 10};
  sched.lr_pi = Schedule::constant(0.05);  // aggressive, to stress the projection
  TrainData train = ds.train_view();
  for (int64_t t = 0; t < 10; ++t) {
    double xi = sched.xi.value(t);
    engine.step(train, sched, t, true);
    for (const auto& layer : net.layers) {
      for (const DecisionVariable* d : {&layer.width, &layer.sparsity, &layer.bitwidth, &layer.oper}) {
        std::vector<double> pi = d->pi();
        double bound = 1.0 / pi.size() + xi + 1e-9;
        CHECK(*std::max_element(pi.begin(), pi.end()) <= bound);
      }
    }
  }
}

TEST_CASE("single-option space: L_E is constant and theta still trains") {
  const char* kDegenerate = R"json({
    "dataset": {"source": "blobs", "classes": 2, "shape": [1, 6, 6], "train_n": 64, "test_n": 32,
                "noise": 0.3, "seed": 99},
    "search_space": {
      "input": [1, 6, 6],
      "layers": [
        {"name": "b0", "type": "conv", "out": 3, "ops": ["conv3x3"]},
        {"name": "head", "type": "dense", "out": 2}
      ]
    },
    "constraint": {"size_bytes": 200},
    "seed": 5
  })json";
  SearchConfig cfg = parse_search_config(kDegenerate);
  Dataset ds = load_dataset(cfg.dataset);
  SearchNet net = build_search_net(cfg, cfg.seed);
  NetCostModel cost = build_cost_model(net, cfg.cost, cfg.input_shape);
  CHECK(cost.num_configs() == 1);
  SearchOptions opts;
  opts.mc_samples = 1;
  opts.e_star = cfg.e_star;
  opts.batch_size = 16;
  SearchEngine engine(net, cost, opts, cfg.seed);
  PhaseSchedules sched;
  TrainData train = ds.train_view();
  double first_le = -1, first_loss = -1, last_loss = -1;
  for (int64_t t = 0; t < 8; ++t) {
    StepMetrics m = engine.step(train, sched, t, true);
    if (first_le < 0) first_le = m.l_e;
    CHECK(m.l_e == first_le);  // constant regularizer
    if (first_loss < 0) first_loss = m.l_task;
    last_loss = m.l_task;
  }
  CHECK(last_loss < first_loss);  // plain SGD training still happens
}

// ----------------------------------------------------- Table-2 direction

TEST_CASE("relaxed regularizer inflates with tau, with projection, deflates with rejection mixing") {
  Philox rng(41, 0);
  LemmaSpace space = make_lemma_space(rng, 1024);
  // a small target (the cheapest config) with concentrated pi mirrors
  // the Table-2 setup: E(argmax(pi)) = e*
  size_t chosen = 0;
  for (size_t i = 1; i < space.size(); ++i) {
    if (space.costs[i] < space.costs[chosen]) chosen = i;
  }
  double e_star = space.costs[chosen];
  std::vector<std::vector<double>> pis = onehot_pis(space, space.configs[chosen]);
  for (auto& pi : pis) {
    size_t k = pi.size();
    for (size_t i = 0; i < k; ++i) pi[i] = pi[i] == 1.0 ? 0.9 : 0.1 / static_cast<double>(k - 1);
  }
  const int mc = 3000;
  const uint64_t seed = 2024;
  double at_066 = measure_le_zhat(space, pis, e_star, 0.66, 0.0, mc, seed);
  double at_10 = measure_le_zhat(space, pis, e_star, 10.0, 0.0, mc, seed);
  CHECK(at_10 > at_066);

  // projection toward uniform inflates it further
  std::vector<std::vector<double>> proj05, proj02;
  for (const auto& pi : pis) {
    proj05.push_back(project_pi(pi, 0.5 - (pi.size() > 2 ? 0.2 : 0.0)));
    proj02.push_back(project_pi(pi, 0.1));
  }
  double with_proj = measure_le_zhat(space, proj05, e_star, 0.66, 0.0, mc, seed);
  double with_strong_proj = measure_le_zhat(space, proj02, e_star, 0.66, 0.0, mc, seed);
  CHECK(with_proj >= at_066);
  CHECK(with_strong_proj >= with_proj);

  // rejection mixing brings it back down, monotonically in theta
  double mix0 = measure_le_zhat(space, proj05, e_star, 0.66, 0.0, mc, seed);
  double mix05 = measure_le_zhat(space, proj05, e_star, 0.66, 0.5, mc, seed);
  double mix099 = measure_le_zhat(space, proj05, e_star, 0.66, 0.99, mc, seed);
  CHECK(mix05 < mix0);
  CHECK(mix099 < mix05);
}

TEST_CASE("gradient variance grows as tau shrinks") {
  // Fig.-6d direction: repeated-sample variance of dL/dpi at fixed pi
  Philox rng(43, 0);
  Tensor logits({3}, {0.3, -0.1, 0.6});
  Tensor weights({3}, {5.0, 1.0, -2.0});
  auto grad_variance = [&](double tau, uint64_t seed) {
    Philox noise(seed, 7);
    std::vector<double> g0;
    double mean = 0, m2 = 0;
    const int n = 400;
    for (int i = 0; i < n; ++i) {
      Graph g;
      Value lg = g.leaf(logits, true);
      Value z = gumbel_softmax_sample(g, lg, tau, noise);
      g.backward(g.sum(g.mul(z, g.constant(weights))));
      double v = g.grad(lg)[0];
      mean += v;
      m2 += v * v;
    }
    mean /= n;
    return m2 / n - mean * mean;
  };
  double var_low_tau = grad_variance(0.1, 9);
  double var_high_tau = grad_variance(2.0, 9);
  CHECK(var_low_tau > var_high_tau);
}
