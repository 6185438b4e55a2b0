#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "lemma_util.hpp"
#include "testutil.hpp"
#include "udc/error.hpp"
#include "udc/size_model.hpp"

using namespace udc;
using test::LemmaSpace;
using test::make_lemma_space;
using test::onehot_pis;
using test::random_tensor;

TEST_CASE("binary entropy values and conventions") {
  CHECK(binary_entropy(0.5) == 1.0);
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  // high-precision evaluation oracle
  double expect = -(0.1 * std::log2(0.1) + 0.9 * std::log2(0.9));
  CHECK(binary_entropy(0.1) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(binary_entropy(0.1) == doctest::Approx(0.468996).epsilon(1e-5));
  CHECK_THROWS_AS(binary_entropy(-0.01), DomainError);
  CHECK_THROWS_AS(binary_entropy(1.01), DomainError);
}

TEST_CASE("layer size follows (b + H_b(s)) x element count") {
  CHECK(layer_size_bits(1.0, 8, 100) == 800.0);
  CHECK(layer_size_bits(0.5, 4, 10) == 50.0);
  CHECK(layer_size_bits(0.1, 2, 1000) == doctest::Approx(2468.996).epsilon(1e-5));
}

namespace {

NetCostModel two_layer_model() {
  NetCostModel m;
  m.kind = CostKind::compressed_bits;
  NetCostModel::Layer l0;
  LayerCostGeometry g0;
  g0.op = OperatorKind::conv3x3;
  g0.in_channels = 2;
  g0.out_channels = 4;
  g0.kernel_h = g0.kernel_w = 3;
  g0.out_positions = 36;
  l0.candidates = {g0};
  l0.width_options = {0.5, 1.0};
  l0.sparsity_options = {0.2, 0.4, 1.0};
  l0.bitwidth_options = {2, 4, 8};
  NetCostModel::Layer l1;
  LayerCostGeometry g1;
  g1.op = OperatorKind::dense;
  g1.in_channels = 4;
  g1.out_channels = 3;
  g1.kernel_h = g1.kernel_w = 1;
  g1.out_positions = 1;
  l1.candidates = {g1};
  l1.width_options = {1.0};
  l1.sparsity_options = {0.5, 1.0};
  l1.bitwidth_options = {4, 8};
  m.layers = {l0, l1};
  return m;
}

SoftSample onehot_soft(const NetCostModel::Layer& L, const LayerChoice& c) {
  SoftSample s;
  s.width.assign(L.width_options.size(), 0.0);
  s.width[static_cast<size_t>(c.width_index)] = 1.0;
  s.sparsity.assign(L.sparsity_options.size(), 0.0);
  s.sparsity[static_cast<size_t>(c.sparsity_index)] = 1.0;
  s.bitwidth.assign(L.bitwidth_options.size(), 0.0);
  s.bitwidth[static_cast<size_t>(c.bitwidth_index)] = 1.0;
  s.oper.assign(L.candidates.size(), 0.0);
  s.oper[static_cast<size_t>(c.oper_index)] = 1.0;
  return s;
}

}  // namespace

TEST_CASE("expected layer size at one-hot equals the hard layer size exactly") {
  NetCostModel m = two_layer_model();
  m.enumerate([&](std::span<const LayerChoice> cfg, double cost) {
    std::vector<SoftSample> soft;
    for (size_t li = 0; li < m.layers.size(); ++li) soft.push_back(onehot_soft(m.layers[li], cfg[li]));
    CHECK(m.soft_cost(soft) == cost);  // exact, not approximate
  });
}

TEST_CASE("options compose before the size formula, not after") {
  // two sparsity options 0.2 / 0.4 mixed 50/50 evaluate at s = 0.3
  NetCostModel m = two_layer_model();
  std::vector<SoftSample> soft;
  soft.push_back(onehot_soft(m.layers[0], {1, 0, 2, 0}));
  soft.push_back(onehot_soft(m.layers[1], {0, 1, 1, 0}));
  soft[0].sparsity = {0.5, 0.5, 0.0};
  double mixed = m.soft_cost(soft);
  double eps_at_03 =
      layer_size_bits(0.3, 8, soft_elem_count(m.layers[0].candidates[0], 1.0, 1.0)) + kBiasBits * 4.0;
  double layer1 = layer_size_bits(1.0, 8, soft_elem_count(m.layers[1].candidates[0], 1.0, 1.0)) + kBiasBits * 3.0;
  CHECK(mixed == doctest::Approx(eps_at_03 + layer1).epsilon(1e-12));
  double avg_of_eps = 0.5 * (layer_size_bits(0.2, 8, 72.0) + layer_size_bits(0.4, 8, 72.0)) + kBiasBits * 4.0 + layer1;
  CHECK(mixed != doctest::Approx(avg_of_eps).epsilon(1e-6));
}

TEST_CASE("network size sums layers; single-option space is constant") {
  CHECK(800.0 + 50.0 == 850.0);  // two layers of 800 and 50 bits
  NetCostModel m = two_layer_model();
  // collapse to single options
  m.layers[0].width_options = {1.0};
  m.layers[0].sparsity_options = {1.0};
  m.layers[0].bitwidth_options = {8};
  m.layers[1].sparsity_options = {1.0};
  m.layers[1].bitwidth_options = {8};
  double first = -1;
  m.enumerate([&](std::span<const LayerChoice>, double cost) {
    if (first < 0) first = cost;
    CHECK(cost == first);
  });
  CHECK(m.num_configs() == 1);
}

TEST_CASE("graph soft cost equals the plain soft cost and differentiates cleanly") {
  NetCostModel m = two_layer_model();
  Philox rng(7, 0);
  for (int trial = 0; trial < 8; ++trial) {
    // random simplex points via softmax
    auto simplex = [&](int k) {
      Tensor t = random_tensor({k}, rng, -1, 1);
      Tensor p = kernels::softmax_lastaxis(t);
      return std::vector<double>(p.values().begin(), p.values().end());
    };
    std::vector<SoftSample> soft(2);
    soft[0].width = simplex(2);
    soft[0].sparsity = simplex(3);
    soft[0].bitwidth = simplex(3);
    soft[0].oper = {1.0};
    soft[1].width = {1.0};
    soft[1].sparsity = simplex(2);
    soft[1].bitwidth = simplex(2);
    soft[1].oper = {1.0};
    double plain = m.soft_cost(soft);

    Graph g;
    auto to_value = [&](const std::vector<double>& v) {
      return g.constant(Tensor({static_cast<int64_t>(v.size())}, v));
    };
    std::vector<LayerSamples> gs(2);
    gs[0] = {to_value(soft[0].width), to_value(soft[0].sparsity), to_value(soft[0].bitwidth), to_value(soft[0].oper)};
    gs[1] = {to_value(soft[1].width), to_value(soft[1].sparsity), to_value(soft[1].bitwidth), to_value(soft[1].oper)};
    Value e = m.soft_cost(g, gs);
    CHECK(g.value(e).item() == doctest::Approx(plain).epsilon(1e-9));
  }
  // FD gradient on random soft inputs
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> leaves = {random_tensor({2}, rng, 0.1, 0.9), random_tensor({3}, rng, 0.1, 0.9),
                                  random_tensor({3}, rng, 0.1, 0.9), random_tensor({2}, rng, 0.1, 0.9),
                                  random_tensor({2}, rng, 0.1, 0.9)};
    double err = test::gradcheck_max_rel_err(
        [&m](Graph& g, const std::vector<Value>& v) {
          std::vector<LayerSamples> gs(2);
          Tensor one({1}, {1.0});
          gs[0] = {v[0], v[1], v[2], g.constant(one)};
          gs[1] = {g.constant(one), v[3], v[4], g.constant(one)};
          return m.soft_cost(g, gs);
        },
        leaves);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("toy-space soft cost at one-hot matches enumeration for every config") {
  Philox rng(17, 0);
  LemmaSpace space = make_lemma_space(rng, 512);
  for (size_t i = 0; i < space.size(); ++i) {
    std::vector<SoftSample> soft;
    for (size_t li = 0; li < space.model.layers.size(); ++li) {
      soft.push_back(onehot_soft(space.model.layers[li], space.configs[i][li]));
    }
    CHECK(space.model.soft_cost(soft) == space.costs[i]);
  }
}

TEST_CASE("mac cost formulas") {
  LayerCostGeometry dense;
  dense.op = OperatorKind::dense;
  dense.in_channels = 4;
  dense.out_channels = 3;
  dense.out_positions = 1;
  CHECK(soft_mac_count(dense, 1.0, 1.0) == 12.0);
  LayerCostGeometry conv;
  conv.op = OperatorKind::conv3x3;
  conv.in_channels = 8;
  conv.out_channels = 8;
  conv.kernel_h = conv.kernel_w = 3;
  conv.out_positions = 16 * 16;
  CHECK(soft_mac_count(conv, 1.0, 1.0) == 147456.0);
  LayerCostGeometry ident;
  ident.op = OperatorKind::identity;
  ident.in_channels = 8;
  ident.out_channels = 8;
  CHECK(soft_mac_count(ident, 1.0, 1.0) == 0.0);
}

TEST_CASE("constraint regularizer is the mean absolute gap") {
  std::vector<double> exact = {100.0, 100.0, 100.0};
  CHECK(constraint_regularizer(exact, 100.0) == 0.0);
  std::vector<double> off = {200.0, 0.0};
  CHECK(constraint_regularizer(off, 100.0) == 100.0);
  CHECK_THROWS_AS(constraint_regularizer({}, 100.0), DomainError);
}

TEST_CASE("DP cost bounds agree with enumeration extremes") {
  Philox rng(23, 0);
  for (int trial = 0; trial < 10; ++trial) {
    LemmaSpace space = make_lemma_space(rng, 2048);
    double lo = 1e300, hi = -1e300;
    for (double c : space.costs) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    auto [dp_lo, dp_hi] = space.model.cost_bounds();
    CHECK(dp_lo == doctest::Approx(lo).epsilon(1e-12));
    CHECK(dp_hi == doctest::Approx(hi).epsilon(1e-12));
  }
}

TEST_CASE("lemma 1: zero regularizer iff every supported config hits e*") {
  Philox rng(29, 0);
  for (int trial = 0; trial < 10; ++trial) {
    LemmaSpace space = make_lemma_space(rng);
    size_t chosen = rng.uniform_index(space.size());
    double e_star = space.costs[chosen];
    // forward direction: one-hot pis supported only on the chosen config
    auto pis = onehot_pis(space, space.configs[chosen]);
    CHECK(space.exact_regularizer(pis, e_star) == 0.0);
    // converse: whenever L_E^z = 0, every positive-probability config hits e*
    for (size_t i = 0; i < space.size(); ++i) {
      if (space.probability(pis, space.configs[i]) > 0.0) CHECK(space.costs[i] == e_star);
    }
    // interior pi must pay a positive penalty (spaces here have >= 2 configs)
    std::vector<std::vector<double>> uniform;
    for (int count : space.option_counts()) {
      uniform.emplace_back(static_cast<size_t>(count), 1.0 / count);
    }
    CHECK(space.exact_regularizer(uniform, e_star) > 0.0);
  }
}

TEST_CASE("lemma 2: zero regularizer forces one-hot pis (simplex grid)") {
  Philox rng(31, 0);
  LemmaSpace space = make_lemma_space(rng, 512);
  size_t chosen = rng.uniform_index(space.size());
  double e_star = space.costs[chosen];
  auto base = onehot_pis(space, space.configs[chosen]);
  std::vector<int> counts = space.option_counts();
  for (size_t d = 0; d < base.size(); ++d) {
    test::simplex_grid(counts[d], 20, [&](const std::vector<double>& pi) {
      bool onehot = false;
      for (double p : pi) onehot = onehot || p == 1.0;
      if (onehot) return;
      auto pis = base;
      pis[d] = pi;
      CHECK(space.exact_regularizer(pis, e_star) > 0.0);
    });
  }
}

TEST_CASE("appendix-C chain: empirical entropy never exceeds b + H_b(s)") {
  Philox rng(37, 0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    int64_t n = 64 + static_cast<int64_t>(rng.uniform_index(128));
    int bits = 2 + static_cast<int>(rng.uniform_index(5));
    double r = rng.uniform(0.3, 1.2);
    double s = rng.uniform(0.05, 1.0);
    Tensor theta = random_tensor({n}, rng, -1.0, 1.0);
    Tensor q = quantize_q(theta, bits, r);
    Tensor m = make_sparsity_mask(theta, s);
    std::map<double, int64_t> hist;
    for (int64_t i = 0; i < n; ++i) hist[q[i] * m[i]]++;
    double h_emp = 0.0;
    for (const auto& [v, c] : hist) {
      double p = static_cast<double>(c) / static_cast<double>(n);
      h_emp -= p * std::log2(p);
    }
    double s_hat = static_cast<double>(m.count_nonzero()) / static_cast<double>(n);
    CHECK(h_emp * static_cast<double>(n) <=
          layer_size_bits(s_hat, static_cast<double>(bits), static_cast<double>(n)) + 1e-9);
  }
}
