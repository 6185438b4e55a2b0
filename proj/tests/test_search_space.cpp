#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "testutil.hpp"
#include "udc/error.hpp"
#include "udc/search_space.hpp"
#include "udc/supernet.hpp"

using namespace udc;
using test::random_tensor;

TEST_CASE("width mask is the leading ceil(rho n) ones") {
  Tensor m = make_width_mask(0.5, 4);
  CHECK(m.values()[0] == 1.0);
  CHECK(m.values()[1] == 1.0);
  CHECK(m.values()[2] == 0.0);
  CHECK(m.values()[3] == 0.0);
  CHECK(make_width_mask(1.0, 3).count_nonzero() == 3);
  Tensor m3 = make_width_mask(0.3, 10);
  CHECK(m3.count_nonzero() == 3);  // ceiling arithmetic
  for (int i = 0; i < 3; ++i) CHECK(m3[i] == 1.0);
  CHECK_THROWS_AS(make_width_mask(0.0, 4), DomainError);
  CHECK_THROWS_AS(make_width_mask(1.2, 4), DomainError);
}

TEST_CASE("sparsity mask marks top magnitudes of theta") {
  Tensor theta({4}, {0.1, -0.9, 0.5, 0.05});
  Tensor m = make_sparsity_mask(theta, 0.5);
  CHECK(m[0] == 0.0);
  CHECK(m[1] == 1.0);
  CHECK(m[2] == 1.0);
  CHECK(m[3] == 0.0);
  CHECK(make_sparsity_mask(theta, 1.0).count_nonzero() == 4);
}

TEST_CASE("sparsity mask cardinality matches a sort oracle on 1e4 elements") {
  Philox rng(11, 0);
  Tensor theta = random_tensor({10000}, rng);
  Tensor m = make_sparsity_mask(theta, 0.13);
  CHECK(m.count_nonzero() == 1300);
  // oracle: magnitude of every kept element >= magnitude of every dropped one
  double min_kept = 1e300, max_dropped = 0;
  for (int64_t i = 0; i < theta.numel(); ++i) {
    if (m[i] == 1.0) {
      min_kept = std::min(min_kept, std::fabs(theta[i]));
    } else {
      max_dropped = std::max(max_dropped, std::fabs(theta[i]));
    }
  }
  CHECK(min_kept >= max_dropped);
}

TEST_CASE("all-equal theta hits the documented tie rule, no crash") {
  Tensor theta = Tensor::full({6}, 0.25);
  Tensor m = make_sparsity_mask(theta, 0.5);
  CHECK(m.count_nonzero() == 3);
  for (int i = 0; i < 3; ++i) CHECK(m[i] == 1.0);  // flat index ascending
}

TEST_CASE("quantizer follows the two-branch definition") {
  // b=1 branch: sign
  Tensor q1 = quantize_q(Tensor::scalar(-0.3), 1, 0.0);
  CHECK(q1[0] == -1.0);
  // direct evaluation oracle: d=1/3, round(0.6/d)=round(1.8)=2 -> 2/3
  Tensor q3 = quantize_q(Tensor::scalar(0.6), 3, 1.0);
  CHECK(q3[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  // clip saturates at r
  CHECK(quantize_q(Tensor::scalar(5.0), 3, 1.0)[0] == 1.0);
  CHECK_THROWS_AS(quantize_q(Tensor::scalar(1.0), 0, 1.0), DomainError);
  CHECK_THROWS_AS(quantize_q(Tensor::scalar(1.0), 3, 0.0), DomainError);
}

TEST_CASE("quantizer output lands on a bounded codebook") {
  Philox rng(21, 0);
  for (int b : {2, 3, 4}) {
    Tensor theta = random_tensor({4096}, rng, -2.0, 2.0);
    Tensor q = quantize_q(theta, b, 0.7);
    std::set<double> values(q.values().begin(), q.values().end());
    CHECK(values.size() <= static_cast<size_t>((1 << b) - 1));
  }
  Tensor q1 = quantize_q(random_tensor({512}, rng), 1, 0.0);
  std::set<double> v1(q1.values().begin(), q1.values().end());
  CHECK(v1 == std::set<double>{-1.0, 1.0});
}

TEST_CASE("shifted quantizer Qhat") {
  // beta=0 reduces to Q
  Philox rng(31, 0);
  Tensor theta = random_tensor({64}, rng);
  Tensor a = quantize_qhat(theta, 3, 0.6, 0.0);
  Tensor b = quantize_q(theta, 3, 0.6);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  // direct formula oracles
  CHECK(quantize_qhat(Tensor::scalar(0.7), 3, 0.6, 0.1)[0] == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(quantize_qhat(Tensor::scalar(-0.5), 3, 0.6, 0.1)[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK_THROWS_AS(quantize_qhat(Tensor::scalar(0.5), 1, 0.6, 0.1), DomainError);
}

TEST_CASE("Qhat output minus sign(theta) beta lies on the Q codebook") {
  Philox rng(41, 0);
  double r = 0.5, beta = 0.08;
  int bits = 3;
  Tensor theta = random_tensor({2048}, rng, -1.0, 1.0);
  Tensor qh = quantize_qhat(theta, bits, r, beta);
  double d = quant_step(bits, r);
  for (int64_t i = 0; i < theta.numel(); ++i) {
    double s = theta[i] >= 0.0 ? 1.0 : -1.0;
    double on_grid = (qh[i] - s * beta) / d;
    CHECK(std::fabs(on_grid - std::round(on_grid)) < 1e-9);
  }
}

TEST_CASE("graph quantizer is bit-identical to the plain one") {
  Philox rng(51, 0);
  Tensor theta = random_tensor({128}, rng, -1.5, 1.5);
  for (int bits : {1, 2, 4, 8}) {
    double r = 0.9;
    Graph g;
    Value q = quantize_q(g, g.leaf(theta, true), bits, g.leaf(Tensor::scalar(r), true));
    Tensor plain = quantize_q(theta, bits, r);
    for (int64_t i = 0; i < theta.numel(); ++i) CHECK(g.value(q)[i] == plain[i]);
  }
  Graph g;
  Value qh = quantize_qhat(g, g.leaf(theta, true), 3, g.leaf(Tensor::scalar(0.6), true), 0.1);
  Tensor plain = quantize_qhat(theta, 3, 0.6, 0.1);
  for (int64_t i = 0; i < theta.numel(); ++i) CHECK(g.value(qh)[i] == plain[i]);
}

TEST_CASE("range gradient: quantization-error inside, exactly zero at saturation") {
  double r = 0.8;
  int bits = 3;
  double c = static_cast<double>(quant_levels(bits));
  Graph g;
  Value rleaf = g.leaf(Tensor::scalar(r), true);
  Value theta = g.leaf(Tensor({2}, {0.3, 5.0}), false);  // interior, saturated
  Value q = quantize_q(g, theta, bits, rleaf);
  g.backward(g.sum(q));
  double d = r * (1.0 / c);
  double u = 0.3 * (1.0 / d);
  double expected_interior = (std::round(u) - u) / c;
  CHECK(g.grad(rleaf)[0] == doctest::Approx(expected_interior).epsilon(1e-12));
  // the saturated element contributed exactly zero: re-run with it alone
  Graph g2;
  Value r2 = g2.leaf(Tensor::scalar(r), true);
  Value q2 = quantize_q(g2, g2.leaf(Tensor::scalar(5.0), false), bits, r2);
  g2.backward(g2.sum(q2));
  CHECK(g2.grad(r2)[0] == 0.0);
}

TEST_CASE("gumbel-softmax samples live on the simplex and recover the categorical") {
  Philox rng(61, 0);
  std::vector<double> pi = {0.7, 0.3};
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    std::vector<double> z = gumbel_softmax_sample(pi, 0.01, rng);
    double s = z[0] + z[1];
    CHECK(std::fabs(s - 1.0) < 1e-12);
    if (z[0] > z[1]) ++hits;
  }
  double freq = static_cast<double>(hits) / n;
  CHECK(freq == doctest::Approx(0.7).epsilon(0.015));  // 0.7 +- 0.01 band
  CHECK_THROWS_AS(gumbel_softmax_sample(pi, 0.0, rng), DomainError);
}

TEST_CASE("gumbel sampling is reproducible given the rng state") {
  std::vector<double> pi = {0.2, 0.5, 0.3};
  Philox a(7, 3), b(7, 3);
  for (int i = 0; i < 10; ++i) {
    auto za = gumbel_softmax_sample(pi, 0.5, a);
    auto zb = gumbel_softmax_sample(pi, 0.5, b);
    CHECK(za == zb);
  }
}

TEST_CASE("gumbel-softmax gradient w.r.t. logits, frozen noise") {
  Philox rng(71, 0);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor logits = random_tensor({4}, rng, -1, 1);
    Philox frozen(123 + static_cast<uint64_t>(trial), 9);
    double err = test::gradcheck_max_rel_err(
        [&frozen](Graph& g, const std::vector<Value>& v) {
          Philox noise = frozen;  // same draws for every FD evaluation
          Value z = gumbel_softmax_sample(g, v[0], 0.7, noise);
          Tensor w({4}, {0.4, -0.2, 0.9, 0.1});
          return g.sum(g.mul(z, g.constant(w)));
        },
        {logits});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("graph and plain gumbel agree for identical streams") {
  Tensor logits({3}, {0.1, -0.4, 0.8});
  Tensor pi_t = kernels::softmax_lastaxis(logits);
  std::vector<double> pi(pi_t.values().begin(), pi_t.values().end());
  Philox a(17, 2), b(17, 2);
  Graph g;
  Value z = gumbel_softmax_sample(g, g.leaf(logits, false), 0.5, a);
  std::vector<double> zp = gumbel_softmax_sample(pi, 0.5, b);
  for (int i = 0; i < 3; ++i) CHECK(g.value(z)[i] == doctest::Approx(zp[i]).epsilon(1e-12));
}

TEST_CASE("top-k straight-through forward") {
  std::vector<double> z = {0.5, 0.3, 0.2};
  CHECK(ste_forward(z, 3) == z);  // kappa = K keeps the sample untouched
  std::vector<double> k1 = ste_forward(z, 1);
  CHECK(k1 == std::vector<double>{1.0, 0.0, 0.0});
  std::vector<double> k2 = ste_forward(z, 2);
  CHECK(k2[0] == doctest::Approx(0.625).epsilon(1e-15));
  CHECK(k2[1] == doctest::Approx(0.375).epsilon(1e-15));
  CHECK(k2[2] == 0.0);
  CHECK_THROWS_AS(ste_forward(z, 0), DomainError);
  CHECK_THROWS_AS(ste_forward(z, 4), DomainError);
}

TEST_CASE("argmax extraction uses the lowest-index tie rule") {
  DecisionVariable d;
  d.kind = DecisionKind::bitwidth;
  d.values = {2, 4, 8};
  d.logits = Tensor({3}, {std::log(0.2), std::log(0.5), std::log(0.3)});
  d.kappa = 1;
  CHECK(d.argmax() == 1);
  DecisionVariable tie;
  tie.kind = DecisionKind::width;
  tie.values = {0.5, 1.0};
  tie.logits = Tensor({2}, {0.0, 0.0});
  tie.kappa = 1;
  CHECK(tie.argmax() == 0);
}

// ------------------------------------------------------- layer forward

namespace {

SearchLayer make_toy_layer(Philox& rng, int64_t channels) {
  SearchLayer layer;
  layer.name = "toy";
  layer.in_channels = channels;
  layer.out_channels = channels;
  layer.stride = 1;
  auto dec = [](DecisionKind kind, std::vector<double> values, std::vector<OperatorKind> ops) {
    DecisionVariable d;
    d.kind = kind;
    d.values = std::move(values);
    d.ops = std::move(ops);
    d.logits = Tensor({d.num_options()});
    d.kappa = d.num_options();
    return d;
  };
  layer.width = dec(DecisionKind::width, {0.5, 1.0}, {});
  layer.sparsity = dec(DecisionKind::sparsity, {0.5, 1.0}, {});
  layer.bitwidth = dec(DecisionKind::bitwidth, {2, 8}, {});
  layer.oper = dec(DecisionKind::oper, {}, {OperatorKind::conv3x3, OperatorKind::identity});
  for (double rho : layer.width.values) layer.width_masks.push_back(make_width_mask(rho, channels));
  OperatorCandidate conv;
  conv.kind = OperatorKind::conv3x3;
  conv.theta = test::random_tensor({channels, channels, 3, 3}, rng, -0.8, 0.8);
  conv.bias = test::random_tensor({channels}, rng, -0.1, 0.1);
  conv.quant.ranges = Tensor::full({2}, 0.7);
  layer.candidates.push_back(std::move(conv));
  OperatorCandidate ident;
  ident.kind = OperatorKind::identity;
  layer.candidates.push_back(std::move(ident));
  layer.refresh_masks();
  layer.validate();
  return layer;
}

Value onehot_sample(Graph& g, int k, int n) {
  Tensor z({n});
  z[k] = 1.0;
  return g.constant(std::move(z));
}

}  // namespace

TEST_CASE("one-hot layer forward equals an independently built concrete layer, bit-exactly") {
  Philox rng(81, 0);
  SearchLayer layer = make_toy_layer(rng, 4);
  Tensor x = random_tensor({2, 4, 5, 5}, rng);
  const OperatorCandidate& conv = layer.candidates[0];
  for (int wi = 0; wi < 2; ++wi)
    for (int si = 0; si < 2; ++si)
      for (int bi = 0; bi < 2; ++bi)
        for (int oi = 0; oi < 2; ++oi) {
          Graph g;
          LayerSamples s{onehot_sample(g, wi, 2), onehot_sample(g, si, 2), onehot_sample(g, bi, 2),
                         onehot_sample(g, oi, 2)};
          Value y = layer_forward(g, g.constant(x), layer, s);

          // independent concrete computation with plain kernels
          Tensor expect;
          if (oi == 1) {
            expect = x;
          } else {
            int bits = static_cast<int>(layer.bitwidth.values[static_cast<size_t>(bi)]);
            Tensor w = quantize_q(conv.theta, bits, conv.quant.ranges[bi]);
            const Tensor& m = conv.mask_bank[static_cast<size_t>(si)];
            for (int64_t i = 0; i < w.numel(); ++i) w[i] *= m[i];
            expect = kernels::conv2d(x, w, 1, 1);
            for (int64_t b = 0; b < expect.dim(0); ++b)
              for (int64_t c = 0; c < expect.dim(1); ++c)
                for (int64_t p = 0; p < expect.dim(2) * expect.dim(3); ++p)
                  expect[(b * expect.dim(1) + c) * expect.dim(2) * expect.dim(3) + p] += conv.bias[c];
          }
          const Tensor& wm = layer.width_masks[static_cast<size_t>(wi)];
          for (int64_t b = 0; b < expect.dim(0); ++b)
            for (int64_t c = 0; c < expect.dim(1); ++c)
              for (int64_t p = 0; p < expect.dim(2) * expect.dim(3); ++p)
                expect[(b * expect.dim(1) + c) * expect.dim(2) * expect.dim(3) + p] *= wm[c];

          const Tensor& got = g.value(y);
          REQUIRE(same_shape(got.shape(), expect.shape()));
          double max_diff = 0;
          for (int64_t i = 0; i < got.numel(); ++i) max_diff = std::max(max_diff, std::fabs(got[i] - expect[i]));
          CHECK(max_diff == 0.0);
        }
}

TEST_CASE("identity operator selected one-hot returns the input") {
  Philox rng(91, 0);
  SearchLayer layer = make_toy_layer(rng, 3);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Graph g;
  LayerSamples s{onehot_sample(g, 1, 2), onehot_sample(g, 1, 2), onehot_sample(g, 1, 2), onehot_sample(g, 1, 2)};
  Value y = layer_forward(g, g.constant(x), layer, s);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.value(y)[i] == x[i]);
}

TEST_CASE("mask bank refresh preserves cardinality and recomputes beta") {
  Philox rng(101, 0);
  SearchLayer layer = make_toy_layer(rng, 4);
  std::vector<int64_t> before;
  for (const Tensor& m : layer.candidates[0].mask_bank) before.push_back(m.count_nonzero());
  // perturb weights, refresh
  for (int64_t i = 0; i < layer.candidates[0].theta.numel(); ++i) {
    layer.candidates[0].theta[i] += 0.01 * rng.normal();
  }
  layer.refresh_masks();
  for (size_t k = 0; k < before.size(); ++k) {
    CHECK(layer.candidates[0].mask_bank[k].count_nonzero() == before[k]);
  }
  // argmax sparsity option at uniform logits is index 0 (s=0.5): beta > 0
  CHECK(layer.candidates[0].quant.beta > 0.0);
  // force argmax to s=1.0: beta must be 0
  layer.sparsity.logits[1] = 5.0;
  layer.refresh_masks();
  CHECK(layer.candidates[0].quant.beta == 0.0);
}

TEST_CASE("one-hot samples through topk_renorm_ste stay exactly one-hot") {
  Graph g;
  Tensor z({3});
  z[1] = 1.0;
  Value v = g.topk_renorm_ste(g.constant(z), 1);
  CHECK(g.value(v)[0] == 0.0);
  CHECK(g.value(v)[1] == 1.0);
  CHECK(g.value(v)[2] == 0.0);
}
