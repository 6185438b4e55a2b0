#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "udc/dnas.hpp"
#include "udc/error.hpp"
#include "udc/rng.hpp"
#include "udc/search_space.hpp"
#include "udc/size_model.hpp"

namespace udc::test {

/// Synthetic enumerable cost space for the regularizer lemmas: random
/// sequential geometry where, within each decision, every option leads
/// to a distinct network cost for any fixed assignment of the others
/// (verified by enumeration; regenerated on collision).
struct LemmaSpace {
  NetCostModel model;
  std::vector<std::vector<LayerChoice>> configs;
  std::vector<double> costs;
  int num_layers = 0;

  uint64_t size() const { return configs.size(); }

  double probability(const std::vector<std::vector<double>>& pis, const std::vector<LayerChoice>& cfg) const {
    double p = 1.0;
    for (int li = 0; li < num_layers; ++li) {
      const LayerChoice& c = cfg[static_cast<size_t>(li)];
      p *= pis[static_cast<size_t>(li * 4 + 0)][static_cast<size_t>(c.width_index)];
      p *= pis[static_cast<size_t>(li * 4 + 1)][static_cast<size_t>(c.sparsity_index)];
      p *= pis[static_cast<size_t>(li * 4 + 2)][static_cast<size_t>(c.bitwidth_index)];
      p *= pis[static_cast<size_t>(li * 4 + 3)][static_cast<size_t>(c.oper_index)];
    }
    return p;
  }

  /// Exact L_E^z by enumeration: sum_config p(config) |E(config) - e*|.
  double exact_regularizer(const std::vector<std::vector<double>>& pis, double e_star) const {
    double acc = 0.0;
    for (size_t i = 0; i < configs.size(); ++i) {
      double p = probability(pis, configs[i]);
      if (p > 0.0) acc += p * std::fabs(costs[i] - e_star);
    }
    return acc;
  }

  std::vector<int> option_counts() const {
    std::vector<int> out;
    for (const auto& L : model.layers) {
      out.push_back(static_cast<int>(L.width_options.size()));
      out.push_back(static_cast<int>(L.sparsity_options.size()));
      out.push_back(static_cast<int>(L.bitwidth_options.size()));
      out.push_back(static_cast<int>(L.candidates.size()));
    }
    return out;
  }
};

inline std::vector<double> sorted_random_fractions(Philox& rng, int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(rng.uniform(0.05, 1.0));
  std::sort(v.begin(), v.end());
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i] - v[i - 1] < 1e-3) v[i] = v[i - 1] + 1e-3 + rng.uniform(0, 0.01);
  }
  for (double& x : v) x = std::min(x, 1.0);
  return v;
}

inline LemmaSpace make_lemma_space(Philox& rng, uint64_t max_configs = 4096) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    NetCostModel model;
    model.kind = CostKind::compressed_bits;
    int layers = 1 + static_cast<int>(rng.uniform_index(2));
    int64_t in_ch = 3 + static_cast<int64_t>(rng.uniform_index(4));
    for (int li = 0; li < layers; ++li) {
      NetCostModel::Layer L;
      int64_t out_ch = 3 + static_cast<int64_t>(rng.uniform_index(4));
      int kw = static_cast<int>(rng.uniform_index(2)) ? 3 : 1;
      int nw = 2 + static_cast<int>(rng.uniform_index(2));
      int ns = 2 + static_cast<int>(rng.uniform_index(2));
      int nb = 2 + static_cast<int>(rng.uniform_index(2));
      L.width_options = sorted_random_fractions(rng, nw);
      L.sparsity_options = sorted_random_fractions(rng, ns);
      std::vector<double> bits;
      int b0 = 1 + static_cast<int>(rng.uniform_index(3));
      for (int i = 0; i < nb; ++i) bits.push_back(static_cast<double>(b0 + i * (1 + static_cast<int>(rng.uniform_index(3)))));
      L.bitwidth_options = bits;
      LayerCostGeometry geom;
      geom.op = OperatorKind::conv3x3;
      geom.in_channels = in_ch;
      geom.out_channels = out_ch;
      geom.kernel_h = geom.kernel_w = kw;
      geom.out_positions = 16;
      geom.has_bias = true;
      L.candidates = {geom};
      model.layers.push_back(std::move(L));
      in_ch = out_ch;
    }
    if (model.num_configs() > max_configs) continue;

    LemmaSpace space;
    space.model = model;
    space.num_layers = layers;
    model.enumerate([&](std::span<const LayerChoice> cfg, double cost) {
      space.configs.emplace_back(cfg.begin(), cfg.end());
      space.costs.push_back(cost);
    });

    // per-decision distinct-cost requirement: configs differing only in
    // one decision's option never share a cost
    bool distinct = true;
    for (size_t i = 0; i < space.configs.size() && distinct; ++i) {
      for (size_t j = i + 1; j < space.configs.size() && distinct; ++j) {
        int differing = 0;
        for (int li = 0; li < layers && differing <= 1; ++li) {
          const LayerChoice& a = space.configs[i][static_cast<size_t>(li)];
          const LayerChoice& b = space.configs[j][static_cast<size_t>(li)];
          differing += (a.width_index != b.width_index) + (a.sparsity_index != b.sparsity_index) +
                       (a.bitwidth_index != b.bitwidth_index) + (a.oper_index != b.oper_index);
        }
        if (differing == 1 && std::fabs(space.costs[i] - space.costs[j]) < 1e-9) distinct = false;
      }
    }
    if (!distinct) continue;
    return space;
  }
  throw DomainError("make_lemma_space: could not generate a distinct-cost space");
}

/// All pi vectors one-hot at the given config.
inline std::vector<std::vector<double>> onehot_pis(const LemmaSpace& space, const std::vector<LayerChoice>& cfg) {
  std::vector<std::vector<double>> pis;
  std::vector<int> counts = space.option_counts();
  for (int li = 0; li < space.num_layers; ++li) {
    const LayerChoice& c = cfg[static_cast<size_t>(li)];
    int idx[4] = {c.width_index, c.sparsity_index, c.bitwidth_index, c.oper_index};
    for (int d = 0; d < 4; ++d) {
      std::vector<double> pi(static_cast<size_t>(counts[static_cast<size_t>(li * 4 + d)]), 0.0);
      pi[static_cast<size_t>(idx[d])] = 1.0;
      pis.push_back(std::move(pi));
    }
  }
  return pis;
}

/// MC estimate of the relaxed regularizer over raw Gumbel-softmax
/// samples, mixing in rejection samples per decision with probability
/// theta_mix (the Table-2 measurement).
inline double measure_le_zhat(const LemmaSpace& space, const std::vector<std::vector<double>>& pis, double e_star,
                              double tau, double theta_mix, int mc_samples, uint64_t seed, int rej_samples = 64);

/// Enumerates the step-1/steps simplex grid over K options.
inline void simplex_grid(int K, int steps, const std::function<void(const std::vector<double>&)>& fn) {
  std::vector<int> counts(static_cast<size_t>(K), 0);
  std::function<void(int, int)> walk = [&](int pos, int remaining) {
    if (pos == K - 1) {
      counts[static_cast<size_t>(pos)] = remaining;
      std::vector<double> pi(static_cast<size_t>(K));
      for (int i = 0; i < K; ++i) pi[static_cast<size_t>(i)] = static_cast<double>(counts[static_cast<size_t>(i)]) / steps;
      fn(pi);
      return;
    }
    for (int c = 0; c <= remaining; ++c) {
      counts[static_cast<size_t>(pos)] = c;
      walk(pos + 1, remaining - c);
    }
  };
  walk(0, steps);
}

inline double measure_le_zhat(const LemmaSpace& space, const std::vector<std::vector<double>>& pis, double e_star,
                              double tau, double theta_mix, int mc_samples, uint64_t seed, int rej_samples) {
  Philox rng(seed, 50);
  Philox coin(seed, 51);
  double acc = 0.0;
  for (int s = 0; s < mc_samples; ++s) {
    std::vector<SoftSample> soft(static_cast<size_t>(space.num_layers));
    for (int li = 0; li < space.num_layers; ++li) {
      std::vector<double>* slots[4] = {&soft[static_cast<size_t>(li)].width, &soft[static_cast<size_t>(li)].sparsity,
                                       &soft[static_cast<size_t>(li)].bitwidth, &soft[static_cast<size_t>(li)].oper};
      for (int d = 0; d < 4; ++d) {
        const std::vector<double>& pi = pis[static_cast<size_t>(li * 4 + d)];
        bool use_rejection = theta_mix > 0.0 && coin.bernoulli(theta_mix);
        *slots[d] = use_rejection ? rejection_sample(pi, tau, rej_samples, rng)
                                  : gumbel_softmax_sample(pi, tau, rng);
      }
    }
    acc += std::fabs(space.model.soft_cost(soft) - e_star);
  }
  return acc / mc_samples;
}

}  // namespace udc::test
