#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "udc/graph.hpp"
#include "udc/search_space.hpp"

namespace udc {

/// H_b(s) = -s log2 s - (1-s) log2(1-s), with H_b(0)=H_b(1)=0.
double binary_entropy(double s);

/// Compressed tensor size bound: (b + H_b(s)) * elem_count bits.
double layer_size_bits(double s, double b, double elem_count);

/// Bits charged per bias/batchnorm parameter (fixed, unsearched).
inline constexpr double kBiasBits = 32.0;

enum class CostKind { compressed_bits, mac_count };

/// Per-candidate cost geometry. in_positions is the number of spatial
/// positions bundled per upstream channel (H*W for a flattening dense
/// layer, 1 otherwise); out_positions is the output spatial extent used
/// by the MAC model.
struct LayerCostGeometry {
  OperatorKind op = OperatorKind::conv3x3;
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kernel_h = 1, kernel_w = 1;
  int64_t in_positions = 1;
  int64_t out_positions = 1;
  bool has_bias = true;
};

double soft_elem_count(const LayerCostGeometry& g, double rho_in, double rho_out);
int64_t concrete_elem_count(const LayerCostGeometry& g, double rho_in, double rho_out);
double soft_mac_count(const LayerCostGeometry& g, double rho_in, double rho_out);
int64_t concrete_mac_count(const LayerCostGeometry& g, double rho_in, double rho_out);

/// Soft per-decision mixing vectors (plain mirror of LayerSamples).
struct SoftSample {
  std::vector<double> width, sparsity, bitwidth, oper;
};

/// Differentiable network cost over a sequential chain of searched
/// layers. Layer l's input width fraction is layer l-1's width decision
/// (1.0 for the first layer).
struct NetCostModel {
  struct Layer {
    std::vector<LayerCostGeometry> candidates;  // one per operator option
    std::vector<double> width_options;
    std::vector<double> sparsity_options;
    std::vector<double> bitwidth_options;
  };
  std::vector<Layer> layers;
  CostKind kind = CostKind::compressed_bits;

  /// Cost of a concrete configuration. integer_counts selects ceil-based
  /// retained counts (deployable storage) vs smooth products (the
  /// search-time differentiable model evaluated at the same point).
  double config_cost(std::span<const LayerChoice> config, bool integer_counts) const;

  /// Cost at soft mixing vectors; option values compose before the size
  /// formula (epsilon of the convex combination, not the combination of
  /// epsilons). Skips operator options with exactly-zero coefficient.
  double soft_cost(std::span<const SoftSample> samples) const;

  /// Graph version of soft_cost, differentiable w.r.t. the sample
  /// vectors. s is clamped to [1e-12, 1-1e-12] before the logs.
  Value soft_cost(Graph& g, std::span<const LayerSamples> samples) const;

  uint64_t num_configs() const;  // saturates at 2^63
  /// min/max achievable config cost, exact, via per-layer DP over the
  /// upstream width option (smooth counts).
  std::pair<double, double> cost_bounds() const;
  /// Visits every configuration (intended for spaces <= ~1e6 configs).
  void enumerate(const std::function<void(std::span<const LayerChoice>, double cost)>& fn,
                 bool integer_counts = false) const;
};

NetCostModel build_cost_model(const SearchNet& net, CostKind kind, const Shape& input_shape);

/// Eq.-(7)-style penalty: mean over sampled network costs of |E - e*|.
double constraint_regularizer(std::span<const double> sampled_costs, double e_star);

/// Graph penalty for one sample: |E/e* - 1| (normalized) or |E - e*|.
Value constraint_penalty(Graph& g, Value network_cost, double e_star, bool normalized);

}  // namespace udc
