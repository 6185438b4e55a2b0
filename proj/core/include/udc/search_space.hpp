#pragma once

#include <optional>
#include <string>
#include <vector>

#include "udc/graph.hpp"
#include "udc/rng.hpp"
#include "udc/tensor.hpp"

namespace udc {

// ----------------------------------------------------------------- masks

/// Leading ceil(rho*n) ones, remainder zeros.
Tensor make_width_mask(double rho, int64_t n_channels);
int64_t retained_channels(double rho, int64_t n_channels);

/// Marks the ceil(s*numel) largest-|theta| elements. Ties broken by
/// (|theta| descending, flat index ascending), so masks are a pure
/// function of theta.
Tensor make_sparsity_mask(const Tensor& theta, double s);
int64_t retained_elements(double s, int64_t numel);

// ------------------------------------------------------------ quantizers

/// Uniform symmetric quantizer. b>1: d*round(clip(theta,-r,r)/d) with
/// d = r/(2^(b-1)-1); b=1: sign(theta) in {-1,+1}.
Tensor quantize_q(const Tensor& theta, int bits, double range);

/// Shifted quantizer for b>1: Q(theta - sign(theta)*beta, b, r) +
/// sign(theta)*beta. With beta=0 identical to quantize_q.
Tensor quantize_qhat(const Tensor& theta, int bits, double range, double beta);

/// Graph versions. Gradients: straight-through to theta inside the clip
/// range; the range picks up the quantization-error gradient
/// (round(u)-u)/(2^(b-1)-1), exactly zero where the clip saturates.
Value quantize_q(Graph& g, Value theta, int bits, Value range);
Value quantize_qhat(Graph& g, Value theta, int bits, Value range, double beta);

int64_t quant_levels(int bits);        // 2^(b-1)-1 positive steps
double quant_step(int bits, double r); // d

// -------------------------------------------------------------- decisions

enum class DecisionKind { width, sparsity, bitwidth, oper };
std::string to_string(DecisionKind k);

enum class OperatorKind { conv3x3, conv5x5, conv1x1, dense, identity };
OperatorKind operator_kind_from_string(const std::string& s);
std::string to_string(OperatorKind k);
int kernel_extent(OperatorKind k);

/// One categorical design choice. pi is stored as unconstrained logits;
/// the simplex view is softmax(logits).
struct DecisionVariable {
  DecisionKind kind = DecisionKind::width;
  std::vector<double> values;        // rho_k | s_k | b_k (strictly increasing)
  std::vector<OperatorKind> ops;     // operator options (kind == oper)
  Tensor logits;                     // trainable, length = option count
  int kappa = 1;

  int num_options() const;
  std::vector<double> pi() const;    // softmax(logits)
  int argmax() const;                // ties -> lowest index
  void validate() const;
};

/// Floor applied to probabilities before log() in Gumbel sampling.
inline constexpr double kPiFloor = 1e-9;

/// zhat = softmax((log(max(pi,floor)) + g)/tau), g ~ Gumbel(0,1).
std::vector<double> gumbel_softmax_sample(const std::vector<double>& pi, double tau, Philox& rng);
/// Graph version; differentiable w.r.t. the logits leaf.
Value gumbel_softmax_sample(Graph& g, Value logits, double tau, Philox& rng);

/// Top-kappa + l1 renormalization, straight-through backward (plain
/// mirror of Graph::topk_renorm_ste).
std::vector<double> ste_forward(const std::vector<double>& zhat, int kappa);

// ---------------------------------------------------------------- layers

struct QuantSpec {
  Tensor ranges;        // r_k per bitwidth option (slot unused for b=1)
  double beta = 0.0;    // shift, largest pruned |theta|; 0 when s=1
  int deploy_bits = 8;  // b*
};

/// One operator candidate inside a search layer: its own weights plus
/// the quantization/sparsity machinery attached to them.
struct OperatorCandidate {
  OperatorKind kind = OperatorKind::conv3x3;
  Tensor theta;                   // empty for identity
  Tensor bias;                    // (out_channels), empty for identity
  QuantSpec quant;
  std::vector<Tensor> mask_bank;  // one mask per sparsity option
};

struct SearchLayer {
  std::string name;
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int stride = 1;
  DecisionVariable width, sparsity, bitwidth, oper;
  std::vector<OperatorCandidate> candidates;
  std::vector<Tensor> width_masks;  // one per width option, length out_channels

  /// Rebuilds every sparsity mask from current theta and recomputes
  /// beta from the argmax sparsity option (mask first, then beta).
  void refresh_masks();
  void validate() const;
};

/// Post-STE mixing vectors for one layer's decisions.
struct LayerSamples {
  Value width, sparsity, bitwidth, oper;
};

/// Supernet forward for one layer:
///   weight_eff = (sum_k zq[k] Q(theta,b_k,r_k)) .* (sum_k zs[k] m_k)
///   y = (sum_c zf[c] f_c(x, weight_eff_c)) .* (sum_k zw[k] w_k)
/// Mixing skips options whose post-STE coefficient is exactly zero.
Value layer_forward(Graph& g, Value x, const SearchLayer& layer, const LayerSamples& s);

/// Sequential supernet over search layers plus a fixed
/// mean-pool/flatten head in front of any dense layer.
struct SearchNet {
  std::vector<SearchLayer> layers;
  Shape input_shape;  // (C,H,W) for conv nets, (D) for MLPs
  int num_classes = 0;
  bool regression = false;

  /// Builds leaves for all trainable tensors of layer `li`'s candidates
  /// into `g` and returns per-layer handles. See dnas.cpp for use.
  void validate() const;
};

/// Concrete per-layer choice extracted from the distributions.
struct LayerChoice {
  int width_index = 0, sparsity_index = 0, bitwidth_index = 0, oper_index = 0;
};

/// argmax over every decision's pi, ties to the lowest index.
std::vector<LayerChoice> extract_argmax_config(const SearchNet& net);

// Weight tensor shape for an operator at full channel counts.
Shape operator_theta_shape(OperatorKind kind, int64_t in_channels, int64_t out_channels, int64_t in_features = 0);

}  // namespace udc
