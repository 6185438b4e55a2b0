#include "udc/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udc/error.hpp"
#include "udc/supernet.hpp"

namespace udc {

// ----------------------------------------------------------------- masks

int64_t retained_channels(double rho, int64_t n_channels) {
  if (rho <= 0.0 || rho > 1.0) throw DomainError("width fraction must be in (0,1], got " + std::to_string(rho));
  return static_cast<int64_t>(std::ceil(rho * static_cast<double>(n_channels)));
}

Tensor make_width_mask(double rho, int64_t n_channels) {
  int64_t keep = retained_channels(rho, n_channels);
  Tensor mask({n_channels});
  for (int64_t i = 0; i < keep; ++i) mask[i] = 1.0;
  return mask;
}

int64_t retained_elements(double s, int64_t numel) {
  if (s <= 0.0 || s > 1.0) throw DomainError("sparsity fraction must be in (0,1], got " + std::to_string(s));
  return static_cast<int64_t>(std::ceil(s * static_cast<double>(numel)));
}

Tensor make_sparsity_mask(const Tensor& theta, double s) {
  int64_t n = theta.numel();
  int64_t keep = retained_elements(s, n);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return std::fabs(theta[a]) > std::fabs(theta[b]); });
  Tensor mask(theta.shape());
  for (int64_t i = 0; i < keep; ++i) mask[order[static_cast<size_t>(i)]] = 1.0;
  return mask;
}

// ------------------------------------------------------------ quantizers

int64_t quant_levels(int bits) {
  if (bits < 1 || bits > 32) throw DomainError("bitwidth must be in [1,32], got " + std::to_string(bits));
  return (int64_t{1} << (bits - 1)) - 1;
}

double quant_step(int bits, double r) {
  return r * (1.0 / static_cast<double>(quant_levels(bits)));
}

Tensor quantize_q(const Tensor& theta, int bits, double range) {
  if (bits < 1) throw DomainError("quantize_q: bitwidth must be >= 1");
  Tensor out(theta.shape());
  if (bits == 1) {
    for (int64_t i = 0; i < theta.numel(); ++i) out[i] = theta[i] >= 0.0 ? 1.0 : -1.0;
    return out;
  }
  if (range <= 0.0) throw DomainError("quantize_q: range must be positive for b > 1");
  // same operation order as the graph composition, for bit-identical results
  double d = range * (1.0 / static_cast<double>(quant_levels(bits)));
  double invd = 1.0 / d;
  for (int64_t i = 0; i < theta.numel(); ++i) {
    double xc = std::min(range, std::max(-range, theta[i]));
    out[i] = std::round(xc * invd) * d;
  }
  return out;
}

Tensor quantize_qhat(const Tensor& theta, int bits, double range, double beta) {
  if (bits <= 1) throw DomainError("quantize_qhat: defined only for b > 1");
  if (beta < 0.0) throw DomainError("quantize_qhat: beta must be >= 0");
  Tensor inner(theta.shape());
  for (int64_t i = 0; i < theta.numel(); ++i) {
    double s = theta[i] >= 0.0 ? 1.0 : -1.0;
    inner[i] = theta[i] - s * beta;
  }
  Tensor q = quantize_q(inner, bits, range);
  for (int64_t i = 0; i < q.numel(); ++i) {
    double s = theta[i] >= 0.0 ? 1.0 : -1.0;
    q[i] += s * beta;
  }
  return q;
}

Value quantize_q(Graph& g, Value theta, int bits, Value range) {
  if (bits < 1) throw DomainError("quantize_q: bitwidth must be >= 1");
  if (bits == 1) return g.sign_ste(theta);
  double r_now = g.value(range).item();
  if (r_now <= 0.0) throw DomainError("quantize_q: range must be positive for b > 1");
  double inv_levels = 1.0 / static_cast<double>(quant_levels(bits));
  Value d = g.scale(range, inv_levels);
  // clip bounds are the current range value; the gradient to the range
  // flows only through d, which zeroes it exactly where the clip
  // saturates (see tests).
  Value xc = g.clip(theta, -r_now, r_now);
  Value u = g.mul(xc, g.reciprocal(d));
  Value v = g.round_ste(u);
  return g.mul(v, d);
}

Value quantize_qhat(Graph& g, Value theta, int bits, Value range, double beta) {
  if (bits <= 1) throw DomainError("quantize_qhat: defined only for b > 1");
  if (beta < 0.0) throw DomainError("quantize_qhat: beta must be >= 0");
  const Tensor& t = g.value(theta);
  Tensor shift(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) shift[i] = (t[i] >= 0.0 ? 1.0 : -1.0) * beta;
  Value sh = g.constant(std::move(shift), "qhat_shift");
  Value inner = g.sub(theta, sh);
  Value q = quantize_q(g, inner, bits, range);
  return g.add(q, sh);
}

// -------------------------------------------------------------- decisions

std::string to_string(DecisionKind k) {
  switch (k) {
    case DecisionKind::width: return "width";
    case DecisionKind::sparsity: return "sparsity";
    case DecisionKind::bitwidth: return "bitwidth";
    case DecisionKind::oper: return "operator";
  }
  return "?";
}

OperatorKind operator_kind_from_string(const std::string& s) {
  if (s == "conv3x3") return OperatorKind::conv3x3;
  if (s == "conv5x5") return OperatorKind::conv5x5;
  if (s == "conv1x1") return OperatorKind::conv1x1;
  if (s == "dense") return OperatorKind::dense;
  if (s == "identity") return OperatorKind::identity;
  throw DomainError("unknown operator kind '" + s + "'");
}

std::string to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::conv3x3: return "conv3x3";
    case OperatorKind::conv5x5: return "conv5x5";
    case OperatorKind::conv1x1: return "conv1x1";
    case OperatorKind::dense: return "dense";
    case OperatorKind::identity: return "identity";
  }
  return "?";
}

int kernel_extent(OperatorKind k) {
  switch (k) {
    case OperatorKind::conv3x3: return 3;
    case OperatorKind::conv5x5: return 5;
    case OperatorKind::conv1x1: return 1;
    default: return 1;
  }
}

Shape operator_theta_shape(OperatorKind kind, int64_t in_channels, int64_t out_channels, int64_t in_features) {
  switch (kind) {
    case OperatorKind::conv3x3: return {out_channels, in_channels, 3, 3};
    case OperatorKind::conv5x5: return {out_channels, in_channels, 5, 5};
    case OperatorKind::conv1x1: return {out_channels, in_channels, 1, 1};
    case OperatorKind::dense: return {in_features > 0 ? in_features : in_channels, out_channels};
    case OperatorKind::identity: return {};
  }
  return {};
}

int DecisionVariable::num_options() const {
  return kind == DecisionKind::oper ? static_cast<int>(ops.size()) : static_cast<int>(values.size());
}

std::vector<double> DecisionVariable::pi() const {
  Tensor p = kernels::softmax_lastaxis(logits);
  return std::vector<double>(p.values().begin(), p.values().end());
}

int DecisionVariable::argmax() const {
  std::vector<double> p = pi();
  int best = 0;
  for (int i = 1; i < static_cast<int>(p.size()); ++i)
    if (p[static_cast<size_t>(i)] > p[static_cast<size_t>(best)]) best = i;
  return best;
}

void DecisionVariable::validate() const {
  int k = num_options();
  if (k == 0) throw DomainError(to_string(kind) + " decision has no options");
  if (logits.numel() != k) {
    throw DomainError(to_string(kind) + " decision: logits size " + std::to_string(logits.numel()) +
                      " != option count " + std::to_string(k));
  }
  if (kappa < 1 || kappa > k) throw DomainError(to_string(kind) + " decision: kappa out of range");
  if (kind != DecisionKind::oper) {
    for (size_t i = 0; i + 1 < values.size(); ++i) {
      if (values[i] >= values[i + 1]) {
        throw DomainError(to_string(kind) + " decision: option values must be strictly increasing");
      }
    }
    for (double v : values) {
      if (kind == DecisionKind::bitwidth) {
        if (v < 1.0 || v != std::floor(v)) throw DomainError("bitwidth options must be integers >= 1");
      } else if (v <= 0.0 || v > 1.0) {
        throw DomainError(to_string(kind) + " options must lie in (0,1]");
      }
    }
  }
}

std::vector<double> gumbel_softmax_sample(const std::vector<double>& pi, double tau, Philox& rng) {
  if (tau <= 0.0) throw DomainError("gumbel_softmax_sample: tau must be positive");
  size_t k = pi.size();
  Tensor y({static_cast<int64_t>(k)});
  double inv_tau = 1.0 / tau;
  for (size_t i = 0; i < k; ++i) {
    double p = std::min(1.0, std::max(kPiFloor, pi[i]));
    y[static_cast<int64_t>(i)] = (std::log(p) + rng.gumbel()) * inv_tau;
  }
  Tensor z = kernels::softmax_lastaxis(y);
  return std::vector<double>(z.values().begin(), z.values().end());
}

Value gumbel_softmax_sample(Graph& g, Value logits, double tau, Philox& rng) {
  if (tau <= 0.0) throw DomainError("gumbel_softmax_sample: tau must be positive");
  int64_t k = g.value(logits).numel();
  Tensor noise({k});
  for (int64_t i = 0; i < k; ++i) noise[i] = rng.gumbel();
  Value pi = g.softmax(logits);
  Value pic = g.clip(pi, kPiFloor, 1.0);
  Value y = g.scale(g.add(g.log(pic), g.constant(std::move(noise), "gumbel_noise")), 1.0 / tau);
  return g.softmax(y);
}

std::vector<double> ste_forward(const std::vector<double>& zhat, int kappa) {
  int n = static_cast<int>(zhat.size());
  if (kappa < 1 || kappa > n) throw DomainError("ste_forward: kappa out of [1," + std::to_string(n) + "]");
  if (kappa == n) return zhat;
  std::vector<int> order(zhat.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return zhat[static_cast<size_t>(a)] > zhat[static_cast<size_t>(b)]; });
  double kept = 0.0;
  for (int i = 0; i < kappa; ++i) kept += zhat[static_cast<size_t>(order[static_cast<size_t>(i)])];
  std::vector<double> out(zhat.size(), 0.0);
  for (int i = 0; i < kappa; ++i) {
    size_t idx = static_cast<size_t>(order[static_cast<size_t>(i)]);
    out[idx] = zhat[idx] / kept;
  }
  return out;
}

// ---------------------------------------------------------------- layers

void SearchLayer::refresh_masks() {
  int s_star = sparsity.argmax();
  double s_val = sparsity.values.at(static_cast<size_t>(s_star));
  for (auto& cand : candidates) {
    if (cand.kind == OperatorKind::identity) continue;
    cand.mask_bank.resize(sparsity.values.size());
    for (size_t k = 0; k < sparsity.values.size(); ++k) {
      cand.mask_bank[k] = make_sparsity_mask(cand.theta, sparsity.values[k]);
    }
    // beta = largest pruned |theta| under the argmax sparsity option
    if (s_val >= 1.0) {
      cand.quant.beta = 0.0;
    } else {
      const Tensor& m = cand.mask_bank[static_cast<size_t>(s_star)];
      double beta = 0.0;
      for (int64_t i = 0; i < cand.theta.numel(); ++i) {
        if (m[i] == 0.0) beta = std::max(beta, std::fabs(cand.theta[i]));
      }
      cand.quant.beta = beta;
    }
  }
}

void SearchLayer::validate() const {
  width.validate();
  sparsity.validate();
  bitwidth.validate();
  oper.validate();
  if (static_cast<int>(candidates.size()) != oper.num_options()) {
    throw DomainError("layer " + name + ": candidate count != operator option count");
  }
  if (static_cast<int>(width_masks.size()) != width.num_options()) {
    throw DomainError("layer " + name + ": width mask bank size mismatch");
  }
  for (const auto& cand : candidates) {
    if (cand.kind == OperatorKind::identity) {
      if (in_channels != out_channels || stride != 1) {
        throw DomainError("layer " + name + ": identity candidate requires in==out channels and stride 1");
      }
      continue;
    }
    if (static_cast<int>(cand.mask_bank.size()) != sparsity.num_options()) {
      throw DomainError("layer " + name + ": sparsity mask bank size mismatch");
    }
    if (cand.quant.ranges.numel() != bitwidth.num_options()) {
      throw DomainError("layer " + name + ": one range per bitwidth option required");
    }
  }
}

namespace {

// Mixes quantized-and-masked weights for one candidate.
Value effective_weight(Graph& g, const SearchLayer& layer, const OperatorCandidate& cand, Value theta, Value ranges,
                       const LayerSamples& s) {
  const Tensor& zq = g.value(s.bitwidth);
  const Tensor& zs = g.value(s.sparsity);
  Value qmix{};
  for (int k = 0; k < layer.bitwidth.num_options(); ++k) {
    if (zq[k] == 0.0) continue;  // pruned by the top-k STE; branch not materialized
    int bits = static_cast<int>(layer.bitwidth.values[static_cast<size_t>(k)]);
    Value qk = bits >= 32 ? theta : quantize_q(g, theta, bits, g.select(ranges, k));
    Value term = g.mul(qk, g.select(s.bitwidth, k));
    qmix = qmix.valid() ? g.add(qmix, term) : term;
  }
  Value smix{};
  for (int k = 0; k < layer.sparsity.num_options(); ++k) {
    if (zs[k] == 0.0) continue;
    Value mk = g.constant(cand.mask_bank[static_cast<size_t>(k)], layer.name + "/mask");
    Value term = g.mul(mk, g.select(s.sparsity, k));
    smix = smix.valid() ? g.add(smix, term) : term;
  }
  if (!qmix.valid() || !smix.valid()) throw EngineError("layer " + layer.name + ": no active quant/sparsity option");
  return g.mul(qmix, smix);
}

}  // namespace

Value layer_forward(Graph& g, Value x, const SearchLayer& layer, const LayerSamples& s) {
  // convenience wrapper used by tests: leaves created on the fly
  Graph& gg = g;
  LayerLeaves leaves;
  for (const auto& cand : layer.candidates) {
    if (cand.kind == OperatorKind::identity) {
      leaves.theta.push_back(Value{});
      leaves.bias.push_back(Value{});
      leaves.ranges.push_back(Value{});
    } else {
      leaves.theta.push_back(gg.leaf(cand.theta, true, layer.name + "/theta"));
      leaves.bias.push_back(gg.leaf(cand.bias, true, layer.name + "/bias"));
      leaves.ranges.push_back(gg.leaf(cand.quant.ranges, true, layer.name + "/ranges"));
    }
  }
  return layer_forward_with_leaves(g, x, layer, s, leaves);
}

Value layer_forward_with_leaves(Graph& g, Value x, const SearchLayer& layer, const LayerSamples& s,
                                const LayerLeaves& leaves) {
  const Tensor& zf = g.value(s.oper);
  Value mix{};
  Shape mixed_shape;
  for (int c = 0; c < static_cast<int>(layer.candidates.size()); ++c) {
    if (zf[c] == 0.0) continue;
    const OperatorCandidate& cand = layer.candidates[static_cast<size_t>(c)];
    Value y{};
    if (cand.kind == OperatorKind::identity) {
      y = x;
    } else {
      Value w = effective_weight(g, layer, cand, leaves.theta[static_cast<size_t>(c)],
                                 leaves.ranges[static_cast<size_t>(c)], s);
      if (cand.kind == OperatorKind::dense) {
        y = g.matmul(x, w);
      } else {
        int pad = kernel_extent(cand.kind) / 2;
        y = g.conv2d(x, w, layer.stride, pad);
      }
      y = g.add_bias(y, leaves.bias[static_cast<size_t>(c)]);
    }
    if (mix.valid()) {
      if (!same_shape(g.value(y).shape(), mixed_shape)) {
        throw EngineError("layer " + layer.name + ": operator candidates produce incompatible shapes " +
                          shape_to_string(mixed_shape) + " vs " + shape_to_string(g.value(y).shape()));
      }
      mix = g.add(mix, g.mul(y, g.select(s.oper, c)));
    } else {
      mixed_shape = g.value(y).shape();
      mix = g.mul(y, g.select(s.oper, c));
    }
  }
  if (!mix.valid()) throw EngineError("layer " + layer.name + ": no active operator candidate");

  Value wmix{};
  const Tensor& zw = g.value(s.width);
  for (int k = 0; k < layer.width.num_options(); ++k) {
    if (zw[k] == 0.0) continue;
    Value wk = g.constant(layer.width_masks[static_cast<size_t>(k)], layer.name + "/width_mask");
    Value term = g.mul(wk, g.select(s.width, k));
    wmix = wmix.valid() ? g.add(wmix, term) : term;
  }
  if (!wmix.valid()) throw EngineError("layer " + layer.name + ": no active width option");
  return g.scale_channels(mix, wmix);
}

void SearchNet::validate() const {
  if (layers.empty()) throw DomainError("search net has no layers");
  for (const auto& l : layers) l.validate();
}

std::vector<LayerChoice> extract_argmax_config(const SearchNet& net) {
  std::vector<LayerChoice> out;
  out.reserve(net.layers.size());
  for (const auto& l : net.layers) {
    LayerChoice c;
    c.width_index = l.width.argmax();
    c.sparsity_index = l.sparsity.argmax();
    c.bitwidth_index = l.bitwidth.argmax();
    c.oper_index = l.oper.argmax();
    out.push_back(c);
  }
  return out;
}

// -------------------------------------------------------------- supernet

NetLeaves make_net_leaves(Graph& g, const SearchNet& net, bool trainable) {
  NetLeaves out;
  out.layers.resize(net.layers.size());
  for (size_t li = 0; li < net.layers.size(); ++li) {
    const SearchLayer& layer = net.layers[li];
    LayerLeaves& ll = out.layers[li];
    for (const auto& cand : layer.candidates) {
      if (cand.kind == OperatorKind::identity) {
        ll.theta.push_back(Value{});
        ll.bias.push_back(Value{});
        ll.ranges.push_back(Value{});
      } else {
        std::string base = layer.name + "/" + to_string(cand.kind);
        ll.theta.push_back(g.leaf(cand.theta, trainable, base + "/theta"));
        ll.bias.push_back(g.leaf(cand.bias, trainable, base + "/bias"));
        ll.ranges.push_back(g.leaf(cand.quant.ranges, trainable, base + "/ranges"));
      }
    }
  }
  return out;
}

Value supernet_forward(Graph& g, const SearchNet& net, Value x, const std::vector<LayerSamples>& samples,
                       const NetLeaves& leaves) {
  if (samples.size() != net.layers.size()) throw EngineError("supernet_forward: one sample set per layer required");
  Value h = x;
  for (size_t li = 0; li < net.layers.size(); ++li) {
    const SearchLayer& layer = net.layers[li];
    bool is_dense = layer.candidates.size() == 1 && layer.candidates[0].kind == OperatorKind::dense;
    if (is_dense && g.value(h).rank() == 4) {
      const Shape& hs = g.value(h).shape();
      if (layer.in_channels == hs[1]) {
        h = g.mean(h, {2, 3});  // global average pool
      } else if (layer.in_channels == hs[1] * hs[2] * hs[3]) {
        h = g.reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
      } else {
        throw EngineError("layer " + layer.name + ": dense in_channels " + std::to_string(layer.in_channels) +
                          " matches neither channels nor flattened features of " + shape_to_string(hs));
      }
    }
    h = layer_forward_with_leaves(g, h, layer, samples[li], leaves.layers[li]);
    if (li + 1 < net.layers.size()) h = g.relu(h);
  }
  return h;
}

Value task_loss(Graph& g, const SearchNet& net, Value output, const std::vector<int>& labels, const Tensor* targets) {
  if (net.regression) {
    if (targets == nullptr) throw EngineError("task_loss: regression requires targets");
    Value d = g.sub(output, g.constant(*targets, "targets"));
    return g.mean(g.mul(d, d));
  }
  return g.cross_entropy_loss(output, labels);
}

}  // namespace udc
