#include "udc/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udc/error.hpp"
#include "udc/size_model.hpp"

namespace udc {

QuantFormat quant_format_from_string(const std::string& s) {
  if (s == "q") return QuantFormat::q;
  if (s == "qhat") return QuantFormat::qhat;
  throw DomainError("unknown quantization format '" + s + "' (expected q|qhat)");
}

std::string to_string(QuantFormat f) { return f == QuantFormat::q ? "q" : "qhat"; }

// ------------------------------------------------------------- concrete net

Tensor ConcreteLayer::effective_weights(QuantFormat format) const {
  if (!has_weights()) return Tensor();
  Tensor w;
  if (bits >= 32) {
    w = theta;
  } else if (bits == 1) {
    w = quantize_q(theta, 1, 0.0);
  } else if (format == QuantFormat::qhat) {
    w = quantize_qhat(theta, bits, range.item(), beta);
  } else {
    w = quantize_q(theta, bits, range.item());
  }
  for (int64_t i = 0; i < w.numel(); ++i) w[i] *= mask[i];
  return w;
}

namespace {

Tensor reduce_input(const Tensor& h, ConcreteLayer::InputReduce reduce) {
  if (h.rank() != 4 || reduce == ConcreteLayer::InputReduce::none) return h;
  int64_t B = h.dim(0), C = h.dim(1), hw = h.dim(2) * h.dim(3);
  if (reduce == ConcreteLayer::InputReduce::flatten) {
    return Tensor({B, C * hw}, std::vector<double>(h.values().begin(), h.values().end()));
  }
  Tensor pooled({B, C});
  double inv = 1.0 / static_cast<double>(hw);  // multiply, to match the tape's mean op bitwise
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      const double* p = h.data() + (b * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
      pooled[b * C + c] = acc * inv;
    }
  return pooled;
}

// Narrows or zero-pads the channel axis to `want`.
Tensor resize_channels(const Tensor& h, int64_t want) {
  if (h.dim(1) == want) return h;
  int64_t copy = std::min(want, h.dim(1));
  if (h.rank() == 4) {
    Tensor out({h.dim(0), want, h.dim(2), h.dim(3)});
    int64_t hw = h.dim(2) * h.dim(3);
    for (int64_t b = 0; b < h.dim(0); ++b)
      for (int64_t c = 0; c < copy; ++c)
        std::copy(h.data() + (b * h.dim(1) + c) * hw, h.data() + (b * h.dim(1) + c + 1) * hw,
                  out.data() + (b * want + c) * hw);
    return out;
  }
  Tensor out({h.dim(0), want});
  for (int64_t b = 0; b < h.dim(0); ++b)
    for (int64_t c = 0; c < copy; ++c) out[b * want + c] = h[b * h.dim(1) + c];
  return out;
}

void add_channel_bias(Tensor& y, const Tensor& bias) {
  int64_t B = y.dim(0), C = y.dim(1);
  int64_t inner = y.numel() / (B * C);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < inner; ++i) y[(b * C + c) * inner + i] += bias[c];
}

}  // namespace

Tensor ConcreteNetwork::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t li = 0; li < layers.size(); ++li) {
    const ConcreteLayer& l = layers[li];
    h = reduce_input(h, l.reduce);
    if (l.op == OperatorKind::identity) {
      h = resize_channels(h, l.out_features);
    } else {
      Tensor w = l.effective_weights(format);
      Tensor y = l.op == OperatorKind::dense ? kernels::matmul(h, w)
                                             : kernels::conv2d(h, w, l.stride, kernel_extent(l.op) / 2);
      add_channel_bias(y, l.bias);
      h = std::move(y);
    }
    if (li + 1 < layers.size()) h = kernels::relu(h);
  }
  return h;
}

double ConcreteNetwork::evaluate(const TrainData& data, int batch_size) const {
  int64_t n = data.size();
  if (n == 0) throw DomainError("evaluate: empty dataset");
  double correct = 0.0, sq_err = 0.0;
  int64_t count = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t bs = std::min<int64_t>(batch_size, n - start);
    std::vector<int64_t> idx(static_cast<size_t>(bs));
    std::iota(idx.begin(), idx.end(), start);
    Tensor bx = gather_rows(*data.x, idx);
    Tensor out = forward(bx);
    if (regression) {
      Tensor bt = gather_rows(*data.targets, idx);
      for (int64_t i = 0; i < out.numel(); ++i) {
        double d = out[i] - bt[i];
        sq_err += d * d;
      }
      count += out.numel();
    } else {
      int64_t K = out.dim(1);
      for (int64_t b = 0; b < bs; ++b) {
        int64_t best = 0;
        for (int64_t k = 1; k < K; ++k)
          if (out[b * K + k] > out[b * K + best]) best = k;
        correct += (best == (*data.labels)[static_cast<size_t>(start + b)]) ? 1.0 : 0.0;
      }
      count += bs;
    }
  }
  if (regression) {
    double mse = sq_err / static_cast<double>(count);
    return -10.0 * std::log10(std::max(mse, 1e-12));  // PSNR against peak 1.0
  }
  return correct / static_cast<double>(count);
}

double ConcreteNetwork::weight_squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers)
    if (l.has_weights()) s += l.theta.squared_norm();
  return s;
}

double ConcreteNetwork::storage_bits() const {
  double bits = 0.0;
  for (const auto& l : layers) {
    if (!l.has_weights()) continue;
    double n = static_cast<double>(l.theta.numel());
    double s = static_cast<double>(retained_elements(l.sparsity_target, l.theta.numel())) / n;
    bits += layer_size_bits(s, static_cast<double>(l.bits), n);
    bits += kBiasBits * static_cast<double>(l.bias.numel());
  }
  return bits;
}

// ------------------------------------------------------------- extraction

namespace {

Tensor slice_conv_theta(const Tensor& full, int64_t out_keep, int64_t in_keep) {
  int64_t kh = full.dim(2), kw = full.dim(3), in_full = full.dim(1);
  Tensor out({out_keep, in_keep, kh, kw});
  for (int64_t o = 0; o < out_keep; ++o)
    for (int64_t i = 0; i < in_keep; ++i)
      std::copy(full.data() + ((o * in_full + i) * kh * kw), full.data() + ((o * in_full + i + 1) * kh * kw),
                out.data() + ((o * in_keep + i) * kh * kw));
  return out;
}

Tensor slice_dense_theta(const Tensor& full, int64_t in_keep, int64_t out_keep) {
  int64_t out_full = full.dim(1);
  Tensor out({in_keep, out_keep});
  for (int64_t i = 0; i < in_keep; ++i)
    for (int64_t o = 0; o < out_keep; ++o) out[i * out_keep + o] = full[i * out_full + o];
  return out;
}

Tensor slice_vector(const Tensor& full, int64_t keep) {
  Tensor out({keep});
  std::copy(full.data(), full.data() + keep, out.data());
  return out;
}

}  // namespace

ConcreteNetwork extract_concrete(const SearchNet& net, const std::vector<LayerChoice>& config) {
  if (config.size() != net.layers.size()) throw DomainError("extract_concrete: config length mismatch");
  ConcreteNetwork out;
  out.input_shape = net.input_shape;
  out.num_classes = net.num_classes;
  out.regression = net.regression;

  bool spatial = net.input_shape.size() == 3;
  int64_t cur_full = net.input_shape.at(0);  // full channel count entering the layer
  int64_t cur_ret = cur_full;                // retained channel count entering the layer
  int64_t h = spatial ? net.input_shape[1] : 1;
  int64_t w = spatial ? net.input_shape[2] : 1;

  for (size_t li = 0; li < net.layers.size(); ++li) {
    const SearchLayer& sl = net.layers[li];
    const LayerChoice& c = config[li];
    const OperatorCandidate& cand = sl.candidates.at(static_cast<size_t>(c.oper_index));
    double rho = sl.width.values.at(static_cast<size_t>(c.width_index));
    int64_t out_ret = retained_channels(rho, sl.out_channels);

    ConcreteLayer l;
    l.name = sl.name;
    l.op = cand.kind;
    l.stride = sl.stride;
    l.sparsity_target = sl.sparsity.values.at(static_cast<size_t>(c.sparsity_index));
    l.bits = static_cast<int>(sl.bitwidth.values.at(static_cast<size_t>(c.bitwidth_index)));
    l.beta = 0.0;

    if (cand.kind == OperatorKind::identity) {
      // the width decision applies to the pass-through as well: narrow
      // or zero-pad, matching the size model's upstream-rho coupling
      l.out_features = out_ret;
      l.in_features = cur_ret;
      l.range = Tensor::scalar(1.0);
      cur_ret = out_ret;
      // cur_full unchanged (identity requires in_channels == out_channels)
    } else {
      double r_sel = cand.quant.ranges.numel() > c.bitwidth_index ? cand.quant.ranges[c.bitwidth_index] : 1.0;
      l.range = Tensor::scalar(std::max(r_sel, 1e-6));
      if (cand.kind == OperatorKind::dense) {
        if (spatial && sl.in_channels == cur_full * h * w) {
          l.reduce = ConcreteLayer::InputReduce::flatten;
          l.in_features = cur_ret * h * w;
          // features are channel-major, so the retained block is contiguous
        } else {
          if (spatial) l.reduce = ConcreteLayer::InputReduce::gap;
          if (sl.in_channels != cur_full) {
            throw DomainError("layer " + sl.name + ": dense in_channels " + std::to_string(sl.in_channels) +
                              " does not match upstream channels " + std::to_string(cur_full));
          }
          l.in_features = cur_ret;
        }
        l.out_features = out_ret;
        l.theta = slice_dense_theta(cand.theta, l.in_features, out_ret);
        spatial = false;
        h = w = 1;
      } else {
        l.in_features = cur_ret;
        l.out_features = out_ret;
        l.theta = slice_conv_theta(cand.theta, out_ret, cur_ret);
        int ke = kernel_extent(cand.kind);
        h = (h + 2 * (ke / 2) - ke) / sl.stride + 1;
        w = (w + 2 * (ke / 2) - ke) / sl.stride + 1;
      }
      l.bias = slice_vector(cand.bias, out_ret);
      l.mask = Tensor::full(l.theta.shape(), 1.0);
      cur_ret = out_ret;
      cur_full = sl.out_channels;
    }
    out.layers.push_back(std::move(l));
  }
  return out;
}

// --------------------------------------------------------------- training

Value probabilistic_quantized_forward(Graph& g, Value theta, int bits, Value range, double beta, double alpha,
                                      QuantFormat format, Philox& rng) {
  if (alpha < 0.0 || alpha > 1.0) throw DomainError("probabilistic quantization: alpha must be in [0,1]");
  if (bits >= 32) return theta;  // float weights
  double r_now = bits > 1 ? g.value(range).item() : 1.0;
  double clip_range = format == QuantFormat::qhat ? r_now + beta : r_now;
  auto quant_branch = [&]() {
    if (bits == 1) return g.sign_ste(theta);
    if (format == QuantFormat::qhat) return quantize_qhat(g, theta, bits, range, beta);
    return quantize_q(g, theta, bits, range);
  };
  if (alpha >= 1.0) return quant_branch();
  Value f = g.clip(theta, -clip_range, clip_range);
  if (alpha <= 0.0) return f;
  const Tensor& t = g.value(theta);
  Tensor hmask(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) hmask[i] = rng.bernoulli(alpha) ? 1.0 : 0.0;
  Tensor hinv(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) hinv[i] = 1.0 - hmask[i];
  Value q = quant_branch();
  return g.add(g.mul(q, g.constant(std::move(hmask), "bernoulli_h")),
               g.mul(f, g.constant(std::move(hinv), "bernoulli_1mh")));
}

double pruning_ramp(int64_t step, int64_t total_steps, double s_target) {
  double ramp = 1.0;
  if (total_steps > 1) {
    ramp = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    ramp = std::min(1.0, std::max(0.0, ramp));
  }
  return 1.0 - ramp * (1.0 - s_target);
}

namespace {

struct LayerLeafSet {
  Value theta, bias, range;
};

// One training step over a minibatch; returns the loss.
double finetune_step(ConcreteNetwork& net, const FinetunePlan& plan, const Tensor& bx, const std::vector<int>& blabels,
                     const Tensor* btargets, double alpha, double lr, SgdMomentum& opt, Philox& quant_rng) {
  Graph g;
  std::vector<LayerLeafSet> leaves;
  std::vector<Tensor*> params;
  for (auto& l : net.layers) {
    LayerLeafSet ls;
    if (l.has_weights()) {
      ls.theta = g.leaf(l.theta, true, l.name + "/theta");
      ls.bias = g.leaf(l.bias, true, l.name + "/bias");
      ls.range = g.leaf(l.range, true, l.name + "/range");
      params.push_back(&l.theta);
      params.push_back(&l.bias);
      params.push_back(&l.range);
    }
    leaves.push_back(ls);
  }
  Value h = g.constant(bx, "batch");
  for (size_t li = 0; li < net.layers.size(); ++li) {
    ConcreteLayer& l = net.layers[li];
    if (l.reduce != ConcreteLayer::InputReduce::none && g.value(h).rank() == 4) {
      const Shape& hs = g.value(h).shape();
      h = l.reduce == ConcreteLayer::InputReduce::gap ? g.mean(h, {2, 3})
                                                      : g.reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
    }
    if (l.op == OperatorKind::identity) {
      if (g.value(h).dim(1) != l.out_features) h = g.narrow_channels(h, l.out_features);
    } else {
      Value w = probabilistic_quantized_forward(g, leaves[li].theta, l.bits, leaves[li].range, l.beta, alpha,
                                                plan.format, quant_rng);
      w = g.mul_mask_ste(w, g.constant(l.mask, l.name + "/mask"));
      Value y = l.op == OperatorKind::dense ? g.matmul(h, w) : g.conv2d(h, w, l.stride, kernel_extent(l.op) / 2);
      h = g.add_bias(y, leaves[li].bias);
    }
    if (li + 1 < net.layers.size()) h = g.relu(h);
  }
  Value loss;
  if (net.regression) {
    Value d = g.sub(h, g.constant(*btargets, "targets"));
    loss = g.mean(g.mul(d, d));
  } else {
    loss = g.cross_entropy_loss(h, blabels);
  }
  g.backward(loss);

  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (size_t li = 0; li < net.layers.size(); ++li) {
    if (!net.layers[li].has_weights()) continue;
    for (Value v : {leaves[li].theta, leaves[li].bias, leaves[li].range}) {
      grads.push_back(g.has_grad(v) ? g.grad(v) : Tensor(g.value(v).shape()));
    }
  }
  if (plan.weight_decay > 0.0) {
    size_t gi = 0;
    for (auto& l : net.layers) {
      if (!l.has_weights()) continue;
      Tensor& gt = grads[gi];  // theta slot
      for (int64_t j = 0; j < gt.numel(); ++j) gt[j] += plan.weight_decay * l.theta[j];
      gi += 3;
    }
  }
  // LSQ-style normalization of the range gradient (see dnas.cpp)
  {
    size_t gi = 0;
    for (auto& l : net.layers) {
      if (!l.has_weights()) continue;
      if (l.bits > 1 && l.bits < 32) {
        double n = static_cast<double>(std::max<int64_t>(l.theta.numel(), 1));
        grads[gi + 2][0] /= std::sqrt(n * static_cast<double>(quant_levels(l.bits)));
      }
      gi += 3;
    }
  }
  opt.step(params, grads, lr);
  for (auto& l : net.layers) {
    if (l.has_weights() && l.bits > 1 && l.bits < 32) l.range[0] = std::max(l.range[0], 1e-6);
  }
  return g.value(loss).item();
}

// ramp in [0,1]: per-layer s = 1 - ramp*(1 - target); mask first, beta after.
void refresh_concrete_masks(ConcreteNetwork& net, double ramp) {
  for (auto& l : net.layers) {
    if (!l.has_weights()) continue;
    double s = 1.0 - ramp * (1.0 - l.sparsity_target);
    if (s >= 1.0) {
      l.mask = Tensor::full(l.theta.shape(), 1.0);
      l.beta = 0.0;
      continue;
    }
    l.mask = make_sparsity_mask(l.theta, s);
    double beta = 0.0;
    for (int64_t i = 0; i < l.theta.numel(); ++i) {
      if (l.mask[i] == 0.0) beta = std::max(beta, std::fabs(l.theta[i]));
    }
    l.beta = beta;
  }
}

}  // namespace

FinetuneResult run_finetune(ConcreteNetwork& net, const FinetunePlan& plan, const TrainData& train,
                            const TrainData& test, uint64_t seed,
                            const std::function<void(const EpochMetrics&)>& sink) {
  int64_t n = train.size();
  if (n == 0) throw DomainError("run_finetune: empty training set");
  int64_t bs = std::min<int64_t>(plan.batch_size, n);
  int64_t spe = std::max<int64_t>(1, n / bs);

  Philox shuffle_rng(derive_seed(seed, 101), 1);
  Philox quant_rng(derive_seed(seed, 102), 2);

  FinetuneResult result;
  int64_t global_epoch = 0;
  int64_t alpha_total = static_cast<int64_t>(plan.stage1_epochs + plan.stage2_epochs + plan.stage3_epochs) * spe;
  Schedule alpha_sched = plan.alpha;
  if (alpha_sched.kind != ScheduleKind::constant) alpha_sched.total_steps = std::max<int64_t>(1, alpha_total);
  int64_t alpha_step = 0;

  auto run_stage = [&](int stage, int epochs, Schedule lr_sched, auto&& ramp_at) {
    if (epochs <= 0) return;
    int64_t total_steps = static_cast<int64_t>(epochs) * spe;
    lr_sched.total_steps = std::max<int64_t>(1, total_steps);
    SgdMomentum opt(plan.momentum);  // fresh momentum per stage
    std::vector<int64_t> order(static_cast<size_t>(n));
    double ramp_prev = -1.0;
    for (int e = 0; e < epochs; ++e) {
      // deterministic epoch shuffle
      std::iota(order.begin(), order.end(), 0);
      Philox erng(derive_seed(shuffle_rng.seed(), static_cast<uint64_t>(global_epoch) * 7919 + stage), 1);
      for (int64_t i = n - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(erng.uniform_index(static_cast<uint64_t>(i + 1)));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
      }
      double loss_acc = 0.0;
      double alpha = 1.0, ramp = 0.0;
      for (int64_t b = 0; b < spe; ++b) {
        int64_t step = static_cast<int64_t>(e) * spe + b;
        ramp = ramp_at(step, total_steps);
        bool cadence = plan.mask_refresh_interval > 0 && step % plan.mask_refresh_interval == 0;
        if (ramp != ramp_prev || cadence) {
          refresh_concrete_masks(net, ramp);
          ramp_prev = ramp;
        }
        alpha = alpha_sched.value(alpha_step++);
        std::span<const int64_t> idx(order.data() + b * bs, static_cast<size_t>(bs));
        Tensor bx = gather_rows(*train.x, idx);
        std::vector<int> blabels;
        Tensor btargets;
        if (train.labels) {
          for (int64_t i : idx) blabels.push_back((*train.labels)[static_cast<size_t>(i)]);
        }
        if (train.targets) btargets = gather_rows(*train.targets, idx);
        double lr = lr_sched.value(step);
        loss_acc += finetune_step(net, plan, bx, blabels, train.targets ? &btargets : nullptr, alpha, lr, opt,
                                  quant_rng);
      }
      EpochMetrics m;
      m.epoch = global_epoch++;
      m.stage = stage;
      m.train_loss = loss_acc / static_cast<double>(spe);
      m.eval_metric = net.evaluate(test);
      double s_min = 1.0;
      for (const auto& l : net.layers)
        if (l.has_weights()) s_min = std::min(s_min, l.sparsity_target);
      m.sparsity_target = 1.0 - ramp * (1.0 - s_min);
      m.weight_sq_norm = net.weight_squared_norm();
      m.alpha = alpha;
      if (sink) sink(m);
      result.history.push_back(m);
    }
  };

  // Stage 1: quantization on, pruning off.
  refresh_concrete_masks(net, 0.0);
  run_stage(1, plan.stage1_epochs, plan.lr_stage1, [](int64_t, int64_t) { return 0.0; });
  result.norm_after_stage1 = net.weight_squared_norm();

  // Stage 2: prune gradually from 0% to 100% of each layer's target.
  run_stage(2, plan.stage2_epochs, plan.lr_stage2,
            [](int64_t step, int64_t total) { return total > 1 ? std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1)) : 1.0; });

  // Stage 3: both constraints at full strength.
  run_stage(3, plan.stage3_epochs, plan.lr_stage3, [](int64_t, int64_t) { return 1.0; });
  refresh_concrete_masks(net, 1.0);
  result.norm_after_stage3 = net.weight_squared_norm();
  result.final_eval = net.evaluate(test);
  return result;
}

// -------------------------------------------------------------- deployment

void deploy_quantize(ConcreteNetwork& net, int deploy_bits) {
  if (deploy_bits < 1) throw DomainError("deploy_quantize: b* must be >= 1");
  for (auto& l : net.layers) {
    if (!l.has_weights()) continue;
    Tensor masked = l.effective_weights(net.format);
    double r_prime = masked.max_abs();
    if (r_prime <= 0.0) r_prime = 1.0;
    Tensor deployed = deploy_bits == 1 ? quantize_q(masked, 1, 0.0) : quantize_q(masked, deploy_bits, r_prime);
    for (int64_t i = 0; i < deployed.numel(); ++i) deployed[i] *= l.mask[i];  // zeros stay zero
    l.theta = std::move(deployed);
    l.bits = deploy_bits;
    l.range = Tensor::scalar(r_prime);
    l.beta = 0.0;
    for (int64_t i = 0; i < l.bias.numel(); ++i) l.bias[i] = static_cast<double>(static_cast<float>(l.bias[i]));
  }
  net.format = QuantFormat::q;
}

double integer_decomposition_check(const Tensor& x, const Tensor& theta, OperatorKind op, int stride, int bits,
                                   double range, double beta) {
  if (op == OperatorKind::identity) throw DomainError("integer_decomposition_check: needs a linear layer");
  auto apply = [&](const Tensor& w) {
    return op == OperatorKind::dense ? kernels::matmul(x, w) : kernels::conv2d(x, w, stride, kernel_extent(op) / 2);
  };
  Tensor lhs_w = quantize_qhat(theta, bits, range, beta);
  Tensor lhs = apply(lhs_w);

  Tensor shifted(theta.shape());
  Tensor signs(theta.shape());
  for (int64_t i = 0; i < theta.numel(); ++i) {
    signs[i] = theta[i] >= 0.0 ? 1.0 : -1.0;
    shifted[i] = theta[i] - signs[i] * beta;
  }
  Tensor rhs_a = apply(quantize_q(shifted, bits, range));
  Tensor rhs_b = apply(signs);
  double max_dev = 0.0;
  for (int64_t i = 0; i < lhs.numel(); ++i) {
    max_dev = std::max(max_dev, std::fabs(lhs[i] - (rhs_a[i] + beta * rhs_b[i])));
  }
  return max_dev;
}

}  // namespace udc
