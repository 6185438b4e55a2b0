#include "udc/dnas.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udc/error.hpp"

namespace udc {

// ------------------------------------------------------------- projection

namespace {

std::vector<double> softmax_vec(const std::vector<double>& x) {
  double m = *std::max_element(x.begin(), x.end());
  std::vector<double> y(x.size());
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    s += y[i];
  }
  for (double& v : y) v /= s;
  return y;
}

double max_entry_at_temperature(const std::vector<double>& log_pi, double T) {
  std::vector<double> scaled(log_pi.size());
  for (size_t i = 0; i < log_pi.size(); ++i) scaled[i] = log_pi[i] / T;
  std::vector<double> p = softmax_vec(scaled);
  return *std::max_element(p.begin(), p.end());
}

}  // namespace

std::vector<double> project_pi(const std::vector<double>& pi, double xi) {
  if (xi < 0.0) throw DomainError("project_pi: xi must be >= 0");
  size_t K = pi.size();
  if (K == 0) throw DomainError("project_pi: empty pi");
  double bound = 1.0 / static_cast<double>(K) + xi;
  double mx = *std::max_element(pi.begin(), pi.end());
  if (mx <= bound + 1e-12) return pi;  // already in S (T* = 1)
  std::vector<double> log_pi(K);
  for (size_t i = 0; i < K; ++i) log_pi[i] = std::log(std::max(pi[i], kPiFloor));
  // T -> inf gives uniform; bisection cannot resolve xi below ~1e-6 on
  // [1, 1e6], so tiny xi collapses to exact uniform
  if (xi <= 1e-9) return std::vector<double>(K, 1.0 / static_cast<double>(K));
  double t_lo = 1.0, t_hi = 1e6;
  if (max_entry_at_temperature(log_pi, t_hi) > bound) {
    return std::vector<double>(K, 1.0 / static_cast<double>(K));
  }
  for (int it = 0; it < 200 && (t_hi - t_lo) > 1e-8 * t_hi; ++it) {
    double t_mid = 0.5 * (t_lo + t_hi);
    if (max_entry_at_temperature(log_pi, t_mid) <= bound) {
      t_hi = t_mid;
    } else {
      t_lo = t_mid;
    }
  }
  // t_hi is the feasible endpoint, so membership in S is guaranteed
  std::vector<double> scaled(K);
  for (size_t i = 0; i < K; ++i) scaled[i] = log_pi[i] / t_hi;
  return softmax_vec(scaled);
}

bool project_logits(Tensor& logits, double xi) {
  std::vector<double> pi(logits.numel());
  {
    Tensor p = kernels::softmax_lastaxis(logits);
    std::copy(p.values().begin(), p.values().end(), pi.begin());
  }
  std::vector<double> proj = project_pi(pi, xi);
  if (proj == pi) return false;
  for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = std::log(std::max(proj[static_cast<size_t>(i)], kPiFloor));
  return true;
}

// ------------------------------------------------------- rejection sampling

namespace {
int argmax_index(std::span<const double> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
  return best;
}
}  // namespace

std::vector<double> rejection_sample(const std::vector<double>& pi, double tau, int num_samples, Philox& rng,
                                     RejectionStats* stats) {
  if (num_samples < 1) throw DomainError("rejection_sample: need at least one sample");
  int k_star = argmax_index(pi);
  std::vector<double> acc(pi.size(), 0.0);
  int accepted = 0;
  for (int s = 0; s < num_samples; ++s) {
    std::vector<double> z = gumbel_softmax_sample(pi, tau, rng);
    if (argmax_index(z) == k_star) {
      for (size_t i = 0; i < z.size(); ++i) acc[i] += z[i];
      ++accepted;
    }
  }
  if (stats) {
    stats->drawn = num_samples;
    stats->accepted = accepted;
    stats->fallback = accepted == 0;
  }
  if (accepted == 0) {
    std::vector<double> onehot(pi.size(), 0.0);
    onehot[static_cast<size_t>(k_star)] = 1.0;
    return onehot;
  }
  for (double& v : acc) v /= static_cast<double>(accepted);
  return acc;
}

Value rejection_sample(Graph& g, Value logits, const std::vector<double>& pi, double tau, int num_samples,
                       Philox& rng, RejectionStats* stats) {
  if (num_samples < 1) throw DomainError("rejection_sample: need at least one sample");
  int k_star = argmax_index(pi);
  std::vector<Value> accepted;
  for (int s = 0; s < num_samples; ++s) {
    Value z = gumbel_softmax_sample(g, logits, tau, rng);
    const Tensor& zt = g.value(z);
    if (argmax_index(zt.values()) == k_star) accepted.push_back(z);
  }
  if (stats) {
    stats->drawn = num_samples;
    stats->accepted = static_cast<int>(accepted.size());
    stats->fallback = accepted.empty();
  }
  if (accepted.empty()) {
    Tensor onehot({static_cast<int64_t>(pi.size())});
    onehot[k_star] = 1.0;
    return g.constant(std::move(onehot), "rejection_fallback");
  }
  Value sum = accepted[0];
  for (size_t i = 1; i < accepted.size(); ++i) sum = g.add(sum, accepted[i]);
  return g.scale(sum, 1.0 / static_cast<double>(accepted.size()));
}

// -------------------------------------------------------------- optimizers

void SgdMomentum::ensure(std::span<Tensor* const> params) {
  if (!velocity_.empty()) return;
  velocity_.reserve(params.size());
  for (Tensor* p : params) velocity_.push_back(Tensor(p->shape()));
}

void SgdMomentum::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw DomainError("SgdMomentum: param/grad count mismatch");
  ensure(params);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& v = velocity_[i];
    const Tensor& g = grads[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      p[j] -= lr * v[j];
    }
  }
}

void Adam::ensure(std::span<Tensor* const> params) {
  if (!m_.empty()) return;
  for (Tensor* p : params) {
    m_.push_back(Tensor(p->shape()));
    v_.push_back(Tensor(p->shape()));
  }
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw DomainError("Adam: param/grad count mismatch");
  ensure(params);
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ------------------------------------------------------------- search loop

Tensor gather_rows(const Tensor& t, std::span<const int64_t> idx) {
  Shape s = t.shape();
  int64_t row = t.numel() / s.at(0);
  s[0] = static_cast<int64_t>(idx.size());
  Tensor out(s);
  for (size_t i = 0; i < idx.size(); ++i) {
    const double* src = t.data() + idx[i] * row;
    double* dst = out.data() + static_cast<int64_t>(i) * row;
    std::copy(src, src + row, dst);
  }
  return out;
}

double pi_entropy_bits(const std::vector<double>& pi) {
  double h = 0.0;
  for (double p : pi) {
    if (p > 0.0) h -= p * std::log2(p);
  }
  return h;
}

SearchEngine::SearchEngine(SearchNet& net, NetCostModel cost, SearchOptions opts, uint64_t seed)
    : net_(&net),
      cost_(std::move(cost)),
      opts_(opts),
      shuffle_rng_(seed, 1),
      coin_rng_(seed, 2) {
  if (opts_.mc_samples < 1) throw DomainError("SearchEngine: mc_samples must be >= 1");
  if (opts_.e_star <= 0.0) throw DomainError("SearchEngine: e* must be positive");
  sample_rng_.reserve(static_cast<size_t>(opts_.mc_samples));
  for (int s = 0; s < opts_.mc_samples; ++s) sample_rng_.emplace_back(seed, 16 + static_cast<uint64_t>(s));
  std::vector<Tensor*> tp = theta_params();
  std::vector<Tensor*> pp = pi_params();
  sgd_.ensure(tp);   // eager allocation keeps checkpoint manifests stable
  adam_.ensure(pp);
}

std::vector<Tensor*> SearchEngine::theta_params() {
  std::vector<Tensor*> out;
  for (auto& layer : net_->layers) {
    for (auto& cand : layer.candidates) {
      if (cand.kind == OperatorKind::identity) continue;
      out.push_back(&cand.theta);
      out.push_back(&cand.bias);
      out.push_back(&cand.quant.ranges);
    }
  }
  return out;
}

std::vector<std::string> SearchEngine::theta_param_names() const {
  std::vector<std::string> out;
  for (auto& layer : net_->layers) {
    for (auto& cand : layer.candidates) {
      if (cand.kind == OperatorKind::identity) continue;
      std::string base = layer.name + "/" + to_string(cand.kind);
      out.push_back(base + "/theta");
      out.push_back(base + "/bias");
      out.push_back(base + "/ranges");
    }
  }
  return out;
}

std::vector<Tensor*> SearchEngine::pi_params() {
  std::vector<Tensor*> out;
  for (auto& layer : net_->layers) {
    out.push_back(&layer.width.logits);
    out.push_back(&layer.sparsity.logits);
    out.push_back(&layer.bitwidth.logits);
    out.push_back(&layer.oper.logits);
  }
  return out;
}

std::vector<std::string> SearchEngine::pi_param_names() const {
  std::vector<std::string> out;
  for (auto& layer : net_->layers) {
    out.push_back(layer.name + "/pi_width");
    out.push_back(layer.name + "/pi_sparsity");
    out.push_back(layer.name + "/pi_bitwidth");
    out.push_back(layer.name + "/pi_operator");
  }
  return out;
}

int64_t SearchEngine::next_batch(const TrainData& data, Tensor* x, std::vector<int>* labels, Tensor* targets) {
  int64_t n = data.size();
  int64_t bs = std::min<int64_t>(opts_.batch_size, n);
  int64_t batches_per_epoch = n / bs;
  if (batches_per_epoch == 0) batches_per_epoch = 1;
  uint64_t epoch = batch_cursor_ / static_cast<uint64_t>(batches_per_epoch);
  int64_t slot = static_cast<int64_t>(batch_cursor_ % static_cast<uint64_t>(batches_per_epoch));
  if (order_.size() != static_cast<size_t>(n) || epoch != epoch_) {
    // Fisher-Yates keyed on (seed, epoch): replayable from any resume point
    order_.resize(static_cast<size_t>(n));
    std::iota(order_.begin(), order_.end(), 0);
    Philox epoch_rng(derive_seed(shuffle_rng_.seed(), epoch), 1);
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(epoch_rng.uniform_index(static_cast<uint64_t>(i + 1)));
      std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
    }
    epoch_ = epoch;
  }
  std::span<const int64_t> idx(order_.data() + slot * bs, static_cast<size_t>(bs));
  *x = gather_rows(*data.x, idx);
  if (data.labels) {
    labels->clear();
    for (int64_t i : idx) labels->push_back((*data.labels)[static_cast<size_t>(i)]);
  }
  if (data.targets) *targets = gather_rows(*data.targets, idx);
  ++batch_cursor_;
  return bs;
}

StepMetrics SearchEngine::step(const TrainData& data, const PhaseSchedules& sched, int64_t phase_step, bool train_pi) {
  SearchNet& net = *net_;
  double tau = sched.tau.value(phase_step);
  double xi = sched.xi.value(phase_step);
  double mix = sched.theta_mix.value(phase_step);
  double lr_theta = sched.lr_theta.value(phase_step);
  double lr_pi = sched.lr_pi.value(phase_step);

  std::vector<Tensor*> thetas = theta_params();
  std::vector<Tensor*> logits = pi_params();
  size_t np_theta = thetas.size(), np_pi = logits.size();

  std::vector<std::vector<Tensor>> theta_grads(np_theta);
  std::vector<std::vector<Tensor>> pi_grads(np_pi);

  double l_task_acc = 0.0, l_e_acc = 0.0;
  int64_t reject_drawn = 0, reject_accepted = 0;

  for (int s = 0; s < opts_.mc_samples; ++s) {
    Philox& rng = sample_rng_[static_cast<size_t>(s)];
    Graph g;
    NetLeaves leaves = make_net_leaves(g, net, true);

    // logits leaves in pi_params order: width, sparsity, bitwidth, oper
    std::vector<Value> logit_leaves;
    logit_leaves.reserve(np_pi);
    for (auto& layer : net.layers) {
      logit_leaves.push_back(g.leaf(layer.width.logits, train_pi, layer.name + "/pi_width"));
      logit_leaves.push_back(g.leaf(layer.sparsity.logits, train_pi, layer.name + "/pi_sparsity"));
      logit_leaves.push_back(g.leaf(layer.bitwidth.logits, train_pi, layer.name + "/pi_bitwidth"));
      logit_leaves.push_back(g.leaf(layer.oper.logits, train_pi, layer.name + "/pi_operator"));
    }

    std::vector<LayerSamples> samples(net.layers.size());
    for (size_t li = 0; li < net.layers.size(); ++li) {
      SearchLayer& layer = net.layers[li];
      const DecisionVariable* decs[4] = {&layer.width, &layer.sparsity, &layer.bitwidth, &layer.oper};
      Value* slots[4] = {&samples[li].width, &samples[li].sparsity, &samples[li].bitwidth, &samples[li].oper};
      for (int d = 0; d < 4; ++d) {
        const DecisionVariable& dec = *decs[d];
        int K = dec.num_options();
        Value logit_leaf = logit_leaves[li * 4 + static_cast<size_t>(d)];
        if (K == 1) {
          *slots[d] = g.constant(Tensor::from({1}, {1.0}), layer.name + "/onehot");
          continue;
        }
        Value z;
        bool use_rejection = mix > 0.0 && coin_rng_.bernoulli(mix);
        if (use_rejection) {
          RejectionStats st;
          z = rejection_sample(g, logit_leaf, dec.pi(), tau, opts_.rejection_samples, rng, &st);
          reject_drawn += st.drawn;
          reject_accepted += st.accepted;
        } else {
          z = gumbel_softmax_sample(g, logit_leaf, tau, rng);
        }
        *slots[d] = g.topk_renorm_ste(z, dec.kappa);
      }
    }

    Tensor bx;
    std::vector<int> blabels;
    Tensor btargets;
    next_batch(data, &bx, &blabels, &btargets);
    Value x = g.constant(std::move(bx), "batch");
    Value out = supernet_forward(g, net, x, samples, leaves);
    Value l_task = task_loss(g, net, out, blabels, data.targets ? &btargets : nullptr);
    Value e_bits = cost_.soft_cost(g, samples);
    Value l_e = constraint_penalty(g, e_bits, opts_.e_star, /*normalized=*/true);
    Value loss = g.add(l_task, g.scale(l_e, opts_.lambda));
    try {
      g.backward(loss);
    } catch (const EngineError& e) {
      throw EngineError("search step " + std::to_string(t_) + ", MC sample " + std::to_string(s) + ": " +
                        e.what());
    }

    l_task_acc += g.value(l_task).item();
    l_e_acc += g.value(l_e).item();

    // collect per-sample gradients (zeros when a leaf received none)
    size_t ti = 0;
    for (size_t li = 0; li < net.layers.size(); ++li) {
      const LayerLeaves& ll = leaves.layers[li];
      for (size_t ci = 0; ci < net.layers[li].candidates.size(); ++ci) {
        if (net.layers[li].candidates[ci].kind == OperatorKind::identity) continue;
        Value vals[3] = {ll.theta[ci], ll.bias[ci], ll.ranges[ci]};
        for (Value v : vals) {
          Tensor gt = g.has_grad(v) ? g.grad(v) : Tensor(g.value(v).shape());
          theta_grads[ti++].push_back(std::move(gt));
        }
      }
    }
    for (size_t pi_i = 0; pi_i < np_pi; ++pi_i) {
      Value v = logit_leaves[pi_i];
      Tensor gt = (train_pi && g.has_grad(v)) ? g.grad(v) : Tensor(g.value(v).shape());
      pi_grads[pi_i].push_back(std::move(gt));
    }
  }

  // deterministic tree merge, then average
  double inv_s = 1.0 / static_cast<double>(opts_.mc_samples);
  std::vector<Tensor> theta_avg, pi_avg;
  theta_avg.reserve(np_theta);
  for (size_t i = 0; i < np_theta; ++i) {
    Tensor t = deterministic_sum(theta_grads[i]);
    for (int64_t j = 0; j < t.numel(); ++j) t[j] *= inv_s;
    theta_avg.push_back(std::move(t));
  }
  // quantizer ranges accumulate a whole tensor's worth of gradient;
  // normalize by 1/sqrt(N * levels) so they share the weights' step scale
  {
    size_t slot = 0;
    for (auto& layer : net.layers) {
      for (auto& cand : layer.candidates) {
        if (cand.kind == OperatorKind::identity) continue;
        Tensor& rgrad = theta_avg[slot + 2];
        double n = static_cast<double>(std::max<int64_t>(cand.theta.numel(), 1));
        for (int64_t k = 0; k < rgrad.numel(); ++k) {
          int bits = static_cast<int>(layer.bitwidth.values[static_cast<size_t>(k)]);
          double levels = bits > 1 && bits < 32 ? static_cast<double>(quant_levels(bits)) : 1.0;
          rgrad[k] /= std::sqrt(n * levels);
        }
        slot += 3;
      }
    }
  }
  sgd_.step(thetas, theta_avg, lr_theta);
  // keep quantizer ranges strictly positive
  for (auto& layer : net.layers) {
    for (auto& cand : layer.candidates) {
      if (cand.kind == OperatorKind::identity) continue;
      for (int64_t j = 0; j < cand.quant.ranges.numel(); ++j) {
        cand.quant.ranges[j] = std::max(cand.quant.ranges[j], 1e-6);
      }
    }
  }
  if (train_pi) {
    pi_avg.reserve(np_pi);
    for (size_t i = 0; i < np_pi; ++i) {
      Tensor t = deterministic_sum(pi_grads[i]);
      for (int64_t j = 0; j < t.numel(); ++j) t[j] *= inv_s;
      pi_avg.push_back(std::move(t));
    }
    adam_.step(logits, pi_avg, lr_pi);
  }

  // Eq. (8) projection after every step
  for (Tensor* lg : logits) project_logits(*lg, xi);

  ++t_;
  if (opts_.mask_refresh_interval > 0 && t_ % opts_.mask_refresh_interval == 0) {
    for (auto& layer : net.layers) layer.refresh_masks();
  }

  StepMetrics m;
  m.step = t_ - 1;
  m.l_task = l_task_acc * inv_s;
  m.l_e = l_e_acc * inv_s;
  m.e_argmax = cost_.config_cost(extract_argmax_config(net), false);
  m.tau = tau;
  m.xi = xi;
  m.theta_mix = mix;
  m.accept_rate = reject_drawn > 0 ? static_cast<double>(reject_accepted) / static_cast<double>(reject_drawn) : 1.0;
  double hsum = 0.0;
  int hcount = 0;
  for (auto& layer : net.layers) {
    for (const DecisionVariable* dec : {&layer.width, &layer.sparsity, &layer.bitwidth, &layer.oper}) {
      std::vector<double> p = dec->pi();
      m.max_pi.push_back(*std::max_element(p.begin(), p.end()));
      hsum += pi_entropy_bits(p);
      ++hcount;
    }
  }
  m.mean_pi_entropy = hcount ? hsum / hcount : 0.0;
  return m;
}

std::vector<StepMetrics> SearchEngine::run_phase(const TrainData& data, const PhaseSchedules& sched, int64_t steps,
                                                 bool train_pi, const std::function<void(const StepMetrics&)>& sink) {
  std::vector<StepMetrics> history;
  history.reserve(static_cast<size_t>(steps));
  for (int64_t i = 0; i < steps; ++i) {
    StepMetrics m = step(data, sched, i, train_pi);
    if (sink) sink(m);
    history.push_back(std::move(m));
  }
  return history;
}

SearchEngine::EngineState SearchEngine::state() {
  EngineState st;
  auto add_bufs = [&st](const std::string& prefix, std::vector<Tensor>& bufs) {
    for (size_t i = 0; i < bufs.size(); ++i) st.tensors.emplace_back(prefix + std::to_string(i), &bufs[i]);
  };
  add_bufs("opt/sgd_velocity_", sgd_.buffers());
  add_bufs("opt/adam_m_", adam_.m());
  add_bufs("opt/adam_v_", adam_.v());
  st.counters.emplace_back("opt/adam_t", &adam_.step_count());
  st.counters.emplace_back("engine/step", reinterpret_cast<uint64_t*>(&t_));
  st.counters.emplace_back("engine/batch_cursor", &batch_cursor_);
  st.streams.emplace_back("rng/shuffle", &shuffle_rng_);
  st.streams.emplace_back("rng/coin", &coin_rng_);
  for (size_t s = 0; s < sample_rng_.size(); ++s) {
    st.streams.emplace_back("rng/sample_" + std::to_string(s), &sample_rng_[s]);
  }
  return st;
}

}  // namespace udc
