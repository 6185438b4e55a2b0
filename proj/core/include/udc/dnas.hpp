#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "udc/rng.hpp"
#include "udc/schedule.hpp"
#include "udc/size_model.hpp"
#include "udc/supernet.hpp"

namespace udc {

// ------------------------------------------------------------- projection

/// Projects pi onto S = { pi : max_k pi[k] <= 1/|pi| + xi } via
/// temperature scaling softmax(log pi / T*), T* solved by bisection on
/// [1, 1e6] (the max-entry is monotone decreasing in T). Returns pi
/// unchanged when it is already in S; xi == 0 returns exact uniform.
/// Ordering of entries is preserved.
std::vector<double> project_pi(const std::vector<double>& pi, double xi);

/// In-place projection of a logits parameterization: logits become
/// log(project_pi(softmax(logits), xi)). Returns true if changed.
bool project_logits(Tensor& logits, double xi);

// ------------------------------------------------------- rejection sampling

struct RejectionStats {
  int drawn = 0;
  int accepted = 0;
  bool fallback = false;
};

/// Draws S Gumbel-softmax samples and averages those whose argmax
/// matches argmax(pi). Zero acceptances fall back to a deterministic
/// one-hot at argmax(pi) (which passes no gradient).
std::vector<double> rejection_sample(const std::vector<double>& pi, double tau, int num_samples, Philox& rng,
                                     RejectionStats* stats = nullptr);
Value rejection_sample(Graph& g, Value logits, const std::vector<double>& pi, double tau, int num_samples,
                       Philox& rng, RejectionStats* stats = nullptr);

// -------------------------------------------------------------- optimizers

class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}
  void ensure(std::span<Tensor* const> params);
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);
  std::vector<Tensor>& buffers() { return velocity_; }

 private:
  double momentum_;
  std::vector<Tensor> velocity_;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void ensure(std::span<Tensor* const> params);
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);
  uint64_t& step_count() { return t_; }
  std::vector<Tensor>& m() { return m_; }
  std::vector<Tensor>& v() { return v_; }

 private:
  double beta1_, beta2_, eps_;
  uint64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ------------------------------------------------------------- search loop

struct TrainData {
  const Tensor* x = nullptr;
  const std::vector<int>* labels = nullptr;  // classification
  const Tensor* targets = nullptr;           // regression
  int64_t size() const { return x ? x->dim(0) : 0; }
};

Tensor gather_rows(const Tensor& t, std::span<const int64_t> idx);

struct SearchOptions {
  int mc_samples = 4;          // S: MC samples per optimizer step
  int rejection_samples = 8;   // inner draws of Alg. 1 during search
  double lambda = 1.0;         // weight of L_E (E expressed in units of e*)
  double e_star = 0.0;         // target cost (bits or MACs)
  int batch_size = 32;
  int mask_refresh_interval = 16;
};

struct PhaseSchedules {
  Schedule tau = Schedule::constant(0.66);
  Schedule xi = Schedule::constant(1.0);
  Schedule theta_mix = Schedule::constant(0.0);  // P(use rejection sample)
  Schedule lr_theta = Schedule::constant(0.05);
  Schedule lr_pi = Schedule::constant(1e-3);
};

struct StepMetrics {
  int64_t step = 0;
  double l_task = 0.0;
  double l_e = 0.0;        // normalized: mean |E/e* - 1|
  double e_argmax = 0.0;   // soft-count cost of the argmax config
  double tau = 0.0, xi = 0.0, theta_mix = 0.0;
  double accept_rate = 1.0;
  double mean_pi_entropy = 0.0;      // bits, mean over decisions
  std::vector<double> max_pi;        // per decision, layer-major order
};

/// Alg.-2 search driver. Owns the optimizer state and rng streams; the
/// net (weights + logits) is mutated in place.
class SearchEngine {
 public:
  SearchEngine(SearchNet& net, NetCostModel cost, SearchOptions opts, uint64_t seed);

  /// One stochastic step: S MC samples, deterministic gradient merge,
  /// optimizer updates, pi projection, periodic mask refresh.
  StepMetrics step(const TrainData& data, const PhaseSchedules& sched, int64_t phase_step, bool train_pi);

  std::vector<StepMetrics> run_phase(const TrainData& data, const PhaseSchedules& sched, int64_t steps, bool train_pi,
                                     const std::function<void(const StepMetrics&)>& sink = {});

  int64_t global_step() const { return t_; }
  const SearchOptions& options() const { return opts_; }
  const NetCostModel& cost_model() const { return cost_; }
  SearchNet& net() { return *net_; }

  /// Named mutable state for checkpointing: optimizer buffers, rng
  /// streams, counters. Parameter tensors are reachable via the net.
  struct EngineState {
    std::vector<std::pair<std::string, Tensor*>> tensors;
    std::vector<std::pair<std::string, uint64_t*>> counters;
    std::vector<std::pair<std::string, Philox*>> streams;
  };
  EngineState state();

  std::vector<Tensor*> theta_params();
  std::vector<Tensor*> pi_params();
  std::vector<std::string> theta_param_names() const;
  std::vector<std::string> pi_param_names() const;

 private:
  int64_t next_batch(const TrainData& data, Tensor* x, std::vector<int>* labels, Tensor* targets);

  SearchNet* net_;
  NetCostModel cost_;
  SearchOptions opts_;
  SgdMomentum sgd_;
  Adam adam_;
  int64_t t_ = 0;
  uint64_t batch_cursor_ = 0;
  uint64_t epoch_ = 0;
  std::vector<int64_t> order_;
  Philox shuffle_rng_, coin_rng_;
  std::vector<Philox> sample_rng_;
};

/// Per-decision categorical entropy of pi, in bits.
double pi_entropy_bits(const std::vector<double>& pi);

}  // namespace udc
