#pragma once

#include <functional>
#include <string>
#include <vector>

#include "udc/dnas.hpp"
#include "udc/schedule.hpp"
#include "udc/search_space.hpp"

namespace udc {

/// Baseline Eq.-(3) quantizer vs the shifted codebook placed beyond the
/// pruning boundary.
enum class QuantFormat { q, qhat };
QuantFormat quant_format_from_string(const std::string& s);
std::string to_string(QuantFormat f);

/// One layer of an extracted (sliced, deployable) network. Channel and
/// feature counts are the retained counts; bits >= 32 means float
/// weights in forward math.
struct ConcreteLayer {
  enum class InputReduce { none, gap, flatten };

  std::string name;
  OperatorKind op = OperatorKind::conv3x3;
  InputReduce reduce = InputReduce::none;
  int stride = 1;
  int64_t in_features = 0;   // retained input channels/features
  int64_t out_features = 0;  // retained output channels/features
  Tensor theta;
  Tensor bias;
  Tensor mask;               // current pruning mask, same shape as theta
  Tensor range;              // scalar r, trainable
  double beta = 0.0;
  double sparsity_target = 1.0;
  int bits = 8;

  bool has_weights() const { return op != OperatorKind::identity; }
  /// Weights as used in a deterministic (alpha = 1) forward pass.
  Tensor effective_weights(QuantFormat format) const;
};

struct ConcreteNetwork {
  std::vector<ConcreteLayer> layers;
  Shape input_shape;  // (C,H,W) or (D)
  int num_classes = 0;
  bool regression = false;
  QuantFormat format = QuantFormat::qhat;

  /// Deterministic fully-quantized forward (plain kernels, no tape).
  Tensor forward(const Tensor& x) const;
  /// Classification accuracy in [0,1], or PSNR (dB, peak 1.0) for
  /// regression.
  double evaluate(const TrainData& data, int batch_size = 256) const;
  double weight_squared_norm() const;
  /// Deployable storage in bits (integer retained counts): Eq.-(4)
  /// weight bits plus 32 per bias parameter.
  double storage_bits() const;
};

/// Slices the argmax configuration out of the supernet. Pruning masks
/// are reset to all-ones (stage 2 rebuilds them on its ramp) and beta
/// to 0.
ConcreteNetwork extract_concrete(const SearchNet& net, const std::vector<LayerChoice>& config);

struct FinetunePlan {
  int stage1_epochs = 8, stage2_epochs = 2, stage3_epochs = 1;
  Schedule lr_stage1 = {ScheduleKind::cosine, 0.05, 1e-4, 1};
  Schedule lr_stage2 = {ScheduleKind::cosine, 0.05, 1e-4, 1};
  Schedule lr_stage3 = {ScheduleKind::cosine, 1e-4, 0.0, 1};
  Schedule alpha = Schedule::constant(1.0);  // P(weight quantized) per element
  QuantFormat format = QuantFormat::qhat;
  int deploy_bits = 8;
  int batch_size = 32;
  int mask_refresh_interval = 16;
  double weight_decay = 0.0;
  double momentum = 0.9;
};

struct EpochMetrics {
  int64_t epoch = 0;
  int stage = 1;
  double train_loss = 0.0;
  double eval_metric = 0.0;
  double sparsity_target = 1.0;
  double weight_sq_norm = 0.0;
  double alpha = 1.0;
};

struct FinetuneResult {
  std::vector<EpochMetrics> history;
  double norm_after_stage1 = 0.0;
  double norm_after_stage3 = 0.0;
  double final_eval = 0.0;
};

/// Three-stage pipeline: quantized-dense training, gradual pruning
/// ramp, joint sparse-quantized training. Mutates the net in place.
FinetuneResult run_finetune(ConcreteNetwork& net, const FinetunePlan& plan, const TrainData& train,
                            const TrainData& test, uint64_t seed,
                            const std::function<void(const EpochMetrics&)>& sink = {});

/// Per-element Bernoulli(alpha) mixture of quantized and clipped-float
/// weights; clip range matches the representable range of the
/// quantizer (+-(r+beta) for qhat, +-r for q).
Value probabilistic_quantized_forward(Graph& g, Value theta, int bits, Value range, double beta, double alpha,
                                      QuantFormat format, Philox& rng);

/// Current sparsity on the stage-2 linear ramp:
/// s(step) = 1 - ramp * (1 - s_target), ramp 0 at step 0, 1 at the last
/// step, so the pruned fraction grows from 0% to 100% of the target.
double pruning_ramp(int64_t step, int64_t total_steps, double s_target);

/// Re-quantizes every layer onto a uniform 2^b*-1 symmetric grid with
/// r' = max|Q_hat(theta) .* m| and rounds biases to f32-representable
/// values. Zeros stay zero.
void deploy_quantize(ConcreteNetwork& net, int deploy_bits);

/// Evaluates f(x, Qhat(theta)) against the integer-friendly split
/// f(x, Q(theta - sign(theta) beta)) + beta f(x, sign(theta)); returns
/// the max abs deviation (an algebraic identity for linear f).
double integer_decomposition_check(const Tensor& x, const Tensor& theta, OperatorKind op, int stride, int bits,
                                   double range, double beta);

}  // namespace udc
