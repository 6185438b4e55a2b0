#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "udc/tensor.hpp"

namespace udc {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid for the graph's
/// lifetime.
struct Value {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& tensor() const;
  const Shape& shape() const;
  double item() const { return tensor().item(); }
};

struct GraphOptions {
  /// Scan every op output (and, after backward, every gradient) for
  /// NaN/Inf and throw EngineError naming the offending node.
  bool check_finite = true;
  /// Evaluate straight-through ops (round_ste, sign_ste,
  /// topk_renorm_ste) as their smooth surrogate (identity). Only the
  /// finite-difference gradient checks use this; it makes the forward
  /// pass consistent with the gradient the STE ops advertise.
  bool ste_surrogate_forward = false;
};

/// Reverse-mode tape. Ops evaluate eagerly; backward() replays the tape
/// in reverse creation order (reverse topological by construction),
/// which fixes the gradient accumulation order and makes results
/// bitwise reproducible.
class Graph {
 public:
  explicit Graph(GraphOptions options = {});
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Value leaf(Tensor value, bool requires_grad, std::string name = "");
  Value constant(Tensor value, std::string name = "");

  // --- forward ops -------------------------------------------------
  Value matmul(Value a, Value b);
  Value conv2d(Value x, Value w, int stride, int pad);
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);  // elementwise; either side may be scalar
  Value scale(Value a, double c);
  Value reciprocal(Value a);
  Value relu(Value a);
  Value softmax(Value a);  // along the last axis
  Value log(Value a);
  Value clip(Value a, double lo, double hi);
  Value round_ste(Value a);  // round half away from zero; identity backward
  Value sign_ste(Value a);   // x>=0 -> +1 else -1; identity backward
  Value abs(Value a);
  Value sum(Value a);
  Value sum(Value a, const std::vector<int>& axes);
  Value mean(Value a);
  Value mean(Value a, const std::vector<int>& axes);
  Value cross_entropy_loss(Value logits, const std::vector<int>& labels);
  Value select(Value a, int64_t index);     // scalar a[index]
  Value scale_channels(Value x, Value v);   // x:(B,C[,H,W]) * v:(C) per channel
  Value add_bias(Value x, Value b);         // x:(B,C[,H,W]) + b:(C) per channel
  Value reshape(Value a, Shape shape);
  /// Keeps the leading `keep` channels of a (B,C[,H,W]) tensor.
  Value narrow_channels(Value a, int64_t keep);
  /// Appendix-style top-k straight-through: forward keeps the kappa
  /// largest entries and renormalizes by their l1 norm; backward passes
  /// the incoming gradient through to the full input.
  Value topk_renorm_ste(Value a, int kappa);
  /// Pruning-mask multiply with a dense (straight-through) backward:
  /// pruned weights keep receiving gradients so they can re-enter when
  /// the mask refreshes.
  Value mul_mask_ste(Value a, Value mask);

  /// Reverse pass from a scalar loss. A graph can be consumed once.
  void backward(Value loss);

  const Tensor& value(Value v) const;
  Tensor& mutable_value(Value v);
  /// Gradient of the given node (valid after backward, if it received
  /// one); throws otherwise.
  Tensor grad(Value v) const;
  bool has_grad(Value v) const;

  size_t num_nodes() const { return nodes_.size(); }
  const GraphOptions& options() const { return options_; }

 private:
  struct Node {
    std::string op;
    std::string name;
    std::vector<int> inputs;
    Tensor value;
    bool needs_grad = false;
    std::function<void(Graph&)> backward;
  };

  Value make_node(std::string op, std::vector<int> inputs, Tensor value, std::function<void(Graph&)> backward,
                  std::string name = "");
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  void accumulate(int id, std::span<const double> g);
  void check_node_finite(int id) const;
  std::string describe(int id) const;

  GraphOptions options_;
  std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
  bool consumed_ = false;

  friend struct Value;
};

// Plain (tape-free) forward kernels shared by the graph ops and the
// non-autodiff paths (deployment, codec round-trip checks).
namespace kernels {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Shape conv2d_out_shape(const Shape& x, const Shape& w, int stride, int pad);
Tensor relu(const Tensor& x);
Tensor softmax_lastaxis(const Tensor& x);
}  // namespace kernels

}  // namespace udc
