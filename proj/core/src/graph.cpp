#include "udc/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udc/error.hpp"

namespace udc {

namespace {

int64_t numel_of_axes(const Shape& shape, const std::vector<int>& axes) {
  int64_t n = 1;
  for (int a : axes) n *= shape.at(static_cast<size_t>(a));
  return n;
}

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
  return st;
}

}  // namespace

const Tensor& Value::tensor() const {
  if (!valid()) throw EngineError("use of an invalid Value handle");
  return graph->value(*this);
}

const Shape& Value::shape() const { return tensor().shape(); }

Graph::Graph(GraphOptions options) : options_(options) {}

const Tensor& Graph::value(Value v) const {
  if (v.graph != this) throw EngineError("Value belongs to a different graph");
  return node(v.id).value;
}

Tensor& Graph::mutable_value(Value v) {
  if (v.graph != this) throw EngineError("Value belongs to a different graph");
  return node(v.id).value;
}

Tensor Graph::grad(Value v) const {
  const Node& n = node(v.id);
  if (!n.value.has_grad()) throw EngineError("node " + describe(v.id) + " has no gradient");
  return n.value.grad_tensor();
}

bool Graph::has_grad(Value v) const { return node(v.id).value.has_grad(); }

std::string Graph::describe(int id) const {
  const Node& n = node(id);
  return n.name.empty() ? (n.op + "#" + std::to_string(id)) : (n.op + "#" + std::to_string(id) + " (" + n.name + ")");
}

void Graph::check_node_finite(int id) const {
  if (!options_.check_finite) return;
  node(id).value.check_finite(describe(id));
}

Value Graph::make_node(std::string op, std::vector<int> inputs, Tensor value, std::function<void(Graph&)> backward,
                       std::string name) {
  Node n;
  n.op = std::move(op);
  n.name = std::move(name);
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.backward = std::move(backward);
  for (int in : n.inputs) n.needs_grad = n.needs_grad || node(in).needs_grad;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  check_node_finite(id);
  return Value{this, id};
}

Value Graph::leaf(Tensor value, bool requires_grad, std::string name) {
  Node n;
  n.op = "leaf";
  n.name = std::move(name);
  n.value = std::move(value);
  n.value.set_requires_grad(requires_grad);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  check_node_finite(id);
  return Value{this, id};
}

Value Graph::constant(Tensor value, std::string name) { return leaf(std::move(value), false, std::move(name)); }

void Graph::accumulate(int id, std::span<const double> g) {
  Node& n = node(id);
  if (!n.needs_grad) return;
  auto dst = n.value.grad();
  if (dst.size() != g.size()) throw EngineError("gradient size mismatch at " + describe(id));
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Graph::backward(Value loss) {
  if (loss.graph != this) throw EngineError("loss Value belongs to a different graph");
  if (consumed_) throw EngineError("backward called twice on the same graph");
  consumed_ = true;
  Node& ln = node(loss.id);
  if (ln.value.numel() != 1) {
    throw EngineError("backward requires a scalar loss, got shape " + shape_to_string(ln.value.shape()));
  }
  if (!ln.needs_grad) return;  // loss does not depend on any trainable leaf
  ln.value.grad()[0] += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || !n.value.has_grad() || !n.backward) continue;
    n.backward(*this);
  }
  if (options_.check_finite) {
    for (int id = loss.id; id >= 0; --id) {
      const Node& n = node(id);
      if (n.value.has_grad()) n.value.check_finite(describe(id));
    }
  }
}

// ------------------------------------------------------------------ kernels

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw EngineError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                      shape_to_string(b.shape()));
  }
  int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor out({M, N});
  for (int64_t m = 0; m < M; ++m) {
    for (int64_t n = 0; n < N; ++n) {
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a[m * K + k] * b[k * N + n];
      out[m * N + n] = acc;
    }
  }
  return out;
}

Shape conv2d_out_shape(const Shape& xs, const Shape& ws, int stride, int pad) {
  if (xs.size() != 4 || ws.size() != 4) {
    throw EngineError("conv2d: expected 4-d input/weight, got " + shape_to_string(xs) + " and " +
                      shape_to_string(ws));
  }
  if (xs[1] != ws[1]) {
    throw EngineError("conv2d: channel mismatch, input " + shape_to_string(xs) + " vs weight " +
                      shape_to_string(ws));
  }
  if (stride < 1) throw EngineError("conv2d: stride must be >= 1");
  if (pad < 0) throw EngineError("conv2d: negative padding");
  int64_t ho = (xs[2] + 2 * pad - ws[2]) / stride + 1;
  int64_t wo = (xs[3] + 2 * pad - ws[3]) / stride + 1;
  if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3]) {
    throw EngineError("conv2d: kernel " + shape_to_string(ws) + " larger than padded input " + shape_to_string(xs));
  }
  return {xs[0], ws[0], ho, wo};
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  Shape os = conv2d_out_shape(x.shape(), w.shape(), stride, pad);
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = os[2], Wo = os[3];
  Tensor out(os);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Co; ++co) {
      for (int64_t oh = 0; oh < Ho; ++oh) {
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            for (int64_t i = 0; i < kh; ++i) {
              int64_t ih = oh * stride - pad + i;
              if (ih < 0 || ih >= H) continue;
              for (int64_t j = 0; j < kw; ++j) {
                int64_t iw = ow * stride - pad + j;
                if (iw < 0 || iw >= W) continue;
                acc += x[((b * Ci + ci) * H + ih) * W + iw] * w[((co * Ci + ci) * kh + i) * kw + j];
              }
            }
          }
          out[((b * Co + co) * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

Tensor softmax_lastaxis(const Tensor& x) {
  int64_t L = x.shape().back();
  int64_t R = x.numel() / L;
  Tensor out(x.shape());
  for (int64_t r = 0; r < R; ++r) {
    const double* row = x.data() + r * L;
    double* orow = out.data() + r * L;
    double m = row[0];
    for (int64_t i = 1; i < L; ++i) m = std::max(m, row[i]);
    double s = 0.0;
    for (int64_t i = 0; i < L; ++i) {
      orow[i] = std::exp(row[i] - m);
      s += orow[i];
    }
    for (int64_t i = 0; i < L; ++i) orow[i] /= s;
  }
  return out;
}

}  // namespace kernels

// ------------------------------------------------------------------- ops

Value Graph::matmul(Value a, Value b) {
  Tensor out = kernels::matmul(value(a), value(b));
  Value v = make_node("matmul", {a.id, b.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id, ib = b.id;
  node(self).backward = [self, ia, ib](Graph& g) {
    const Tensor& A = g.node(ia).value;
    const Tensor& B = g.node(ib).value;
    auto go = g.node(self).value.grad();
    int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
    if (g.node(ia).needs_grad) {
      std::vector<double> ga(static_cast<size_t>(M * K), 0.0);
      for (int64_t m = 0; m < M; ++m)
        for (int64_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (int64_t n = 0; n < N; ++n) acc += go[m * N + n] * B[k * N + n];
          ga[m * K + k] = acc;
        }
      g.accumulate(ia, ga);
    }
    if (g.node(ib).needs_grad) {
      std::vector<double> gb(static_cast<size_t>(K * N), 0.0);
      for (int64_t k = 0; k < K; ++k)
        for (int64_t n = 0; n < N; ++n) {
          double acc = 0.0;
          for (int64_t m = 0; m < M; ++m) acc += A[m * K + k] * go[m * N + n];
          gb[k * N + n] = acc;
        }
      g.accumulate(ib, gb);
    }
  };
  return v;
}

Value Graph::conv2d(Value x, Value w, int stride, int pad) {
  Tensor out = kernels::conv2d(value(x), value(w), stride, pad);
  Value v = make_node("conv2d", {x.id, w.id}, std::move(out), nullptr);
  int self = v.id, ix = x.id, iw = w.id;
  node(self).backward = [self, ix, iw, stride, pad](Graph& g) {
    const Tensor& X = g.node(ix).value;
    const Tensor& K = g.node(iw).value;
    const Tensor& O = g.node(self).value;
    auto go = g.node(self).value.grad();
    int64_t B = X.dim(0), Ci = X.dim(1), H = X.dim(2), W = X.dim(3);
    int64_t Co = K.dim(0), kh = K.dim(2), kw = K.dim(3);
    int64_t Ho = O.dim(2), Wo = O.dim(3);
    bool need_x = g.node(ix).needs_grad, need_w = g.node(iw).needs_grad;
    std::vector<double> gx(need_x ? static_cast<size_t>(X.numel()) : 0, 0.0);
    std::vector<double> gw(need_w ? static_cast<size_t>(K.numel()) : 0, 0.0);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t co = 0; co < Co; ++co)
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow) {
            double gv = go[((b * Co + co) * Ho + oh) * Wo + ow];
            if (gv == 0.0) continue;
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t i = 0; i < kh; ++i) {
                int64_t ih = oh * stride - pad + i;
                if (ih < 0 || ih >= H) continue;
                for (int64_t j = 0; j < kw; ++j) {
                  int64_t iw2 = ow * stride - pad + j;
                  if (iw2 < 0 || iw2 >= W) continue;
                  int64_t xi = ((b * Ci + ci) * H + ih) * W + iw2;
                  int64_t wi = ((co * Ci + ci) * kh + i) * kw + j;
                  if (need_x) gx[static_cast<size_t>(xi)] += gv * K[wi];
                  if (need_w) gw[static_cast<size_t>(wi)] += gv * X[xi];
                }
              }
          }
    if (need_x) g.accumulate(ix, gx);
    if (need_w) g.accumulate(iw, gw);
  };
  return v;
}

namespace {
enum class Broadcast { none, left_scalar, right_scalar };

Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (same_shape(a, b)) return Broadcast::none;
  if (shape_numel(a) == 1) return Broadcast::left_scalar;
  if (shape_numel(b) == 1) return Broadcast::right_scalar;
  throw EngineError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
}
}  // namespace

Value Graph::add(Value a, Value b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  Broadcast bc = broadcast_kind(A.shape(), B.shape(), "add");
  Tensor out(bc == Broadcast::left_scalar ? B.shape() : A.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double av = bc == Broadcast::left_scalar ? A[0] : A[i];
    double bv = bc == Broadcast::right_scalar ? B[0] : B[i];
    out[i] = av + bv;
  }
  Value v = make_node("add", {a.id, b.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id, ib = b.id;
  node(self).backward = [self, ia, ib, bc](Graph& g) {
    auto go = g.node(self).value.grad();
    if (g.node(ia).needs_grad) {
      if (bc == Broadcast::left_scalar) {
        double s = 0.0;
        for (double v2 : go) s += v2;
        g.accumulate(ia, std::vector<double>{s});
      } else {
        g.accumulate(ia, go);
      }
    }
    if (g.node(ib).needs_grad) {
      if (bc == Broadcast::right_scalar) {
        double s = 0.0;
        for (double v2 : go) s += v2;
        g.accumulate(ib, std::vector<double>{s});
      } else {
        g.accumulate(ib, go);
      }
    }
  };
  return v;
}

Value Graph::sub(Value a, Value b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  Broadcast bc = broadcast_kind(A.shape(), B.shape(), "sub");
  Tensor out(bc == Broadcast::left_scalar ? B.shape() : A.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double av = bc == Broadcast::left_scalar ? A[0] : A[i];
    double bv = bc == Broadcast::right_scalar ? B[0] : B[i];
    out[i] = av - bv;
  }
  Value v = make_node("sub", {a.id, b.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id, ib = b.id;
  node(self).backward = [self, ia, ib, bc](Graph& g) {
    auto go = g.node(self).value.grad();
    if (g.node(ia).needs_grad) {
      if (bc == Broadcast::left_scalar) {
        double s = 0.0;
        for (double v2 : go) s += v2;
        g.accumulate(ia, std::vector<double>{s});
      } else {
        g.accumulate(ia, go);
      }
    }
    if (g.node(ib).needs_grad) {
      if (bc == Broadcast::right_scalar) {
        double s = 0.0;
        for (double v2 : go) s += v2;
        g.accumulate(ib, std::vector<double>{-s});
      } else {
        std::vector<double> gb(go.size());
        for (size_t i = 0; i < go.size(); ++i) gb[i] = -go[i];
        g.accumulate(ib, gb);
      }
    }
  };
  return v;
}

Value Graph::mul(Value a, Value b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  Broadcast bc = broadcast_kind(A.shape(), B.shape(), "multiply_elementwise");
  Tensor out(bc == Broadcast::left_scalar ? B.shape() : A.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double av = bc == Broadcast::left_scalar ? A[0] : A[i];
    double bv = bc == Broadcast::right_scalar ? B[0] : B[i];
    out[i] = av * bv;
  }
  Value v = make_node("multiply_elementwise", {a.id, b.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id, ib = b.id;
  node(self).backward = [self, ia, ib, bc](Graph& g) {
    const Tensor& A2 = g.node(ia).value;
    const Tensor& B2 = g.node(ib).value;
    auto go = g.node(self).value.grad();
    if (g.node(ia).needs_grad) {
      if (bc == Broadcast::left_scalar) {
        double s = 0.0;
        for (size_t i = 0; i < go.size(); ++i) s += go[i] * B2[static_cast<int64_t>(i)];
        g.accumulate(ia, std::vector<double>{s});
      } else {
        std::vector<double> ga(go.size());
        for (size_t i = 0; i < go.size(); ++i) {
          double bv = bc == Broadcast::right_scalar ? B2[0] : B2[static_cast<int64_t>(i)];
          ga[i] = go[i] * bv;
        }
        g.accumulate(ia, ga);
      }
    }
    if (g.node(ib).needs_grad) {
      if (bc == Broadcast::right_scalar) {
        double s = 0.0;
        for (size_t i = 0; i < go.size(); ++i) s += go[i] * A2[static_cast<int64_t>(i)];
        g.accumulate(ib, std::vector<double>{s});
      } else {
        std::vector<double> gb(go.size());
        for (size_t i = 0; i < go.size(); ++i) {
          double av = bc == Broadcast::left_scalar ? A2[0] : A2[static_cast<int64_t>(i)];
          gb[i] = go[i] * av;
        }
        g.accumulate(ib, gb);
      }
    }
  };
  return v;
}

Value Graph::scale(Value a, double c) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] * c;
  Value v = make_node("scale", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia, c](Graph& g) {
    auto go = g.node(self).value.grad();
    std::vector<double> ga(go.size());
    for (size_t i = 0; i < go.size(); ++i) ga[i] = go[i] * c;
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::reciprocal(Value a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = 1.0 / A[i];
  Value v = make_node("reciprocal", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) {
    const Tensor& A2 = g.node(ia).value;
    auto go = g.node(self).value.grad();
    std::vector<double> ga(go.size());
    for (size_t i = 0; i < go.size(); ++i) {
      double x = A2[static_cast<int64_t>(i)];
      ga[i] = -go[i] / (x * x);
    }
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::relu(Value a) {
  Tensor out = kernels::relu(value(a));
  Value v = make_node("relu", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) {
    const Tensor& A2 = g.node(ia).value;
    auto go = g.node(self).value.grad();
    std::vector<double> ga(go.size());
    for (size_t i = 0; i < go.size(); ++i) ga[i] = A2[static_cast<int64_t>(i)] > 0.0 ? go[i] : 0.0;
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::softmax(Value a) {
  Tensor out = kernels::softmax_lastaxis(value(a));
  Value v = make_node("softmax", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) {
    const Tensor& Y = g.node(self).value;
    auto go = g.node(self).value.grad();
    int64_t L = Y.shape().back();
    int64_t R = Y.numel() / L;
    std::vector<double> ga(static_cast<size_t>(Y.numel()));
    for (int64_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (int64_t i = 0; i < L; ++i) dot += go[static_cast<size_t>(r * L + i)] * Y[r * L + i];
      for (int64_t i = 0; i < L; ++i) {
        ga[static_cast<size_t>(r * L + i)] = Y[r * L + i] * (go[static_cast<size_t>(r * L + i)] - dot);
      }
    }
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::log(Value a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = std::log(A[i]);
  Value v = make_node("log", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) {
    const Tensor& A2 = g.node(ia).value;
    auto go = g.node(self).value.grad();
    std::vector<double> ga(go.size());
    for (size_t i = 0; i < go.size(); ++i) ga[i] = go[i] / A2[static_cast<int64_t>(i)];
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::clip(Value a, double lo, double hi) {
  if (lo > hi) throw EngineError("clip: lo > hi");
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = std::min(hi, std::max(lo, A[i]));
  Value v = make_node("clip", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia, lo, hi](Graph& g) {
    const Tensor& A2 = g.node(ia).value;
    auto go = g.node(self).value.grad();
    std::vector<double> ga(go.size());
    // saturation (including the boundary itself) passes no gradient
    for (size_t i = 0; i < go.size(); ++i) {
      double x = A2[static_cast<int64_t>(i)];
      ga[i] = (x > lo && x < hi) ? go[i] : 0.0;
    }
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::round_ste(Value a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  if (options_.ste_surrogate_forward) {
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i];
  } else {
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = std::round(A[i]);  // half away from zero
  }
  Value v = make_node("round_ste", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) { g.accumulate(ia, g.node(self).value.grad()); };
  return v;
}

Value Graph::sign_ste(Value a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  if (options_.ste_surrogate_forward) {
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i];
  } else {
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] >= 0.0 ? 1.0 : -1.0;
  }
  Value v = make_node("sign_ste", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) { g.accumulate(ia, g.node(self).value.grad()); };
  return v;
}

Value Graph::abs(Value a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.numel(); ++i) out[i] = std::fabs(A[i]);
  Value v = make_node("abs", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) {
    const Tensor& A2 = g.node(ia).value;
    auto go = g.node(self).value.grad();
    std::vector<double> ga(go.size());
    for (size_t i = 0; i < go.size(); ++i) {
      double x = A2[static_cast<int64_t>(i)];
      ga[i] = x > 0.0 ? go[i] : (x < 0.0 ? -go[i] : 0.0);
    }
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::sum(Value a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (int64_t i = 0; i < A.numel(); ++i) s += A[i];
  Value v = make_node("sum", {a.id}, Tensor::scalar(s), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) {
    double gv = g.node(self).value.grad()[0];
    std::vector<double> ga(static_cast<size_t>(g.node(ia).value.numel()), gv);
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::mean(Value a) {
  const Tensor& A = value(a);
  Value s = sum(a);
  return scale(s, 1.0 / static_cast<double>(A.numel()));
}

Value Graph::sum(Value a, const std::vector<int>& axes) {
  const Tensor& A = value(a);
  const Shape& in = A.shape();
  std::vector<char> reduced(in.size(), 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(in.size())) throw EngineError("sum: axis out of range");
    reduced[static_cast<size_t>(ax)] = 1;
  }
  Shape out_shape;
  for (size_t i = 0; i < in.size(); ++i)
    if (!reduced[i]) out_shape.push_back(in[i]);
  if (out_shape.empty()) out_shape = {1};
  auto in_strides = strides_of(in);
  Shape padded = out_shape;
  auto out_strides = strides_of(padded);
  // flat-index mapping input -> output
  std::vector<int64_t> map(static_cast<size_t>(A.numel()));
  for (int64_t flat = 0; flat < A.numel(); ++flat) {
    int64_t rem = flat, out_idx = 0;
    size_t oi = 0;
    for (size_t d = 0; d < in.size(); ++d) {
      int64_t coord = rem / in_strides[d];
      rem %= in_strides[d];
      if (!reduced[d]) out_idx += coord * out_strides[oi++];
    }
    map[static_cast<size_t>(flat)] = out_idx;
  }
  Tensor out(out_shape);
  for (int64_t flat = 0; flat < A.numel(); ++flat) out[map[static_cast<size_t>(flat)]] += A[flat];
  Value v = make_node("sum_axes", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia, map](Graph& g) {
    auto go = g.node(self).value.grad();
    std::vector<double> ga(map.size());
    for (size_t i = 0; i < map.size(); ++i) ga[i] = go[static_cast<size_t>(map[i])];
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::mean(Value a, const std::vector<int>& axes) {
  const Tensor& A = value(a);
  int64_t n = numel_of_axes(A.shape(), axes);
  return scale(sum(a, axes), 1.0 / static_cast<double>(n));
}

Value Graph::cross_entropy_loss(Value logits, const std::vector<int>& labels) {
  const Tensor& X = value(logits);
  if (X.rank() != 2) {
    throw EngineError("cross_entropy_loss: logits must be (batch, classes), got " + shape_to_string(X.shape()));
  }
  int64_t B = X.dim(0), K = X.dim(1);
  if (static_cast<int64_t>(labels.size()) != B) {
    throw EngineError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for batch " +
                      std::to_string(B));
  }
  for (int lb : labels) {
    if (lb < 0 || lb >= K) throw EngineError("cross_entropy_loss: label " + std::to_string(lb) + " out of range");
  }
  Tensor probs = kernels::softmax_lastaxis(X);
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    double p = probs[b * K + labels[static_cast<size_t>(b)]];
    loss -= std::log(std::max(p, 1e-300));
  }
  loss /= static_cast<double>(B);
  Value v = make_node("cross_entropy_loss", {logits.id}, Tensor::scalar(loss), nullptr);
  int self = v.id, ix = logits.id;
  std::vector<double> saved(probs.values().begin(), probs.values().end());
  node(self).backward = [self, ix, labels, saved, B, K](Graph& g) {
    double gv = g.node(self).value.grad()[0];
    std::vector<double> ga(saved.size());
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t k = 0; k < K; ++k) {
        double d = saved[static_cast<size_t>(b * K + k)] - (labels[static_cast<size_t>(b)] == k ? 1.0 : 0.0);
        ga[static_cast<size_t>(b * K + k)] = gv * d / static_cast<double>(B);
      }
    }
    g.accumulate(ix, ga);
  };
  return v;
}

Value Graph::select(Value a, int64_t index) {
  const Tensor& A = value(a);
  if (index < 0 || index >= A.numel()) {
    throw EngineError("select: index " + std::to_string(index) + " out of range for " + shape_to_string(A.shape()));
  }
  Value v = make_node("select", {a.id}, Tensor::scalar(A[index]), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia, index](Graph& g) {
    double gv = g.node(self).value.grad()[0];
    std::vector<double> ga(static_cast<size_t>(g.node(ia).value.numel()), 0.0);
    ga[static_cast<size_t>(index)] = gv;
    g.accumulate(ia, ga);
  };
  return v;
}

namespace {
// (B,C) or (B,C,H,W): returns {batch, channels, inner}
std::array<int64_t, 3> channel_layout(const Shape& xs, const Shape& vs, const char* op) {
  if (vs.size() != 1) throw EngineError(std::string(op) + ": channel vector must be rank 1");
  if (xs.size() < 2) throw EngineError(std::string(op) + ": input must have a channel axis");
  if (xs[1] != vs[0]) {
    throw EngineError(std::string(op) + ": channel mismatch " + shape_to_string(xs) + " vs " + shape_to_string(vs));
  }
  int64_t inner = 1;
  for (size_t i = 2; i < xs.size(); ++i) inner *= xs[i];
  return {xs[0], xs[1], inner};
}
}  // namespace

Value Graph::scale_channels(Value x, Value vch) {
  const Tensor& X = value(x);
  const Tensor& V = value(vch);
  auto [B, C, inner] = channel_layout(X.shape(), V.shape(), "scale_channels");
  Tensor out(X.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < inner; ++i) out[(b * C + c) * inner + i] = X[(b * C + c) * inner + i] * V[c];
  Value v = make_node("scale_channels", {x.id, vch.id}, std::move(out), nullptr);
  int self = v.id, ix = x.id, iv = vch.id;
  node(self).backward = [self, ix, iv, B = B, C = C, inner = inner](Graph& g) {
    const Tensor& X2 = g.node(ix).value;
    const Tensor& V2 = g.node(iv).value;
    auto go = g.node(self).value.grad();
    if (g.node(ix).needs_grad) {
      std::vector<double> gx(go.size());
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < inner; ++i) {
            size_t idx = static_cast<size_t>((b * C + c) * inner + i);
            gx[idx] = go[idx] * V2[c];
          }
      g.accumulate(ix, gx);
    }
    if (g.node(iv).needs_grad) {
      std::vector<double> gv(static_cast<size_t>(C), 0.0);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < inner; ++i) {
            size_t idx = static_cast<size_t>((b * C + c) * inner + i);
            gv[static_cast<size_t>(c)] += go[idx] * X2[static_cast<int64_t>(idx)];
          }
      g.accumulate(iv, gv);
    }
  };
  return v;
}

Value Graph::add_bias(Value x, Value bias) {
  const Tensor& X = value(x);
  const Tensor& Bv = value(bias);
  auto [B, C, inner] = channel_layout(X.shape(), Bv.shape(), "add_bias");
  Tensor out(X.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < inner; ++i) out[(b * C + c) * inner + i] = X[(b * C + c) * inner + i] + Bv[c];
  Value v = make_node("add_bias", {x.id, bias.id}, std::move(out), nullptr);
  int self = v.id, ix = x.id, ib = bias.id;
  node(self).backward = [self, ix, ib, B = B, C = C, inner = inner](Graph& g) {
    auto go = g.node(self).value.grad();
    if (g.node(ix).needs_grad) g.accumulate(ix, go);
    if (g.node(ib).needs_grad) {
      std::vector<double> gb(static_cast<size_t>(C), 0.0);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < inner; ++i) gb[static_cast<size_t>(c)] += go[static_cast<size_t>((b * C + c) * inner + i)];
      g.accumulate(ib, gb);
    }
  };
  return v;
}

Value Graph::reshape(Value a, Shape shape) {
  const Tensor& A = value(a);
  if (shape_numel(shape) != A.numel()) {
    throw EngineError("reshape: cannot view " + shape_to_string(A.shape()) + " as " + shape_to_string(shape));
  }
  Tensor out(shape, std::vector<double>(A.values().begin(), A.values().end()));
  Value v = make_node("reshape", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) { g.accumulate(ia, g.node(self).value.grad()); };
  return v;
}

Value Graph::narrow_channels(Value a, int64_t keep) {
  const Tensor& A = value(a);
  if (A.rank() < 2) throw EngineError("narrow_channels: input must have a channel axis");
  int64_t B = A.dim(0), C = A.dim(1);
  if (keep < 1) throw EngineError("narrow_channels: keep must be positive");
  int64_t copy = std::min(keep, C);  // keep > C zero-pads
  int64_t inner = A.numel() / (B * C);
  Shape os = A.shape();
  os[1] = keep;
  Tensor out(os);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < copy; ++c)
      std::copy(A.data() + (b * C + c) * inner, A.data() + (b * C + c + 1) * inner,
                out.data() + (b * keep + c) * inner);
  Value v = make_node("narrow_channels", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia, B, C, keep, copy, inner](Graph& g) {
    (void)keep;
    auto go = g.node(self).value.grad();
    std::vector<double> ga(static_cast<size_t>(B * C * inner), 0.0);
    int64_t kc = g.node(self).value.dim(1);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < copy; ++c)
        for (int64_t i = 0; i < inner; ++i)
          ga[static_cast<size_t>((b * C + c) * inner + i)] = go[static_cast<size_t>((b * kc + c) * inner + i)];
    g.accumulate(ia, ga);
  };
  return v;
}

Value Graph::mul_mask_ste(Value a, Value mask) {
  const Tensor& A = value(a);
  const Tensor& M = value(mask);
  if (!same_shape(A.shape(), M.shape())) {
    throw EngineError("mul_mask_ste: shape mismatch " + shape_to_string(A.shape()) + " vs " +
                      shape_to_string(M.shape()));
  }
  Tensor out(A.shape());
  if (options_.ste_surrogate_forward) {
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i];
  } else {
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] * M[i];
  }
  Value v = make_node("mul_mask_ste", {a.id, mask.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) { g.accumulate(ia, g.node(self).value.grad()); };
  return v;
}

Value Graph::topk_renorm_ste(Value a, int kappa) {
  const Tensor& A = value(a);
  int64_t n = A.numel();
  if (kappa < 1 || kappa > n) {
    throw EngineError("topk_renorm_ste: kappa " + std::to_string(kappa) + " out of [1," + std::to_string(n) + "]");
  }
  Tensor out(A.shape());
  if (options_.ste_surrogate_forward || kappa == n) {
    for (int64_t i = 0; i < n; ++i) out[i] = A[i];
  } else {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t i, int64_t j) { return A[i] > A[j]; });
    double kept = 0.0;
    for (int i = 0; i < kappa; ++i) kept += A[order[static_cast<size_t>(i)]];
    if (kept <= 0.0) throw EngineError("topk_renorm_ste: kept mass is not positive");
    for (int i = 0; i < kappa; ++i) {
      int64_t idx = order[static_cast<size_t>(i)];
      out[idx] = A[idx] / kept;
    }
  }
  Value v = make_node("topk_renorm_ste", {a.id}, std::move(out), nullptr);
  int self = v.id, ia = a.id;
  node(self).backward = [self, ia](Graph& g) { g.accumulate(ia, g.node(self).value.grad()); };
  return v;
}

}  // namespace udc
