#include "udc/size_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "udc/error.hpp"

namespace udc {

double binary_entropy(double s) {
  if (s < 0.0 || s > 1.0) throw DomainError("binary_entropy: s must be in [0,1], got " + std::to_string(s));
  if (s == 0.0 || s == 1.0) return 0.0;
  return (-s * std::log(s) - (1.0 - s) * std::log(1.0 - s)) / std::log(2.0);
}

double layer_size_bits(double s, double b, double elem_count) {
  return (b + binary_entropy(s)) * elem_count;
}

double soft_elem_count(const LayerCostGeometry& g, double rho_in, double rho_out) {
  if (g.op == OperatorKind::identity) return 0.0;
  double in = rho_in * static_cast<double>(g.in_channels) * static_cast<double>(g.in_positions);
  double out = rho_out * static_cast<double>(g.out_channels);
  return in * out * static_cast<double>(g.kernel_h * g.kernel_w);
}

int64_t concrete_elem_count(const LayerCostGeometry& g, double rho_in, double rho_out) {
  if (g.op == OperatorKind::identity) return 0;
  int64_t in = retained_channels(rho_in, g.in_channels) * g.in_positions;
  int64_t out = retained_channels(rho_out, g.out_channels);
  return in * out * g.kernel_h * g.kernel_w;
}

double soft_mac_count(const LayerCostGeometry& g, double rho_in, double rho_out) {
  if (g.op == OperatorKind::identity) return 0.0;
  return soft_elem_count(g, rho_in, rho_out) * static_cast<double>(g.out_positions);
}

int64_t concrete_mac_count(const LayerCostGeometry& g, double rho_in, double rho_out) {
  if (g.op == OperatorKind::identity) return 0;
  return concrete_elem_count(g, rho_in, rho_out) * g.out_positions;
}

namespace {

double candidate_cost(const LayerCostGeometry& geom, CostKind kind, double s, double b, double rho_in, double rho_out,
                      bool integer_counts) {
  if (geom.op == OperatorKind::identity) return 0.0;
  if (kind == CostKind::mac_count) {
    return integer_counts ? static_cast<double>(concrete_mac_count(geom, rho_in, rho_out))
                          : soft_mac_count(geom, rho_in, rho_out);
  }
  double n = integer_counts ? static_cast<double>(concrete_elem_count(geom, rho_in, rho_out))
                            : soft_elem_count(geom, rho_in, rho_out);
  double bits = layer_size_bits(s, b, n);
  if (geom.has_bias) {
    double nb = integer_counts ? static_cast<double>(retained_channels(rho_out, geom.out_channels))
                               : rho_out * static_cast<double>(geom.out_channels);
    bits += kBiasBits * nb;
  }
  return bits;
}

double mix_value(std::span<const double> z, std::span<const double> options) {
  double v = 0.0;
  for (size_t i = 0; i < z.size(); ++i) v += z[i] * options[i];
  return v;
}

}  // namespace

double NetCostModel::config_cost(std::span<const LayerChoice> config, bool integer_counts) const {
  if (config.size() != layers.size()) throw DomainError("config_cost: config length != layer count");
  double total = 0.0;
  double rho_in = 1.0;
  for (size_t li = 0; li < layers.size(); ++li) {
    const Layer& L = layers[li];
    const LayerChoice& c = config[li];
    double rho_out = L.width_options.at(static_cast<size_t>(c.width_index));
    double s = L.sparsity_options.at(static_cast<size_t>(c.sparsity_index));
    double b = L.bitwidth_options.at(static_cast<size_t>(c.bitwidth_index));
    const LayerCostGeometry& geom = L.candidates.at(static_cast<size_t>(c.oper_index));
    total += candidate_cost(geom, kind, s, b, rho_in, rho_out, integer_counts);
    rho_in = rho_out;
  }
  return total;
}

double NetCostModel::soft_cost(std::span<const SoftSample> samples) const {
  if (samples.size() != layers.size()) throw DomainError("soft_cost: sample count != layer count");
  double total = 0.0;
  double rho_in = 1.0;
  for (size_t li = 0; li < layers.size(); ++li) {
    const Layer& L = layers[li];
    const SoftSample& z = samples[li];
    double rho_out = mix_value(z.width, L.width_options);
    double s = mix_value(z.sparsity, L.sparsity_options);
    double b = mix_value(z.bitwidth, L.bitwidth_options);
    for (size_t c = 0; c < L.candidates.size(); ++c) {
      double w = z.oper.at(c);
      if (w == 0.0) continue;
      total += w * candidate_cost(L.candidates[c], kind, s, b, rho_in, rho_out, false);
    }
    rho_in = rho_out;
  }
  return total;
}

Value NetCostModel::soft_cost(Graph& g, std::span<const LayerSamples> samples) const {
  if (samples.size() != layers.size()) throw DomainError("soft_cost: sample count != layer count");
  auto dot_const = [&](Value z, const std::vector<double>& opts) {
    Tensor ov({static_cast<int64_t>(opts.size())}, opts);
    return g.sum(g.mul(z, g.constant(std::move(ov))));
  };
  Value total{};
  Value rho_in{};  // invalid -> 1.0
  for (size_t li = 0; li < layers.size(); ++li) {
    const Layer& L = layers[li];
    const LayerSamples& z = samples[li];
    Value rho_out = dot_const(z.width, L.width_options);
    Value layer_cost{};
    const Tensor& zf = g.value(z.oper);
    if (kind == CostKind::compressed_bits) {
      Value s = dot_const(z.sparsity, L.sparsity_options);
      Value b = dot_const(z.bitwidth, L.bitwidth_options);
      // H_b with the argument clamped away from {0,1}; the clamp zeroes
      // the (diverging) gradient there
      Value sc = g.clip(s, 1e-12, 1.0 - 1e-12);
      Value one_minus = g.sub(g.constant(Tensor::scalar(1.0)), sc);
      Value hb = g.scale(g.add(g.mul(sc, g.log(sc)), g.mul(one_minus, g.log(one_minus))), -1.0 / std::log(2.0));
      Value bits_per_elem = g.add(b, hb);
      for (size_t c = 0; c < L.candidates.size(); ++c) {
        if (zf[static_cast<int64_t>(c)] == 0.0) continue;
        const LayerCostGeometry& geom = L.candidates[c];
        if (geom.op == OperatorKind::identity) continue;
        double base = static_cast<double>(geom.in_channels * geom.in_positions) *
                      static_cast<double>(geom.out_channels) * static_cast<double>(geom.kernel_h * geom.kernel_w);
        Value n = rho_in.valid() ? g.scale(g.mul(rho_in, rho_out), base) : g.scale(rho_out, base);
        Value eps = g.mul(bits_per_elem, n);
        if (geom.has_bias) {
          eps = g.add(eps, g.scale(rho_out, kBiasBits * static_cast<double>(geom.out_channels)));
        }
        Value term = g.mul(eps, g.select(z.oper, static_cast<int64_t>(c)));
        layer_cost = layer_cost.valid() ? g.add(layer_cost, term) : term;
      }
    } else {
      for (size_t c = 0; c < L.candidates.size(); ++c) {
        if (zf[static_cast<int64_t>(c)] == 0.0) continue;
        const LayerCostGeometry& geom = L.candidates[c];
        if (geom.op == OperatorKind::identity) continue;
        double base = static_cast<double>(geom.in_channels * geom.in_positions) *
                      static_cast<double>(geom.out_channels) * static_cast<double>(geom.kernel_h * geom.kernel_w) *
                      static_cast<double>(geom.out_positions);
        Value n = rho_in.valid() ? g.scale(g.mul(rho_in, rho_out), base) : g.scale(rho_out, base);
        Value term = g.mul(n, g.select(z.oper, static_cast<int64_t>(c)));
        layer_cost = layer_cost.valid() ? g.add(layer_cost, term) : term;
      }
    }
    if (layer_cost.valid()) total = total.valid() ? g.add(total, layer_cost) : layer_cost;
    rho_in = rho_out;
  }
  if (!total.valid()) return g.constant(Tensor::scalar(0.0), "network_cost");
  return total;
}

uint64_t NetCostModel::num_configs() const {
  uint64_t n = 1;
  for (const Layer& L : layers) {
    uint64_t per = static_cast<uint64_t>(L.width_options.size()) * L.sparsity_options.size() *
                   L.bitwidth_options.size() * L.candidates.size();
    if (per != 0 && n > (uint64_t{1} << 63) / per) return uint64_t{1} << 63;
    n *= per;
  }
  return n;
}

std::pair<double, double> NetCostModel::cost_bounds() const {
  // DP over the upstream width option; (s,b,f) minimized/maximized per cell
  size_t L = layers.size();
  std::vector<double> best_min{0.0}, best_max{0.0};  // indexed by prev width option (single entry for input)
  std::vector<double> prev_rho{1.0};
  for (size_t li = 0; li < L; ++li) {
    const Layer& lay = layers[li];
    size_t W = lay.width_options.size();
    std::vector<double> nmin(W, 0.0), nmax(W, 0.0);
    for (size_t w = 0; w < W; ++w) {
      double cell_min = std::numeric_limits<double>::infinity();
      double cell_max = -std::numeric_limits<double>::infinity();
      for (size_t p = 0; p < prev_rho.size(); ++p) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (size_t f = 0; f < lay.candidates.size(); ++f) {
          for (double s : lay.sparsity_options) {
            for (double b : lay.bitwidth_options) {
              double c =
                  candidate_cost(lay.candidates[f], kind, s, b, prev_rho[p], lay.width_options[w], false);
              lo = std::min(lo, c);
              hi = std::max(hi, c);
            }
          }
        }
        cell_min = std::min(cell_min, best_min[p] + lo);
        cell_max = std::max(cell_max, best_max[p] + hi);
      }
      nmin[w] = cell_min;
      nmax[w] = cell_max;
    }
    best_min = std::move(nmin);
    best_max = std::move(nmax);
    prev_rho = lay.width_options;
  }
  double lo = *std::min_element(best_min.begin(), best_min.end());
  double hi = *std::max_element(best_max.begin(), best_max.end());
  return {lo, hi};
}

void NetCostModel::enumerate(const std::function<void(std::span<const LayerChoice>, double)>& fn,
                             bool integer_counts) const {
  std::vector<LayerChoice> config(layers.size());
  std::function<void(size_t)> walk = [&](size_t li) {
    if (li == layers.size()) {
      fn(config, config_cost(config, integer_counts));
      return;
    }
    const Layer& L = layers[li];
    for (int w = 0; w < static_cast<int>(L.width_options.size()); ++w)
      for (int s = 0; s < static_cast<int>(L.sparsity_options.size()); ++s)
        for (int b = 0; b < static_cast<int>(L.bitwidth_options.size()); ++b)
          for (int f = 0; f < static_cast<int>(L.candidates.size()); ++f) {
            config[li] = {w, s, b, f};
            walk(li + 1);
          }
  };
  walk(0);
}

NetCostModel build_cost_model(const SearchNet& net, CostKind kind, const Shape& input_shape) {
  NetCostModel model;
  model.kind = kind;
  bool spatial = input_shape.size() == 3;
  int64_t cur_channels = input_shape.at(0);
  int64_t h = spatial ? input_shape[1] : 1;
  int64_t w = spatial ? input_shape[2] : 1;
  for (const SearchLayer& layer : net.layers) {
    NetCostModel::Layer L;
    L.width_options = layer.width.values;
    L.sparsity_options = layer.sparsity.values;
    L.bitwidth_options = layer.bitwidth.values;
    bool has_dense = false;
    int64_t next_h = h, next_w = w;
    for (const OperatorCandidate& cand : layer.candidates) {
      LayerCostGeometry geom;
      geom.op = cand.kind;
      geom.out_channels = layer.out_channels;
      geom.has_bias = cand.kind != OperatorKind::identity;
      if (cand.kind == OperatorKind::dense) {
        has_dense = true;
        geom.in_channels = cur_channels;
        geom.out_positions = 1;
        if (spatial) {
          if (layer.in_channels == cur_channels) {
            geom.in_positions = 1;  // global average pool feeds this layer
          } else if (layer.in_channels == cur_channels * h * w) {
            geom.in_positions = h * w;  // flattened features
          } else {
            throw DomainError("layer " + layer.name + ": dense in_channels " + std::to_string(layer.in_channels) +
                              " matches neither " + std::to_string(cur_channels) + " nor " +
                              std::to_string(cur_channels * h * w));
          }
        } else if (layer.in_channels != cur_channels) {
          throw DomainError("layer " + layer.name + ": dense in_channels mismatch");
        }
      } else if (cand.kind == OperatorKind::identity) {
        geom.in_channels = cur_channels;
        geom.has_bias = false;
        geom.out_positions = spatial ? h * w : 1;
      } else {
        int ke = kernel_extent(cand.kind);
        geom.in_channels = cur_channels;
        geom.kernel_h = ke;
        geom.kernel_w = ke;
        int64_t oh = (h + 2 * (ke / 2) - ke) / layer.stride + 1;
        int64_t ow = (w + 2 * (ke / 2) - ke) / layer.stride + 1;
        geom.out_positions = oh * ow;
        next_h = oh;
        next_w = ow;
      }
      L.candidates.push_back(geom);
    }
    if (has_dense) spatial = false;
    cur_channels = layer.out_channels;
    h = next_h;
    w = next_w;
    model.layers.push_back(std::move(L));
  }
  return model;
}

double constraint_regularizer(std::span<const double> sampled_costs, double e_star) {
  if (sampled_costs.empty()) throw DomainError("constraint_regularizer: at least one sample required");
  double acc = 0.0;
  for (double e : sampled_costs) acc += std::fabs(e - e_star);
  return acc / static_cast<double>(sampled_costs.size());
}

Value constraint_penalty(Graph& g, Value network_cost, double e_star, bool normalized) {
  if (e_star <= 0.0) throw DomainError("constraint_penalty: e* must be positive");
  if (normalized) {
    Value ratio = g.scale(network_cost, 1.0 / e_star);
    return g.abs(g.sub(ratio, g.constant(Tensor::scalar(1.0))));
  }
  return g.abs(g.sub(network_cost, g.constant(Tensor::scalar(e_star))));
}

}  // namespace udc
