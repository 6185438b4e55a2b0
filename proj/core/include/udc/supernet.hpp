#pragma once

#include "udc/search_space.hpp"

namespace udc {

/// Graph leaves for one layer's trainable tensors (per candidate).
struct LayerLeaves {
  std::vector<Value> theta;
  std::vector<Value> bias;
  std::vector<Value> ranges;
};

struct NetLeaves {
  std::vector<LayerLeaves> layers;
};

/// Registers every trainable tensor of the net as a graph leaf.
NetLeaves make_net_leaves(Graph& g, const SearchNet& net, bool trainable);

/// layer_forward against pre-registered leaves (the search loop path;
/// the leaf-creating overload in search_space.hpp is for single-layer
/// use).
Value layer_forward_with_leaves(Graph& g, Value x, const SearchLayer& layer, const LayerSamples& s,
                                const LayerLeaves& leaves);

/// Full supernet forward. A 4-d activation meeting a dense layer is
/// reduced first: global average pool when the dense layer's
/// in_channels equals C, flatten when it equals C*H*W.
Value supernet_forward(Graph& g, const SearchNet& net, Value x, const std::vector<LayerSamples>& samples,
                       const NetLeaves& leaves);

/// Task loss: cross-entropy (classification) or mean squared error
/// (regression, labels ignored).
Value task_loss(Graph& g, const SearchNet& net, Value output, const std::vector<int>& labels, const Tensor* targets);

}  // namespace udc
