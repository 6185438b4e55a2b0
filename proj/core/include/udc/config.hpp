#pragma once

#include <string>
#include <vector>

#include "udc/data_io.hpp"
#include "udc/finetune.hpp"
#include "udc/schedule.hpp"
#include "udc/search_space.hpp"
#include "udc/size_model.hpp"

namespace udc {

struct LayerTemplate {
  std::string name;
  std::string type;  // conv | dense
  int64_t out_channels = 0;
  int stride = 1;
  std::vector<std::string> ops;  // conv operators (conv3x3|conv5x5|conv1x1|identity)
  std::vector<double> widths{1.0};
  std::vector<double> sparsities{1.0};
  std::vector<double> bitwidths{8.0};
  std::string dense_input = "gap";  // gap | flatten
};

struct KappaSpec {
  int width = 0;  // 0 means all options (K)
  int sparsity = 2;
  int bitwidth = 2;
  int oper = 2;
};

/// Parsed, validated search configuration. The JSON document has one
/// object per section (dataset, search_space, constraint, search,
/// finetune); environment variables UDC_<SECTION>_<KEY> override
/// scalar keys.
struct SearchConfig {
  DatasetSpec dataset;
  Shape input_shape;
  std::vector<LayerTemplate> layers;

  CostKind cost = CostKind::compressed_bits;
  double e_star = 0.0;  // bits (or MACs in mac_count mode)
  double tolerance = 0.02;

  int warmup_epochs = 2;
  int search_epochs = 8;
  int batch_size = 32;
  int mc_samples = 4;
  int rejection_samples = 8;
  double lambda = 1.0;
  KappaSpec kappa;
  Schedule tau{ScheduleKind::exponential, 0.66, 0.1, 1};
  Schedule xi{ScheduleKind::linear, 0.1, 1.0, 1};
  Schedule theta_mix{ScheduleKind::linear, 0.0, 0.5, 1};
  Schedule lr_theta{ScheduleKind::cosine, 0.05, 1e-4, 1};
  Schedule lr_pi = Schedule::constant(1e-3);

  FinetunePlan plan;

  uint64_t seed = 7;
  std::string output_dir = "runs/out";

  std::string raw_json;  // effective config after env overrides
  std::string hash;      // fnv1a of raw_json
};

SearchConfig parse_search_config(const std::string& json_text);
SearchConfig load_search_config(const std::string& path);

/// Builds the supernet described by the config: full-width tensors,
/// He-normal init, per-bitwidth ranges initialized to max|theta|,
/// uniform logits, mask banks refreshed once.
SearchNet build_search_net(const SearchConfig& cfg, uint64_t seed);

}  // namespace udc
