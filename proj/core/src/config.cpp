#include "udc/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "udc/error.hpp"

namespace udc {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw ConfigError("config: " + path + ": " + msg);
}

json get_object(const json& j, const std::string& key, bool required) {
  if (!j.contains(key)) {
    if (required) fail(key, "missing section");
    return json::object();
  }
  if (!j.at(key).is_object()) fail(key, "expected an object");
  return j.at(key);
}

template <typename T>
T get_or(const json& sec, const std::string& section, const std::string& key, T fallback) {
  if (!sec.contains(key)) return fallback;
  try {
    return sec.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(section + "." + key, e.what());
  }
}

template <typename T>
T get_required(const json& sec, const std::string& section, const std::string& key) {
  if (!sec.contains(key)) fail(section + "." + key, "missing required key");
  try {
    return sec.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(section + "." + key, e.what());
  }
}

Schedule get_schedule(const json& sec, const std::string& section, const std::string& key, Schedule fallback) {
  if (!sec.contains(key)) return fallback;
  const json& s = sec.at(key);
  if (!s.is_object()) fail(section + "." + key, "schedule must be an object {kind,start,end}");
  Schedule out;
  out.kind = schedule_kind_from_string(get_required<std::string>(s, section + "." + key, "kind"));
  out.start = get_required<double>(s, section + "." + key, "start");
  out.end = get_or<double>(s, section + "." + key, "end", out.start);
  out.total_steps = 1;  // filled in by the run driver
  return out;
}

Shape get_shape(const json& sec, const std::string& section, const std::string& key) {
  auto v = get_required<std::vector<int64_t>>(sec, section, key);
  return Shape(v.begin(), v.end());
}

// UDC_<SECTION>_<KEY> environment overrides for scalar keys
void apply_env_overrides(json& root) {
  for (auto& [section, body] : root.items()) {
    if (!body.is_object()) continue;
    for (auto& [key, value] : body.items()) {
      if (value.is_object() || value.is_array()) continue;
      std::string env_name = "UDC_" + section + "_" + key;
      std::transform(env_name.begin(), env_name.end(), env_name.begin(),
                     [](unsigned char c) { return std::toupper(c); });
      const char* env = std::getenv(env_name.c_str());
      if (!env) continue;
      json parsed = json::parse(env, nullptr, false);
      value = parsed.is_discarded() ? json(std::string(env)) : parsed;
    }
  }
}

}  // namespace

SearchConfig parse_search_config(const std::string& json_text) {
  json root = json::parse(json_text, nullptr, false);
  if (root.is_discarded()) throw ConfigError("config: not valid JSON");
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  apply_env_overrides(root);

  SearchConfig cfg;
  cfg.raw_json = root.dump(2);
  cfg.hash = fnv1a_hex(cfg.raw_json);

  // dataset
  json ds = get_object(root, "dataset", true);
  cfg.dataset.source = get_required<std::string>(ds, "dataset", "source");
  cfg.dataset.classes = get_or<int>(ds, "dataset", "classes", cfg.dataset.classes);
  if (ds.contains("shape")) cfg.dataset.shape = get_shape(ds, "dataset", "shape");
  cfg.dataset.train_n = get_or<int64_t>(ds, "dataset", "train_n", cfg.dataset.train_n);
  cfg.dataset.test_n = get_or<int64_t>(ds, "dataset", "test_n", cfg.dataset.test_n);
  cfg.dataset.noise = get_or<double>(ds, "dataset", "noise", cfg.dataset.noise);
  cfg.dataset.seed = get_or<uint64_t>(ds, "dataset", "seed", cfg.dataset.seed);
  cfg.dataset.normalize = get_or<bool>(ds, "dataset", "normalize", true);
  cfg.dataset.sr_size = get_or<int>(ds, "dataset", "sr_size", cfg.dataset.sr_size);
  cfg.dataset.sr_factor = get_or<int>(ds, "dataset", "sr_factor", cfg.dataset.sr_factor);
  cfg.dataset.train_images = get_or<std::string>(ds, "dataset", "train_images", "");
  cfg.dataset.train_labels_file = get_or<std::string>(ds, "dataset", "train_labels", "");
  cfg.dataset.test_images = get_or<std::string>(ds, "dataset", "test_images", "");
  cfg.dataset.test_labels_file = get_or<std::string>(ds, "dataset", "test_labels", "");
  cfg.dataset.train_csv = get_or<std::string>(ds, "dataset", "train_csv", "");
  cfg.dataset.test_csv = get_or<std::string>(ds, "dataset", "test_csv", "");

  // search space
  json ss = get_object(root, "search_space", true);
  cfg.input_shape = get_shape(ss, "search_space", "input");
  if (!ss.contains("layers") || !ss.at("layers").is_array() || ss.at("layers").empty()) {
    fail("search_space.layers", "need a non-empty layer array");
  }
  int li = 0;
  for (const json& jl : ss.at("layers")) {
    std::string where = "search_space.layers[" + std::to_string(li) + "]";
    LayerTemplate t;
    t.name = get_or<std::string>(jl, where, "name", "layer" + std::to_string(li));
    t.type = get_required<std::string>(jl, where, "type");
    t.out_channels = get_required<int64_t>(jl, where, "out");
    t.stride = get_or<int>(jl, where, "stride", 1);
    if (t.type == "conv") {
      t.ops = get_or<std::vector<std::string>>(jl, where, "ops", {"conv3x3"});
    } else if (t.type == "dense") {
      t.ops = {"dense"};
      t.dense_input = get_or<std::string>(jl, where, "dense_input", "gap");
      if (t.dense_input != "gap" && t.dense_input != "flatten") fail(where + ".dense_input", "gap|flatten");
    } else {
      fail(where + ".type", "conv|dense");
    }
    if (t.ops.empty()) fail(where + ".ops", "option list must be nonempty");
    t.widths = get_or<std::vector<double>>(jl, where, "widths", {1.0});
    t.sparsities = get_or<std::vector<double>>(jl, where, "sparsities", {1.0});
    t.bitwidths = get_or<std::vector<double>>(jl, where, "bitwidths", {8.0});
    if (t.widths.empty() || t.sparsities.empty() || t.bitwidths.empty()) {
      fail(where, "option lists must be nonempty");
    }
    cfg.layers.push_back(std::move(t));
    ++li;
  }

  // constraint
  json cons = get_object(root, "constraint", true);
  bool has_bytes = cons.contains("size_bytes");
  bool has_mac = cons.contains("mac_budget");
  if (has_bytes == has_mac) fail("constraint", "exactly one of size_bytes|mac_budget required");
  if (has_bytes) {
    cfg.cost = CostKind::compressed_bits;
    cfg.e_star = get_required<double>(cons, "constraint", "size_bytes") * 8.0;
  } else {
    cfg.cost = CostKind::mac_count;
    cfg.e_star = get_required<double>(cons, "constraint", "mac_budget");
  }
  if (cfg.e_star <= 0.0) fail("constraint", "target must be positive");
  cfg.tolerance = get_or<double>(cons, "constraint", "tolerance", 0.02);

  // search
  json se = get_object(root, "search", false);
  cfg.warmup_epochs = get_or<int>(se, "search", "warmup_epochs", cfg.warmup_epochs);
  cfg.search_epochs = get_or<int>(se, "search", "epochs", cfg.search_epochs);
  cfg.batch_size = get_or<int>(se, "search", "batch_size", cfg.batch_size);
  cfg.mc_samples = get_or<int>(se, "search", "mc_samples", cfg.mc_samples);
  cfg.rejection_samples = get_or<int>(se, "search", "rejection_samples", cfg.rejection_samples);
  cfg.lambda = get_or<double>(se, "search", "lambda", cfg.lambda);
  if (se.contains("kappa")) {
    const json& jk = se.at("kappa");
    cfg.kappa.width = get_or<int>(jk, "search.kappa", "width", cfg.kappa.width);
    cfg.kappa.sparsity = get_or<int>(jk, "search.kappa", "sparsity", cfg.kappa.sparsity);
    cfg.kappa.bitwidth = get_or<int>(jk, "search.kappa", "bitwidth", cfg.kappa.bitwidth);
    cfg.kappa.oper = get_or<int>(jk, "search.kappa", "operator", cfg.kappa.oper);
  }
  cfg.tau = get_schedule(se, "search", "tau", cfg.tau);
  cfg.xi = get_schedule(se, "search", "xi", cfg.xi);
  cfg.theta_mix = get_schedule(se, "search", "theta_mix", cfg.theta_mix);
  cfg.lr_theta = get_schedule(se, "search", "lr_theta", cfg.lr_theta);
  cfg.lr_pi = get_schedule(se, "search", "lr_pi", cfg.lr_pi);

  // finetune
  json ft = get_object(root, "finetune", false);
  if (ft.contains("stage_epochs")) {
    auto v = get_required<std::vector<int>>(ft, "finetune", "stage_epochs");
    if (v.size() != 3) fail("finetune.stage_epochs", "need exactly three stage lengths");
    if (v[0] <= 0 || v[1] <= 0 || v[2] <= 0) fail("finetune.stage_epochs", "stage epochs must be positive");
    cfg.plan.stage1_epochs = v[0];
    cfg.plan.stage2_epochs = v[1];
    cfg.plan.stage3_epochs = v[2];
  }
  cfg.plan.batch_size = get_or<int>(ft, "finetune", "batch_size", cfg.batch_size);
  cfg.plan.format = quant_format_from_string(get_or<std::string>(ft, "finetune", "format", "qhat"));
  cfg.plan.deploy_bits = get_or<int>(ft, "finetune", "deploy_bits", 8);
  cfg.plan.weight_decay = get_or<double>(ft, "finetune", "weight_decay", 0.0);
  cfg.plan.momentum = get_or<double>(ft, "finetune", "momentum", 0.9);
  cfg.plan.alpha = get_schedule(ft, "finetune", "alpha", cfg.plan.alpha);
  cfg.plan.lr_stage1 = get_schedule(ft, "finetune", "lr_stage1", cfg.plan.lr_stage1);
  cfg.plan.lr_stage2 = get_schedule(ft, "finetune", "lr_stage2", cfg.plan.lr_stage2);
  cfg.plan.lr_stage3 = get_schedule(ft, "finetune", "lr_stage3", cfg.plan.lr_stage3);

  cfg.seed = root.contains("seed") ? root.at("seed").get<uint64_t>() : cfg.seed;
  cfg.output_dir = root.contains("output_dir") ? root.at("output_dir").get<std::string>() : cfg.output_dir;
  return cfg;
}

SearchConfig load_search_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_search_config(ss.str());
}

SearchNet build_search_net(const SearchConfig& cfg, uint64_t seed) {
  SearchNet net;
  net.input_shape = cfg.input_shape;
  net.regression = cfg.dataset.source == "sr_synth";
  net.num_classes = cfg.dataset.classes;

  Philox init_rng(derive_seed(seed, 5), 5);
  bool spatial = cfg.input_shape.size() == 3;
  int64_t cur_channels = cfg.input_shape.at(0);
  int64_t h = spatial ? cfg.input_shape[1] : 1;
  int64_t w = spatial ? cfg.input_shape[2] : 1;

  auto make_decision = [](DecisionKind kind, std::vector<double> values, std::vector<OperatorKind> ops, int kappa_spec) {
    DecisionVariable d;
    d.kind = kind;
    d.values = std::move(values);
    d.ops = std::move(ops);
    int k = d.num_options();
    d.logits = Tensor({k});
    d.kappa = kappa_spec <= 0 ? k : std::min(kappa_spec, k);
    d.validate();
    return d;
  };

  for (const LayerTemplate& t : cfg.layers) {
    SearchLayer layer;
    layer.name = t.name;
    layer.out_channels = t.out_channels;
    layer.stride = t.stride;

    std::vector<OperatorKind> ops;
    for (const std::string& s : t.ops) ops.push_back(operator_kind_from_string(s));

    if (t.type == "dense") {
      if (spatial) {
        layer.in_channels = t.dense_input == "flatten" ? cur_channels * h * w : cur_channels;
      } else {
        layer.in_channels = cur_channels;
      }
    } else {
      if (!spatial) throw ConfigError("config: conv layer '" + t.name + "' after the net went dense");
      layer.in_channels = cur_channels;
    }

    layer.width = make_decision(DecisionKind::width, t.widths, {}, cfg.kappa.width);
    layer.sparsity = make_decision(DecisionKind::sparsity, t.sparsities, {}, cfg.kappa.sparsity);
    layer.bitwidth = make_decision(DecisionKind::bitwidth, t.bitwidths, {}, cfg.kappa.bitwidth);
    layer.oper = make_decision(DecisionKind::oper, {}, ops, cfg.kappa.oper);

    for (double rho : t.widths) layer.width_masks.push_back(make_width_mask(rho, layer.out_channels));

    for (OperatorKind op : ops) {
      OperatorCandidate cand;
      cand.kind = op;
      if (op != OperatorKind::identity) {
        Shape ts = operator_theta_shape(op, layer.in_channels, layer.out_channels, layer.in_channels);
        cand.theta = Tensor(ts);
        int64_t fan_in = op == OperatorKind::dense ? ts[0] : ts[1] * ts[2] * ts[3];
        double stddev = std::sqrt(2.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
        for (int64_t i = 0; i < cand.theta.numel(); ++i) cand.theta[i] = stddev * init_rng.normal();
        cand.bias = Tensor({layer.out_channels});
        double r0 = std::max(cand.theta.max_abs(), 1e-3);
        cand.quant.ranges = Tensor::full({static_cast<int64_t>(t.bitwidths.size())}, r0);
        cand.quant.deploy_bits = cfg.plan.deploy_bits;
      }
      layer.candidates.push_back(std::move(cand));
    }
    layer.refresh_masks();
    layer.validate();
    net.layers.push_back(std::move(layer));

    if (t.type == "dense") {
      spatial = false;
      h = w = 1;
    } else {
      int ke = kernel_extent(ops[0]);
      for (OperatorKind op : ops) {
        if (op != OperatorKind::identity) {
          ke = kernel_extent(op);
          break;
        }
      }
      h = (h + 2 * (ke / 2) - ke) / t.stride + 1;
      w = (w + 2 * (ke / 2) - ke) / t.stride + 1;
    }
    cur_channels = t.out_channels;
  }
  net.validate();
  return net;
}

}  // namespace udc
