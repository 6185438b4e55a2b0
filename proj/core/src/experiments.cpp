#include "udc/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "udc/error.hpp"

namespace udc {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------ run drivers

int64_t steps_per_epoch(const SearchConfig& cfg, int64_t train_size) {
  int64_t bs = std::min<int64_t>(cfg.batch_size, train_size);
  return std::max<int64_t>(1, train_size / bs);
}

RunSearchResult run_search(SearchNet& net, const NetCostModel& cost, const SearchConfig& cfg, const TrainData& train,
                           uint64_t seed, const std::function<void(const StepMetrics&)>& sink, SearchEngine* engine) {
  SearchOptions opts;
  opts.mc_samples = cfg.mc_samples;
  opts.rejection_samples = cfg.rejection_samples;
  opts.lambda = cfg.lambda;
  opts.e_star = cfg.e_star;
  opts.batch_size = cfg.batch_size;

  std::optional<SearchEngine> local;
  if (engine == nullptr) {
    local.emplace(net, cost, opts, seed);
    engine = &*local;
  }

  int64_t spe = steps_per_epoch(cfg, train.size());
  // multi-sample budget: nominal optimizer steps divided by S
  int64_t warmup_steps = std::max<int64_t>(1, cfg.warmup_epochs * spe / cfg.mc_samples);
  int64_t search_steps = std::max<int64_t>(1, cfg.search_epochs * spe / cfg.mc_samples);
  if (cfg.warmup_epochs <= 0) warmup_steps = 0;

  RunSearchResult result;
  result.warmup_steps = warmup_steps;
  result.search_steps = search_steps;

  if (warmup_steps > 0) {
    PhaseSchedules ws;
    ws.tau = cfg.tau;
    ws.tau.total_steps = warmup_steps;
    ws.xi = Schedule::constant(1.0);  // vacuous bound while pi is frozen uniform
    ws.theta_mix = Schedule::constant(0.0);
    ws.lr_theta = cfg.lr_theta;
    ws.lr_theta.total_steps = warmup_steps;
    ws.lr_pi = Schedule::constant(0.0);
    auto h = engine->run_phase(train, ws, warmup_steps, /*train_pi=*/false, sink);
    result.history.insert(result.history.end(), h.begin(), h.end());
  }

  PhaseSchedules ss;
  ss.tau = cfg.tau;
  ss.tau.total_steps = search_steps;
  ss.xi = cfg.xi;
  ss.xi.total_steps = search_steps;
  ss.theta_mix = cfg.theta_mix;
  ss.theta_mix.total_steps = search_steps;
  ss.lr_theta = cfg.lr_theta;
  ss.lr_theta.total_steps = search_steps;
  ss.lr_pi = cfg.lr_pi;
  ss.lr_pi.total_steps = search_steps;
  auto h = engine->run_phase(train, ss, search_steps, /*train_pi=*/true, sink);
  result.history.insert(result.history.end(), h.begin(), h.end());

  result.argmax = extract_argmax_config(net);
  result.e_soft = cost.config_cost(result.argmax, false);
  result.e_integer = cost.config_cost(result.argmax, true);
  return result;
}

// ----------------------------------------------------------- checkpoints

Checkpoint search_checkpoint(SearchEngine& engine, const std::string& config_hash) {
  Checkpoint ck;
  ck.config_hash = config_hash;
  SearchNet& net = engine.net();
  std::vector<Tensor*> thetas = engine.theta_params();
  std::vector<std::string> tnames = engine.theta_param_names();
  for (size_t i = 0; i < thetas.size(); ++i) ck.tensors.emplace_back(tnames[i], *thetas[i]);
  std::vector<Tensor*> pis = engine.pi_params();
  std::vector<std::string> pnames = engine.pi_param_names();
  for (size_t i = 0; i < pis.size(); ++i) ck.tensors.emplace_back(pnames[i], *pis[i]);
  for (auto& layer : net.layers) {
    for (auto& cand : layer.candidates) {
      if (cand.kind == OperatorKind::identity) continue;
      std::string base = layer.name + "/" + to_string(cand.kind);
      for (size_t k = 0; k < cand.mask_bank.size(); ++k) {
        ck.tensors.emplace_back(base + "/mask" + std::to_string(k), cand.mask_bank[k]);
      }
      ck.tensors.emplace_back(base + "/beta", Tensor::scalar(cand.quant.beta));
    }
  }
  auto st = engine.state();
  for (auto& [name, t] : st.tensors) ck.tensors.emplace_back(name, *t);
  for (auto& [name, c] : st.counters) ck.words.emplace_back(name, std::vector<uint64_t>{*c});
  for (auto& [name, s] : st.streams) {
    auto a = s->state();
    ck.words.emplace_back(name, std::vector<uint64_t>(a.begin(), a.end()));
  }
  return ck;
}

namespace {
void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (!same_shape(dst.shape(), src.shape())) {
    throw IoError("checkpoint: shape mismatch for '" + name + "': " + shape_to_string(src.shape()) + " vs expected " +
                  shape_to_string(dst.shape()));
  }
  std::copy(src.values().begin(), src.values().end(), dst.values().begin());
}
}  // namespace

void restore_search_checkpoint(SearchEngine& engine, const Checkpoint& ck) {
  SearchNet& net = engine.net();
  auto need_tensor = [&](const std::string& name) -> const Tensor& {
    const Tensor* t = ck.find_tensor(name);
    if (!t) throw IoError("checkpoint: missing tensor '" + name + "'");
    return *t;
  };
  std::vector<Tensor*> thetas = engine.theta_params();
  std::vector<std::string> tnames = engine.theta_param_names();
  for (size_t i = 0; i < thetas.size(); ++i) copy_into(*thetas[i], need_tensor(tnames[i]), tnames[i]);
  std::vector<Tensor*> pis = engine.pi_params();
  std::vector<std::string> pnames = engine.pi_param_names();
  for (size_t i = 0; i < pis.size(); ++i) copy_into(*pis[i], need_tensor(pnames[i]), pnames[i]);
  for (auto& layer : net.layers) {
    for (auto& cand : layer.candidates) {
      if (cand.kind == OperatorKind::identity) continue;
      std::string base = layer.name + "/" + to_string(cand.kind);
      for (size_t k = 0; k < cand.mask_bank.size(); ++k) {
        copy_into(cand.mask_bank[k], need_tensor(base + "/mask" + std::to_string(k)), base + "/mask");
      }
      cand.quant.beta = need_tensor(base + "/beta").item();
    }
  }
  auto st = engine.state();
  for (auto& [name, t] : st.tensors) copy_into(*t, need_tensor(name), name);
  for (auto& [name, c] : st.counters) {
    const std::vector<uint64_t>* w = ck.find_words(name);
    if (!w || w->size() != 1) throw IoError("checkpoint: missing counter '" + name + "'");
    *c = (*w)[0];
  }
  for (auto& [name, s] : st.streams) {
    const std::vector<uint64_t>* w = ck.find_words(name);
    if (!w || w->size() != 3) throw IoError("checkpoint: missing rng stream '" + name + "'");
    *s = Philox::from_state({(*w)[0], (*w)[1], (*w)[2]});
  }
}

Checkpoint concrete_to_checkpoint(const ConcreteNetwork& net, const std::string& config_hash) {
  Checkpoint ck;
  ck.config_hash = config_hash;
  std::vector<uint64_t> meta;
  meta.push_back(static_cast<uint64_t>(net.layers.size()));
  meta.push_back(static_cast<uint64_t>(net.num_classes));
  meta.push_back(net.regression ? 1 : 0);
  meta.push_back(net.format == QuantFormat::qhat ? 1 : 0);
  meta.push_back(static_cast<uint64_t>(net.input_shape.size()));
  for (int64_t d : net.input_shape) meta.push_back(static_cast<uint64_t>(d));
  ck.words.emplace_back("net/meta", std::move(meta));
  for (size_t li = 0; li < net.layers.size(); ++li) {
    const ConcreteLayer& l = net.layers[li];
    std::string base = "layer" + std::to_string(li);
    ck.words.emplace_back(base + "/meta",
                          std::vector<uint64_t>{static_cast<uint64_t>(l.op), static_cast<uint64_t>(l.reduce),
                                                static_cast<uint64_t>(l.stride), static_cast<uint64_t>(l.in_features),
                                                static_cast<uint64_t>(l.out_features), static_cast<uint64_t>(l.bits)});
    ck.tensors.emplace_back(base + "/scalars",
                            Tensor({2}, {l.beta, l.sparsity_target}));
    if (l.has_weights()) {
      ck.tensors.emplace_back(base + "/theta", l.theta);
      ck.tensors.emplace_back(base + "/bias", l.bias);
      ck.tensors.emplace_back(base + "/mask", l.mask);
      ck.tensors.emplace_back(base + "/range", l.range);
    }
  }
  return ck;
}

ConcreteNetwork checkpoint_to_concrete(const Checkpoint& ck) {
  const std::vector<uint64_t>* meta = ck.find_words("net/meta");
  if (!meta || meta->size() < 5) throw IoError("checkpoint: missing net/meta");
  ConcreteNetwork net;
  size_t nl = static_cast<size_t>((*meta)[0]);
  net.num_classes = static_cast<int>((*meta)[1]);
  net.regression = (*meta)[2] != 0;
  net.format = (*meta)[3] != 0 ? QuantFormat::qhat : QuantFormat::q;
  size_t ndim = static_cast<size_t>((*meta)[4]);
  for (size_t i = 0; i < ndim; ++i) net.input_shape.push_back(static_cast<int64_t>((*meta)[5 + i]));
  for (size_t li = 0; li < nl; ++li) {
    std::string base = "layer" + std::to_string(li);
    const std::vector<uint64_t>* lm = ck.find_words(base + "/meta");
    if (!lm || lm->size() != 6) throw IoError("checkpoint: missing " + base + "/meta");
    ConcreteLayer l;
    l.name = base;
    l.op = static_cast<OperatorKind>((*lm)[0]);
    l.reduce = static_cast<ConcreteLayer::InputReduce>((*lm)[1]);
    l.stride = static_cast<int>((*lm)[2]);
    l.in_features = static_cast<int64_t>((*lm)[3]);
    l.out_features = static_cast<int64_t>((*lm)[4]);
    l.bits = static_cast<int>((*lm)[5]);
    const Tensor* sc = ck.find_tensor(base + "/scalars");
    if (!sc || sc->numel() != 2) throw IoError("checkpoint: missing " + base + "/scalars");
    l.beta = (*sc)[0];
    l.sparsity_target = (*sc)[1];
    if (l.op != OperatorKind::identity) {
      const Tensor* th = ck.find_tensor(base + "/theta");
      const Tensor* bi = ck.find_tensor(base + "/bias");
      const Tensor* ma = ck.find_tensor(base + "/mask");
      const Tensor* ra = ck.find_tensor(base + "/range");
      if (!th || !bi || !ma || !ra) throw IoError("checkpoint: missing tensors for " + base);
      l.theta = *th;
      l.bias = *bi;
      l.mask = *ma;
      l.range = *ra;
    } else {
      l.range = Tensor::scalar(1.0);
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

// ------------------------------------------------------------- artifacts

void write_argmax_config(const std::string& path, const SearchNet& net, const RunSearchResult& result,
                         const SearchConfig& cfg) {
  json j;
  j["e_star"] = cfg.e_star;
  j["e_soft"] = result.e_soft;
  j["e_integer"] = result.e_integer;
  j["cost"] = cfg.cost == CostKind::compressed_bits ? "compressed_bits" : "mac_count";
  json layers = json::array();
  for (size_t li = 0; li < net.layers.size(); ++li) {
    const SearchLayer& l = net.layers[li];
    const LayerChoice& c = result.argmax[li];
    json jl;
    jl["name"] = l.name;
    jl["width_index"] = c.width_index;
    jl["sparsity_index"] = c.sparsity_index;
    jl["bitwidth_index"] = c.bitwidth_index;
    jl["operator_index"] = c.oper_index;
    jl["width"] = l.width.values[static_cast<size_t>(c.width_index)];
    jl["sparsity"] = l.sparsity.values[static_cast<size_t>(c.sparsity_index)];
    jl["bitwidth"] = l.bitwidth.values[static_cast<size_t>(c.bitwidth_index)];
    jl["operator"] = to_string(l.oper.ops[static_cast<size_t>(c.oper_index)]);
    layers.push_back(jl);
  }
  j["layers"] = layers;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << j.dump(2) << "\n";
}

std::vector<LayerChoice> read_argmax_config(const std::string& path, size_t expected_layers) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open argmax config '" + path + "'");
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw IoError("'" + path + "' is not valid JSON");
  std::vector<LayerChoice> out;
  for (const json& jl : j.at("layers")) {
    LayerChoice c;
    c.width_index = jl.at("width_index").get<int>();
    c.sparsity_index = jl.at("sparsity_index").get<int>();
    c.bitwidth_index = jl.at("bitwidth_index").get<int>();
    c.oper_index = jl.at("operator_index").get<int>();
    out.push_back(c);
  }
  if (expected_layers != 0 && out.size() != expected_layers) {
    throw IoError("'" + path + "' describes " + std::to_string(out.size()) + " layers, expected " +
                  std::to_string(expected_layers));
  }
  return out;
}

// ------------------------------------------------------------ CLI drivers

SearchConfig resolve_config(const std::string& path, const CliOverrides& o) {
  SearchConfig cfg = load_search_config(path);
  if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
  if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
  if (o.tolerance >= 0) cfg.tolerance = o.tolerance;
  return cfg;
}

namespace {

void validate_head(const SearchConfig& cfg, const Dataset& ds) {
  if (ds.regression) return;
  int64_t out = cfg.layers.back().out_channels;
  if (out != ds.num_classes) {
    throw ConfigError("config: last layer out=" + std::to_string(out) + " but dataset has " +
                      std::to_string(ds.num_classes) + " classes");
  }
}

std::vector<std::string> search_csv_columns(const SearchNet& net) {
  std::vector<std::string> cols = {"step",      "l_task", "l_e",         "e_argmax_bits",  "tau",
                                   "xi",        "theta_mix", "accept_rate", "mean_pi_entropy"};
  for (const auto& layer : net.layers) {
    for (const char* d : {"width", "sparsity", "bitwidth", "operator"}) {
      cols.push_back("maxpi_" + layer.name + "_" + d);
    }
  }
  return cols;
}

std::vector<double> search_csv_row(const StepMetrics& m) {
  std::vector<double> row = {static_cast<double>(m.step), m.l_task, m.l_e,         m.e_argmax,       m.tau,
                             m.xi,                        m.theta_mix, m.accept_rate, m.mean_pi_entropy};
  row.insert(row.end(), m.max_pi.begin(), m.max_pi.end());
  return row;
}

}  // namespace

int cmd_search(const SearchConfig& cfg, bool dry_run) {
  Dataset ds = load_dataset(cfg.dataset);
  validate_head(cfg, ds);
  SearchNet net = build_search_net(cfg, cfg.seed);
  NetCostModel cost = build_cost_model(net, cfg.cost, cfg.input_shape);

  uint64_t nconfigs = cost.num_configs();
  auto [min_e, max_e] = cost.cost_bounds();
  if (dry_run) {
    std::cout << "configurations: " << nconfigs << "\n";
    std::cout << "min achievable E: " << format_double(min_e) << " bits\n";
    std::cout << "max achievable E: " << format_double(max_e) << " bits\n";
    std::cout << "e*: " << format_double(cfg.e_star) << " bits\n";
    std::cout << "e* feasible band: [" << format_double(cfg.e_star * (1 - cfg.tolerance)) << ", "
              << format_double(cfg.e_star * (1 + cfg.tolerance)) << "]\n";
    return 0;
  }
  if (min_e > cfg.e_star * (1.0 + cfg.tolerance)) {
    std::cerr << "e* = " << format_double(cfg.e_star) << " bits is infeasible: the minimal achievable "
              << "configuration costs " << format_double(min_e) << " bits (floor of the search space)\n";
    return 2;
  }

  fs::create_directories(cfg.output_dir);
  MetricsWriter metrics(cfg.output_dir + "/search_metrics.csv", search_csv_columns(net));

  SearchOptions opts;
  opts.mc_samples = cfg.mc_samples;
  opts.rejection_samples = cfg.rejection_samples;
  opts.lambda = cfg.lambda;
  opts.e_star = cfg.e_star;
  opts.batch_size = cfg.batch_size;
  SearchEngine engine(net, cost, opts, cfg.seed);

  TrainData train = ds.train_view();
  RunSearchResult result =
      run_search(net, cost, cfg, train, cfg.seed, [&](const StepMetrics& m) { metrics.row(search_csv_row(m)); },
                 &engine);

  write_argmax_config(cfg.output_dir + "/argmax_config.json", net, result, cfg);
  save_checkpoint(cfg.output_dir + "/search_state.ckpt", search_checkpoint(engine, cfg.hash));

  double rel = std::fabs(result.e_soft - cfg.e_star) / cfg.e_star;
  json rep;
  rep["e_star"] = cfg.e_star;
  rep["e_soft"] = result.e_soft;
  rep["e_integer"] = result.e_integer;
  rep["relative_gap"] = rel;
  rep["tolerance"] = cfg.tolerance;
  rep["within_tolerance"] = rel <= cfg.tolerance;
  rep["under_target"] = result.e_soft <= cfg.e_star;  // P2 "do not exceed" flag
  rep["steps"] = result.warmup_steps + result.search_steps;
  {
    std::ofstream f(cfg.output_dir + "/search_report.json");
    f << rep.dump(2) << "\n";
  }
  std::cout << "argmax E = " << format_double(result.e_soft) << " bits (integer-count "
            << format_double(result.e_integer) << "), e* = " << format_double(cfg.e_star) << ", gap "
            << format_double(rel * 100) << "%\n";
  if (rel > cfg.tolerance) {
    std::cerr << "constraint NOT met within tolerance " << cfg.tolerance << "\n";
    return 3;
  }
  return 0;
}

int cmd_finetune(const SearchConfig& cfg) {
  Dataset ds = load_dataset(cfg.dataset);
  validate_head(cfg, ds);
  SearchNet net = build_search_net(cfg, derive_seed(cfg.seed, 1000));  // stage 1 re-initializes theta
  std::vector<LayerChoice> choice =
      read_argmax_config(cfg.output_dir + "/argmax_config.json", net.layers.size());
  ConcreteNetwork concrete = extract_concrete(net, choice);
  concrete.format = cfg.plan.format;

  fs::create_directories(cfg.output_dir);
  MetricsWriter metrics(cfg.output_dir + "/finetune_metrics.csv",
                        {"epoch", "stage", "loss", "eval_metric", "sparsity_target", "weight_sq_norm", "alpha"});
  FinetuneResult res = run_finetune(concrete, cfg.plan, ds.train_view(), ds.test_view(), cfg.seed,
                                    [&](const EpochMetrics& m) {
                                      metrics.row(std::vector<double>{static_cast<double>(m.epoch),
                                                                      static_cast<double>(m.stage), m.train_loss,
                                                                      m.eval_metric, m.sparsity_target,
                                                                      m.weight_sq_norm, m.alpha});
                                    });

  save_checkpoint(cfg.output_dir + "/model.ckpt", concrete_to_checkpoint(concrete, cfg.hash));
  ConcreteNetwork deployed = concrete;
  deploy_quantize(deployed, cfg.plan.deploy_bits);
  save_checkpoint(cfg.output_dir + "/deployed.ckpt", concrete_to_checkpoint(deployed, cfg.hash));
  double deployed_eval = deployed.evaluate(ds.test_view());

  json rep;
  rep["final_eval"] = res.final_eval;
  rep["deployed_eval"] = deployed_eval;
  rep["deploy_drop"] = res.final_eval - deployed_eval;
  rep["norm_after_stage1"] = res.norm_after_stage1;
  rep["norm_after_stage3"] = res.norm_after_stage3;
  rep["storage_bits"] = deployed.storage_bits();
  rep["e_star"] = cfg.e_star;
  rep["format"] = to_string(cfg.plan.format);
  {
    std::ofstream f(cfg.output_dir + "/finetune_report.json");
    f << rep.dump(2) << "\n";
  }
  std::cout << "finetune done: eval " << format_double(res.final_eval) << ", deployed eval "
            << format_double(deployed_eval) << "\n";
  return 0;
}

namespace {

void write_size_report(const SizeReport& rep, const std::string& csv_path, std::ostream& text) {
  {
    std::ofstream f(csv_path);
    f << "layer,elements,nnz,bits,original_bits,predicted_bits,arith_bits,rle_gr_bits,chosen_bits,bias_bits,header_"
         "bits\n";
    for (const auto& r : rep.layers) {
      f << r.name << ',' << r.elements << ',' << r.nnz << ',' << r.bits << ',' << format_double(r.original_bits)
        << ',' << format_double(r.predicted_bits) << ',' << format_double(r.arith_bits) << ','
        << format_double(r.rle_gr_bits) << ',' << format_double(r.chosen_bits) << ',' << format_double(r.bias_bits)
        << ',' << format_double(r.header_bits) << '\n';
    }
    f << "total,,,," << format_double(rep.total_original) << ',' << format_double(rep.total_predicted) << ','
      << format_double(rep.total_arith) << ',' << format_double(rep.total_rle_gr) << ','
      << format_double(rep.total_chosen) << ',' << format_double(rep.total_bias) << ','
      << format_double(rep.total_header) << '\n';
  }
  auto mb = [](double bits) { return bits / 8.0 / 1024.0 / 1024.0; };
  text << "layer            original(b)   predicted(b)       arith(b)      rle+gr(b)      chosen(b)\n";
  for (const auto& r : rep.layers) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-16s %12.0f %14.1f %14.0f %14.0f %14.0f\n", r.name.c_str(), r.original_bits,
                  r.predicted_bits, r.arith_bits, r.rle_gr_bits, r.chosen_bits);
    text << buf;
  }
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "total weights:   original %.6f MB, predicted %.6f MB, arith %.6f MB, rle+gr %.6f MB, chosen %.6f "
                "MB (ratio %.2fx)\n",
                mb(rep.total_original), mb(rep.total_predicted), mb(rep.total_arith), mb(rep.total_rle_gr),
                mb(rep.total_chosen), rep.total_chosen > 0 ? rep.total_original / rep.total_chosen : 0.0);
  text << buf;
  std::snprintf(buf, sizeof buf, "bias: %.0f bits, headers: %.0f bits (itemized separately)\n", rep.total_bias,
                rep.total_header);
  text << buf;
}

}  // namespace

int cmd_compress(const std::string& model_ckpt, const std::string& out_dir) {
  ConcreteNetwork net = checkpoint_to_concrete(load_checkpoint(model_ckpt));
  fs::create_directories(out_dir);
  SizeReport rep;
  std::vector<uint8_t> bytes = compress_network(net, &rep);
  write_file_bytes(out_dir + "/model.udcnet", bytes);
  std::ostringstream text;
  write_size_report(rep, out_dir + "/size_report.csv", text);
  {
    std::ofstream f(out_dir + "/size_report.txt");
    f << text.str();
  }
  std::cout << text.str();
  std::cout << "container: " << out_dir << "/model.udcnet (" << bytes.size() << " bytes)\n";
  return 0;
}

int cmd_decompress(const std::string& container_path, const std::string& out_ckpt) {
  std::vector<uint8_t> bytes = read_file_bytes(container_path);
  ConcreteNetwork net = decompress_network(bytes);
  save_checkpoint(out_ckpt, concrete_to_checkpoint(net, ""));
  std::cout << "decompressed " << container_path << " -> " << out_ckpt << "\n";
  return 0;
}

int cmd_verify(const std::string& container_path, const std::string& out_dir) {
  std::vector<uint8_t> bytes = read_file_bytes(container_path);
  ConcreteNetwork net = decompress_network(bytes);
  SizeReport rep;
  std::vector<uint8_t> bytes2 = compress_network(net, &rep);
  ConcreteNetwork net2 = decompress_network(bytes2);
  // integrity: decode-encode-decode must be the identity on weights
  bool ok = net.layers.size() == net2.layers.size();
  for (size_t i = 0; ok && i < net.layers.size(); ++i) {
    const Tensor& a = net.layers[i].theta;
    const Tensor& b = net2.layers[i].theta;
    ok = same_shape(a.shape(), b.shape());
    for (int64_t j = 0; ok && j < a.numel(); ++j) ok = a[j] == b[j];
  }
  std::ostringstream text;
  write_size_report(rep, out_dir.empty() ? "size_report.csv" : out_dir + "/size_report.csv", text);
  std::cout << text.str();
  std::cout << "round-trip integrity: " << (ok ? "OK" : "FAILED") << "\n";
  return ok ? 0 : 4;
}

int cmd_random_search(const SearchConfig& cfg, int trials, int jobs) {
  if (trials < 1) throw ConfigError("random-search: trials must be >= 1");
  Dataset ds = load_dataset(cfg.dataset);
  validate_head(cfg, ds);
  SearchNet proto = build_search_net(cfg, cfg.seed);
  NetCostModel cost = build_cost_model(proto, cfg.cost, cfg.input_shape);

  struct Trial {
    std::vector<LayerChoice> config;
    double e_soft = 0, e_integer = 0, eval = 0;
  };
  std::vector<Trial> results(static_cast<size_t>(trials));

  // feasible uniform samples: E <= e*
  for (int t = 0; t < trials; ++t) {
    Philox rng(derive_seed(cfg.seed, 9000 + static_cast<uint64_t>(t)), 3);
    bool found = false;
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::vector<LayerChoice> c;
      for (const auto& layer : proto.layers) {
        LayerChoice lc;
        lc.width_index = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(layer.width.num_options())));
        lc.sparsity_index = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(layer.sparsity.num_options())));
        lc.bitwidth_index = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(layer.bitwidth.num_options())));
        lc.oper_index = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(layer.oper.num_options())));
        c.push_back(lc);
      }
      double e = cost.config_cost(c, false);
      if (e <= cfg.e_star) {
        results[static_cast<size_t>(t)].config = c;
        results[static_cast<size_t>(t)].e_soft = e;
        results[static_cast<size_t>(t)].e_integer = cost.config_cost(c, true);
        found = true;
        break;
      }
    }
    if (!found) {
      std::cerr << "random-search: no feasible configuration found for trial " << t << " (e* too small?)\n";
      return 2;
    }
  }

  TrainData train = ds.train_view();
  TrainData test = ds.test_view();
  auto run_trial = [&](int t) {
    SearchNet net = build_search_net(cfg, derive_seed(cfg.seed, 100 + static_cast<uint64_t>(t)));
    ConcreteNetwork concrete = extract_concrete(net, results[static_cast<size_t>(t)].config);
    concrete.format = cfg.plan.format;
    FinetuneResult r =
        run_finetune(concrete, cfg.plan, train, test, derive_seed(cfg.seed, 200 + static_cast<uint64_t>(t)));
    results[static_cast<size_t>(t)].eval = r.final_eval;
  };
  if (jobs <= 1) {
    for (int t = 0; t < trials; ++t) run_trial(t);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int j = 0; j < jobs; ++j) {
      pool.emplace_back([&]() {
        for (int t = next.fetch_add(1); t < trials; t = next.fetch_add(1)) run_trial(t);
      });
    }
    for (auto& th : pool) th.join();
  }

  fs::create_directories(cfg.output_dir);
  {
    MetricsWriter w(cfg.output_dir + "/random_search.csv", {"trial", "e_soft_bits", "e_integer_bits", "eval_metric"});
    for (int t = 0; t < trials; ++t) {
      w.row(std::vector<double>{static_cast<double>(t), results[static_cast<size_t>(t)].e_soft,
                                results[static_cast<size_t>(t)].e_integer, results[static_cast<size_t>(t)].eval});
    }
  }
  // best-so-far envelope averaged over 100 order permutations
  {
    const int kPerms = 100;
    std::vector<double> envelope(static_cast<size_t>(trials), 0.0);
    Philox prng(derive_seed(cfg.seed, 777), 4);
    std::vector<int> order(static_cast<size_t>(trials));
    for (int p = 0; p < kPerms; ++p) {
      std::iota(order.begin(), order.end(), 0);
      for (int i = trials - 1; i > 0; --i) {
        int j = static_cast<int>(prng.uniform_index(static_cast<uint64_t>(i + 1)));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
      }
      double best = -1e300;
      for (int i = 0; i < trials; ++i) {
        best = std::max(best, results[static_cast<size_t>(order[static_cast<size_t>(i)])].eval);
        envelope[static_cast<size_t>(i)] += best;
      }
    }
    MetricsWriter w(cfg.output_dir + "/random_search_envelope.csv", {"trials", "mean_best_eval"});
    for (int i = 0; i < trials; ++i) {
      w.row(std::vector<double>{static_cast<double>(i + 1), envelope[static_cast<size_t>(i)] / kPerms});
    }
  }
  std::cout << "random-search: " << trials << " feasible configs trained, results in " << cfg.output_dir << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream scatter(out_dir + "/scatter.csv");
  scatter << "run,source,size_bits,eval_metric\n";
  std::ofstream envelope(out_dir + "/envelope.csv");
  envelope << "run,trials,mean_best_eval\n";
  std::ostringstream summary;
  for (const std::string& dir : run_dirs) {
    std::string ft = dir + "/finetune_report.json";
    if (fs::exists(ft)) {
      std::ifstream f(ft);
      json j = json::parse(f, nullptr, false);
      if (!j.is_discarded()) {
        scatter << dir << ",udc," << format_double(j.value("storage_bits", 0.0)) << ','
                << format_double(j.value("deployed_eval", 0.0)) << '\n';
        summary << dir << ": udc eval " << j.value("deployed_eval", 0.0) << " at " << j.value("storage_bits", 0.0)
                << " bits\n";
      }
    }
    std::string rs = dir + "/random_search.csv";
    if (fs::exists(rs)) {
      std::ifstream f(rs);
      std::string line;
      std::getline(f, line);  // header
      while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string trial, e_soft, e_int, eval;
        std::getline(ss, trial, ',');
        std::getline(ss, e_soft, ',');
        std::getline(ss, e_int, ',');
        std::getline(ss, eval, ',');
        scatter << dir << ",random," << e_int << ',' << eval << '\n';
      }
    }
    std::string env = dir + "/random_search_envelope.csv";
    if (fs::exists(env)) {
      std::ifstream f(env);
      std::string line;
      std::getline(f, line);
      while (std::getline(f, line)) envelope << dir << ',' << line << '\n';
    }
  }
  std::ofstream sf(out_dir + "/summary.txt");
  sf << summary.str();
  std::cout << "report written to " << out_dir << "\n";
  return 0;
}

}  // namespace udc
