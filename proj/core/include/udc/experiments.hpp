#pragma once

#include <functional>
#include <string>
#include <vector>

#include "udc/codec.hpp"
#include "udc/config.hpp"
#include "udc/data_io.hpp"
#include "udc/dnas.hpp"
#include "udc/finetune.hpp"

namespace udc {

// ------------------------------------------------------------ run drivers

struct RunSearchResult {
  std::vector<LayerChoice> argmax;
  double e_soft = 0.0;     // differentiable-model cost of the argmax config
  double e_integer = 0.0;  // ceil-count (deployable) cost
  std::vector<StepMetrics> history;
  int64_t warmup_steps = 0;
  int64_t search_steps = 0;
};

/// Warmup (theta only, pi frozen uniform) followed by the full UDC
/// search phase. Totals honor the multi-sample budget: nominal steps
/// divided by S, each MC sample consuming its own minibatch.
RunSearchResult run_search(SearchNet& net, const NetCostModel& cost, const SearchConfig& cfg, const TrainData& train,
                           uint64_t seed, const std::function<void(const StepMetrics&)>& sink = {},
                           SearchEngine* engine = nullptr);

int64_t steps_per_epoch(const SearchConfig& cfg, int64_t train_size);

// ----------------------------------------------------------- checkpoints

/// Full search state: parameters, mask banks, betas, optimizer buffers,
/// rng streams, counters. Restoring into an identically-configured
/// engine/net replays the next step exactly.
Checkpoint search_checkpoint(SearchEngine& engine, const std::string& config_hash);
void restore_search_checkpoint(SearchEngine& engine, const Checkpoint& ckpt);

Checkpoint concrete_to_checkpoint(const ConcreteNetwork& net, const std::string& config_hash);
ConcreteNetwork checkpoint_to_concrete(const Checkpoint& ckpt);

// ------------------------------------------------------------ CLI drivers

struct CliOverrides {
  int64_t seed = -1;          // <0 keeps the config seed
  std::string out_dir;        // empty keeps the config output_dir
  double tolerance = -1.0;    // <0 keeps the config tolerance
};

SearchConfig resolve_config(const std::string& path, const CliOverrides& o);

int cmd_search(const SearchConfig& cfg, bool dry_run);
int cmd_finetune(const SearchConfig& cfg);
int cmd_compress(const std::string& model_ckpt, const std::string& out_dir);
int cmd_decompress(const std::string& container_path, const std::string& out_ckpt);
int cmd_verify(const std::string& container_path, const std::string& out_dir);
int cmd_random_search(const SearchConfig& cfg, int trials, int jobs);
int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

/// Writes the argmax config artifact (option values and indices per
/// layer plus achieved costs) as JSON.
void write_argmax_config(const std::string& path, const SearchNet& net, const RunSearchResult& result,
                         const SearchConfig& cfg);
std::vector<LayerChoice> read_argmax_config(const std::string& path, size_t expected_layers);

}  // namespace udc
