#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "udc/error.hpp"
#include "udc/experiments.hpp"

using namespace udc;

int main(int argc, char** argv) {
  CLI::App app{"udc - differentiable search, training and compression for compressible networks"};
  app.require_subcommand(1);

  std::string config_path, out_dir, model_path, container_path, out_ckpt;
  std::vector<std::string> run_dirs;
  long long seed = -1;
  double tolerance = -1.0;
  bool dry_run = false;
  int trials = 10, jobs = 1;

  auto add_config_opts = [&](CLI::App* sub, bool need_config) {
    auto* c = sub->add_option("--config", config_path, "JSON config file");
    if (need_config) c->required();
    sub->add_option("--seed", seed, "override config seed");
    sub->add_option("--out", out_dir, "override output directory");
  };

  CLI::App* search = app.add_subcommand("search", "run the constrained architecture search");
  add_config_opts(search, true);
  search->add_option("--tolerance", tolerance, "relative |E-e*|/e* accepted for exit code 0");
  search->add_flag("--dry-run", dry_run, "print space size and achievable E range, no training");

  CLI::App* finetune = app.add_subcommand("finetune", "three-stage finetuning of the extracted network");
  add_config_opts(finetune, true);

  CLI::App* compress = app.add_subcommand("compress", "entropy-code a deployed model checkpoint");
  compress->add_option("--model", model_path, "deployed model checkpoint")->required();
  compress->add_option("--out", out_dir, "output directory")->required();

  CLI::App* decompress = app.add_subcommand("decompress", "reconstruct a model checkpoint from a container");
  decompress->add_option("--in", container_path, "container file (.udcnet)")->required();
  decompress->add_option("--out", out_ckpt, "output checkpoint path")->required();

  CLI::App* verify = app.add_subcommand("verify", "check a container and print predicted vs achieved sizes");
  verify->add_option("--in", container_path, "container file (.udcnet)")->required();
  verify->add_option("--out", out_dir, "directory for the CSV report (optional)");

  CLI::App* random_search = app.add_subcommand("random-search", "uniform feasible baseline with full finetuning");
  add_config_opts(random_search, true);
  random_search->add_option("--trials", trials, "number of feasible configurations to train");
  random_search->add_option("--jobs", jobs, "concurrent trials");

  CLI::App* report = app.add_subcommand("report", "merge run artifacts into plot-ready CSVs");
  report->add_option("--runs", run_dirs, "run directories")->required();
  report->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    CliOverrides o;
    o.seed = seed;
    o.out_dir = out_dir;
    o.tolerance = tolerance;
    if (search->parsed()) return cmd_search(resolve_config(config_path, o), dry_run);
    if (finetune->parsed()) return cmd_finetune(resolve_config(config_path, o));
    if (compress->parsed()) return cmd_compress(model_path, out_dir);
    if (decompress->parsed()) return cmd_decompress(container_path, out_ckpt);
    if (verify->parsed()) return cmd_verify(container_path, out_dir);
    if (random_search->parsed()) return cmd_random_search(resolve_config(config_path, o), trials, jobs);
    if (report->parsed()) return cmd_report(run_dirs, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 64;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
