// Command-line driver: each subcommand runs one pipeline stage against a
// shared output directory; `pipeline` runs them all.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "prosub/prosub.hpp"

namespace {

struct CliOverrides {
  std::string config_path;
  std::string arch;
  std::string out_dir;
  std::string method;
  std::string cifar_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int group = 0;
  double threshold = -1.0;
  double min_ratio = -1.0;
  int synth_classes = 0;
  int synth_samples = 0;
  int synth_dim = 0;
  double synth_separation = 0.0;
};

prosub::PipelineConfig assemble(const CliOverrides& o) {
  prosub::PipelineConfig cfg;
  if (!o.config_path.empty()) cfg = prosub::load_pipeline_config(o.config_path);
  if (!o.arch.empty()) cfg.arch = o.arch;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (!o.method.empty()) cfg.method = o.method;
  if (o.seed_set) {
    cfg.seed = o.seed;
    cfg.noise.seed = o.seed;
    cfg.search.seed = o.seed;
    cfg.fused.seed = o.seed;
    if (cfg.dataset.synthetic) cfg.dataset.synth.seed = o.seed;
  }
  if (!o.cifar_dir.empty()) {
    cfg.dataset.synthetic = false;
    cfg.dataset.cifar_dir = o.cifar_dir;
  }
  if (o.synth_classes > 0) cfg.dataset.synth.classes = o.synth_classes;
  if (o.synth_samples > 0) cfg.dataset.synth.samples = o.synth_samples;
  if (o.synth_dim > 0) cfg.dataset.synth.dim = o.synth_dim;
  if (o.synth_separation > 0.0)
    cfg.dataset.synth.separation = static_cast<float>(o.synth_separation);
  if (o.group > 0) cfg.search.group_count = o.group;
  if (o.threshold >= 0.0) cfg.search.threshold = o.threshold;
  if (o.min_ratio > 0.0) cfg.search.min_ratio = o.min_ratio;
  cfg.validate();
  return cfg;
}

void add_common_flags(CLI::App* cmd, CliOverrides& o) {
  cmd->add_option("--config", o.config_path, "JSON configuration file");
  cmd->add_option("--arch", o.arch, "architecture file or builtin:{convnet6,resnet8}");
  cmd->add_option("--out", o.out_dir, "output directory for stage artifacts");
  cmd->add_option("--method", o.method, "ranking method: noise, l1, oracle, or uniform");
  cmd->add_option("--seed", o.seed, "global seed; every stage derives from it")
      ->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_option("--group", o.group, "channel groups per layer (G)");
  cmd->add_option("--threshold", o.threshold, "fine-tune accuracy threshold (gamma)");
  cmd->add_option("--min-ratio", o.min_ratio, "minimum sub-net size ratio (M')");
  cmd->add_option("--cifar", o.cifar_dir, "directory of CIFAR-10 binary batches");
  cmd->add_option("--classes", o.synth_classes, "synthetic dataset: class count");
  cmd->add_option("--samples", o.synth_samples, "synthetic dataset: training samples");
  cmd->add_option("--dim", o.synth_dim, "synthetic dataset: spatial size");
  cmd->add_option("--separation", o.synth_separation, "synthetic dataset: class separation");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"progressive sub-network search and dynamic inference"};
  app.require_subcommand(1);
  CliOverrides o;

  struct Stage {
    const char* name;
    const char* help;
    void (*run)(const prosub::PipelineConfig&);
  };
  const Stage stages[] = {
      {"pretrain", "train the full model from scratch", prosub::run_pretrain},
      {"noise-train", "learn channel-noise magnitudes on the pretrained model",
       prosub::run_noise_train},
      {"search", "progressively carve the sub-net pool", prosub::run_search_stage},
      {"reselect", "re-evaluate and filter the pool for accuracy monotonicity",
       prosub::run_reselect},
      {"fuse", "jointly train all surviving sub-nets over shared weights", prosub::run_fuse},
      {"eval", "measure each sub-net's test accuracy", prosub::run_eval},
      {"bench", "time each sub-net's forward pass", prosub::run_bench},
      {"pipeline", "run every stage in order", prosub::run_pipeline},
  };
  for (const Stage& s : stages) add_common_flags(app.add_subcommand(s.name, s.help), o);
  add_common_flags(app.add_subcommand("report", "merge evaluated methods into CSV + plot data"),
                   o);

  CLI11_PARSE(app, argc, argv);

  try {
    prosub::PipelineConfig cfg = assemble(o);
    std::string chosen = app.get_subcommands().front()->get_name();
    if (chosen == "report") {
      if (prosub::run_report(cfg)) {
        std::fprintf(stderr, "warning: no evaluated pools under %s; wrote header-only CSV\n",
                     cfg.out_dir.c_str());
      }
      std::printf("wrote %s\n", prosub::paths::report_csv(cfg).c_str());
      return 0;
    }
    for (const Stage& s : stages)
      if (chosen == s.name) {
        s.run(cfg);
        std::printf("%s: done (artifacts under %s)\n", s.name, cfg.out_dir.c_str());
        return 0;
      }
    std::fprintf(stderr, "unknown subcommand '%s'\n", chosen.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
