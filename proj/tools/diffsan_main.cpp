// diffsan: detect, purify and relabel poisoned training samples with an
// iterated diffusion process. Every subcommand is a pipeline stage (plus a
// couple of fixture utilities); stages read and write artifacts in a run
// directory and skip themselves when their outputs are already up to date.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffsan/common.hpp"
#include "diffsan/dataset.hpp"
#include "diffsan/diffusion.hpp"
#include "diffsan/kv.hpp"
#include "diffsan/pattern_data.hpp"
#include "diffsan/pipeline.hpp"
#include "diffsan/rng.hpp"

namespace {

using namespace diffsan;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitIntegrity = 4;

struct ConfigArgs {
  std::string config_file;
  std::vector<std::string> overrides;  // dotted key:value pairs
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_file, "config file (dotted key: value lines)")
      ->check(CLI::ExistingFile);
  cmd->add_option("overrides", args.overrides,
                  "config overrides as key:value (applied after --config)");
}

RunConfig build_config(const ConfigArgs& args) {
  KvDoc doc;
  if (!args.config_file.empty()) doc = KvDoc::read_file(args.config_file);
  for (const std::string& ov : args.overrides) {
    size_t colon = ov.find(':');
    if (colon == std::string::npos || colon == 0)
      throw ConfigError("override '" + ov + "' is not key:value");
    doc.set(trim(ov.substr(0, colon)), trim(ov.substr(colon + 1)));
  }
  RunConfig cfg = RunConfig::from_kv(doc);
  cfg.validate();
  return cfg;
}

void print_outcomes(const RunManifest& m) {
  for (const StageOutcome& o : m.outcomes) {
    if (o.ran)
      std::cout << "stage " << to_string(o.stage) << ": ran (" << o.wall_ms << " ms)\n";
    else
      std::cout << "stage " << to_string(o.stage) << ": up to date\n";
  }
}

int run_through(const ConfigArgs& args, Stage through) {
  RunManifest m = run_pipeline(build_config(args), through);
  print_outcomes(m);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dataset sanitization via iterated diffusion"};
  app.require_subcommand(1);

  struct StageCmd {
    const char* name;
    const char* help;
    Stage through;
  };
  const StageCmd stage_cmds[] = {
      {"attack", "materialize the (optionally poisoned) training set", Stage::Attack},
      {"train-victim", "train the victim classifier on the raw training set",
       Stage::TrainVictim},
      {"candidates", "build per-sample candidate sets with the diffusion model",
       Stage::Candidates},
      {"partition", "split samples into benign / poisoned / suspicious", Stage::Partition},
      {"detect", "detect attack target labels from the partition", Stage::Detect},
      {"purify", "assemble the purified dataset seed and pending set", Stage::Purify},
      {"train-benign", "two-stage relabeling and final model training", Stage::TrainBenign},
      {"evaluate", "score detection, accuracy and attack success", Stage::Evaluate},
      {"run-all", "run every stage in order", Stage::Evaluate},
  };
  std::vector<ConfigArgs> stage_args(std::size(stage_cmds));
  for (size_t i = 0; i < std::size(stage_cmds); ++i) {
    CLI::App* cmd = app.add_subcommand(stage_cmds[i].name, stage_cmds[i].help);
    add_config_options(cmd, stage_args[i]);
  }

  // sweep: rerun the pipeline across values of one purification knob
  ConfigArgs sweep_cfg;
  std::string sweep_axis, sweep_values_str, sweep_dir, sweep_out;
  CLI::App* sweep = app.add_subcommand("sweep", "sweep one purification hyperparameter");
  add_config_options(sweep, sweep_cfg);
  sweep->add_option("--axis", sweep_axis, "T, n, m or tau")->required();
  sweep->add_option("--values", sweep_values_str, "comma-separated values")->required();
  sweep->add_option("--dir", sweep_dir, "directory for the per-value runs")->required();
  sweep->add_option("--out", sweep_out, "result table path (default <dir>/sweep.tsv)");

  // make-data: generate a labeled pattern dataset fixture
  std::string md_out;
  uint64_t md_count = 5000, md_test = 1000, md_classes = 10, md_side = 24, md_seed = 1;
  CLI::App* md = app.add_subcommand("make-data", "generate a train/test dataset pair");
  md->add_option("--out", md_out, "output directory (writes train/ and test/)")->required();
  md->add_option("--count", md_count, "training sample count");
  md->add_option("--test-count", md_test, "test sample count");
  md->add_option("--classes", md_classes, "number of classes");
  md->add_option("--side", md_side, "image side length");
  md->add_option("--seed", md_seed, "generator seed");

  // train-denoiser: fit the shared diffusion model on a clean dataset
  std::string td_data, td_out;
  uint64_t td_epochs = 40, td_batch = 32, td_steps = 200, td_base = 8, td_seed = 1;
  double td_lr = 2e-3, td_bstart = 1e-4, td_bend = 0.02;
  CLI::App* td = app.add_subcommand("train-denoiser", "train the diffusion noise predictor");
  td->add_option("--data", td_data, "training dataset directory")->required();
  td->add_option("--out", td_out, "checkpoint output path")->required();
  td->add_option("--epochs", td_epochs, "training epochs");
  td->add_option("--batch", td_batch, "batch size");
  td->add_option("--lr", td_lr, "learning rate");
  td->add_option("--steps", td_steps, "native schedule steps");
  td->add_option("--beta-start", td_bstart, "schedule beta at t=1");
  td->add_option("--beta-end", td_bend, "schedule beta at t=steps");
  td->add_option("--base", td_base, "base channel width");
  td->add_option("--seed", td_seed, "init and sampling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    for (size_t i = 0; i < std::size(stage_cmds); ++i)
      if (app.got_subcommand(stage_cmds[i].name))
        return run_through(stage_args[i], stage_cmds[i].through);

    if (app.got_subcommand(sweep)) {
      RunConfig base = build_config(sweep_cfg);
      std::vector<double> values;
      for (const std::string& tok : split(sweep_values_str, ','))
        if (!trim(tok).empty()) values.push_back(std::stod(trim(tok)));
      std::vector<SweepRow> rows = hyperparameter_sweep(base, sweep_axis, values, sweep_dir);
      std::filesystem::path out =
          sweep_out.empty() ? std::filesystem::path(sweep_dir) / "sweep.tsv"
                            : std::filesystem::path(sweep_out);
      save_sweep(out, sweep_axis, rows);
      std::cout << "sweep table: " << out.string() << "\n";
      return kExitOk;
    }

    if (app.got_subcommand(md)) {
      PatternDataParams p;
      p.count = static_cast<uint32_t>(md_count);
      p.num_classes = static_cast<uint32_t>(md_classes);
      p.side = static_cast<uint32_t>(md_side);
      p.seed = child_seed(md_seed, "data-train");
      LabeledDataset train = make_pattern_dataset(p);
      p.count = static_cast<uint32_t>(md_test);
      p.seed = child_seed(md_seed, "data-test");
      LabeledDataset test = make_pattern_dataset(p);
      std::filesystem::path out(md_out);
      save_dataset(train, out / "train");
      save_dataset(test, out / "test");
      std::cout << "wrote " << train.size() << " train / " << test.size() << " test samples to "
                << out.string() << "\n";
      return kExitOk;
    }

    if (app.got_subcommand(td)) {
      LabeledDataset data = load_dataset(td_data);
      UnetArch arch;
      arch.in_channels = data.channels();
      arch.side = data.height();
      arch.base = static_cast<uint32_t>(td_base);
      UnetDenoiser model(arch, child_seed(td_seed, "denoiser-init"));
      NoiseSchedule sched =
          make_schedule(static_cast<uint32_t>(td_steps), td_bstart, td_bend);
      DenoiseTrainConfig cfg;
      cfg.epochs = static_cast<uint32_t>(td_epochs);
      cfg.batch_size = static_cast<uint32_t>(td_batch);
      cfg.lr = static_cast<float>(td_lr);
      RngStream rng(child_seed(td_seed, "denoiser-train"));
      std::vector<float> losses = train_denoiser(model, data, sched, cfg, rng);
      model.save(td_out);
      std::cout << "final epoch loss: " << (losses.empty() ? 0.0f : losses.back()) << "\n";
      std::cout << "checkpoint: " << td_out << "\n";
      return kExitOk;
    }

    std::cerr << "error: no subcommand handled\n";
    return kExitStage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
}
