#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "diffsan/common.hpp"
#include "diffsan/digest.hpp"
#include "diffsan/pipeline.hpp"
#include "test_util.hpp"

using namespace diffsan;
namespace fs = std::filesystem;

namespace {

// one shared denoiser checkpoint; training it per test case would dominate
// the suite's runtime
struct SharedDenoiser {
  test::TempDir tmp;
  fs::path ckpt;

  SharedDenoiser() {
    PatternDataParams p;
    p.count = 48;
    p.num_classes = 4;
    p.seed = 7;
    LabeledDataset ds = make_pattern_dataset(p);
    NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
    UnetDenoiser model(UnetArch{1, 24, 8, 64}, child_seed(7, "denoiser-init"));
    DenoiseTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    RngStream rng(child_seed(7, "denoiser-train"));
    train_denoiser(model, ds, sched, cfg, rng);
    ckpt = tmp / "denoiser.ckpt";
    model.save(ckpt);
  }
};

const fs::path& shared_denoiser() {
  static SharedDenoiser s;
  return s.ckpt;
}

KvDoc tiny_config_doc(const fs::path& run_dir) {
  KvDoc doc = default_config();
  doc.set("run.dir", run_dir.string());
  doc.set_u64("seed", 7);
  doc.set_u64("data.count", 60);
  doc.set_u64("data.test_count", 30);
  doc.set_u64("data.classes", 4);
  doc.set_f64("attack.rate", 0.15);
  doc.set_u64("victim.epochs", 2);
  doc.set_u64("victim.batch", 16);
  doc.set_u64("victim.width", 8);
  doc.set_u64("schedule.steps", 50);
  doc.set("denoiser.checkpoint", shared_denoiser().string());
  doc.set_u64("purify.T", 10);
  doc.set_u64("purify.n", 2);
  doc.set_u64("purify.m", 3);
  doc.set_u64("purify.tau", 3);
  doc.set_u64("benign.epochs", 2);
  doc.set_u64("benign.batch", 16);
  doc.set_u64("benign.width", 8);
  return doc;
}

bool stage_ran(const RunManifest& m, Stage s) {
  for (const StageOutcome& o : m.outcomes)
    if (o.stage == s) return o.ran;
  throw std::runtime_error("stage not in manifest");
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config snapshots round-trip") {
    KvDoc doc = default_config();
    RunConfig cfg = RunConfig::from_kv(doc);
    KvDoc back = cfg.to_kv();
    CHECK(back.canonical_string() == doc.canonical_string());

    doc.set("purify.sigma", "1.5");
    CHECK_THROWS_AS(RunConfig::from_kv(doc), ConfigError);

    KvDoc two = default_config();
    two.set_u64("attack.num_targets", 2);
    CHECK_THROWS_AS(RunConfig::from_kv(two), ConfigError);  // target.1.label missing
    two.set_u64("attack.target.1.label", 3);
    RunConfig cfg2 = RunConfig::from_kv(two);
    REQUIRE(cfg2.targets.size() == 2);
    CHECK(cfg2.targets[1].label == 3);
    // unspecified trigger fields of the extra target take the stock values
    CHECK(cfg2.targets[1].kind == cfg2.targets[0].kind);
    CHECK(cfg2.targets[1].patch_size == cfg2.targets[0].patch_size);
    // the emitted snapshot is canonical: it spells out every target field
    KvDoc snap = cfg2.to_kv();
    CHECK(snap.has("attack.target.1.corner"));
    CHECK(RunConfig::from_kv(snap).to_kv().canonical_string() == snap.canonical_string());
  }

  TEST_CASE("stage names round-trip") {
    for (uint32_t i = 0; i < kNumStages; ++i) {
      Stage s = static_cast<Stage>(i);
      CHECK(stage_from_string(to_string(s)) == s);
    }
    CHECK_THROWS_AS(stage_from_string("cleanup"), ConfigError);
  }

  TEST_CASE("tiny run is complete, idempotent and resumable") {
    test::TempDir tmp;
    fs::path run_dir = tmp / "run";
    RunConfig cfg = RunConfig::from_kv(tiny_config_doc(run_dir));

    RunManifest first = run_pipeline(cfg);
    REQUIRE(first.outcomes.size() == kNumStages);
    for (const StageOutcome& o : first.outcomes) CHECK(o.ran);

    for (const char* rel :
         {"data/raw_train", "data/clean_test", "data/ledger.tsv", "models/victim.ckpt",
          "partition.tsv", "target_report.tsv", "purified", "relabel_records.tsv",
          "provenance.tsv", "models/benign.ckpt", "metrics.tsv", "report.txt",
          "run_manifest.tsv", "config_snapshot.txt"})
      CHECK(fs::exists(run_dir / rel));

    const std::string metrics_digest = sha256_file(run_dir / "metrics.tsv");
    const std::string purified_digest = sha256_file(run_dir / "purified" / "images.bin");
    const std::string benign_digest = sha256_file(run_dir / "models" / "benign.ckpt");

    // identical invocation: everything skips
    RunManifest second = run_pipeline(cfg);
    CHECK(second.all_skipped());

    // removing a mid-pipeline artifact re-runs that stage and everything after
    fs::remove(run_dir / "partition.tsv");
    RunManifest third = run_pipeline(cfg);
    CHECK_FALSE(stage_ran(third, Stage::Attack));
    CHECK_FALSE(stage_ran(third, Stage::TrainVictim));
    CHECK_FALSE(stage_ran(third, Stage::Candidates));
    CHECK(stage_ran(third, Stage::Partition));
    CHECK(stage_ran(third, Stage::Detect));
    CHECK(stage_ran(third, Stage::Purify));
    CHECK(stage_ran(third, Stage::TrainBenign));
    CHECK(stage_ran(third, Stage::Evaluate));

    // partial re-runs land on bit-identical artifacts
    CHECK(sha256_file(run_dir / "metrics.tsv") == metrics_digest);
    CHECK(sha256_file(run_dir / "purified" / "images.bin") == purified_digest);
    CHECK(sha256_file(run_dir / "models" / "benign.ckpt") == benign_digest);

    // a drifted config must not silently reuse the run directory
    KvDoc drifted = tiny_config_doc(run_dir);
    drifted.set_u64("purify.tau", 4);
    CHECK_THROWS_AS(run_pipeline(RunConfig::from_kv(drifted)), IntegrityError);
  }

  TEST_CASE("running only a prefix of the stages") {
    test::TempDir tmp;
    RunConfig cfg = RunConfig::from_kv(tiny_config_doc(tmp / "run"));
    RunManifest m = run_pipeline(cfg, Stage::TrainVictim);
    CHECK(m.outcomes.size() == 2);
    CHECK(fs::exists(tmp / "run" / "models" / "victim.ckpt"));
    CHECK_FALSE(fs::exists(tmp / "run" / "partition.tsv"));

    // continuing reuses the prefix
    RunManifest rest = run_pipeline(cfg, Stage::Partition);
    CHECK_FALSE(stage_ran(rest, Stage::Attack));
    CHECK_FALSE(stage_ran(rest, Stage::TrainVictim));
    CHECK(stage_ran(rest, Stage::Candidates));
    CHECK(stage_ran(rest, Stage::Partition));
  }

  TEST_CASE("threshold sweep shares one candidate cache") {
    test::TempDir tmp;
    RunConfig base = RunConfig::from_kv(tiny_config_doc(tmp / "base"));

    CHECK_THROWS_AS(hyperparameter_sweep(base, "epochs", {1, 2}, tmp / "sweep_bad"),
                    ConfigError);
    CHECK_THROWS_AS(hyperparameter_sweep(base, "tau", {}, tmp / "sweep_bad"), ConfigError);

    std::vector<SweepRow> rows = hyperparameter_sweep(base, "tau", {2, 4}, tmp / "sweep");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].value == 2.0);
    CHECK(rows[1].value == 4.0);
    CHECK(rows[1].cache_reused);
    for (const SweepRow& r : rows) {
      CHECK_FALSE(r.metrics.empty());
      bool has_tpr = false;
      for (const auto& kv : r.metrics) has_tpr |= (kv.first == "tpr");
      CHECK(has_tpr);
    }
    CHECK(fs::exists(tmp / "sweep" / "shared_cache" / "MANIFEST"));

    save_sweep(tmp / "sweep" / "sweep.tsv", "tau", rows);
    std::ifstream in(tmp / "sweep" / "sweep.tsv");
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("# axis\ttau", 0) == 0);
    int data_rows = 0;
    while (std::getline(in, line))
      if (!line.empty() && line[0] != '#') ++data_rows;
    CHECK(data_rows == 2);
  }
}
