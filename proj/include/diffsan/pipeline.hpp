#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffsan/attack.hpp"
#include "diffsan/classifier.hpp"
#include "diffsan/detector.hpp"
#include "diffsan/diffusion.hpp"
#include "diffsan/generate.hpp"
#include "diffsan/metrics.hpp"
#include "diffsan/pattern_data.hpp"
#include "diffsan/purify.hpp"

namespace diffsan {

// Per-target attack settings as they appear in config keys; the blend
// pattern is generated from the run seed, not stored.
struct TargetAttackConfig {
  uint16_t label = 0;
  TriggerKind kind = TriggerKind::Patch;
  uint32_t patch_size = 3;
  Corner corner = Corner::BottomRight;
  float patch_value = 1.0f;
  float blend_alpha = 0.2f;
  float freq_magnitude = 1.0f;
};

struct RunConfig {
  std::filesystem::path run_dir;
  uint64_t seed = 1;

  std::string data_source = "generate";  // generate | load (data.dir with train/ and test/)
  std::filesystem::path data_dir;
  PatternDataParams data;  // data.* knobs for the generator
  uint64_t test_count = 1000;

  bool attack_enabled = true;
  double attack_rate = 0.1;
  std::vector<TargetAttackConfig> targets;

  TrainConfig victim_train;
  uint32_t victim_width = 16;
  std::filesystem::path victim_checkpoint;  // optional: use this model instead of training

  uint32_t schedule_steps = 200;
  double beta_start = 1e-4, beta_end = 0.02;
  std::filesystem::path denoiser_checkpoint;  // required once the candidates stage runs
  std::filesystem::path candidates_dir;       // default: <run.dir>/cache

  PurifyParams purify;
  VarianceMode variance = VarianceMode::FixedLarge;
  bool strict_eq3 = false;

  TargetMetric detect_metric = TargetMetric::Product;
  double detect_threshold = 2.0;

  GenerateOptions gen;
  TrainConfig benign_train;
  uint32_t benign_width = 16;

  static RunConfig from_kv(const KvDoc& doc);  // schema-checked; ConfigError on unknown keys
  KvDoc to_kv() const;                         // snapshot, round-trips through from_kv
  void validate() const;

  std::filesystem::path cache_dir() const {
    return candidates_dir.empty() ? run_dir / "cache" : candidates_dir;
  }
};

// every key with its default value; doubles as the config schema
KvDoc default_config();

// The eight stages in order. Each is idempotent: it is skipped when its
// manifest row exists, its outputs match their recorded digests, and no
// upstream stage re-ran in this invocation.
enum class Stage : uint8_t {
  Attack,
  TrainVictim,
  Candidates,
  Partition,
  Detect,
  Purify,
  TrainBenign,
  Evaluate,
};
constexpr uint32_t kNumStages = 8;

Stage stage_from_string(const std::string& name);  // ConfigError
std::string to_string(Stage s);

struct StageOutcome {
  Stage stage = Stage::Attack;
  bool ran = false;  // false = skipped via digest match
  uint64_t wall_ms = 0;
};

struct RunManifest {
  std::vector<StageOutcome> outcomes;
  std::filesystem::path manifest_file;

  bool all_skipped() const;
};

// Runs stages Attack..through in order inside cfg.run_dir, appending to
// run_manifest.tsv. A config that differs from the recorded snapshot is an
// integrity error; use a fresh run directory instead.
RunManifest run_pipeline(const RunConfig& cfg, Stage through = Stage::Evaluate);

struct SweepRow {
  double value = 0.0;
  MetricsTable metrics;
  bool cache_reused = false;
  std::string note;  // e.g. resample warnings
};

// axis is one of T, n, m, tau. Each value runs in <sweep_dir>/value_<v>.
// tau values share one candidate cache; m values reuse a master cache built
// at the largest m (smaller m derives a filtered copy); T and n resample.
std::vector<SweepRow> hyperparameter_sweep(const RunConfig& base, const std::string& axis,
                                           const std::vector<double>& values,
                                           const std::filesystem::path& sweep_dir);

void save_sweep(const std::filesystem::path& path, const std::string& axis,
                const std::vector<SweepRow>& rows);

}  // namespace diffsan
