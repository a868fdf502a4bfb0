#include "diffsan/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "diffsan/anomaly.hpp"
#include "diffsan/common.hpp"
#include "diffsan/digest.hpp"

namespace diffsan {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config --

KvDoc default_config() {
  KvDoc d;
  d.set("run.dir", "run");
  d.set_u64("seed", 1);
  d.set("data.source", "generate");
  d.set("data.dir", "-");
  d.set_u64("data.count", 5000);
  d.set_u64("data.test_count", 1000);
  d.set_u64("data.classes", 10);
  d.set_u64("data.side", 24);
  d.set_f64("data.lo", 0.06);
  d.set_f64("data.hi", 0.94);
  d.set_f64("data.cell_jitter", 0.04);
  d.set_f64("data.texture_amp", 0.05);
  d.set_f64("data.pixel_noise", 0.02);
  d.set_bool("attack.enabled", true);
  d.set_f64("attack.rate", 0.1);
  d.set_u64("attack.num_targets", 1);
  d.set_u64("attack.target.0.label", 0);
  d.set("attack.target.0.kind", "patch");
  d.set_u64("attack.target.0.patch_size", 3);
  d.set_f64("attack.target.0.patch_value", 1.0);
  d.set("attack.target.0.corner", "bottom_right");
  d.set_f64("attack.target.0.blend_alpha", 0.2);
  d.set_f64("attack.target.0.freq_magnitude", 1.0);
  d.set_u64("victim.epochs", 30);
  d.set_u64("victim.batch", 64);
  d.set_f64("victim.lr", 0.001);
  d.set_u64("victim.width", 16);
  d.set("victim.checkpoint", "-");
  d.set_u64("schedule.steps", 200);
  d.set_f64("schedule.beta_start", 0.0001);
  d.set_f64("schedule.beta_end", 0.02);
  d.set("denoiser.checkpoint", "-");
  d.set("candidates.dir", "-");
  d.set_u64("purify.T", 150);
  d.set_u64("purify.n", 5);
  d.set_u64("purify.m", 10);
  d.set_u64("purify.tau", 5);
  d.set("purify.variance", "fixed_large");
  d.set_bool("partition.strict_eq3", false);
  d.set("detect.metric", "product");
  d.set_f64("detect.threshold", 2.0);
  d.set("generate.strategy", "full");
  d.set("generate.ym_input", "purified");
  d.set_u64("benign.epochs", 30);
  d.set_u64("benign.batch", 64);
  d.set_f64("benign.lr", 0.001);
  d.set_u64("benign.width", 16);
  d.set_f64("benign.fine_tune_lr_scale", 0.1);
  return d;
}

namespace {

const std::set<std::string> kTargetFields = {
    "label", "kind", "patch_size", "patch_value", "corner", "blend_alpha", "freq_magnitude"};

// attack.target.<i>.<field> -> (i, field), or nullopt
std::optional<std::pair<uint64_t, std::string>> parse_target_key(const std::string& key) {
  const std::string prefix = "attack.target.";
  if (key.rfind(prefix, 0) != 0) return std::nullopt;
  std::string rest = key.substr(prefix.size());
  size_t dot = rest.find('.');
  if (dot == std::string::npos) return std::nullopt;
  std::string idx = rest.substr(0, dot), field = rest.substr(dot + 1);
  if (idx.empty() || idx.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  return std::make_pair(std::stoull(idx), field);
}

fs::path path_or_empty(const std::string& v) { return v == "-" ? fs::path() : fs::path(v); }
std::string path_or_dash(const fs::path& p) { return p.empty() ? "-" : p.string(); }

VarianceMode variance_from_string(const std::string& s) {
  if (s == "fixed_small") return VarianceMode::FixedSmall;
  if (s == "fixed_large") return VarianceMode::FixedLarge;
  throw ConfigError("unknown variance mode '" + s + "' (fixed_small, fixed_large)");
}

std::string to_string(VarianceMode m) {
  return m == VarianceMode::FixedSmall ? "fixed_small" : "fixed_large";
}

}  // namespace

RunConfig RunConfig::from_kv(const KvDoc& user) {
  KvDoc doc = default_config();
  const KvDoc schema = doc;
  const uint64_t num_targets = user.has("attack.num_targets")
                                   ? user.get_u64("attack.num_targets")
                                   : doc.get_u64("attack.num_targets");
  for (const std::string& key : user.keys()) {
    bool known = schema.has(key);
    if (!known) {
      auto tk = parse_target_key(key);
      known = tk && tk->first < num_targets && kTargetFields.count(tk->second) > 0;
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
    doc.set(key, *user.get(key));
  }

  RunConfig c;
  c.run_dir = doc.get_str("run.dir");
  c.seed = doc.get_u64("seed");
  c.data_source = doc.get_str("data.source");
  c.data_dir = path_or_empty(doc.get_str("data.dir"));
  c.data.count = static_cast<uint32_t>(doc.get_u64("data.count"));
  c.test_count = doc.get_u64("data.test_count");
  c.data.num_classes = static_cast<uint32_t>(doc.get_u64("data.classes"));
  c.data.side = static_cast<uint32_t>(doc.get_u64("data.side"));
  c.data.lo = static_cast<float>(doc.get_f64("data.lo"));
  c.data.hi = static_cast<float>(doc.get_f64("data.hi"));
  c.data.cell_jitter = static_cast<float>(doc.get_f64("data.cell_jitter"));
  c.data.texture_amp = static_cast<float>(doc.get_f64("data.texture_amp"));
  c.data.pixel_noise = static_cast<float>(doc.get_f64("data.pixel_noise"));
  c.attack_enabled = doc.get_bool("attack.enabled");
  c.attack_rate = doc.get_f64("attack.rate");
  for (uint64_t i = 0; i < num_targets; ++i) {
    const std::string p = "attack.target." + std::to_string(i) + ".";
    TargetAttackConfig t;
    if (i > 0 && !doc.has(p + "label"))
      throw ConfigError("missing config key '" + p + "label'");
    t.label = static_cast<uint16_t>(doc.get_u64(p + "label", 0));
    t.kind = trigger_kind_from_string(doc.get_str(p + "kind", "patch"));
    t.patch_size = static_cast<uint32_t>(doc.get_u64(p + "patch_size", 3));
    t.patch_value = static_cast<float>(doc.get_f64(p + "patch_value", 1.0));
    t.corner = corner_from_string(doc.get_str(p + "corner", "bottom_right"));
    t.blend_alpha = static_cast<float>(doc.get_f64(p + "blend_alpha", 0.2));
    t.freq_magnitude = static_cast<float>(doc.get_f64(p + "freq_magnitude", 1.0));
    c.targets.push_back(t);
  }
  c.victim_train.epochs = static_cast<uint32_t>(doc.get_u64("victim.epochs"));
  c.victim_train.batch_size = static_cast<uint32_t>(doc.get_u64("victim.batch"));
  c.victim_train.lr = static_cast<float>(doc.get_f64("victim.lr"));
  c.victim_width = static_cast<uint32_t>(doc.get_u64("victim.width"));
  c.victim_checkpoint = path_or_empty(doc.get_str("victim.checkpoint"));
  c.schedule_steps = static_cast<uint32_t>(doc.get_u64("schedule.steps"));
  c.beta_start = doc.get_f64("schedule.beta_start");
  c.beta_end = doc.get_f64("schedule.beta_end");
  c.denoiser_checkpoint = path_or_empty(doc.get_str("denoiser.checkpoint"));
  c.candidates_dir = path_or_empty(doc.get_str("candidates.dir"));
  c.purify.T = static_cast<uint32_t>(doc.get_u64("purify.T"));
  c.purify.n = static_cast<uint32_t>(doc.get_u64("purify.n"));
  c.purify.m = static_cast<uint32_t>(doc.get_u64("purify.m"));
  c.purify.tau = static_cast<uint32_t>(doc.get_u64("purify.tau"));
  c.variance = variance_from_string(doc.get_str("purify.variance"));
  c.strict_eq3 = doc.get_bool("partition.strict_eq3");
  c.detect_metric = target_metric_from_string(doc.get_str("detect.metric"));
  c.detect_threshold = doc.get_f64("detect.threshold");
  c.gen.strategy = strategy_from_string(doc.get_str("generate.strategy"));
  c.gen.ym_input = ym_input_from_string(doc.get_str("generate.ym_input"));
  c.benign_train.epochs = static_cast<uint32_t>(doc.get_u64("benign.epochs"));
  c.benign_train.batch_size = static_cast<uint32_t>(doc.get_u64("benign.batch"));
  c.benign_train.lr = static_cast<float>(doc.get_f64("benign.lr"));
  c.benign_train.fine_tune_lr_scale =
      static_cast<float>(doc.get_f64("benign.fine_tune_lr_scale"));
  c.benign_width = static_cast<uint32_t>(doc.get_u64("benign.width"));
  return c;
}

KvDoc RunConfig::to_kv() const {
  KvDoc d = default_config();
  d.set("run.dir", run_dir.string());
  d.set_u64("seed", seed);
  d.set("data.source", data_source);
  d.set("data.dir", path_or_dash(data_dir));
  d.set_u64("data.count", data.count);
  d.set_u64("data.test_count", test_count);
  d.set_u64("data.classes", data.num_classes);
  d.set_u64("data.side", data.side);
  d.set_f32("data.lo", data.lo);
  d.set_f32("data.hi", data.hi);
  d.set_f32("data.cell_jitter", data.cell_jitter);
  d.set_f32("data.texture_amp", data.texture_amp);
  d.set_f32("data.pixel_noise", data.pixel_noise);
  d.set_bool("attack.enabled", attack_enabled);
  d.set_f64("attack.rate", attack_rate);
  d.set_u64("attack.num_targets", targets.size());
  d.erase_prefix("attack.target.");
  for (size_t i = 0; i < targets.size(); ++i) {
    const std::string p = "attack.target." + std::to_string(i) + ".";
    d.set_u64(p + "label", targets[i].label);
    d.set(p + "kind", to_string(targets[i].kind));
    d.set_u64(p + "patch_size", targets[i].patch_size);
    d.set_f32(p + "patch_value", targets[i].patch_value);
    d.set(p + "corner", to_string(targets[i].corner));
    d.set_f32(p + "blend_alpha", targets[i].blend_alpha);
    d.set_f32(p + "freq_magnitude", targets[i].freq_magnitude);
  }
  d.set_u64("victim.epochs", victim_train.epochs);
  d.set_u64("victim.batch", victim_train.batch_size);
  d.set_f32("victim.lr", victim_train.lr);
  d.set_u64("victim.width", victim_width);
  d.set("victim.checkpoint", path_or_dash(victim_checkpoint));
  d.set_u64("schedule.steps", schedule_steps);
  d.set_f64("schedule.beta_start", beta_start);
  d.set_f64("schedule.beta_end", beta_end);
  d.set("denoiser.checkpoint", path_or_dash(denoiser_checkpoint));
  d.set("candidates.dir", path_or_dash(candidates_dir));
  d.set_u64("purify.T", purify.T);
  d.set_u64("purify.n", purify.n);
  d.set_u64("purify.m", purify.m);
  d.set_u64("purify.tau", purify.tau);
  d.set("purify.variance", to_string(variance));
  d.set_bool("partition.strict_eq3", strict_eq3);
  d.set("detect.metric", to_string(detect_metric));
  d.set_f64("detect.threshold", detect_threshold);
  d.set("generate.strategy", to_string(gen.strategy));
  d.set("generate.ym_input", to_string(gen.ym_input));
  d.set_u64("benign.epochs", benign_train.epochs);
  d.set_u64("benign.batch", benign_train.batch_size);
  d.set_f32("benign.lr", benign_train.lr);
  d.set_u64("benign.width", benign_width);
  d.set_f32("benign.fine_tune_lr_scale", benign_train.fine_tune_lr_scale);
  return d;
}

void RunConfig::validate() const {
  if (run_dir.empty()) throw ConfigError("run.dir must be set");
  if (data_source != "generate" && data_source != "load")
    throw ConfigError("data.source must be 'generate' or 'load'");
  if (data_source == "load" && data_dir.empty())
    throw ConfigError("data.source=load needs data.dir");
  if (data_source == "generate") {
    if (data.count < 1 || test_count < 1) throw ConfigError("data counts must be positive");
  }
  if (attack_enabled) {
    if (targets.empty()) throw ConfigError("attack needs at least one target");
    if (attack_rate < 0.0 || attack_rate > 1.0)
      throw ConfigError("attack.rate must be in [0, 1]");
    std::set<uint16_t> seen;
    for (const TargetAttackConfig& t : targets) {
      if (!seen.insert(t.label).second) throw ConfigError("duplicate attack target label");
      if (data_source == "generate" && t.label >= data.num_classes)
        throw ConfigError("attack target label out of range");
      if (t.kind == TriggerKind::Blend && (t.blend_alpha <= 0.0f || t.blend_alpha >= 1.0f))
        throw ConfigError("blend alpha must be in (0, 1)");
      if (t.kind == TriggerKind::Patch && t.patch_size < 1)
        throw ConfigError("patch size must be positive");
    }
  }
  victim_train.validate();
  benign_train.validate();
  if (victim_width < 2 || victim_width % 2 != 0 || benign_width < 2 || benign_width % 2 != 0)
    throw ConfigError("classifier widths must be even and at least 2");
  if (schedule_steps < 1) throw ConfigError("schedule.steps must be positive");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw ConfigError("schedule betas must satisfy 0 < start <= end < 1");
  purify.validate(schedule_steps);
  if (detect_threshold <= 0.0) throw ConfigError("detect.threshold must be positive");
}

// ---------------------------------------------------------------- stages --

namespace {

const char* kStageNames[kNumStages] = {"attack",    "train-victim", "candidates",
                                       "partition", "detect",       "purify",
                                       "train-benign", "evaluate"};

struct P {  // artifact layout inside a run directory
  static fs::path raw_train(const fs::path& d) { return d / "data" / "raw_train"; }
  static fs::path clean_test(const fs::path& d) { return d / "data" / "clean_test"; }
  static fs::path ledger(const fs::path& d) { return d / "data" / "ledger.tsv"; }
  static fs::path asr_set(const fs::path& d, uint16_t label) {
    return d / "data" / ("asr_" + std::to_string(label));
  }
  static fs::path victim(const fs::path& d) { return d / "models" / "victim.ckpt"; }
  static fs::path benign(const fs::path& d) { return d / "models" / "benign.ckpt"; }
  static fs::path partition(const fs::path& d) { return d / "partition.tsv"; }
  static fs::path report(const fs::path& d) { return d / "target_report.tsv"; }
  static fs::path partial(const fs::path& d) { return d / "purify" / "partial"; }
  static fs::path pending(const fs::path& d) { return d / "purify" / "pending.tsv"; }
  static fs::path records_seed(const fs::path& d) { return d / "purify" / "records.tsv"; }
  static fs::path prov_seed(const fs::path& d) { return d / "purify" / "prov_seed.tsv"; }
  static fs::path purified(const fs::path& d) { return d / "purified"; }
  static fs::path relabel_records(const fs::path& d) { return d / "relabel_records.tsv"; }
  static fs::path provenance(const fs::path& d) { return d / "provenance.tsv"; }
  static fs::path metrics(const fs::path& d) { return d / "metrics.tsv"; }
  static fs::path run_report(const fs::path& d) { return d / "report.txt"; }
  static fs::path manifest(const fs::path& d) { return d / "run_manifest.tsv"; }
  static fs::path snapshot(const fs::path& d) { return d / "config_snapshot.txt"; }
};

// digest of an artifact: datasets and caches are identified by their own
// digest-bearing manifest file
std::string artifact_digest(const fs::path& p) {
  if (fs::is_directory(p)) {
    if (fs::exists(p / "manifest.txt")) return sha256_file(p / "manifest.txt");
    if (fs::exists(p / "MANIFEST")) return sha256_file(p / "MANIFEST");
    throw IntegrityError("directory " + p.string() + " has no manifest to digest");
  }
  return sha256_file(p);
}

std::string norm_key(const fs::path& run_dir, const fs::path& p) {
  std::error_code ec;
  fs::path rel = fs::relative(p, run_dir, ec);
  if (!ec && !rel.empty() && rel.native().rfind("..", 0) != 0) return rel.generic_string();
  return fs::absolute(p).lexically_normal().generic_string();
}

struct ManifestState {
  std::string config_digest;
  std::map<std::string, std::string> stage_digest;     // last wins
  std::map<std::string, std::string> artifact;         // norm path -> digest
};

ManifestState read_manifest(const fs::path& file) {
  ManifestState m;
  std::ifstream in(file);
  if (!in) return m;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split(line, '\t');
    const std::string& kind = f[0];
    if (kind == "config" && f.size() == 2) {
      if (!m.config_digest.empty() && m.config_digest != f[1])
        throw IntegrityError(file.string() + ": conflicting config rows");
      m.config_digest = f[1];
    } else if (kind == "artifact" && f.size() == 4) {
      m.artifact[f[1]] = f[2];
    } else if (kind == "stage" && f.size() == 4) {
      m.stage_digest[f[1]] = f[2];
    } else if (kind == "failed" && f.size() == 3) {
      // informational only
    } else {
      throw IntegrityError(file.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
  }
  return m;
}

void append_row(const fs::path& file, const std::string& row) {
  std::ofstream out(file, std::ios::app);
  if (!out) throw StageError("cannot append to " + file.string());
  out << row << '\n';
  if (!out) throw StageError("short write to " + file.string());
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  return s;
}

std::string config_identity_digest(const RunConfig& cfg) {
  KvDoc d = cfg.to_kv();
  d.erase_prefix("run.dir");  // location is not part of the parameter identity
  return sha256_hex(d.canonical_string());
}

ClassifierArch arch_for(const LabeledDataset& ds, uint32_t width) {
  ClassifierArch a;
  a.channels = static_cast<uint32_t>(ds.samples.at(0).image.channels);
  a.side = static_cast<uint32_t>(ds.samples.at(0).image.height);
  a.num_classes = static_cast<uint32_t>(ds.num_classes);
  a.width = width;
  return a;
}

TriggerSpec make_trigger_spec(const TargetAttackConfig& t, int channels, int height, int width,
                              uint64_t seed) {
  TriggerSpec s;
  s.id = to_string(t.kind) + "-" + std::to_string(t.label);
  s.kind = t.kind;
  s.patch_size = t.patch_size;
  s.corner = t.corner;
  s.patch_value = t.patch_value;
  s.alpha = t.blend_alpha;
  s.freq_magnitude = t.freq_magnitude;
  if (t.kind == TriggerKind::Blend) {
    // per-pixel binary pattern, fixed by the run seed and target label
    RngStream rng(child_seed(seed, "blend-pattern-" + std::to_string(t.label)));
    s.pattern.channels = channels;
    s.pattern.height = height;
    s.pattern.width = width;
    s.pattern.data.resize(static_cast<size_t>(channels) * height * width);
    for (float& v : s.pattern.data) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
  }
  s.validate(static_cast<uint32_t>(channels), static_cast<uint32_t>(height),
             static_cast<uint32_t>(width));
  return s;
}

std::pair<LabeledDataset, LabeledDataset> source_data(const RunConfig& cfg) {
  if (cfg.data_source == "load") {
    LabeledDataset train = load_dataset(cfg.data_dir / "train");
    LabeledDataset test = load_dataset(cfg.data_dir / "test");
    if (train.num_classes != test.num_classes)
      throw IntegrityError("train and test sets disagree on the class count");
    return {std::move(train), std::move(test)};
  }
  PatternDataParams tr = cfg.data;
  tr.seed = child_seed(cfg.seed, "data-train");
  PatternDataParams te = cfg.data;
  te.count = static_cast<uint32_t>(cfg.test_count);
  te.seed = child_seed(cfg.seed, "data-test");
  return {make_pattern_dataset(tr), make_pattern_dataset(te)};
}

void run_attack(const RunConfig& cfg, const fs::path& dir) {
  auto [clean_train, clean_test] = source_data(cfg);
  fs::create_directories(dir / "data");

  if (cfg.attack_enabled) {
    const ImageTensor& shape = clean_train.samples.at(0).image;
    PoisonConfig pc;
    pc.rate = cfg.attack_rate;
    pc.seed = cfg.seed;
    for (const TargetAttackConfig& t : cfg.targets) {
      if (t.label >= clean_train.num_classes)
        throw ConfigError("attack target label out of range for the dataset");
      pc.targets.emplace_back(
          t.label, make_trigger_spec(t, shape.channels, shape.height, shape.width, cfg.seed));
    }
    PoisonResult res = poison_dataset(clean_train, pc);
    save_dataset(res.dataset, P::raw_train(dir));
    save_ledger(res.ledger, P::ledger(dir));
    for (size_t i = 0; i < cfg.targets.size(); ++i)
      save_dataset(build_asr_testset(clean_test, pc.targets[i].second, cfg.targets[i].label),
                   P::asr_set(dir, cfg.targets[i].label));
  } else {
    save_dataset(clean_train, P::raw_train(dir));
    PoisonLedger ledger;
    for (const Sample& s : clean_train.samples)
      ledger.entries.push_back(LedgerEntry{s.id, false, s.label, "-"});
    save_ledger(ledger, P::ledger(dir));
  }
  save_dataset(clean_test, P::clean_test(dir));
}

void run_train_victim(const RunConfig& cfg, const fs::path& dir) {
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  fs::create_directories(dir / "models");
  if (!cfg.victim_checkpoint.empty()) {
    auto m = Classifier::load(cfg.victim_checkpoint);
    const ClassifierArch want = arch_for(raw, m->arch().width);
    if (m->arch().channels != want.channels || m->arch().side != want.side ||
        m->arch().num_classes != want.num_classes)
      throw IntegrityError("victim checkpoint does not fit the dataset");
    fs::copy_file(cfg.victim_checkpoint, P::victim(dir), fs::copy_options::overwrite_existing);
    return;
  }
  Classifier model(arch_for(raw, cfg.victim_width), child_seed(cfg.seed, "victim-init"));
  RngStream rng(child_seed(cfg.seed, "victim-train"));
  train_classifier(model, raw, cfg.victim_train, rng);
  model.save(P::victim(dir));
}

void run_candidates(const RunConfig& cfg, const fs::path& dir) {
  if (cfg.denoiser_checkpoint.empty())
    throw ConfigError("the candidates stage needs denoiser.checkpoint");
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  auto den = UnetDenoiser::load(cfg.denoiser_checkpoint);
  const ImageTensor& shape = raw.samples.at(0).image;
  if (den->arch().in_channels != static_cast<uint32_t>(shape.channels) ||
      den->arch().side != static_cast<uint32_t>(shape.height))
    throw IntegrityError("denoiser checkpoint does not fit the dataset");
  auto victim = Classifier::load(P::victim(dir));
  NoiseSchedule sched = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  CacheBuildOptions opt;
  opt.dir = cfg.cache_dir();
  opt.denoiser_digest = registry_digest(den->params());
  opt.progress_every = 200;
  build_candidate_sets(raw, cfg.purify, *den, sched, cfg.variance, *victim,
                       child_seed(cfg.seed, "diffusion"), opt);
}

void run_partition(const RunConfig& cfg, const fs::path& dir) {
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  CandidateCache cache = CandidateCache::open(cfg.cache_dir());
  PartitionResult part = partition_dataset(cache, raw, cfg.purify.tau, cfg.strict_eq3,
                                           cfg.gen.once_only());
  save_partition(P::partition(dir), part);
}

void run_detect(const RunConfig& cfg, const fs::path& dir) {
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  CandidateCache cache = CandidateCache::open(cfg.cache_dir());
  PartitionResult part = load_partition(P::partition(dir));
  DetectConfig dc;
  dc.metric = cfg.detect_metric;
  dc.threshold = cfg.detect_threshold;
  dc.once_only = cfg.gen.once_only();
  save_target_report(P::report(dir), detect_targets(part, cache, raw, dc));
}

void run_purify(const RunConfig& cfg, const fs::path& dir) {
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  CandidateCache cache = CandidateCache::open(cfg.cache_dir());
  PartitionResult part = load_partition(P::partition(dir));
  TargetReport report = load_target_report(P::report(dir));
  auto victim = Classifier::load(P::victim(dir));

  PurifiedBuild b = assemble_initial(raw, part, report.detected, cache, *victim, cfg.gen);
  // park the selected image in each pending slot so the build stage can
  // resume purely from artifacts
  for (const PendingSample& p : b.pending)
    b.dataset.samples[p.id] = Sample{p.id, p.selected, raw.samples[p.id].label};

  fs::create_directories(dir / "purify");
  save_dataset(b.dataset, P::partial(dir));
  save_relabel_records(P::records_seed(dir), b.records);
  {
    std::ofstream out(P::pending(dir), std::ios::trunc);
    if (!out) throw StageError("cannot write " + P::pending(dir).string());
    for (const PendingSample& p : b.pending) out << p.id << '\t' << p.y_v << '\n';
    if (!out) throw StageError("short write to " + P::pending(dir).string());
  }
  {
    std::ofstream out(P::prov_seed(dir), std::ios::trunc);
    if (!out) throw StageError("cannot write " + P::prov_seed(dir).string());
    for (uint32_t id = 0; id < b.resolved.size(); ++id)
      if (b.resolved[id]) out << id << '\t' << to_string(b.prov[id]) << '\n';
    if (!out) throw StageError("short write to " + P::prov_seed(dir).string());
  }
}

void run_train_benign(const RunConfig& cfg, const fs::path& dir) {
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  PurifiedBuild b;
  b.dataset = load_dataset(P::partial(dir));
  const size_t N = b.dataset.samples.size();
  b.resolved.assign(N, 1);
  b.prov.assign(N, Provenance::Kept);
  b.records = load_relabel_records(P::records_seed(dir));
  {
    std::ifstream in(P::prov_seed(dir));
    if (!in) throw IntegrityError("cannot read " + P::prov_seed(dir).string());
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      std::vector<std::string> f = split(line, '\t');
      if (f.size() != 2) throw IntegrityError(P::prov_seed(dir).string() + ": malformed row");
      b.prov.at(std::stoul(f[0])) = provenance_from_string(trim(f[1]));
    }
  }
  {
    std::ifstream in(P::pending(dir));
    if (!in) throw IntegrityError("cannot read " + P::pending(dir).string());
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      std::vector<std::string> f = split(line, '\t');
      if (f.size() != 2) throw IntegrityError(P::pending(dir).string() + ": malformed row");
      PendingSample p;
      p.id = static_cast<uint32_t>(std::stoul(f[0]));
      p.y_v = static_cast<uint16_t>(std::stoul(f[1]));
      p.selected = b.dataset.samples.at(p.id).image;
      b.resolved.at(p.id) = 0;
      b.pending.push_back(std::move(p));
    }
  }

  RelabelResult res =
      two_stage_relabel(std::move(b), raw, arch_for(raw, cfg.benign_width), cfg.benign_train,
                        cfg.gen, child_seed(cfg.seed, "benign-train"));
  fs::create_directories(dir / "models");
  save_dataset(res.purified, P::purified(dir));
  save_relabel_records(P::relabel_records(dir), res.records);
  {
    std::ofstream out(P::provenance(dir), std::ios::trunc);
    if (!out) throw StageError("cannot write " + P::provenance(dir).string());
    for (uint32_t id = 0; id < res.prov.size(); ++id)
      out << id << '\t' << to_string(res.prov[id]) << '\n';
    if (!out) throw StageError("short write to " + P::provenance(dir).string());
  }
  res.model->save(P::benign(dir));
}

void run_evaluate(const RunConfig& cfg, const fs::path& dir) {
  LabeledDataset raw = load_dataset(P::raw_train(dir));
  LabeledDataset purified = load_dataset(P::purified(dir));
  LabeledDataset clean_test = load_dataset(P::clean_test(dir));
  PoisonLedger ledger = load_ledger(P::ledger(dir));
  auto benign = Classifier::load(P::benign(dir));
  auto victim = Classifier::load(P::victim(dir));

  DetectionMetrics dm = detection_metrics(raw, purified, ledger);
  RateWithCounts acc = accuracy_counts(*benign, clean_test);
  RateWithCounts victim_acc = accuracy_counts(*victim, clean_test);

  MetricsTable table;
  table.emplace_back("tpr", dm.tpr);
  table.emplace_back("fpr", dm.fpr);
  table.emplace_back("acc", acc);
  RateWithCounts pooled, victim_pooled;
  std::vector<std::pair<uint16_t, RateWithCounts>> per_target, victim_per_target;
  if (cfg.attack_enabled) {
    for (const TargetAttackConfig& t : cfg.targets) {
      LabeledDataset asr_set = load_dataset(P::asr_set(dir, t.label));
      RateWithCounts r = asr_counts(*benign, asr_set, t.label);
      per_target.emplace_back(t.label, r);
      pooled.num += r.num;
      pooled.den += r.den;
      RateWithCounts rv = asr_counts(*victim, asr_set, t.label);
      victim_per_target.emplace_back(t.label, rv);
      victim_pooled.num += rv.num;
      victim_pooled.den += rv.den;
    }
  }
  table.emplace_back("asr", pooled);
  for (const auto& [label, r] : per_target)
    table.emplace_back("asr." + std::to_string(label), r);
  // pre-defense baseline: the raw-trained model on the same test sets
  table.emplace_back("victim.acc", victim_acc);
  table.emplace_back("victim.asr", victim_pooled);
  for (const auto& [label, r] : victim_per_target)
    table.emplace_back("victim.asr." + std::to_string(label), r);
  save_metrics(P::metrics(dir), table);

  // human-readable summary; everything in it is deterministic
  PartitionResult part = load_partition(P::partition(dir));
  TargetReport report = load_target_report(P::report(dir));
  std::ostringstream rep;
  rep << "purification run report\n";
  rep << "config identity: " << config_identity_digest(cfg) << "\n\n";
  rep << "detected targets:";
  if (report.detected.empty())
    rep << " none (dataset declared benign)";
  else
    for (uint16_t t : report.detected) rep << ' ' << t;
  rep << "\n";
  rep << "partition: benign=" << part.num_benign << " poisoned=" << part.num_poisoned
      << " suspicious=" << part.num_suspicious << "\n\n";
  for (const auto& [name, rate] : table) {
    rep << name << ": " << rate.num << "/" << rate.den;
    if (rate.defined()) rep << " = " << format_double(rate.value());
    rep << "\n";
  }
  if (per_target.size() > 1) {
    double macro = 0.0;
    for (const auto& [label, r] : per_target) macro += r.value();
    macro /= static_cast<double>(per_target.size());
    rep << "asr macro average: " << format_double(macro) << "\n";
  }
  std::ofstream out(P::run_report(dir), std::ios::trunc);
  if (!out) throw StageError("cannot write " + P::run_report(dir).string());
  out << rep.str();
  if (!out) throw StageError("short write to " + P::run_report(dir).string());
}

std::vector<fs::path> stage_inputs(const RunConfig& cfg, const fs::path& d, Stage s) {
  switch (s) {
    case Stage::Attack: {
      std::vector<fs::path> in;
      if (cfg.data_source == "load") {
        in.push_back(cfg.data_dir / "train");
        in.push_back(cfg.data_dir / "test");
      }
      return in;
    }
    case Stage::TrainVictim: {
      std::vector<fs::path> in = {P::raw_train(d)};
      if (!cfg.victim_checkpoint.empty()) in.push_back(cfg.victim_checkpoint);
      return in;
    }
    case Stage::Candidates:
      return {P::raw_train(d), P::victim(d), cfg.denoiser_checkpoint};
    case Stage::Partition:
      return {P::raw_train(d), cfg.cache_dir()};
    case Stage::Detect:
      return {P::raw_train(d), cfg.cache_dir(), P::partition(d)};
    case Stage::Purify:
      return {P::raw_train(d), cfg.cache_dir(), P::partition(d), P::report(d), P::victim(d)};
    case Stage::TrainBenign:
      return {P::raw_train(d), P::partial(d), P::pending(d), P::records_seed(d),
              P::prov_seed(d)};
    case Stage::Evaluate: {
      std::vector<fs::path> in = {P::raw_train(d), P::purified(d), P::ledger(d), P::benign(d),
                                  P::victim(d),    P::clean_test(d), P::partition(d),
                                  P::report(d)};
      if (cfg.attack_enabled)
        for (const TargetAttackConfig& t : cfg.targets) in.push_back(P::asr_set(d, t.label));
      return in;
    }
  }
  throw StageError("unreachable stage");
}

std::vector<fs::path> stage_outputs(const RunConfig& cfg, const fs::path& d, Stage s) {
  switch (s) {
    case Stage::Attack: {
      std::vector<fs::path> out = {P::raw_train(d), P::clean_test(d), P::ledger(d)};
      if (cfg.attack_enabled)
        for (const TargetAttackConfig& t : cfg.targets) out.push_back(P::asr_set(d, t.label));
      return out;
    }
    case Stage::TrainVictim:
      return {P::victim(d)};
    case Stage::Candidates:
      return {cfg.cache_dir()};
    case Stage::Partition:
      return {P::partition(d)};
    case Stage::Detect:
      return {P::report(d)};
    case Stage::Purify:
      return {P::partial(d), P::pending(d), P::records_seed(d), P::prov_seed(d)};
    case Stage::TrainBenign:
      return {P::purified(d), P::relabel_records(d), P::provenance(d), P::benign(d)};
    case Stage::Evaluate:
      return {P::metrics(d), P::run_report(d)};
  }
  throw StageError("unreachable stage");
}

void run_stage(const RunConfig& cfg, const fs::path& d, Stage s) {
  switch (s) {
    case Stage::Attack: return run_attack(cfg, d);
    case Stage::TrainVictim: return run_train_victim(cfg, d);
    case Stage::Candidates: return run_candidates(cfg, d);
    case Stage::Partition: return run_partition(cfg, d);
    case Stage::Detect: return run_detect(cfg, d);
    case Stage::Purify: return run_purify(cfg, d);
    case Stage::TrainBenign: return run_train_benign(cfg, d);
    case Stage::Evaluate: return run_evaluate(cfg, d);
  }
}

}  // namespace

Stage stage_from_string(const std::string& name) {
  for (uint32_t i = 0; i < kNumStages; ++i)
    if (name == kStageNames[i]) return static_cast<Stage>(i);
  throw ConfigError("unknown stage '" + name + "'");
}

std::string to_string(Stage s) { return kStageNames[static_cast<uint32_t>(s)]; }

bool RunManifest::all_skipped() const {
  for (const StageOutcome& o : outcomes)
    if (o.ran) return false;
  return true;
}

RunManifest run_pipeline(const RunConfig& cfg, Stage through) {
  cfg.validate();
  const fs::path dir = cfg.run_dir;
  fs::create_directories(dir);

  const std::string cfg_digest = config_identity_digest(cfg);
  const fs::path mf = P::manifest(dir);
  ManifestState state = read_manifest(mf);
  if (state.config_digest.empty()) {
    append_row(mf, "config\t" + cfg_digest);
    cfg.to_kv().write_file(P::snapshot(dir));
  } else if (state.config_digest != cfg_digest) {
    throw IntegrityError("run directory " + dir.string() +
                         " was produced with a different config; use a fresh directory");
  }

  RunManifest result;
  result.manifest_file = mf;
  bool dirty = false;
  for (uint32_t i = 0; i <= static_cast<uint32_t>(through); ++i) {
    const Stage stage = static_cast<Stage>(i);
    const std::string name = to_string(stage);
    const std::vector<fs::path> outputs = stage_outputs(cfg, dir, stage);

    bool needs = dirty || state.stage_digest.find(name) == state.stage_digest.end();
    if (!needs) {
      for (const fs::path& out : outputs) {
        auto it = state.artifact.find(norm_key(dir, out));
        if (!fs::exists(out) || it == state.artifact.end() ||
            it->second != artifact_digest(out)) {
          needs = true;
          break;
        }
      }
    }
    if (!needs) {
      result.outcomes.push_back(StageOutcome{stage, false, 0});
      continue;
    }

    for (const fs::path& in : stage_inputs(cfg, dir, stage)) {
      if (in.empty() || !fs::exists(in))
        throw IntegrityError("stage " + name + " input missing: " + in.string());
      auto it = state.artifact.find(norm_key(dir, in));
      if (it != state.artifact.end() && it->second != artifact_digest(in))
        throw IntegrityError("stage " + name + " input changed since it was recorded: " +
                             in.string());
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
      run_stage(cfg, dir, stage);
    } catch (const std::exception& e) {
      append_row(mf, "failed\t" + name + "\t" + sanitize(e.what()));
      throw;
    }
    const auto wall_ms = static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                   std::chrono::steady_clock::now() - t0)
                                                   .count());

    Sha256 combined;
    for (const fs::path& out : outputs) {
      if (!fs::exists(out))
        throw StageError("stage " + name + " did not produce " + out.string());
      const std::string key = norm_key(dir, out);
      const std::string digest = artifact_digest(out);
      state.artifact[key] = digest;
      append_row(mf, "artifact\t" + key + "\t" + digest + "\t" + name);
      combined.update(key.data(), key.size());
      combined.update(digest.data(), digest.size());
    }
    const std::string stage_digest = combined.hex();
    state.stage_digest[name] = stage_digest;
    append_row(mf, "stage\t" + name + "\t" + stage_digest + "\t" + std::to_string(wall_ms));
    result.outcomes.push_back(StageOutcome{stage, true, wall_ms});
    dirty = true;
  }
  return result;
}

// ----------------------------------------------------------------- sweep --

namespace {

std::string format_value(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15)
    return std::to_string(static_cast<long long>(v));
  std::string s = format_double(v);
  for (char& c : s)
    if (c == '.') c = 'p';
  return s;
}

void set_axis(RunConfig& cfg, const std::string& axis, double v) {
  if (v <= 0 || v != std::floor(v))
    throw ConfigError("sweep values for " + axis + " must be positive integers");
  const auto u = static_cast<uint32_t>(v);
  if (axis == "T")
    cfg.purify.T = u;
  else if (axis == "n")
    cfg.purify.n = u;
  else if (axis == "m")
    cfg.purify.m = u;
  else if (axis == "tau")
    cfg.purify.tau = u;
  else
    throw ConfigError("sweep axis must be one of T, n, m, tau");
}

}  // namespace

std::vector<SweepRow> hyperparameter_sweep(const RunConfig& base, const std::string& axis,
                                           const std::vector<double>& values,
                                           const fs::path& sweep_dir) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  {
    RunConfig probe = base;  // validates the axis name up front
    set_axis(probe, axis, values[0]);
  }
  fs::create_directories(sweep_dir);

  // m reuses one master cache built at the largest m; smaller values read a
  // filtered copy. tau shares a single cache outright. T and n resample.
  fs::path master_cache;
  fs::path shared_victim;
  if (axis == "m") {
    const double m_max = *std::max_element(values.begin(), values.end());
    RunConfig master = base;
    set_axis(master, axis, m_max);
    master.run_dir = sweep_dir / "master_run";
    master.candidates_dir = sweep_dir / "master_cache";
    run_pipeline(master, Stage::Candidates);
    master_cache = master.candidates_dir;
    shared_victim = sweep_dir / "master_run" / "models" / "victim.ckpt";
  }

  std::vector<SweepRow> rows;
  for (size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    RunConfig cfg = base;
    set_axis(cfg, axis, v);
    cfg.run_dir = sweep_dir / ("value_" + format_value(v));
    if (!shared_victim.empty()) cfg.victim_checkpoint = shared_victim;

    SweepRow row;
    row.value = v;
    if (axis == "tau") {
      cfg.candidates_dir = sweep_dir / "shared_cache";
      row.cache_reused = i > 0;
      if (i > 0) row.note = "reused shared candidate cache";
    } else if (axis == "m") {
      const auto m_val = static_cast<uint32_t>(v);
      const auto m_max = static_cast<uint32_t>(
          *std::max_element(values.begin(), values.end()));
      if (m_val == m_max) {
        cfg.candidates_dir = master_cache;
        row.cache_reused = true;
        row.note = "used master candidate cache";
      } else {
        fs::path derived = sweep_dir / ("cache_m" + format_value(v));
        if (!fs::exists(derived / "MANIFEST"))
          derive_cache_with_smaller_m(master_cache, derived, m_val);
        cfg.candidates_dir = derived;
        row.cache_reused = true;
        row.note = "derived from master candidate cache";
      }
    } else {
      row.note = "resampled candidate cache";
    }

    run_pipeline(cfg, Stage::Evaluate);
    if (shared_victim.empty()) shared_victim = P::victim(cfg.run_dir);
    row.metrics = load_metrics(P::metrics(cfg.run_dir));
    rows.push_back(std::move(row));
  }
  return rows;
}

void save_sweep(const fs::path& path, const std::string& axis,
                const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  out << "# axis\t" << axis << '\n';
  for (const SweepRow& r : rows) {
    out << format_value(r.value);
    const char* names[4] = {"tpr", "fpr", "acc", "asr"};
    for (const char* want : names) {
      bool found = false;
      for (const auto& [name, rate] : r.metrics) {
        if (name == want) {
          out << '\t' << (rate.defined() ? format_double(rate.value()) : std::string("-"));
          found = true;
          break;
        }
      }
      if (!found) out << "\t-";
    }
    out << '\t' << r.note << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

}  // namespace diffsan
