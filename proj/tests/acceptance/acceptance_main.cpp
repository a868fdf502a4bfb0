// Acceptance suite for the sanitization pipeline. --prepare builds the shared
// fixture: one denoiser checkpoint, five full pipeline runs, two ablation
// sweeps. --criterion K verifies one numbered guarantee and prints a single
// terminal [PASS]/[FAIL] line. Every numeric bar is pinned in this file.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffsan/anomaly.hpp"
#include "diffsan/common.hpp"
#include "diffsan/dataset.hpp"
#include "diffsan/detector.hpp"
#include "diffsan/diffusion.hpp"
#include "diffsan/digest.hpp"
#include "diffsan/generate.hpp"
#include "diffsan/kv.hpp"
#include "diffsan/metrics.hpp"
#include "diffsan/pattern_data.hpp"
#include "diffsan/pipeline.hpp"
#include "diffsan/rng.hpp"

namespace {

using namespace diffsan;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// pinned bars

namespace bars {

// criterion 1: library results against naive reimplementations
constexpr uint64_t kOracleInstances = 1200;  // randomized instances per oracle
constexpr double kTolExact = 1e-9;           // closed-form spot values
constexpr double kTolFloat = 1e-6;           // randomized floating comparisons
constexpr double kOracleBudgetSec = 60.0;

// criterion 2: noising law moments
constexpr uint64_t kMomentDraws = 10000;
constexpr double kMomentSigmas = 3.0;    // band for standardized moments
constexpr double kComposeRelTol = 0.05;  // chain vs closed-form jump
constexpr double kDiffusionBudgetSec = 120.0;

// criterion 3: verdict semantics over random candidate sets
constexpr uint64_t kPartitionSets = 10000;
constexpr double kPartitionBudgetSec = 60.0;

// criteria 4 and 6: end-to-end defense quality
constexpr double kVictimAsrMin = 0.90;  // the attack must work before the defense
constexpr double kTprMin = 0.90;
constexpr double kFprMax = 0.05;
constexpr double kAsrMax = 0.05;
constexpr double kAccBand = 0.03;  // |acc - control acc|, control trained on clean data

// criteria 5 and 7: label-level detection
constexpr double kIndexBar = 2.0;          // matches detect.threshold in the fixture runs
constexpr double kPerTargetAsrMax = 0.05;  // criterion 7 per-target bar

}  // namespace bars

// ---------------------------------------------------------------------------
// fixture recipe shared by --prepare and criteria 4..9

namespace fix {

constexpr uint64_t kSeed = 2026;

// full-scale runs (c4, clean, blend, multi, repeat)
constexpr uint64_t kTrainCount = 5000;
constexpr uint64_t kTestCount = 1000;
constexpr uint64_t kVictimEpochs = 12;
constexpr uint64_t kBenignEpochs = 12;
constexpr uint64_t kPurifyT = 60;
constexpr uint64_t kPurifyN = 2;
constexpr uint64_t kPurifyM = 5;
constexpr uint64_t kPurifyTau = 3;
constexpr uint64_t kSecondTargetLabel = 7;

// ablation sweeps run at reduced scale; only trends are asserted
constexpr uint64_t kAblTrainCount = 1000;
constexpr uint64_t kAblTestCount = 400;
constexpr uint64_t kAblEpochs = 8;
constexpr uint64_t kAblBaseT = 30;
const std::vector<double> kAblTValues = {30.0, 60.0};
const std::vector<double> kAblTauValues = {3.0, 10.0};  // 10 == n*m

// denoiser trained once on a clean reserve set, reused by every run
constexpr uint64_t kDenoiserSeed = 9001;
constexpr uint64_t kDenoiserDataCount = 5000;
constexpr uint32_t kDenoiserBase = 8;
constexpr uint32_t kDenoiserEpochs = 30;
constexpr uint32_t kDenoiserBatch = 32;
constexpr float kDenoiserLr = 2e-3f;

}  // namespace fix

// ---------------------------------------------------------------------------
// small helpers

struct Outcome {
  bool pass = false;
  std::string detail;
};

double elapsed_sec(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::optional<double> metric_opt(const MetricsTable& t, const std::string& name) {
  for (const auto& [key, rate] : t)
    if (key == name) return rate.defined() ? std::optional<double>(rate.value()) : std::nullopt;
  return std::nullopt;
}

double metric_or_throw(const MetricsTable& t, const std::string& name) {
  auto v = metric_opt(t, name);
  if (!v) throw IntegrityError("metric '" + name + "' missing or undefined");
  return *v;
}

bool close_rel(double got, double want, double tol) {
  return std::fabs(got - want) <= tol * std::max(1.0, std::fabs(want));
}

// ---------------------------------------------------------------------------
// criterion 1: transition tallies, anomaly index, candidate ranking, and the
// label-distribution divergence against naive reimplementations

struct OracleTally {
  std::vector<uint32_t> counts;
  uint16_t mode = 0;
  uint32_t eta = 0;
};

OracleTally oracle_tally(const std::vector<uint16_t>& labels, uint16_t num_classes) {
  OracleTally o;
  o.counts.assign(num_classes, 0);
  for (uint16_t l : labels) o.counts[l] += 1;
  for (uint16_t k = 1; k < num_classes; ++k)
    if (o.counts[k] > o.counts[o.mode]) o.mode = k;
  for (uint16_t k = 0; k < num_classes; ++k)
    if (k != o.mode && o.counts[k] > o.eta) o.eta = o.counts[k];
  return o;
}

double oracle_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> oracle_mad_index(const std::vector<double>& scores) {
  const double med = oracle_median(scores);
  std::vector<double> dev;
  dev.reserve(scores.size());
  for (double s : scores) dev.push_back(std::fabs(s - med));
  double c = 1.4826 * oracle_median(dev);
  if (c == 0.0) {
    double mean = 0.0;
    for (double d : dev) mean += d;
    c = 1.4826 * mean / static_cast<double>(dev.size());
  }
  std::vector<double> index(scores.size(), 0.0);
  if (c == 0.0) return index;
  for (size_t i = 0; i < scores.size(); ++i) index[i] = std::max(0.0, scores[i] - med) / c;
  return index;
}

// stable descending rank by counting strictly-larger values (earlier index
// wins ties); the answer sits at floor-rounded rank 0.8 * (K - 1)
uint32_t oracle_select(const std::vector<double>& dists) {
  const size_t n = dists.size();
  const auto want = static_cast<size_t>(std::llround(0.8 * static_cast<double>(n - 1)));
  for (size_t i = 0; i < n; ++i) {
    size_t ahead = 0;
    for (size_t j = 0; j < n; ++j)
      if (dists[j] > dists[i] || (dists[j] == dists[i] && j < i)) ++ahead;
    if (ahead == want) return static_cast<uint32_t>(i);
  }
  throw StageError("rank oracle found no element at the target rank");
}

double oracle_kl(const std::vector<uint64_t>& counts, uint16_t label, uint16_t num_classes,
                 double eps) {
  uint64_t total = 0;
  for (uint64_t c : counts) total += c;
  if (total == 0) return 0.0;
  double acc = 0.0;
  for (uint16_t k = 0; k < num_classes; ++k) {
    if (counts[k] == 0) continue;
    const double a = static_cast<double>(counts[k]) / static_cast<double>(total);
    const double q = (k == label) ? (1.0 - eps + eps / num_classes) : (eps / num_classes);
    acc += a * std::log(a / q);
  }
  return acc;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  RngStream rng(child_seed(fix::kSeed, "oracle-instances"));
  double worst = 0.0;

  auto close_f = [&worst](double got, double want) {
    const double rel = std::fabs(got - want) / std::max(1.0, std::fabs(want));
    worst = std::max(worst, rel);
    return rel <= bars::kTolFloat;
  };

  // closed-form spot values, held to the tight tolerance
  {
    LabelUnion u;
    u.label = 3;
    u.entry_counts = {0, 0, 0, 40, 0, 0, 0, 0, 0, 0};
    const double eps = 1e-4;
    const double want_identity = -std::log(1.0 - eps + eps / 10.0);
    if (std::fabs(kl_metric(u, 10, eps) - want_identity) > bars::kTolExact)
      return {false, "point-mass divergence off closed form"};

    u.entry_counts.assign(10, 4);  // uniform over 10 classes
    const double a = 0.1;
    const double want_uniform = a * std::log(a / (1.0 - eps + eps / 10.0)) +
                                9.0 * a * std::log(a / (eps / 10.0));
    if (std::fabs(kl_metric(u, 10, eps) - want_uniform) > bars::kTolExact)
      return {false, "uniform divergence off closed form"};

    const std::vector<double> scores = {2, 3, 3, 4, 20};
    const std::vector<double> idx = mad_anomaly_index(scores);
    // med 3, mad 1, outlier index (20 - 3) / 1.4826
    if (std::fabs(idx[4] - 17.0 / 1.4826) > bars::kTolExact)
      return {false, "outlier index off closed form"};
  }

  uint64_t instances = 0;
  for (uint64_t i = 0; i < bars::kOracleInstances; ++i) {
    // transition tally: counts, mode, and runner-up count are integer-exact
    {
      const auto num_classes = static_cast<uint16_t>(2 + rng.uniform_below(9));
      std::vector<uint16_t> labels(1 + rng.uniform_below(30));
      for (auto& l : labels) l = static_cast<uint16_t>(rng.uniform_below(num_classes));
      const TransitionStats got = transition_stats(labels, num_classes);
      const OracleTally want = oracle_tally(labels, num_classes);
      if (got.counts != want.counts || got.mode != want.mode || got.eta != want.eta ||
          got.mode_count != want.counts[want.mode])
        return {false, "tally mismatch at instance " + std::to_string(i)};
      if (transition_coefficient(labels, num_classes) != want.eta)
        return {false, "coefficient mismatch at instance " + std::to_string(i)};
    }

    // anomaly index over mixed score shapes (constants, ties, outliers)
    {
      std::vector<double> scores(2 + rng.uniform_below(20));
      const uint64_t style = rng.uniform_below(4);
      for (size_t k = 0; k < scores.size(); ++k) {
        switch (style) {
          case 0: scores[k] = 2.5; break;
          case 1: scores[k] = static_cast<double>(rng.uniform_below(6)); break;
          case 2: scores[k] = rng.uniform(0.0, 10.0); break;
          default: scores[k] = (k == 0) ? rng.uniform(5.0, 50.0) : 0.0; break;
        }
      }
      const std::vector<double> got = mad_anomaly_index(scores);
      const std::vector<double> want = oracle_mad_index(scores);
      for (size_t k = 0; k < scores.size(); ++k)
        if (!close_f(got[k], want[k]))
          return {false, "anomaly index mismatch at instance " + std::to_string(i)};
    }

    // candidate ranking, ties included, integer-exact
    {
      std::vector<double> dists(1 + rng.uniform_below(60));
      const bool quantize = rng.uniform_below(3) == 0;
      for (auto& d : dists)
        d = quantize ? 0.1 * static_cast<double>(rng.uniform_below(11)) : rng.uniform();
      if (select_purified_index(dists) != oracle_select(dists))
        return {false, "rank selection mismatch at instance " + std::to_string(i)};
    }

    // label-distribution divergence with sparse histograms
    {
      const auto num_classes = static_cast<uint16_t>(2 + rng.uniform_below(9));
      LabelUnion u;
      u.label = static_cast<uint16_t>(rng.uniform_below(num_classes));
      u.contributing = 1;
      u.entry_counts.assign(num_classes, 0);
      if (rng.uniform_below(10) != 0)
        for (auto& c : u.entry_counts)
          c = (rng.uniform_below(3) == 0) ? 0 : rng.uniform_below(50);
      const double got = kl_metric(u, num_classes, 1e-4);
      const double want = oracle_kl(u.entry_counts, u.label, num_classes, 1e-4);
      if (!close_f(got, want))
        return {false, "divergence mismatch at instance " + std::to_string(i)};
    }
    ++instances;
  }

  const double sec = elapsed_sec(t0);
  if (sec > bars::kOracleBudgetSec)
    return {false, "oracle suite took " + fmt(sec) + "s, budget " + fmt(bars::kOracleBudgetSec)};
  std::ostringstream d;
  d << instances << " randomized instances per oracle, worst relative deviation " << fmt(worst)
    << " (tol " << fmt(bars::kTolFloat) << "), spot values within " << fmt(bars::kTolExact)
    << ", " << fmt(sec) << "s";
  return {true, d.str()};
}

// ---------------------------------------------------------------------------
// criterion 2: noising moments and step composition

Outcome criterion2() {
  const auto t0 = Clock::now();
  const NoiseSchedule sched = make_schedule(200, 1e-4, 0.02);
  RngStream rng(child_seed(fix::kSeed, "noising-law"));

  ImageTensor x0(1, 4, 4);
  for (auto& v : x0.data) v = static_cast<float>(0.2 + 0.6 * rng.uniform());
  const size_t pixels = x0.size();

  std::ostringstream d;

  // one-shot noising: standardized residuals are unit gaussians
  for (const uint32_t t : {uint32_t(1), uint32_t(40), uint32_t(200)}) {
    const double ab = sched.alpha_bar_at(t);
    const double coef = std::sqrt(ab);
    const double sd = std::sqrt(1.0 - ab);
    double s1 = 0.0, s2 = 0.0;
    const double m_count = static_cast<double>(bars::kMomentDraws * pixels);
    for (uint64_t i = 0; i < bars::kMomentDraws; ++i) {
      const ImageTensor xt = forward_diffuse(x0, sched, t, rng);
      for (size_t p = 0; p < pixels; ++p) {
        const double e = (xt.data[p] - coef * x0.data[p]) / sd;
        s1 += e;
        s2 += e * e;
      }
    }
    const double mean = s1 / m_count;
    const double var = (s2 - m_count * mean * mean) / (m_count - 1.0);
    const double mean_band = bars::kMomentSigmas / std::sqrt(m_count);
    const double var_band = bars::kMomentSigmas * std::sqrt(2.0 / (m_count - 1.0));
    if (std::fabs(mean) > mean_band)
      return {false, "depth " + std::to_string(t) + ": residual mean " + fmt(mean) +
                         " outside " + fmt(mean_band)};
    if (std::fabs(var - 1.0) > var_band)
      return {false, "depth " + std::to_string(t) + ": residual variance " + fmt(var) +
                         " outside 1 +- " + fmt(var_band)};
    d << "t" << t << " mean " << fmt(mean) << " var " << fmt(var) << "; ";
  }

  // stepwise chain reaches the closed-form jump in both moments
  const uint32_t tc = 40;
  std::vector<double> sum(pixels, 0.0), sumsq(pixels, 0.0);
  std::vector<double> x(pixels);
  for (uint64_t i = 0; i < bars::kMomentDraws; ++i) {
    for (size_t p = 0; p < pixels; ++p) x[p] = x0.data[p];
    for (uint32_t k = 1; k <= tc; ++k) {
      const double b = sched.beta_at(k);
      const double keep = std::sqrt(1.0 - b);
      const double add = std::sqrt(b);
      for (size_t p = 0; p < pixels; ++p) x[p] = keep * x[p] + add * rng.normal();
    }
    for (size_t p = 0; p < pixels; ++p) {
      sum[p] += x[p];
      sumsq[p] += x[p] * x[p];
    }
  }
  const double n_draws = static_cast<double>(bars::kMomentDraws);
  double dot_mx = 0.0, dot_xx = 0.0, var_mean = 0.0;
  for (size_t p = 0; p < pixels; ++p) {
    const double mean_p = sum[p] / n_draws;
    dot_mx += mean_p * x0.data[p];
    dot_xx += static_cast<double>(x0.data[p]) * x0.data[p];
    var_mean += (sumsq[p] - n_draws * mean_p * mean_p) / (n_draws - 1.0);
  }
  var_mean /= static_cast<double>(pixels);
  const double coef_hat = dot_mx / dot_xx;
  const double ab = sched.alpha_bar_at(tc);
  const double coef_want = std::sqrt(ab);
  const double var_want = 1.0 - ab;
  if (!close_rel(coef_hat, coef_want, bars::kComposeRelTol))
    return {false, "composed signal coefficient " + fmt(coef_hat) + " vs " + fmt(coef_want)};
  if (!close_rel(var_mean, var_want, bars::kComposeRelTol))
    return {false, "composed variance " + fmt(var_mean) + " vs " + fmt(var_want)};

  const double sec = elapsed_sec(t0);
  if (sec > bars::kDiffusionBudgetSec)
    return {false, "moment suite took " + fmt(sec) + "s, budget " + fmt(bars::kDiffusionBudgetSec)};
  d << "composed t" << tc << " coef " << fmt(coef_hat) << "/" << fmt(coef_want) << " var "
    << fmt(var_mean) << "/" << fmt(var_want) << " (rel tol " << fmt(bars::kComposeRelTol)
    << "), " << fmt(sec) << "s";
  return {true, d.str()};
}

// ---------------------------------------------------------------------------
// criterion 3: verdicts are total, mutually exclusive, and monotone in tau

Outcome criterion3() {
  const auto t0 = Clock::now();
  RngStream rng(child_seed(fix::kSeed, "verdict-sets"));
  uint64_t verdicts = 0;

  for (uint64_t i = 0; i < bars::kPartitionSets; ++i) {
    const auto num_classes = static_cast<uint16_t>(2 + rng.uniform_below(9));
    std::vector<uint16_t> labels(2 + rng.uniform_below(19));
    for (auto& l : labels) l = static_cast<uint16_t>(rng.uniform_below(num_classes));
    const auto own = static_cast<uint16_t>(rng.uniform_below(num_classes));
    const TransitionStats stats = transition_stats(labels, num_classes);
    const OracleTally want = oracle_tally(labels, num_classes);

    bool seen_non_s = false;
    std::optional<std::pair<SampleClass, uint16_t>> settled;
    const auto max_tau = static_cast<uint32_t>(labels.size() + 1);
    for (uint32_t tau = 1; tau <= max_tau; ++tau) {
      const SampleVerdict v = classify_sample(stats, own, tau, false);

      // exactly one defining predicate holds
      const bool p_s = want.eta >= tau;
      const bool p_b = !p_s && want.mode == own;
      const bool p_p = !p_s && want.mode != own;
      if (static_cast<int>(p_s) + static_cast<int>(p_b) + static_cast<int>(p_p) != 1)
        return {false, "predicates not exclusive at set " + std::to_string(i)};
      const SampleClass expect =
          p_s ? SampleClass::Suspicious : (p_b ? SampleClass::Benign : SampleClass::Poisoned);
      if (v.cls != expect)
        return {false, "verdict mismatch at set " + std::to_string(i) + " tau " +
                           std::to_string(tau)};
      if (v.cls == SampleClass::Poisoned && v.consensus != want.mode)
        return {false, "consensus mismatch at set " + std::to_string(i)};

      // raising tau never re-flags a sample, and settled verdicts are stable
      if (v.cls == SampleClass::Suspicious) {
        if (seen_non_s)
          return {false, "suspicious after settling at set " + std::to_string(i) + " tau " +
                             std::to_string(tau)};
      } else {
        seen_non_s = true;
        const auto now = std::make_pair(v.cls, v.consensus);
        if (settled && *settled != now)
          return {false, "settled verdict drifted at set " + std::to_string(i)};
        settled = now;
      }
      ++verdicts;
    }

    // strict mode: any disagreement at all defers the sample
    if (i % 4 == 0) {
      const SampleVerdict v = classify_sample(stats, own, max_tau, true);
      const SampleClass expect =
          want.eta > 0 ? SampleClass::Suspicious
                       : (want.mode == own ? SampleClass::Benign : SampleClass::Poisoned);
      if (v.cls != expect) return {false, "strict verdict mismatch at set " + std::to_string(i)};
      ++verdicts;
    }
  }

  const double sec = elapsed_sec(t0);
  if (sec > bars::kPartitionBudgetSec)
    return {false, "verdict suite took " + fmt(sec) + "s, budget " + fmt(bars::kPartitionBudgetSec)};
  std::ostringstream d;
  d << bars::kPartitionSets << " random candidate sets, " << verdicts
    << " verdicts checked for totality, exclusivity, tau monotonicity, " << fmt(sec) << "s";
  return {true, d.str()};
}

// ---------------------------------------------------------------------------
// criteria 4..9 read fixture artifacts

std::string defense_bars() {
  std::ostringstream d;
  d << " (bars: victim_asr>=" << fmt(bars::kVictimAsrMin) << " tpr>=" << fmt(bars::kTprMin)
    << " fpr<=" << fmt(bars::kFprMax) << " asr<=" << fmt(bars::kAsrMax)
    << " |acc-control|<=" << fmt(bars::kAccBand) << ")";
  return d.str();
}

Outcome check_defense_run(const fs::path& run_dir, const fs::path& control_dir) {
  const MetricsTable m = load_metrics(run_dir / "metrics.tsv");
  const MetricsTable ctl = load_metrics(control_dir / "metrics.tsv");
  const double victim_asr = metric_or_throw(m, "victim.asr");
  const double tpr = metric_or_throw(m, "tpr");
  const double fpr = metric_or_throw(m, "fpr");
  const double acc = metric_or_throw(m, "acc");
  const double asr = metric_or_throw(m, "asr");
  const double control_acc = metric_or_throw(ctl, "acc");

  std::ostringstream d;
  d << "victim_asr " << fmt(victim_asr) << ", tpr " << fmt(tpr) << ", fpr " << fmt(fpr)
    << ", asr " << fmt(asr) << ", acc " << fmt(acc) << " vs control " << fmt(control_acc)
    << defense_bars();
  const bool ok = victim_asr >= bars::kVictimAsrMin && tpr >= bars::kTprMin &&
                  fpr <= bars::kFprMax && asr <= bars::kAsrMax &&
                  std::fabs(acc - control_acc) <= bars::kAccBand;
  return {ok, d.str()};
}

Outcome criterion4(const fs::path& fx) { return check_defense_run(fx / "c4", fx / "clean"); }

Outcome criterion5(const fs::path& fx) {
  const TargetReport rep = load_target_report(fx / "c4" / "target_report.tsv");
  std::ostringstream d;
  bool ok = true;
  double target_index = -1.0, worst_benign = 0.0;
  for (const TargetReportRow& row : rep.rows) {
    if (row.label == 0) {
      target_index = row.anomaly_index;
      if (!(row.detected && row.anomaly_index > bars::kIndexBar)) ok = false;
    } else {
      worst_benign = std::max(worst_benign, row.anomaly_index);
      if (row.anomaly_index > bars::kIndexBar) ok = false;
    }
  }
  if (target_index < 0.0) return {false, "target label 0 missing from the report"};

  // the unpoisoned control flags nothing and passes its data through untouched
  const TargetReport clean_rep = load_target_report(fx / "clean" / "target_report.tsv");
  const bool clean_quiet = clean_rep.detected.empty();
  bool clean_identical = true;
  for (const char* f : {"images.bin", "labels.tsv"})
    if (sha256_file(fx / "clean" / "purified" / f) !=
        sha256_file(fx / "clean" / "data" / "raw_train" / f))
      clean_identical = false;
  ok = ok && clean_quiet && clean_identical;

  d << "target index " << fmt(target_index) << " (bar >" << fmt(bars::kIndexBar)
    << "), worst benign index " << fmt(worst_benign) << " (bar <=" << fmt(bars::kIndexBar)
    << "), control detections " << clean_rep.detected.size() << ", control passthrough "
    << (clean_identical ? "bitwise" : "DIVERGED");
  return {ok, d.str()};
}

Outcome criterion6(const fs::path& fx) { return check_defense_run(fx / "blend", fx / "clean"); }

Outcome criterion7(const fs::path& fx) {
  const TargetReport rep = load_target_report(fx / "multi" / "target_report.tsv");
  const std::set<uint16_t> detected(rep.detected.begin(), rep.detected.end());
  const std::set<uint16_t> want = {0, static_cast<uint16_t>(fix::kSecondTargetLabel)};

  const MetricsTable m = load_metrics(fx / "multi" / "metrics.tsv");
  const double asr0 = metric_or_throw(m, "asr.0");
  const double asr7 = metric_or_throw(m, "asr." + std::to_string(fix::kSecondTargetLabel));
  const double vasr0 = metric_or_throw(m, "victim.asr.0");
  const double vasr7 =
      metric_or_throw(m, "victim.asr." + std::to_string(fix::kSecondTargetLabel));

  std::ostringstream d;
  d << "detected {";
  for (uint16_t l : detected) d << " " << l;
  d << " }, want { 0 " << fix::kSecondTargetLabel << " }, asr.0 " << fmt(asr0) << ", asr."
    << fix::kSecondTargetLabel << " " << fmt(asr7) << " (bar <=" << fmt(bars::kPerTargetAsrMax)
    << "), victim asr " << fmt(vasr0) << "/" << fmt(vasr7);
  const bool ok =
      detected == want && asr0 <= bars::kPerTargetAsrMax && asr7 <= bars::kPerTargetAsrMax;
  return {ok, d.str()};
}

struct SweepLine {
  double value = 0.0;
  std::map<std::string, double> rates;  // "-" entries omitted
  std::string note;
};

std::vector<SweepLine> read_sweep(const fs::path& file, const std::string& want_axis) {
  std::ifstream in(file);
  if (!in) throw IntegrityError("cannot read " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != "# axis\t" + want_axis)
    throw IntegrityError("unexpected sweep header in " + file.string());
  std::vector<SweepLine> rows;
  const char* names[4] = {"tpr", "fpr", "acc", "asr"};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, '\t');
    if (f.size() != 6) throw IntegrityError("malformed sweep row in " + file.string());
    SweepLine r;
    r.value = std::stod(f[0]);
    for (int k = 0; k < 4; ++k)
      if (f[1 + k] != "-") r.rates[names[k]] = std::stod(f[1 + k]);
    r.note = f[5];
    rows.push_back(std::move(r));
  }
  return rows;
}

double sweep_rate(const std::vector<SweepLine>& rows, double value, const std::string& name) {
  for (const SweepLine& r : rows)
    if (r.value == value) {
      auto it = r.rates.find(name);
      if (it == r.rates.end())
        throw IntegrityError("sweep row " + fmt(value) + " lacks rate " + name);
      return it->second;
    }
  throw IntegrityError("sweep row " + fmt(value) + " missing");
}

Outcome criterion8(const fs::path& fx) {
  const auto t_rows = read_sweep(fx / "ablation_T" / "sweep.tsv", "T");
  const auto tau_rows = read_sweep(fx / "ablation_tau" / "sweep.tsv", "tau");

  const double tpr_low = sweep_rate(t_rows, fix::kAblTValues[0], "tpr");
  const double tpr_high = sweep_rate(t_rows, fix::kAblTValues[1], "tpr");
  const double asr_tau_low = sweep_rate(tau_rows, fix::kAblTauValues[0], "asr");
  const double asr_tau_high = sweep_rate(tau_rows, fix::kAblTauValues[1], "asr");

  std::string tau_high_note;
  for (const SweepLine& r : tau_rows)
    if (r.value == fix::kAblTauValues[1]) tau_high_note = r.note;
  const bool shared = tau_high_note == "reused shared candidate cache" &&
                      fs::exists(fx / "ablation_tau" / "shared_cache" / "MANIFEST");

  std::ostringstream d;
  d << "tpr(T=" << fmt(fix::kAblTValues[0]) << ") " << fmt(tpr_low) << " < tpr(T="
    << fmt(fix::kAblTValues[1]) << ") " << fmt(tpr_high) << "; asr(tau="
    << fmt(fix::kAblTauValues[1]) << ") " << fmt(asr_tau_high) << " > asr(tau="
    << fmt(fix::kAblTauValues[0]) << ") " << fmt(asr_tau_low) << "; shared cache "
    << (shared ? "verified" : "MISSING");
  const bool ok = tpr_low < tpr_high && asr_tau_high > asr_tau_low && shared;
  return {ok, d.str()};
}

Outcome criterion9(const fs::path& fx) {
  std::ostringstream d;
  bool ok = true;
  for (const char* rel : {"purified/images.bin", "purified/labels.tsv", "metrics.tsv"}) {
    const std::string a = sha256_file(fx / "c4" / rel);
    const std::string b = sha256_file(fx / "repeat" / rel);
    if (a != b) ok = false;
    d << rel << " " << a.substr(0, 12) << (a == b ? "==" : "!=") << b.substr(0, 12) << "; ";
  }
  d << (ok ? "same-seed runs identical" : "same-seed runs DIVERGED");
  return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// fixture construction

KvDoc full_base_doc(const fs::path& fx, const std::string& run_name) {
  KvDoc d = default_config();
  d.set("run.dir", (fx / run_name).string());
  d.set_u64("seed", fix::kSeed);
  d.set_u64("data.count", fix::kTrainCount);
  d.set_u64("data.test_count", fix::kTestCount);
  d.set_u64("victim.epochs", fix::kVictimEpochs);
  d.set_u64("benign.epochs", fix::kBenignEpochs);
  d.set("denoiser.checkpoint", (fx / "denoiser.ckpt").string());
  d.set_u64("purify.T", fix::kPurifyT);
  d.set_u64("purify.n", fix::kPurifyN);
  d.set_u64("purify.m", fix::kPurifyM);
  d.set_u64("purify.tau", fix::kPurifyTau);
  return d;
}

KvDoc ablation_base_doc(const fs::path& fx, const std::string& run_name) {
  KvDoc d = full_base_doc(fx, run_name);
  d.set_u64("data.count", fix::kAblTrainCount);
  d.set_u64("data.test_count", fix::kAblTestCount);
  d.set_u64("victim.epochs", fix::kAblEpochs);
  d.set_u64("benign.epochs", fix::kAblEpochs);
  d.set_u64("purify.T", fix::kAblBaseT);
  return d;
}

void ensure_denoiser(const fs::path& fx) {
  const fs::path ckpt = fx / "denoiser.ckpt";
  const fs::path meta_file = fx / "denoiser_meta.txt";

  KvDoc want;
  want.set_u64("data.count", fix::kDenoiserDataCount);
  want.set_u64("data.seed", fix::kDenoiserSeed);
  want.set_u64("arch.base", fix::kDenoiserBase);
  want.set_u64("train.epochs", fix::kDenoiserEpochs);
  want.set_u64("train.batch", fix::kDenoiserBatch);
  want.set_f64("train.lr", fix::kDenoiserLr);
  want.set_u64("schedule.steps", 200);

  if (fs::exists(ckpt) && fs::exists(meta_file)) {
    if (KvDoc::read_file(meta_file).canonical_string() == want.canonical_string()) {
      std::cout << "denoiser checkpoint present, reusing " << ckpt.string() << "\n";
      return;
    }
    throw IntegrityError("denoiser recipe drifted; delete " + fx.string() + " and rerun");
  }

  std::cout << "training fixture denoiser (" << fix::kDenoiserEpochs << " epochs on "
            << fix::kDenoiserDataCount << " clean samples)\n";
  const auto t0 = Clock::now();
  PatternDataParams p;
  p.count = fix::kDenoiserDataCount;
  p.seed = fix::kDenoiserSeed;
  const LabeledDataset data = make_pattern_dataset(p);
  const NoiseSchedule sched = make_schedule(200, 1e-4, 0.02);
  UnetDenoiser model(UnetArch{1, p.side, fix::kDenoiserBase, 64},
                     child_seed(fix::kDenoiserSeed, "denoiser-init"));
  RngStream rng(child_seed(fix::kDenoiserSeed, "denoiser-train"));
  const DenoiseTrainConfig tc{fix::kDenoiserEpochs, fix::kDenoiserBatch, fix::kDenoiserLr};
  const std::vector<float> losses = train_denoiser(model, data, sched, tc, rng);
  model.save(ckpt);
  want.write_file(meta_file);
  std::cout << "denoiser ready in " << fmt(elapsed_sec(t0)) << "s, loss " << fmt(losses.front())
            << " -> " << fmt(losses.back()) << "\n";
}

void run_case(const std::string& name, const KvDoc& doc) {
  std::cout << "== fixture run " << name << "\n";
  const auto t0 = Clock::now();
  RunConfig cfg = RunConfig::from_kv(doc);
  cfg.validate();
  const RunManifest man = run_pipeline(cfg, Stage::Evaluate);
  for (const StageOutcome& o : man.outcomes)
    std::cout << "   " << to_string(o.stage) << (o.ran ? " ran " : " skipped ") << o.wall_ms
              << "ms\n";
  std::cout << "== " << name << " done in " << fmt(elapsed_sec(t0)) << "s\n";
}

void run_sweep_case(const fs::path& fx, const std::string& name, const std::string& axis,
                    const std::vector<double>& values, const KvDoc& base_doc) {
  std::cout << "== fixture sweep " << name << " axis " << axis << "\n";
  const auto t0 = Clock::now();
  RunConfig base = RunConfig::from_kv(base_doc);
  base.validate();
  const std::vector<SweepRow> rows = hyperparameter_sweep(base, axis, values, fx / name);
  save_sweep(fx / name / "sweep.tsv", axis, rows);
  for (const SweepRow& r : rows) {
    const auto tpr = metric_opt(r.metrics, "tpr");
    const auto asr = metric_opt(r.metrics, "asr");
    std::cout << "   " << axis << "=" << fmt(r.value) << " tpr "
              << (tpr ? fmt(*tpr) : std::string("-")) << " asr "
              << (asr ? fmt(*asr) : std::string("-"))
              << (r.note.empty() ? "" : " (" + r.note + ")") << "\n";
  }
  std::cout << "== " << name << " done in " << fmt(elapsed_sec(t0)) << "s\n";
}

int run_prepare(const fs::path& fx) {
  const auto t0 = Clock::now();
  fs::create_directories(fx);
  ensure_denoiser(fx);

  run_case("c4", full_base_doc(fx, "c4"));

  {
    KvDoc d = full_base_doc(fx, "clean");
    d.set_bool("attack.enabled", false);
    run_case("clean", d);
  }
  {
    KvDoc d = full_base_doc(fx, "blend");
    d.set("attack.target.0.kind", "blend");
    run_case("blend", d);
  }
  {
    KvDoc d = full_base_doc(fx, "multi");
    d.set_u64("attack.num_targets", 2);
    d.set_u64("attack.target.1.label", fix::kSecondTargetLabel);
    d.set("attack.target.1.kind", "patch");
    d.set_u64("attack.target.1.patch_size", 3);
    d.set_f64("attack.target.1.patch_value", 1.0);
    d.set("attack.target.1.corner", "top_left");
    d.set_f64("attack.target.1.blend_alpha", 0.2);
    d.set_f64("attack.target.1.freq_magnitude", 1.0);
    run_case("multi", d);
  }

  run_case("repeat", full_base_doc(fx, "repeat"));

  run_sweep_case(fx, "ablation_T", "T", fix::kAblTValues, ablation_base_doc(fx, "abl_T_base"));
  run_sweep_case(fx, "ablation_tau", "tau", fix::kAblTauValues,
                 ablation_base_doc(fx, "abl_tau_base"));

  std::cout << "[PASS] prepare: fixture at " << fx.string() << " ready in "
            << fmt(elapsed_sec(t0)) << "s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks for the dataset sanitization pipeline"};
  bool prepare = false;
  int criterion = 0;
  std::string fixture = "acceptance_fixture";
  app.add_flag("--prepare", prepare, "build the shared fixture runs");
  app.add_option("--criterion", criterion, "criterion number, 1..9")->check(CLI::Range(1, 9));
  app.add_option("--fixture", fixture, "fixture directory");
  CLI11_PARSE(app, argc, argv);

  if (prepare == (criterion != 0)) {
    std::cerr << "pass exactly one of --prepare or --criterion\n";
    return 2;
  }

  const fs::path fx = fs::absolute(fixture);
  try {
    if (prepare) return run_prepare(fx);

    if (criterion >= 4 && !fs::exists(fx))
      throw StageError("fixture " + fx.string() + " missing; run --prepare first");

    Outcome out;
    switch (criterion) {
      case 1: out = criterion1(); break;
      case 2: out = criterion2(); break;
      case 3: out = criterion3(); break;
      case 4: out = criterion4(fx); break;
      case 5: out = criterion5(fx); break;
      case 6: out = criterion6(fx); break;
      case 7: out = criterion7(fx); break;
      case 8: out = criterion8(fx); break;
      default: out = criterion9(fx); break;
    }
    std::cout << (out.pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion << ": "
              << out.detail << "\n";
    return out.pass ? 0 : 1;
  } catch (const std::exception& e) {
    std::cout << "[FAIL] " << (prepare ? "prepare" : "criterion " + std::to_string(criterion))
              << ": " << e.what() << "\n";
    return 2;
  }
}
