#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffsan/anomaly.hpp"

namespace diffsan {

// Pooled candidate entries of every Poisoned-or-Suspicious sample that the
// dataset labels y.
struct LabelUnion {
  uint16_t label = 0;
  uint64_t contributing = 0;          // samples pooled into the union
  std::vector<uint64_t> entry_counts;  // candidate-label histogram
  uint64_t total_entries() const;
};

LabelUnion build_label_union(const PartitionResult& part, const CandidateCache& cache,
                             const LabeledDataset& ds, uint16_t y, bool once_only);

// KL(actual || ideal) where actual is the union's empirical label
// distribution and ideal is a point mass on the union's label mixed with
// uniform at weight eps. Empty union gives 0.
double kl_metric(const LabelUnion& u, uint16_t num_classes, double eps = 1e-4);

// One-sided MAD outlier index per score. med = median, c = 1.4826 * median
// absolute deviation (falling back to the mean absolute deviation, then to
// all-zero indices), index = max(0, s - med) / c. Needs at least 2 scores.
std::vector<double> mad_anomaly_index(const std::vector<double>& scores);

enum class TargetMetric { Count, Kl, Product };

TargetMetric target_metric_from_string(const std::string& s);  // ConfigError on anything else
std::string to_string(TargetMetric m);

struct LabelScore {
  uint64_t count = 0;  // contributing samples
  double kl = 0.0;
  double combined = 0.0;  // count * kl
};

struct TargetReportRow {
  uint16_t label = 0;
  LabelScore score;
  double anomaly_index = 0.0;
  bool detected = false;
};

struct TargetReport {
  std::vector<TargetReportRow> rows;     // one per class, ascending
  std::vector<uint16_t> detected;        // labels with anomaly_index > threshold
  double threshold = 2.0;

  bool is_benign() const { return detected.empty(); }
};

struct DetectConfig {
  TargetMetric metric = TargetMetric::Product;  // which score feeds the MAD pass
  double threshold = 2.0;
  double ideal_eps = 1e-4;
  bool once_only = false;  // restrict to round-1 entries, matching the partition
};

TargetReport detect_targets(const PartitionResult& part, const CandidateCache& cache,
                            const LabeledDataset& ds, const DetectConfig& cfg);

void save_target_report(const std::filesystem::path& path, const TargetReport& rep);
TargetReport load_target_report(const std::filesystem::path& path);

}  // namespace diffsan
