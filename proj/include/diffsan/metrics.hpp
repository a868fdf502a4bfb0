#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffsan/attack.hpp"
#include "diffsan/classifier.hpp"

namespace diffsan {

// A rate kept with its raw counts so reports stay auditable. den == 0 means
// the rate is undefined.
struct RateWithCounts {
  uint64_t num = 0;
  uint64_t den = 0;

  bool defined() const { return den > 0; }
  double value() const;  // ConfigError when undefined
};

struct DetectionMetrics {
  RateWithCounts tpr;  // relabeled among poisoned
  RateWithCounts fpr;  // relabeled among benign
};

// A sample counts as detected when its purified label differs from its raw
// label.
DetectionMetrics detection_metrics(const LabeledDataset& raw, const LabeledDataset& purified,
                                   const PoisonLedger& ledger);

RateWithCounts accuracy_counts(Classifier& model, const LabeledDataset& clean_test);

// asr_test must come from build_asr_testset for this target (ground truth
// labels, target-class samples excluded); counts predictions equal to target.
RateWithCounts asr_counts(Classifier& model, const LabeledDataset& asr_test, uint16_t target);

using MetricsTable = std::vector<std::pair<std::string, RateWithCounts>>;

void save_metrics(const std::filesystem::path& path, const MetricsTable& table);
MetricsTable load_metrics(const std::filesystem::path& path);

}  // namespace diffsan
