#include "diffsan/metrics.hpp"

#include <fstream>

#include "diffsan/common.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

double RateWithCounts::value() const {
  if (!defined()) throw ConfigError("rate is undefined (zero denominator)");
  return static_cast<double>(num) / static_cast<double>(den);
}

DetectionMetrics detection_metrics(const LabeledDataset& raw, const LabeledDataset& purified,
                                   const PoisonLedger& ledger) {
  const size_t N = raw.samples.size();
  if (purified.samples.size() != N)
    throw IntegrityError("raw and purified datasets have different sizes");
  if (ledger.entries.size() != N)
    throw IntegrityError("ledger does not cover the dataset");

  DetectionMetrics m;
  for (size_t i = 0; i < N; ++i) {
    if (raw.samples[i].id != purified.samples[i].id || ledger.entries[i].id != raw.samples[i].id)
      throw IntegrityError("sample ids disagree between dataset, purified copy and ledger");
    const bool detected = purified.samples[i].label != raw.samples[i].label;
    if (ledger.entries[i].is_poisoned) {
      ++m.tpr.den;
      if (detected) ++m.tpr.num;
    } else {
      ++m.fpr.den;
      if (detected) ++m.fpr.num;
    }
  }
  return m;
}

RateWithCounts accuracy_counts(Classifier& model, const LabeledDataset& clean_test) {
  if (clean_test.samples.empty()) throw ConfigError("accuracy needs a non-empty test set");
  RateWithCounts acc;
  for (const Sample& s : clean_test.samples) {
    ++acc.den;
    if (model.predict_one(s.image) == s.label) ++acc.num;
  }
  return acc;
}

RateWithCounts asr_counts(Classifier& model, const LabeledDataset& asr_test, uint16_t target) {
  if (asr_test.samples.empty()) throw ConfigError("attack success rate needs a non-empty test set");
  RateWithCounts asr;
  for (const Sample& s : asr_test.samples) {
    if (s.label == target)
      throw IntegrityError("attack test set contains a sample whose ground truth is the target");
    ++asr.den;
    if (model.predict_one(s.image) == target) ++asr.num;
  }
  return asr;
}

void save_metrics(const std::filesystem::path& path, const MetricsTable& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  for (const auto& [name, rate] : table) {
    out << name << '\t' << rate.num << '\t' << rate.den << '\t';
    if (rate.defined())
      out << format_double(rate.value());
    else
      out << '-';
    out << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

MetricsTable load_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot read " + path.string());
  MetricsTable table;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split(line, '\t');
    if (f.size() != 4)
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
    RateWithCounts rate;
    try {
      rate.num = std::stoull(f[1]);
      rate.den = std::stoull(f[2]);
    } catch (const std::exception&) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    table.emplace_back(trim(f[0]), rate);
  }
  return table;
}

}  // namespace diffsan
