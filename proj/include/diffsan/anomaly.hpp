#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "diffsan/purify.hpp"

namespace diffsan {

enum class SampleClass : uint8_t { Benign, Poisoned, Suspicious };

char sample_class_letter(SampleClass c);            // B / P / S
SampleClass sample_class_from_letter(char letter);  // IntegrityError on anything else

// Label tally over one sample's candidate entries.
struct TransitionStats {
  std::vector<uint32_t> counts;  // indexed by class
  uint16_t mode = 0;             // smallest label among the maxima
  uint32_t mode_count = 0;
  uint32_t eta = 0;  // second-highest count; 0 when one class holds every entry
};

TransitionStats transition_stats(const std::vector<uint16_t>& labels, uint16_t num_classes);
uint32_t transition_coefficient(const std::vector<uint16_t>& labels, uint16_t num_classes);

struct SampleVerdict {
  SampleClass cls = SampleClass::Benign;
  uint16_t consensus = 0;  // the mode; authoritative only for Poisoned
};

// eta >= tau marks Suspicious; otherwise mode == own_label is Benign and
// anything else is Poisoned with the mode as consensus. strict_eq3 widens
// Suspicious to every non-unanimous tally.
SampleVerdict classify_sample(const TransitionStats& stats, uint16_t own_label, uint32_t tau,
                              bool strict_eq3);

struct PartitionRow {
  uint32_t id = 0;
  SampleClass cls = SampleClass::Benign;
  uint16_t consensus = 0;
  bool has_consensus = false;  // true only for Poisoned rows
};

struct PartitionResult {
  std::vector<PartitionRow> rows;  // dense by id
  uint64_t num_benign = 0, num_poisoned = 0, num_suspicious = 0;

  void recount();
};

// once_only restricts the vote to round-1 entries. tau must fit the entry
// count actually voted on.
PartitionResult partition_dataset(const CandidateCache& cache, const LabeledDataset& ds,
                                  uint32_t tau, bool strict_eq3, bool once_only);

void save_partition(const std::filesystem::path& path, const PartitionResult& part);
PartitionResult load_partition(const std::filesystem::path& path);

}  // namespace diffsan
