#include "diffsan/anomaly.hpp"

#include <fstream>
#include <string>

#include "diffsan/common.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

char sample_class_letter(SampleClass c) {
  switch (c) {
    case SampleClass::Benign: return 'B';
    case SampleClass::Poisoned: return 'P';
    case SampleClass::Suspicious: return 'S';
  }
  throw StageError("unreachable sample class");
}

SampleClass sample_class_from_letter(char letter) {
  switch (letter) {
    case 'B': return SampleClass::Benign;
    case 'P': return SampleClass::Poisoned;
    case 'S': return SampleClass::Suspicious;
  }
  throw IntegrityError("unknown sample class letter");
}

TransitionStats transition_stats(const std::vector<uint16_t>& labels, uint16_t num_classes) {
  if (labels.empty()) throw ConfigError("transition stats need at least one label");
  TransitionStats s;
  s.counts.assign(num_classes, 0);
  for (uint16_t l : labels) {
    if (l >= num_classes) throw IntegrityError("candidate label out of range");
    ++s.counts[l];
  }
  uint32_t best = 0, second = 0;
  uint16_t best_label = 0;
  for (uint16_t c = 0; c < num_classes; ++c) {
    if (s.counts[c] > best) {  // strict: ties keep the smaller label
      second = best;
      best = s.counts[c];
      best_label = c;
    } else if (s.counts[c] > second) {
      second = s.counts[c];
    }
  }
  s.mode = best_label;
  s.mode_count = best;
  s.eta = second;
  return s;
}

uint32_t transition_coefficient(const std::vector<uint16_t>& labels, uint16_t num_classes) {
  return transition_stats(labels, num_classes).eta;
}

SampleVerdict classify_sample(const TransitionStats& stats, uint16_t own_label, uint32_t tau,
                              bool strict_eq3) {
  SampleVerdict v;
  v.consensus = stats.mode;
  if (stats.eta >= tau || (strict_eq3 && stats.eta > 0)) {
    v.cls = SampleClass::Suspicious;
  } else if (stats.mode == own_label) {
    v.cls = SampleClass::Benign;
  } else {
    v.cls = SampleClass::Poisoned;
  }
  return v;
}

void PartitionResult::recount() {
  num_benign = num_poisoned = num_suspicious = 0;
  for (const PartitionRow& r : rows) {
    switch (r.cls) {
      case SampleClass::Benign: ++num_benign; break;
      case SampleClass::Poisoned: ++num_poisoned; break;
      case SampleClass::Suspicious: ++num_suspicious; break;
    }
  }
}

PartitionResult partition_dataset(const CandidateCache& cache, const LabeledDataset& ds,
                                  uint32_t tau, bool strict_eq3, bool once_only) {
  if (cache.count() != ds.samples.size())
    throw IntegrityError("candidate cache covers a different sample count than the dataset");

  const uint64_t per_vote =
      once_only ? cache.params().get_u64("purify.m") : cache.entries_per_sample();
  if (tau < 1 || tau > per_vote) throw ConfigError("tau must be in [1, entries per vote]");

  PartitionResult out;
  out.rows.resize(ds.samples.size());
  for (uint32_t id = 0; id < cache.count(); ++id) {
    std::vector<CandidateCache::EntryMeta> meta = cache.load_meta(id);
    std::vector<uint16_t> labels;
    labels.reserve(meta.size());
    for (const auto& e : meta)
      if (!once_only || e.round == 1) labels.push_back(e.label);
    TransitionStats stats =
        transition_stats(labels, static_cast<uint16_t>(ds.num_classes));
    SampleVerdict v = classify_sample(stats, ds.samples[id].label, tau, strict_eq3);
    PartitionRow& row = out.rows[id];
    row.id = id;
    row.cls = v.cls;
    row.has_consensus = (v.cls == SampleClass::Poisoned);
    row.consensus = row.has_consensus ? v.consensus : 0;
  }
  out.recount();
  return out;
}

void save_partition(const std::filesystem::path& path, const PartitionResult& part) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  for (const PartitionRow& r : part.rows) {
    out << r.id << '\t' << sample_class_letter(r.cls) << '\t';
    if (r.has_consensus)
      out << r.consensus;
    else
      out << '-';
    out << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

PartitionResult load_partition(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot read " + path.string());
  PartitionResult part;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split(line, '\t');
    if (f.size() != 3)
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
    PartitionRow row;
    try {
      row.id = static_cast<uint32_t>(std::stoul(f[0]));
      std::string cls = trim(f[1]);
      if (cls.size() != 1)
        throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": bad class field");
      row.cls = sample_class_from_letter(cls[0]);
      std::string cons = trim(f[2]);
      if (cons != "-") {
        row.consensus = static_cast<uint16_t>(std::stoul(cons));
        row.has_consensus = true;
      }
    } catch (const IntegrityError&) {
      throw;
    } catch (const std::exception&) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    if (row.id != part.rows.size())
      throw IntegrityError(path.string() + ": ids must be dense and ascending");
    part.rows.push_back(row);
  }
  part.recount();
  return part;
}

}  // namespace diffsan
