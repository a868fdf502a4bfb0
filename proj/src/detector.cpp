#include "diffsan/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "diffsan/common.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

uint64_t LabelUnion::total_entries() const {
  return std::accumulate(entry_counts.begin(), entry_counts.end(), uint64_t{0});
}

namespace {

bool pooled(SampleClass c) {
  return c == SampleClass::Poisoned || c == SampleClass::Suspicious;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

LabelUnion build_label_union(const PartitionResult& part, const CandidateCache& cache,
                             const LabeledDataset& ds, uint16_t y, bool once_only) {
  if (part.rows.size() != ds.samples.size() || cache.count() != ds.samples.size())
    throw IntegrityError("partition, cache and dataset cover different sample counts");
  LabelUnion u;
  u.label = y;
  u.entry_counts.assign(ds.num_classes, 0);
  for (uint32_t id = 0; id < cache.count(); ++id) {
    if (ds.samples[id].label != y || !pooled(part.rows[id].cls)) continue;
    ++u.contributing;
    for (const auto& e : cache.load_meta(id)) {
      if (once_only && e.round != 1) continue;
      if (e.label >= ds.num_classes) throw IntegrityError("candidate label out of range");
      ++u.entry_counts[e.label];
    }
  }
  return u;
}

double kl_metric(const LabelUnion& u, uint16_t num_classes, double eps) {
  const uint64_t total = u.total_entries();
  if (total == 0) return 0.0;
  if (u.entry_counts.size() != num_classes)
    throw ConfigError("label union histogram does not match the class count");
  double kl = 0.0;
  for (uint16_t k = 0; k < num_classes; ++k) {
    if (u.entry_counts[k] == 0) continue;
    double actual = static_cast<double>(u.entry_counts[k]) / static_cast<double>(total);
    double ideal = (k == u.label ? 1.0 - eps : 0.0) + eps / num_classes;
    kl += actual * std::log(actual / ideal);
  }
  return kl;
}

std::vector<double> mad_anomaly_index(const std::vector<double>& scores) {
  if (scores.size() < 2) throw ConfigError("anomaly index needs at least 2 scores");
  const double med = median_of(scores);
  std::vector<double> dev(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) dev[i] = std::abs(scores[i] - med);
  double c = 1.4826 * median_of(dev);
  if (c == 0.0)
    c = 1.4826 * std::accumulate(dev.begin(), dev.end(), 0.0) / static_cast<double>(dev.size());
  std::vector<double> index(scores.size(), 0.0);
  if (c == 0.0) return index;
  for (size_t i = 0; i < scores.size(); ++i) index[i] = std::max(0.0, scores[i] - med) / c;
  return index;
}

TargetMetric target_metric_from_string(const std::string& s) {
  if (s == "count") return TargetMetric::Count;
  if (s == "kl") return TargetMetric::Kl;
  if (s == "product") return TargetMetric::Product;
  throw ConfigError("unknown detection metric '" + s + "' (count, kl, product)");
}

std::string to_string(TargetMetric m) {
  switch (m) {
    case TargetMetric::Count: return "count";
    case TargetMetric::Kl: return "kl";
    case TargetMetric::Product: return "product";
  }
  throw StageError("unreachable metric");
}

TargetReport detect_targets(const PartitionResult& part, const CandidateCache& cache,
                            const LabeledDataset& ds, const DetectConfig& cfg) {
  if (part.rows.size() != ds.samples.size() || cache.count() != ds.samples.size())
    throw IntegrityError("partition, cache and dataset cover different sample counts");
  const uint16_t K = static_cast<uint16_t>(ds.num_classes);

  // all unions in one pass over the cache
  std::vector<LabelUnion> unions(K);
  for (uint16_t y = 0; y < K; ++y) {
    unions[y].label = y;
    unions[y].entry_counts.assign(K, 0);
  }
  for (uint32_t id = 0; id < cache.count(); ++id) {
    if (!pooled(part.rows[id].cls)) continue;
    LabelUnion& u = unions[ds.samples[id].label];
    ++u.contributing;
    for (const auto& e : cache.load_meta(id)) {
      if (cfg.once_only && e.round != 1) continue;
      if (e.label >= K) throw IntegrityError("candidate label out of range");
      ++u.entry_counts[e.label];
    }
  }

  TargetReport rep;
  rep.threshold = cfg.threshold;
  rep.rows.resize(K);
  std::vector<double> scores(K);
  for (uint16_t y = 0; y < K; ++y) {
    TargetReportRow& row = rep.rows[y];
    row.label = y;
    row.score.count = unions[y].contributing;
    row.score.kl = kl_metric(unions[y], K, cfg.ideal_eps);
    row.score.combined = static_cast<double>(row.score.count) * row.score.kl;
    switch (cfg.metric) {
      case TargetMetric::Count: scores[y] = static_cast<double>(row.score.count); break;
      case TargetMetric::Kl: scores[y] = row.score.kl; break;
      case TargetMetric::Product: scores[y] = row.score.combined; break;
    }
  }
  std::vector<double> index = mad_anomaly_index(scores);
  for (uint16_t y = 0; y < K; ++y) {
    rep.rows[y].anomaly_index = index[y];
    rep.rows[y].detected = index[y] > cfg.threshold;
    if (rep.rows[y].detected) rep.detected.push_back(y);
  }
  return rep;
}

void save_target_report(const std::filesystem::path& path, const TargetReport& rep) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  out << "# threshold\t" << format_double(rep.threshold) << "\n";
  for (const TargetReportRow& r : rep.rows) {
    out << r.label << '\t' << r.score.count << '\t' << format_double(r.score.kl) << '\t'
        << format_double(r.score.combined) << '\t' << format_double(r.anomaly_index) << '\t'
        << (r.detected ? 1 : 0) << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

TargetReport load_target_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot read " + path.string());
  TargetReport rep;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split(line, '\t');
    try {
      if (!line.empty() && line[0] == '#') {
        if (f.size() == 2 && trim(f[0]) == "# threshold") rep.threshold = std::stod(f[1]);
        continue;
      }
      if (f.size() != 6)
        throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
      TargetReportRow row;
      row.label = static_cast<uint16_t>(std::stoul(f[0]));
      row.score.count = std::stoull(f[1]);
      row.score.kl = std::stod(f[2]);
      row.score.combined = std::stod(f[3]);
      row.anomaly_index = std::stod(f[4]);
      row.detected = std::stoul(f[5]) != 0;
      if (row.detected) rep.detected.push_back(row.label);
      rep.rows.push_back(row);
    } catch (const IntegrityError&) {
      throw;
    } catch (const std::exception&) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
  }
  return rep;
}

}  // namespace diffsan
