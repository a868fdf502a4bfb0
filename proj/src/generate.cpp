#include "diffsan/generate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "diffsan/common.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

double ssim_uniform(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) throw ConfigError("ssim needs same-shape images");
  const int win = 7;
  if (a.height < win || a.width < win) throw ConfigError("ssim window exceeds the image");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // (k * L)^2 at L = 1
  const double np = win * win;
  const double cov_norm = np / (np - 1.0);  // unbiased window (co)variance

  double acc = 0.0;
  long windows = 0;
  for (int c = 0; c < a.channels; ++c) {
    for (int y0 = 0; y0 + win <= a.height; ++y0) {
      for (int x0 = 0; x0 + win <= a.width; ++x0) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < win; ++dy) {
          for (int dx = 0; dx < win; ++dx) {
            double va = a.at(c, y0 + dy, x0 + dx);
            double vb = b.at(c, y0 + dy, x0 + dx);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        }
        double ma = sa / np, mb = sb / np;
        double var_a = cov_norm * (saa / np - ma * ma);
        double var_b = cov_norm * (sbb / np - mb * mb);
        double cov = cov_norm * (sab / np - ma * mb);
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++windows;
      }
    }
  }
  return acc / static_cast<double>(windows);
}

double cosine_similarity(const nn::Vec& a, const nn::Vec& b) {
  if (a.size() != b.size()) throw ConfigError("cosine needs equal-length vectors");
  double na = a.cast<double>().norm(), nb = b.cast<double>().norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.cast<double>().dot(b.cast<double>()) / (na * nb);
}

DistanceScore pairwise_distance(const ImageTensor& a, const ImageTensor& b, Classifier& victim) {
  DistanceScore s;
  s.ssim = ssim_uniform(a, b);
  s.feat_cos = cosine_similarity(victim.features(a), victim.features(b));
  s.dist = s.ssim + s.feat_cos;
  return s;
}

uint32_t select_purified_index(const std::vector<double>& dists) {
  if (dists.empty()) throw ConfigError("rank selection needs at least one candidate");
  std::vector<uint32_t> ord(dists.size());
  std::iota(ord.begin(), ord.end(), 0u);
  std::stable_sort(ord.begin(), ord.end(),
                   [&](uint32_t i, uint32_t j) { return dists[i] > dists[j]; });
  auto rank = static_cast<size_t>(std::llround(0.8 * (static_cast<double>(dists.size()) - 1.0)));
  return ord[rank];
}

SelectionResult select_purified_image(const CandidateSet& cs, const ImageTensor& x,
                                      Classifier& victim, bool once_only) {
  std::vector<uint32_t> pool;
  for (uint32_t i = 0; i < cs.entries.size(); ++i)
    if (!once_only || cs.entries[i].round == 1) pool.push_back(i);
  if (pool.empty()) throw ConfigError("candidate set has no usable entries");

  nn::Vec fx = victim.features(x);
  std::vector<double> dists(pool.size());
  std::vector<DistanceScore> scores(pool.size());
  for (size_t k = 0; k < pool.size(); ++k) {
    const ImageTensor& img = cs.entries[pool[k]].image;
    DistanceScore s;
    s.ssim = ssim_uniform(x, img);
    s.feat_cos = cosine_similarity(fx, victim.features(img));
    s.dist = s.ssim + s.feat_cos;
    scores[k] = s;
    dists[k] = s.dist;
  }
  uint32_t picked = select_purified_index(dists);
  SelectionResult r;
  r.entry_index = pool[picked];
  r.score = scores[picked];
  return r;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Kept: return "kept";
    case Provenance::ConsensusRelabel: return "consensus_relabel";
    case Provenance::ModelAssisted: return "model_assisted";
  }
  throw StageError("unreachable provenance");
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "kept") return Provenance::Kept;
  if (s == "consensus_relabel") return Provenance::ConsensusRelabel;
  if (s == "model_assisted") return Provenance::ModelAssisted;
  throw IntegrityError("unknown provenance '" + s + "'");
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "full") return Strategy::Full;
  if (s == "voting_only") return Strategy::VotingOnly;
  if (s == "once_based") return Strategy::OnceBased;
  throw ConfigError("unknown strategy '" + s + "' (full, voting_only, once_based)");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Full: return "full";
    case Strategy::VotingOnly: return "voting_only";
    case Strategy::OnceBased: return "once_based";
  }
  throw StageError("unreachable strategy");
}

YmInput ym_input_from_string(const std::string& s) {
  if (s == "purified") return YmInput::Purified;
  if (s == "raw") return YmInput::Raw;
  throw ConfigError("unknown ym_input '" + s + "' (purified, raw)");
}

std::string to_string(YmInput y) {
  return y == YmInput::Purified ? "purified" : "raw";
}

namespace {

uint16_t vote_label(const CandidateSet& cs, uint16_t num_classes, bool once_only) {
  std::vector<uint16_t> labels;
  labels.reserve(cs.entries.size());
  for (const CandidateEntry& e : cs.entries)
    if (!once_only || e.round == 1) labels.push_back(e.label);
  return transition_stats(labels, num_classes).mode;
}

// resolved slice in id order, re-densified for training
LabeledDataset resolved_subset(const LabeledDataset& full, const std::vector<uint8_t>& resolved) {
  LabeledDataset d;
  d.num_classes = full.num_classes;
  for (size_t id = 0; id < full.samples.size(); ++id) {
    if (!resolved[id]) continue;
    Sample s = full.samples[id];
    s.id = static_cast<uint32_t>(d.samples.size());
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

PurifiedBuild assemble_initial(const LabeledDataset& ds, const PartitionResult& part,
                               const std::vector<uint16_t>& targets, const CandidateCache& cache,
                               Classifier& victim, const GenerateOptions& opt) {
  if (part.rows.size() != ds.samples.size() || cache.count() != ds.samples.size())
    throw IntegrityError("partition, cache and dataset cover different sample counts");
  std::vector<uint8_t> is_target(ds.num_classes, 0);
  for (uint16_t t : targets) {
    if (t >= ds.num_classes) throw ConfigError("target label out of range");
    is_target[t] = 1;
  }

  const size_t N = ds.samples.size();
  PurifiedBuild b;
  b.dataset.num_classes = ds.num_classes;
  b.dataset.samples.resize(N);
  b.resolved.assign(N, 0);
  b.prov.assign(N, Provenance::Kept);

  for (uint32_t id = 0; id < N; ++id) {
    const Sample& s = ds.samples[id];
    const SampleClass cls = part.rows[id].cls;
    if (!is_target[s.label] || cls == SampleClass::Benign) {
      b.dataset.samples[id] = s;
      b.resolved[id] = 1;
      continue;
    }

    CandidateSet cs = cache.load(id);
    SelectionResult sel = select_purified_image(cs, s.image, victim, opt.once_only());
    const ImageTensor& selected = cs.entries[sel.entry_index].image;

    if (cls == SampleClass::Poisoned) {
      b.dataset.samples[id] = Sample{id, selected, part.rows[id].consensus};
      b.resolved[id] = 1;
      b.prov[id] = Provenance::ConsensusRelabel;
      RelabelRecord rec;
      rec.id = id;
      rec.y_v = part.rows[id].consensus;
      rec.prov = Provenance::ConsensusRelabel;
      b.records.push_back(rec);
      continue;
    }

    // Suspicious with a target label
    uint16_t y_v = vote_label(cs, static_cast<uint16_t>(ds.num_classes), opt.once_only());
    if (opt.strategy == Strategy::VotingOnly) {
      b.dataset.samples[id] = Sample{id, selected, y_v};
      b.resolved[id] = 1;
      b.prov[id] = Provenance::ConsensusRelabel;
      RelabelRecord rec;
      rec.id = id;
      rec.y_v = y_v;
      rec.prov = Provenance::ConsensusRelabel;
      b.records.push_back(rec);
    } else {
      PendingSample p;
      p.id = id;
      p.selected = selected;
      p.y_v = y_v;
      b.pending.push_back(std::move(p));
    }
  }
  return b;
}

RelabelResult two_stage_relabel(PurifiedBuild&& build, const LabeledDataset& raw,
                                const ClassifierArch& arch, const TrainConfig& cfg,
                                const GenerateOptions& opt, uint64_t benign_seed) {
  cfg.validate();
  if (raw.samples.size() != build.dataset.samples.size())
    throw IntegrityError("raw dataset does not match the purified build");

  RelabelResult r;
  r.purified = std::move(build.dataset);
  r.prov = std::move(build.prov);
  r.records = std::move(build.records);
  r.model = std::make_unique<Classifier>(arch, benign_seed);

  RngStream rng(child_seed(benign_seed, "train-order"));
  r.stage1 = train_classifier(*r.model, resolved_subset(r.purified, build.resolved), cfg, rng);

  if (!build.pending.empty()) {
    std::vector<PendingSample*> remaining;
    for (PendingSample& p : build.pending) {
      const ImageTensor& probe =
          opt.ym_input == YmInput::Purified ? p.selected : raw.samples[p.id].image;
      uint16_t y_m = r.model->predict_one(probe);
      RelabelRecord rec;
      rec.id = p.id;
      rec.has_model = true;
      rec.y_m = y_m;
      rec.y_v = p.y_v;
      rec.agreed = (y_m == p.y_v);
      rec.prov = Provenance::ModelAssisted;
      r.records.push_back(rec);
      if (rec.agreed) {
        r.purified.samples[p.id] = Sample{p.id, p.selected, y_m};
        build.resolved[p.id] = 1;
        r.prov[p.id] = Provenance::ModelAssisted;
      } else {
        remaining.push_back(&p);
      }
    }

    TrainConfig ft = cfg;
    ft.lr = cfg.lr * cfg.fine_tune_lr_scale;
    ft.epochs = std::max<uint32_t>(
        1, static_cast<uint32_t>(std::llround(0.2 * static_cast<double>(cfg.epochs))));
    r.stage2 = train_classifier(*r.model, resolved_subset(r.purified, build.resolved), ft, rng);
    r.stage2_ran = true;

    for (PendingSample* p : remaining) {
      const ImageTensor& probe =
          opt.ym_input == YmInput::Purified ? p->selected : raw.samples[p->id].image;
      uint16_t y_final = r.model->predict_one(probe);
      r.purified.samples[p->id] = Sample{p->id, std::move(p->selected), y_final};
      build.resolved[p->id] = 1;
      r.prov[p->id] = Provenance::ModelAssisted;
    }
  }

  for (uint8_t f : build.resolved)
    if (!f) throw StageError("purified dataset has unresolved samples");
  r.purified.validate();
  std::stable_sort(r.records.begin(), r.records.end(),
                   [](const RelabelRecord& a, const RelabelRecord& b) { return a.id < b.id; });
  return r;
}

void save_relabel_records(const std::filesystem::path& path,
                          const std::vector<RelabelRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  for (const RelabelRecord& r : records) {
    out << r.id << '\t';
    if (r.has_model)
      out << r.y_m << '\t' << r.y_v << '\t' << (r.agreed ? 1 : 0);
    else
      out << "-\t" << r.y_v << "\t-";
    out << '\t' << to_string(r.prov) << '\n';
  }
  if (!out) throw StageError("short write to " + path.string());
}

std::vector<RelabelRecord> load_relabel_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot read " + path.string());
  std::vector<RelabelRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split(line, '\t');
    if (f.size() != 5)
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    RelabelRecord r;
    try {
      r.id = static_cast<uint32_t>(std::stoul(f[0]));
      r.y_v = static_cast<uint16_t>(std::stoul(f[2]));
      r.prov = provenance_from_string(trim(f[4]));
      if (trim(f[1]) != "-") {
        r.has_model = true;
        r.y_m = static_cast<uint16_t>(std::stoul(f[1]));
        r.agreed = std::stoul(f[3]) != 0;
      } else if (trim(f[3]) != "-") {
        throw IntegrityError(path.string() + ":" + std::to_string(lineno) +
                             ": agreed flag without a model prediction");
      }
    } catch (const IntegrityError&) {
      throw;
    } catch (const std::exception&) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace diffsan
