#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "diffsan/anomaly.hpp"
#include "diffsan/classifier.hpp"

namespace diffsan {

// dist = ssim + cosine similarity of victim penultimate features;
// higher means more similar.
struct DistanceScore {
  double ssim = 0.0;
  double feat_cos = 0.0;
  double dist = 0.0;
};

// Mean structural similarity: per channel, 7x7 uniform window, valid
// positions only, k1=0.01, k2=0.03, dynamic range 1. Images must be at
// least 7x7 and the same shape.
double ssim_uniform(const ImageTensor& a, const ImageTensor& b);

double cosine_similarity(const nn::Vec& a, const nn::Vec& b);

DistanceScore pairwise_distance(const ImageTensor& a, const ImageTensor& b, Classifier& victim);

// Rank rule: sort descending by distance (stable in input order) and take
// the element at round(0.8 * (K - 1)), 80% of the way toward most-distinct.
// Returns the index into the unsorted input.
uint32_t select_purified_index(const std::vector<double>& dists);

struct SelectionResult {
  uint32_t entry_index = 0;  // into cs.entries
  DistanceScore score;
};

// once_only restricts the ranked pool to round-1 entries.
SelectionResult select_purified_image(const CandidateSet& cs, const ImageTensor& x,
                                      Classifier& victim, bool once_only);

enum class Provenance : uint8_t { Kept, ConsensusRelabel, ModelAssisted };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

enum class Strategy { Full, VotingOnly, OnceBased };
Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);

enum class YmInput { Purified, Raw };
YmInput ym_input_from_string(const std::string& s);
std::string to_string(YmInput y);

struct GenerateOptions {
  Strategy strategy = Strategy::Full;
  YmInput ym_input = YmInput::Purified;  // what the stage-1 model predicts on

  bool once_only() const { return strategy == Strategy::OnceBased; }
};

// Relabeling audit row. Model fields hold y_m/y_v/agreed; consensus rows
// carry only the vote.
struct RelabelRecord {
  uint32_t id = 0;
  bool has_model = false;
  uint16_t y_m = 0;
  uint16_t y_v = 0;
  bool agreed = false;
  Provenance prov = Provenance::ConsensusRelabel;
};

struct PendingSample {
  uint32_t id = 0;
  ImageTensor selected;  // Eq-style rank-selected candidate image
  uint16_t y_v = 0;      // candidate-set vote
};

struct PurifiedBuild {
  LabeledDataset dataset;        // slot i meaningful iff resolved[i]
  std::vector<uint8_t> resolved;  // 0/1 by id
  std::vector<Provenance> prov;   // by id, meaningful iff resolved
  std::vector<RelabelRecord> records;
  std::vector<PendingSample> pending;  // ascending id
};

// Keeps everything except target-labeled Poisoned/Suspicious samples:
// Poisoned ones are relabeled to their consensus over the rank-selected
// image; Suspicious ones stay pending (voting_only resolves them by vote
// immediately). Empty targets keeps the dataset untouched.
PurifiedBuild assemble_initial(const LabeledDataset& ds, const PartitionResult& part,
                               const std::vector<uint16_t>& targets, const CandidateCache& cache,
                               Classifier& victim, const GenerateOptions& opt);

struct RelabelResult {
  LabeledDataset purified;
  std::vector<Provenance> prov;
  std::vector<RelabelRecord> records;
  std::unique_ptr<Classifier> model;  // final benign model
  TrainReport stage1;
  TrainReport stage2;
  bool stage2_ran = false;
};

// Stage 1 trains a fresh model on the resolved part; pending samples whose
// model prediction matches their vote enter the dataset. Stage 2 fine-tunes
// at fine_tune_lr_scale and 20% of the epochs (min 1, only if anything was
// pending); the final model resolves the rest.
RelabelResult two_stage_relabel(PurifiedBuild&& build, const LabeledDataset& raw,
                                const ClassifierArch& arch, const TrainConfig& cfg,
                                const GenerateOptions& opt, uint64_t benign_seed);

void save_relabel_records(const std::filesystem::path& path,
                          const std::vector<RelabelRecord>& records);
std::vector<RelabelRecord> load_relabel_records(const std::filesystem::path& path);

}  // namespace diffsan
