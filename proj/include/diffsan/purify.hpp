#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "diffsan/classifier.hpp"
#include "diffsan/dataset.hpp"
#include "diffsan/diffusion.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

struct PurifyParams {
  uint32_t T = 150;  // truncated forward/reverse depth into the native schedule
  uint32_t n = 5;    // chained purification rounds
  uint32_t m = 10;   // recorded trailing reverse states per round
  uint32_t tau = 5;  // transition threshold used downstream

  void validate(uint32_t schedule_steps) const;  // 1 <= m <= T <= steps, n >= 1, 0 < tau <= n*m
};

// One recorded reverse state: the image after the reverse transition into
// step t (t = m-1 .. 0), clamped to [0, 1], plus the victim's label for it.
struct CandidateEntry {
  uint16_t round = 1;  // 1-based
  uint16_t step = 0;
  uint16_t label = 0;
  ImageTensor image;
};

// Always exactly n*m entries, ordered by (round ascending, step descending).
struct CandidateSet {
  uint32_t sample_id = 0;
  std::vector<CandidateEntry> entries;
};

// n rounds of: closed-form jump to depth T, then T ancestral reverse steps.
// Round 1 starts from x; later rounds start from the previous round's final
// state (clamped to [0, 1]). The rng stream must be the per-sample stream so
// results do not depend on any other sample.
CandidateSet purify_sample(const ImageTensor& x, uint32_t sample_id, const PurifyParams& p,
                           Denoiser& den, const NoiseSchedule& sched, VarianceMode mode,
                           Classifier& victim, RngStream& rng);

// --- candidate cache -------------------------------------------------------
//
// Directory layout:
//   params.txt        written before any record; identifies the run
//   <id>.bin          entry images, float32 LE, canonical entry order
//   <id>.meta         one "round\tstep\tlabel" row per entry
//   MANIFEST          written once complete: params + per-record digests
//
// Building is resumable: existing records are kept, missing ones recomputed
// (per-sample rng streams make the result independent of scheduling), and a
// params.txt that disagrees with the requested parameters raises
// IntegrityError instead of silently mixing runs.

struct CacheBuildOptions {
  std::filesystem::path dir;
  uint64_t limit = UINT64_MAX;  // build at most this many records (resume aid / smoke runs)
  std::string denoiser_digest = "-";  // identity tag for the denoiser weights
  uint32_t progress_every = 0;        // stderr progress row every k records; 0 is silent
};

void build_candidate_sets(const LabeledDataset& ds, const PurifyParams& p, Denoiser& den,
                          const NoiseSchedule& sched, VarianceMode mode, Classifier& victim,
                          uint64_t diffusion_seed, const CacheBuildOptions& opt);

class CandidateCache {
 public:
  // requires a complete cache (MANIFEST present); IntegrityError otherwise
  static CandidateCache open(const std::filesystem::path& dir);

  uint32_t count() const { return count_; }
  uint32_t entries_per_sample() const { return entries_per_sample_; }
  const KvDoc& params() const { return params_; }

  struct EntryMeta {
    uint16_t round = 1, step = 0, label = 0;
  };

  // digest-checked read of one record
  CandidateSet load(uint32_t id) const;
  // (round, step, label) rows only; still digest-checks the full record
  std::vector<EntryMeta> load_meta(uint32_t id) const;

 private:
  std::filesystem::path dir_;
  KvDoc params_, manifest_;
  uint32_t count_ = 0, entries_per_sample_ = 0;
  uint32_t channels_ = 0, height_ = 0, width_ = 0;
};

// identity of a parameter set + models + schedule, as stored in params.txt
KvDoc candidate_cache_params(const LabeledDataset& ds, const PurifyParams& p,
                             const NoiseSchedule& sched, VarianceMode mode,
                             const std::string& denoiser_digest, const std::string& victim_digest,
                             uint64_t diffusion_seed);

// Filtered copy of a complete cache keeping only steps < new_m per round.
// Valid because recording does not influence the trajectory, so a smaller m
// is a strict subset of the stored entries.
void derive_cache_with_smaller_m(const std::filesystem::path& src,
                                 const std::filesystem::path& dst, uint32_t new_m);

std::string schedule_digest(const NoiseSchedule& sched);
std::string registry_digest(const nn::ParamRegistry& reg);

}  // namespace diffsan
