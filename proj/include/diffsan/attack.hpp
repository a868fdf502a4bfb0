#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diffsan/dataset.hpp"

namespace diffsan {

enum class TriggerKind { Patch, Blend, Frequency };

enum class Corner { BottomRight, TopLeft, TopRight, BottomLeft };

TriggerKind trigger_kind_from_string(const std::string& s);  // ConfigError on anything else
std::string to_string(TriggerKind k);
Corner corner_from_string(const std::string& s);
std::string to_string(Corner c);

// One trigger recipe. Only the fields of the active kind are read.
struct TriggerSpec {
  std::string id = "trigger";
  TriggerKind kind = TriggerKind::Patch;

  // Patch: solid square of patch_value overwriting patch_size^2 pixels in a corner.
  uint32_t patch_size = 3;
  Corner corner = Corner::BottomRight;
  float patch_value = 1.0f;

  // Blend: out = (1 - alpha) * image + alpha * pattern, clamped. alpha in (0, 1).
  ImageTensor pattern;
  float alpha = 0.2f;

  // Frequency: additive bump on fixed low-frequency coefficients of an
  // orthonormal 2-D DCT-II, applied per channel, then inverse transform + clamp.
  std::vector<std::pair<uint32_t, uint32_t>> freq_coords = {{0, 1}, {1, 0}, {1, 1}};
  float freq_magnitude = 1.0f;

  void validate(uint32_t channels, uint32_t height, uint32_t width) const;
};

// Pure function of (image, spec); never mutates non-trigger pixels for Patch,
// and always clamps the result into [0, 1].
ImageTensor apply_trigger(const ImageTensor& image, const TriggerSpec& spec);

struct PoisonConfig {
  double rate = 0.1;  // in [0, 1]; round(rate * N) samples are poisoned overall
  std::vector<std::pair<uint16_t, TriggerSpec>> targets;  // target label -> trigger
  uint64_t seed = 0;
};

struct PoisonResult {
  LabeledDataset dataset;
  PoisonLedger ledger;
};

// Selects round(rate*N) victims uniformly (seeded) among samples whose label
// is not any target label, splits them across targets as evenly as possible
// with earlier targets taking remainders, applies each target's trigger and
// relabels. Non-selected samples are copied bit-for-bit.
PoisonResult poison_dataset(const LabeledDataset& clean, const PoisonConfig& cfg);

// Triggered copies of every test sample whose ground-truth label differs from
// the target. Labels keep the ground truth; callers score predictions == target.
LabeledDataset build_asr_testset(const LabeledDataset& test, const TriggerSpec& spec,
                                 uint16_t target);

}  // namespace diffsan
