#pragma once

#include <cstdint>

#include "diffsan/dataset.hpp"

namespace diffsan {

// Procedural 10-class grayscale dataset used for desk-scale experiments.
// Each class is a 4x4 grid of macro cells (cell = side/4 pixels) holding a
// binary code from an affine family over GF(2)^4: any two class codes differ
// in exactly 8 of 16 cells, and the bottom-right cell is dark for every
// class so corner patches sit on a uniform background. Per-sample variation:
// cell amplitude jitter, a smooth low-frequency texture field, pixel noise.
struct PatternDataParams {
  uint32_t count = 5000;
  uint32_t num_classes = 10;  // at most 15
  uint32_t side = 24;         // must be divisible by 4
  uint64_t seed = 1;
  float lo = 0.06f;
  float hi = 0.94f;
  float cell_jitter = 0.04f;
  float texture_amp = 0.05f;
  float pixel_noise = 0.02f;
};

LabeledDataset make_pattern_dataset(const PatternDataParams& p);

// the binary cell code for one class, 16 entries, row-major over the 4x4 grid
std::vector<uint8_t> pattern_class_code(uint32_t cls);

}  // namespace diffsan
