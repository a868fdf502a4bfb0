#include "diffsan/pattern_data.hpp"

#include <algorithm>
#include <cmath>

#include "diffsan/common.hpp"
#include "diffsan/rng.hpp"

namespace diffsan {

std::vector<uint8_t> pattern_class_code(uint32_t cls) {
  // affine form f(x) = a.x xor a.p) with p = (1,1,1,1): f(p) == 0 for every a,
  // so cell (3,3) is always 0. Distinct nonzero a give pairwise Hamming
  // distance exactly 8.
  uint32_t a = cls + 1;
  uint32_t ap = __builtin_popcount(a & 0xf) & 1;
  std::vector<uint8_t> code(16);
  for (uint32_t r = 0; r < 4; ++r) {
    for (uint32_t c = 0; c < 4; ++c) {
      uint32_t x = (r & 1) | ((r >> 1) << 1) | ((c & 1) << 2) | ((c >> 1) << 3);
      uint32_t dot = __builtin_popcount(a & x) & 1;
      code[r * 4 + c] = static_cast<uint8_t>(dot ^ ap);
    }
  }
  return code;
}

LabeledDataset make_pattern_dataset(const PatternDataParams& p) {
  if (p.side % 4 != 0) throw ConfigError("pattern dataset: side must be divisible by 4");
  if (p.num_classes == 0 || p.num_classes > 15)
    throw ConfigError("pattern dataset: num_classes must be in [1, 15]");
  if (!(p.lo < p.hi) || p.lo < 0.0f || p.hi > 1.0f)
    throw ConfigError("pattern dataset: need 0 <= lo < hi <= 1");

  uint32_t cell = p.side / 4;
  std::vector<std::vector<uint8_t>> codes;
  for (uint32_t k = 0; k < p.num_classes; ++k) codes.push_back(pattern_class_code(k));

  // texture lattice resolution: one control point per cell corner
  uint32_t grid = 5;
  float spacing = static_cast<float>(p.side) / 4.0f;

  LabeledDataset ds;
  ds.num_classes = p.num_classes;
  ds.samples.resize(p.count);
  for (uint32_t i = 0; i < p.count; ++i) {
    Sample& s = ds.samples[i];
    s.id = i;
    s.label = static_cast<uint16_t>(i % p.num_classes);
    s.image = ImageTensor(1, p.side, p.side);

    RngStream rng(child_seed(p.seed, i));
    const std::vector<uint8_t>& code = codes[s.label];

    float cells[16];
    for (int k = 0; k < 16; ++k) {
      float base = code[k] ? p.hi : p.lo;
      cells[k] = base + static_cast<float>(rng.uniform(-p.cell_jitter, p.cell_jitter));
    }
    std::vector<float> tex(size_t(grid) * grid);
    for (float& v : tex) v = static_cast<float>(rng.uniform(-p.texture_amp, p.texture_amp));

    for (uint32_t y = 0; y < p.side; ++y) {
      for (uint32_t x = 0; x < p.side; ++x) {
        uint32_t cy = std::min(3u, y / cell);
        uint32_t cx = std::min(3u, x / cell);
        float v = cells[cy * 4 + cx];

        float gy = static_cast<float>(y) / spacing;
        float gx = static_cast<float>(x) / spacing;
        uint32_t y0 = std::min(grid - 2, static_cast<uint32_t>(gy));
        uint32_t x0 = std::min(grid - 2, static_cast<uint32_t>(gx));
        float fy = gy - static_cast<float>(y0);
        float fx = gx - static_cast<float>(x0);
        float t00 = tex[y0 * grid + x0], t01 = tex[y0 * grid + x0 + 1];
        float t10 = tex[(y0 + 1) * grid + x0], t11 = tex[(y0 + 1) * grid + x0 + 1];
        v += (1 - fy) * ((1 - fx) * t00 + fx * t01) + fy * ((1 - fx) * t10 + fx * t11);

        v += rng.normal_f() * p.pixel_noise;
        s.image.at(0, y, x) = v;
      }
    }
    s.image.clamp01();
  }
  ds.validate();
  return ds;
}

}  // namespace diffsan
