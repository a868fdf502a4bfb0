#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace diffsan {

// Dense float32 image, channel-first (index = (c*height + y)*width + x).
// Dataset images hold values in [0, 1]; intermediate diffusion states reuse
// the container without that guarantee and are clamped when persisted.
struct ImageTensor {
  uint32_t channels = 0;
  uint32_t height = 0;
  uint32_t width = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(uint32_t c, uint32_t h, uint32_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(size_t(c) * h * w, fill) {}

  size_t size() const { return data.size(); }
  float& at(uint32_t c, uint32_t y, uint32_t x) {
    return data[(size_t(c) * height + y) * width + x];
  }
  float at(uint32_t c, uint32_t y, uint32_t x) const {
    return data[(size_t(c) * height + y) * width + x];
  }
  bool same_shape(const ImageTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  void clamp01();
};

struct Sample {
  uint32_t id = 0;
  ImageTensor image;
  uint16_t label = 0;
};

struct LabeledDataset {
  uint32_t num_classes = 0;
  std::vector<Sample> samples;  // ids dense and ascending: samples[i].id == i

  size_t size() const { return samples.size(); }
  uint32_t channels() const { return samples.empty() ? 0 : samples[0].image.channels; }
  uint32_t height() const { return samples.empty() ? 0 : samples[0].image.height; }
  uint32_t width() const { return samples.empty() ? 0 : samples[0].image.width; }

  // dense ids, uniform shapes, labels < num_classes; IntegrityError otherwise
  void validate() const;
};

// Ground-truth bookkeeping for evaluation only. Nothing in the sanitization
// path takes a ledger; it exists so tests and the evaluate stage can score
// what the defense did.
struct LedgerEntry {
  uint32_t id = 0;
  bool is_poisoned = false;
  uint16_t original_label = 0;
  std::string trigger_id = "-";
};

struct PoisonLedger {
  std::vector<LedgerEntry> entries;  // parallel to dataset ids
};

// Directory layout: images.bin (raw float32 little-endian, sample-major,
// channel-first) + labels.tsv ("id\tlabel") + manifest.txt (key:value with
// shape, count, num_classes and a SHA-256 digest over image bytes then label
// bytes, labels serialized as little-endian uint32 in id order).
void save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir);
LabeledDataset load_dataset(const std::filesystem::path& dir);

// digest as written to / verified against the dataset manifest
std::string dataset_digest(const LabeledDataset& ds);

std::vector<uint32_t> class_histogram(const LabeledDataset& ds);

// ledger.tsv: "id\tis_poisoned\toriginal_label\ttrigger_id"
void save_ledger(const PoisonLedger& ledger, const std::filesystem::path& file);
PoisonLedger load_ledger(const std::filesystem::path& file);

}  // namespace diffsan
