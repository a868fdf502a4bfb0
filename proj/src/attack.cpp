#include "diffsan/attack.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "diffsan/common.hpp"
#include "diffsan/rng.hpp"

namespace diffsan {

TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "patch") return TriggerKind::Patch;
  if (s == "blend") return TriggerKind::Blend;
  if (s == "frequency") return TriggerKind::Frequency;
  throw ConfigError("unknown trigger kind '" + s + "' (patch, blend, frequency)");
}

std::string to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::Patch: return "patch";
    case TriggerKind::Blend: return "blend";
    case TriggerKind::Frequency: return "frequency";
  }
  throw StageError("unreachable trigger kind");
}

Corner corner_from_string(const std::string& s) {
  if (s == "bottom_right") return Corner::BottomRight;
  if (s == "top_left") return Corner::TopLeft;
  if (s == "top_right") return Corner::TopRight;
  if (s == "bottom_left") return Corner::BottomLeft;
  throw ConfigError("unknown corner '" + s +
                    "' (bottom_right, top_left, top_right, bottom_left)");
}

std::string to_string(Corner c) {
  switch (c) {
    case Corner::BottomRight: return "bottom_right";
    case Corner::TopLeft: return "top_left";
    case Corner::TopRight: return "top_right";
    case Corner::BottomLeft: return "bottom_left";
  }
  throw StageError("unreachable corner");
}

void TriggerSpec::validate(uint32_t channels, uint32_t height, uint32_t width) const {
  switch (kind) {
    case TriggerKind::Patch:
      if (patch_size == 0 || patch_size > height || patch_size > width)
        throw ConfigError("trigger " + id + ": patch_size out of range");
      if (patch_value < 0.0f || patch_value > 1.0f)
        throw ConfigError("trigger " + id + ": patch_value outside [0, 1]");
      break;
    case TriggerKind::Blend:
      if (!(alpha > 0.0f) || !(alpha < 1.0f))
        throw ConfigError("trigger " + id + ": alpha must be in (0, 1)");
      if (pattern.channels != channels || pattern.height != height || pattern.width != width)
        throw ConfigError("trigger " + id + ": pattern shape mismatch");
      break;
    case TriggerKind::Frequency:
      if (freq_coords.empty()) throw ConfigError("trigger " + id + ": no frequency coordinates");
      for (auto [u, v] : freq_coords)
        if (u >= height || v >= width)
          throw ConfigError("trigger " + id + ": frequency coordinate out of range");
      break;
  }
}

namespace {

Eigen::MatrixXf dct_matrix(uint32_t n) {
  Eigen::MatrixXf m(n, n);
  const float pi = 3.14159265358979323846f;
  for (uint32_t k = 0; k < n; ++k) {
    float scale = std::sqrt((k == 0 ? 1.0f : 2.0f) / static_cast<float>(n));
    for (uint32_t i = 0; i < n; ++i)
      m(k, i) = scale * std::cos(pi * (2.0f * i + 1.0f) * k / (2.0f * n));
  }
  return m;
}

}  // namespace

ImageTensor apply_trigger(const ImageTensor& image, const TriggerSpec& spec) {
  spec.validate(image.channels, image.height, image.width);
  ImageTensor out = image;
  switch (spec.kind) {
    case TriggerKind::Patch: {
      uint32_t y0 = 0, x0 = 0;
      if (spec.corner == Corner::BottomRight || spec.corner == Corner::BottomLeft)
        y0 = image.height - spec.patch_size;
      if (spec.corner == Corner::BottomRight || spec.corner == Corner::TopRight)
        x0 = image.width - spec.patch_size;
      for (uint32_t c = 0; c < image.channels; ++c)
        for (uint32_t y = y0; y < y0 + spec.patch_size; ++y)
          for (uint32_t x = x0; x < x0 + spec.patch_size; ++x)
            out.at(c, y, x) = spec.patch_value;
      break;
    }
    case TriggerKind::Blend: {
      for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (1.0f - spec.alpha) * image.data[i] + spec.alpha * spec.pattern.data[i];
      out.clamp01();
      break;
    }
    case TriggerKind::Frequency: {
      Eigen::MatrixXf dy = dct_matrix(image.height);
      Eigen::MatrixXf dx = dct_matrix(image.width);
      for (uint32_t c = 0; c < image.channels; ++c) {
        Eigen::MatrixXf plane(image.height, image.width);
        for (uint32_t y = 0; y < image.height; ++y)
          for (uint32_t x = 0; x < image.width; ++x) plane(y, x) = image.at(c, y, x);
        Eigen::MatrixXf coeff = dy * plane * dx.transpose();
        for (auto [u, v] : spec.freq_coords) coeff(u, v) += spec.freq_magnitude;
        Eigen::MatrixXf back = dy.transpose() * coeff * dx;
        for (uint32_t y = 0; y < image.height; ++y)
          for (uint32_t x = 0; x < image.width; ++x) out.at(c, y, x) = back(y, x);
      }
      out.clamp01();
      break;
    }
  }
  return out;
}

PoisonResult poison_dataset(const LabeledDataset& clean, const PoisonConfig& cfg) {
  clean.validate();
  if (cfg.rate < 0.0 || cfg.rate > 1.0) throw ConfigError("poison rate outside [0, 1]");
  if (cfg.targets.empty()) throw ConfigError("poison config has no targets");
  std::set<uint16_t> target_labels;
  for (const auto& [label, spec] : cfg.targets) {
    if (label >= clean.num_classes) throw ConfigError("target label out of range");
    if (!target_labels.insert(label).second) throw ConfigError("duplicate target label");
    spec.validate(clean.channels(), clean.height(), clean.width());
  }

  PoisonResult res;
  res.dataset.num_classes = clean.num_classes;
  res.dataset.samples = clean.samples;
  res.ledger.entries.resize(clean.size());
  for (size_t i = 0; i < clean.size(); ++i) {
    res.ledger.entries[i].id = static_cast<uint32_t>(i);
    res.ledger.entries[i].original_label = clean.samples[i].label;
  }

  std::vector<uint32_t> eligible;
  for (const Sample& s : clean.samples)
    if (!target_labels.count(s.label)) eligible.push_back(s.id);

  size_t want = static_cast<size_t>(std::llround(cfg.rate * static_cast<double>(clean.size())));
  if (want > eligible.size())
    throw ConfigError("poison rate selects " + std::to_string(want) + " samples but only " +
                      std::to_string(eligible.size()) + " are eligible");

  RngStream rng(child_seed(cfg.seed, "attack"));
  rng.shuffle(eligible);
  eligible.resize(want);
  std::sort(eligible.begin(), eligible.end());

  size_t n_targets = cfg.targets.size();
  size_t base = want / n_targets, rem = want % n_targets;
  size_t offset = 0;
  for (size_t j = 0; j < n_targets; ++j) {
    size_t take = base + (j < rem ? 1 : 0);
    const auto& [target, spec] = cfg.targets[j];
    for (size_t k = 0; k < take; ++k) {
      uint32_t id = eligible[offset + k];
      Sample& s = res.dataset.samples[id];
      s.image = apply_trigger(s.image, spec);
      s.label = target;
      LedgerEntry& e = res.ledger.entries[id];
      e.is_poisoned = true;
      e.trigger_id = spec.id;
    }
    offset += take;
  }
  res.dataset.validate();
  return res;
}

LabeledDataset build_asr_testset(const LabeledDataset& test, const TriggerSpec& spec,
                                 uint16_t target) {
  test.validate();
  if (target >= test.num_classes) throw ConfigError("asr target label out of range");
  LabeledDataset out;
  out.num_classes = test.num_classes;
  for (const Sample& s : test.samples) {
    if (s.label == target) continue;
    Sample t;
    t.id = static_cast<uint32_t>(out.samples.size());
    t.label = s.label;
    t.image = apply_trigger(s.image, spec);
    out.samples.push_back(std::move(t));
  }
  return out;
}

}  // namespace diffsan
