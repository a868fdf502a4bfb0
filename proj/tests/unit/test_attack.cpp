#include <doctest.h>

#include <cmath>
#include <set>

#include "diffsan/attack.hpp"
#include "diffsan/common.hpp"
#include "diffsan/pattern_data.hpp"
#include "diffsan/rng.hpp"

using namespace diffsan;

namespace {

ImageTensor gray_image(uint32_t c, uint32_t h, uint32_t w, float value) {
  return ImageTensor(c, h, w, value);
}

// orthonormal 2-D DCT-II basis function value at (y, x)
double dct_basis(uint32_t u, uint32_t v, uint32_t y, uint32_t x, uint32_t h, uint32_t w) {
  const double pi = 3.14159265358979323846;
  double cu = std::sqrt((u == 0 ? 1.0 : 2.0) / h);
  double cv = std::sqrt((v == 0 ? 1.0 : 2.0) / w);
  return cu * std::cos(pi * (2.0 * y + 1.0) * u / (2.0 * h)) * cv *
         std::cos(pi * (2.0 * x + 1.0) * v / (2.0 * w));
}

}  // namespace

TEST_SUITE("attack") {
  TEST_CASE("patch overwrites exactly its square") {
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    spec.patch_size = 3;
    spec.patch_value = 1.0f;
    spec.corner = Corner::BottomRight;
    ImageTensor img = gray_image(2, 8, 8, 0.25f);
    ImageTensor out = apply_trigger(img, spec);
    int changed = 0;
    for (uint32_t c = 0; c < 2; ++c)
      for (uint32_t y = 0; y < 8; ++y)
        for (uint32_t x = 0; x < 8; ++x) {
          bool in_patch = y >= 5 && x >= 5;
          if (in_patch) {
            CHECK(out.at(c, y, x) == 1.0f);
            ++changed;
          } else {
            CHECK(out.at(c, y, x) == 0.25f);
          }
        }
    CHECK(changed == 2 * 9);
  }

  TEST_CASE("patch corners land where they should") {
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    spec.patch_size = 2;
    spec.patch_value = 0.0f;
    ImageTensor img = gray_image(1, 6, 6, 1.0f);

    spec.corner = Corner::TopLeft;
    CHECK(apply_trigger(img, spec).at(0, 0, 0) == 0.0f);
    spec.corner = Corner::TopRight;
    CHECK(apply_trigger(img, spec).at(0, 0, 5) == 0.0f);
    spec.corner = Corner::BottomLeft;
    CHECK(apply_trigger(img, spec).at(0, 5, 0) == 0.0f);
    spec.corner = Corner::BottomRight;
    ImageTensor br = apply_trigger(img, spec);
    CHECK(br.at(0, 5, 5) == 0.0f);
    CHECK(br.at(0, 0, 0) == 1.0f);
  }

  TEST_CASE("blend mixes with the fixed ratio") {
    TriggerSpec spec;
    spec.kind = TriggerKind::Blend;
    spec.alpha = 0.2f;
    spec.pattern = gray_image(1, 4, 4, 1.0f);
    ImageTensor img = gray_image(1, 4, 4, 0.5f);
    ImageTensor out = apply_trigger(img, spec);
    for (float v : out.data) CHECK(v == doctest::Approx(0.6).epsilon(1e-6));
  }

  TEST_CASE("blend clamps") {
    TriggerSpec spec;
    spec.kind = TriggerKind::Blend;
    spec.alpha = 0.5f;
    spec.pattern = gray_image(1, 2, 2, 1.0f);
    ImageTensor img = gray_image(1, 2, 2, 1.0f);
    ImageTensor out = apply_trigger(img, spec);
    for (float v : out.data) CHECK(v <= 1.0f);
  }

  TEST_CASE("frequency bump lands on the chosen coefficients") {
    TriggerSpec spec;
    spec.kind = TriggerKind::Frequency;
    spec.freq_magnitude = 0.1f;  // small enough that mid-gray never clamps
    ImageTensor img = gray_image(1, 8, 8, 0.5f);
    ImageTensor out = apply_trigger(img, spec);

    // diff = magnitude * sum of the three orthonormal basis functions
    double energy = 0.0;
    for (uint32_t y = 0; y < 8; ++y)
      for (uint32_t x = 0; x < 8; ++x) {
        double d = static_cast<double>(out.at(0, y, x)) - 0.5;
        energy += d * d;
      }
    CHECK(energy == doctest::Approx(3 * 0.1 * 0.1).epsilon(1e-3));

    for (auto [u, v] : spec.freq_coords) {
      double coef = 0.0;
      for (uint32_t y = 0; y < 8; ++y)
        for (uint32_t x = 0; x < 8; ++x)
          coef += (static_cast<double>(out.at(0, y, x)) - 0.5) * dct_basis(u, v, y, x, 8, 8);
      CHECK(coef == doctest::Approx(0.1).epsilon(1e-3));
    }
  }

  TEST_CASE("trigger validation rejects bad parameters") {
    ImageTensor img = gray_image(1, 4, 4, 0.5f);
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    spec.patch_size = 5;
    CHECK_THROWS_AS(apply_trigger(img, spec), ConfigError);
    spec.kind = TriggerKind::Blend;
    spec.alpha = 0.0f;
    CHECK_THROWS_AS(apply_trigger(img, spec), ConfigError);
    spec.alpha = 0.2f;
    spec.pattern = gray_image(1, 2, 2, 0.0f);
    CHECK_THROWS_AS(apply_trigger(img, spec), ConfigError);
  }

  TEST_CASE("poisoning hits the rounded count and only eligible samples") {
    PatternDataParams p;
    p.count = 100;
    p.num_classes = 5;
    p.seed = 21;
    LabeledDataset clean = make_pattern_dataset(p);

    PoisonConfig cfg;
    cfg.rate = 0.13;
    cfg.seed = 4;
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    spec.id = "patch-1";
    cfg.targets.emplace_back(1, spec);

    PoisonResult res = poison_dataset(clean, cfg);
    REQUIRE(res.dataset.samples.size() == 100);
    size_t poisoned = 0;
    for (size_t i = 0; i < 100; ++i) {
      const LedgerEntry& e = res.ledger.entries[i];
      if (e.is_poisoned) {
        ++poisoned;
        CHECK(e.original_label != 1);          // victims never start at the target
        CHECK(res.dataset.samples[i].label == 1);
        CHECK(e.trigger_id == "patch-1");
        CHECK(res.dataset.samples[i].image.data != clean.samples[i].image.data);
      } else {
        CHECK(res.dataset.samples[i].label == clean.samples[i].label);
        CHECK(res.dataset.samples[i].image.data == clean.samples[i].image.data);
      }
    }
    CHECK(poisoned == 13);  // llround(0.13 * 100)
  }

  TEST_CASE("poisoning is deterministic in the seed") {
    PatternDataParams p;
    p.count = 60;
    p.num_classes = 4;
    p.seed = 8;
    LabeledDataset clean = make_pattern_dataset(p);
    PoisonConfig cfg;
    cfg.rate = 0.2;
    cfg.seed = 9;
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    cfg.targets.emplace_back(0, spec);

    PoisonResult a = poison_dataset(clean, cfg);
    PoisonResult b = poison_dataset(clean, cfg);
    for (size_t i = 0; i < 60; ++i) {
      CHECK(a.ledger.entries[i].is_poisoned == b.ledger.entries[i].is_poisoned);
      CHECK(a.dataset.samples[i].image.data == b.dataset.samples[i].image.data);
    }
  }

  TEST_CASE("multiple targets split victims with earlier remainder") {
    PatternDataParams p;
    p.count = 100;
    p.num_classes = 5;
    p.seed = 30;
    LabeledDataset clean = make_pattern_dataset(p);
    PoisonConfig cfg;
    cfg.rate = 0.05;  // 5 victims over 2 targets -> 3 and 2
    cfg.seed = 2;
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    spec.id = "t0";
    cfg.targets.emplace_back(0, spec);
    spec.id = "t1";
    cfg.targets.emplace_back(1, spec);

    PoisonResult res = poison_dataset(clean, cfg);
    size_t to0 = 0, to1 = 0;
    for (size_t i = 0; i < 100; ++i) {
      if (!res.ledger.entries[i].is_poisoned) continue;
      CHECK((res.ledger.entries[i].original_label >= 2));  // neither target label
      if (res.dataset.samples[i].label == 0) ++to0;
      if (res.dataset.samples[i].label == 1) ++to1;
    }
    CHECK(to0 == 3);
    CHECK(to1 == 2);
  }

  TEST_CASE("duplicate targets and excess rates are config errors") {
    PatternDataParams p;
    p.count = 20;
    p.num_classes = 2;
    p.seed = 5;
    LabeledDataset clean = make_pattern_dataset(p);
    PoisonConfig cfg;
    cfg.seed = 1;
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    cfg.targets.emplace_back(0, spec);
    cfg.targets.emplace_back(0, spec);
    CHECK_THROWS_AS(poison_dataset(clean, cfg), ConfigError);

    cfg.targets.pop_back();
    cfg.rate = 1.0;  // every sample, but target-labeled ones are ineligible
    CHECK_THROWS_AS(poison_dataset(clean, cfg), ConfigError);
  }

  TEST_CASE("asr testset excludes the target class and keeps ground truth") {
    PatternDataParams p;
    p.count = 40;
    p.num_classes = 4;
    p.seed = 12;
    LabeledDataset test = make_pattern_dataset(p);
    TriggerSpec spec;
    spec.kind = TriggerKind::Patch;
    LabeledDataset asr = build_asr_testset(test, spec, 2);
    asr.validate();
    size_t expected = 0;
    for (const Sample& s : test.samples)
      if (s.label != 2) ++expected;
    CHECK(asr.samples.size() == expected);
    for (const Sample& s : asr.samples) {
      CHECK(s.label != 2);
      CHECK(s.image.at(0, s.image.height - 1, s.image.width - 1) == 1.0f);  // patch applied
    }
  }

  TEST_CASE("kind and corner names round-trip") {
    for (auto k : {TriggerKind::Patch, TriggerKind::Blend, TriggerKind::Frequency})
      CHECK(trigger_kind_from_string(to_string(k)) == k);
    for (auto c : {Corner::BottomRight, Corner::TopLeft, Corner::TopRight, Corner::BottomLeft})
      CHECK(corner_from_string(to_string(c)) == c);
    CHECK_THROWS_AS(trigger_kind_from_string("sticker"), ConfigError);
    CHECK_THROWS_AS(corner_from_string("middle"), ConfigError);
  }
}
