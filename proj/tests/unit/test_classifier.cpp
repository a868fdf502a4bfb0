#include <doctest.h>

#include <fstream>

#include "diffsan/classifier.hpp"
#include "diffsan/common.hpp"
#include "diffsan/pattern_data.hpp"
#include "test_util.hpp"

using namespace diffsan;

namespace {

ClassifierArch tiny_arch() {
  ClassifierArch a;
  a.channels = 1;
  a.side = 24;
  a.num_classes = 4;
  a.width = 8;
  return a;
}

LabeledDataset tiny_data(uint32_t count, uint64_t seed) {
  PatternDataParams p;
  p.count = count;
  p.num_classes = 4;
  p.seed = seed;
  return make_pattern_dataset(p);
}

}  // namespace

TEST_SUITE("classifier") {
  TEST_CASE("prediction ignores logit scaling") {
    Classifier m(tiny_arch(), 3);
    LabeledDataset ds = tiny_data(6, 44);
    for (const Sample& s : ds.samples) {
      uint16_t a = m.predict_one(s.image);
      CHECK(m.predict_one(s.image, 10.0f) == a);
      CHECK(m.predict_one(s.image, 0.125f) == a);
    }
  }

  TEST_CASE("checkpoint round-trip preserves behavior bitwise") {
    test::TempDir tmp;
    Classifier m(tiny_arch(), 5);
    LabeledDataset ds = tiny_data(4, 45);
    RngStream rng(6);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    train_classifier(m, ds, cfg, rng);
    m.save(tmp / "m.ckpt");
    auto back = Classifier::load(tmp / "m.ckpt");
    CHECK(back->arch().width == 8);
    for (const Sample& s : ds.samples) {
      nn::Vec a = m.logits(s.image);
      nn::Vec b = back->logits(s.image);
      REQUIRE(a.size() == b.size());
      for (int i = 0; i < a.size(); ++i) CHECK(a(i) == b(i));
    }
  }

  TEST_CASE("malformed checkpoint is rejected") {
    test::TempDir tmp;
    Classifier m(tiny_arch(), 7);
    m.save(tmp / "m.ckpt");

    SUBCASE("missing file") {
      CHECK_THROWS_AS(Classifier::load(tmp / "nope.ckpt"), IntegrityError);
    }
    SUBCASE("truncated payload") {
      const auto full = std::filesystem::file_size(tmp / "m.ckpt");
      std::filesystem::resize_file(tmp / "m.ckpt", full - 16);
      CHECK_THROWS_AS(Classifier::load(tmp / "m.ckpt"), IntegrityError);
    }
    SUBCASE("trailing bytes") {
      std::ofstream f(tmp / "m.ckpt", std::ios::binary | std::ios::app);
      char b = 0x77;
      f.write(&b, 1);
      f.close();
      CHECK_THROWS_AS(Classifier::load(tmp / "m.ckpt"), IntegrityError);
    }
    SUBCASE("foreign format tag") {
      std::ofstream f(tmp / "m.ckpt", std::ios::binary | std::ios::trunc);
      const std::string header = "format: something.else.v1\n";
      const uint64_t hlen = header.size();
      f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
      f.write(header.data(), static_cast<std::streamsize>(header.size()));
      f.close();
      CHECK_THROWS_AS(Classifier::load(tmp / "m.ckpt"), IntegrityError);
    }
  }

  TEST_CASE("training fits separable data") {
    Classifier m(tiny_arch(), 11);
    LabeledDataset ds = tiny_data(120, 46);
    RngStream rng(12);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    TrainReport rep = train_classifier(m, ds, cfg, rng);
    REQUIRE(rep.epoch_loss.size() == 8);
    CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
    CHECK(rep.final_train_accuracy > 0.9);
  }

  TEST_CASE("training is deterministic") {
    LabeledDataset ds = tiny_data(40, 47);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;

    Classifier a(tiny_arch(), 9);
    RngStream ra(10);
    train_classifier(a, ds, cfg, ra);
    Classifier b(tiny_arch(), 9);
    RngStream rb(10);
    train_classifier(b, ds, cfg, rb);
    for (const Sample& s : ds.samples) {
      nn::Vec la = a.logits(s.image);
      nn::Vec lb = b.logits(s.image);
      for (int i = 0; i < la.size(); ++i) CHECK(la(i) == lb(i));
    }
  }

  TEST_CASE("features are the penultimate activation") {
    Classifier m(tiny_arch(), 13);
    LabeledDataset ds = tiny_data(3, 48);
    nn::Vec f = m.features(ds.samples[0].image);
    CHECK(f.size() > 0);
    for (int i = 0; i < f.size(); ++i) CHECK(f(i) >= 0.0f);  // post-ReLU
    // forward twice gives identical features (no hidden state)
    nn::Vec g = m.features(ds.samples[0].image);
    for (int i = 0; i < f.size(); ++i) CHECK(f(i) == g(i));
  }

  TEST_CASE("shape mismatches are rejected") {
    Classifier m(tiny_arch(), 15);
    ImageTensor wrong(1, 16, 16, 0.5f);
    CHECK_THROWS_AS(m.logits(wrong), ConfigError);
  }

  TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.lr = 0.0f;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.fine_tune_lr_scale = 1.5f;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    // epochs 0 is legal: it leaves the freshly initialized model untouched
    cfg = TrainConfig{};
    cfg.epochs = 0;
    cfg.validate();
  }
}
