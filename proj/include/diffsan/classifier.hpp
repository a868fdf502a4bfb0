#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "diffsan/dataset.hpp"
#include "diffsan/nn.hpp"
#include "diffsan/rng.hpp"

namespace diffsan {

struct TrainConfig {
  uint32_t epochs = 30;
  uint32_t batch_size = 64;
  float lr = 1e-3f;
  float fine_tune_lr_scale = 0.1f;  // must be in (0, 1)

  void validate() const;
};

struct ClassifierArch {
  uint32_t channels = 1;
  uint32_t side = 24;  // divisible by 8
  uint32_t num_classes = 10;
  uint32_t width = 16;
};

// Small CNN: four 3x3 conv stages (three strided), a hidden dense layer whose
// post-activation output is the penultimate feature vector, and a linear head.
class Classifier {
 public:
  explicit Classifier(const ClassifierArch& arch, uint64_t init_seed = 0);

  // the registry points into this object; it must stay put
  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;

  const ClassifierArch& arch() const { return arch_; }
  size_t param_count() const { return reg_.count_scalars(); }

  nn::Vec logits(const ImageTensor& img, bool train = false);
  // logit_scale exists so invariance-under-scaling can be exercised directly
  uint16_t predict_one(const ImageTensor& img, float logit_scale = 1.0f);
  nn::Vec predict_proba(const ImageTensor& img);
  nn::Vec features(const ImageTensor& img);  // penultimate, post-activation

  // one optimizer step over a batch; returns summed loss. Used by train_classifier.
  float train_batch(const std::vector<const Sample*>& batch, nn::Adam& opt);

  nn::ParamRegistry& params() { return reg_; }

  void save(const std::filesystem::path& file) const;
  static std::unique_ptr<Classifier> load(const std::filesystem::path& file);

 private:
  ClassifierArch arch_;
  nn::ParamRegistry reg_;
  nn::Conv2d c1_, c2_, c3_, c4_;
  nn::ReLU r1_, r2_, r3_, r4_, r5_;
  nn::Dense d1_, d2_;
  int flat_dim_ = 0, feat_dim_ = 0;

  nn::Vec forward(const ImageTensor& img, bool train, nn::Vec* feat_out);
  void backward(const nn::Vec& dlogits);
};

struct TrainReport {
  std::vector<float> epoch_loss;  // mean per-sample loss
  float final_train_accuracy = 0.0f;
};

// Seed-deterministic: identical dataset + config + rng state give identical
// weights. epochs = 0 leaves the freshly initialized model untouched.
TrainReport train_classifier(Classifier& model, const LabeledDataset& data,
                             const TrainConfig& cfg, RngStream& rng);

std::vector<uint16_t> predict(Classifier& model, const std::vector<const ImageTensor*>& images);
std::vector<nn::Vec> extract_features(Classifier& model,
                                      const std::vector<const ImageTensor*>& images);

}  // namespace diffsan
