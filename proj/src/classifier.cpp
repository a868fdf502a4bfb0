#include "diffsan/classifier.hpp"

#include <fstream>

#include "diffsan/common.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (!(lr > 0.0f)) throw ConfigError("train config: lr must be positive");
  if (!(fine_tune_lr_scale > 0.0f) || !(fine_tune_lr_scale < 1.0f))
    throw ConfigError("train config: fine_tune_lr_scale must be in (0, 1)");
}

Classifier::Classifier(const ClassifierArch& arch, uint64_t init_seed) : arch_(arch) {
  if (arch_.side % 8 != 0) throw ConfigError("classifier: side must be divisible by 8");
  if (arch_.width % 2 != 0) throw ConfigError("classifier: width must be even");
  RngStream rng(child_seed(init_seed, "classifier-init"));
  int w = static_cast<int>(arch_.width);
  c1_.setup(static_cast<int>(arch_.channels), w, 3, 1, 1, reg_, rng);
  c2_.setup(w, w * 3 / 2, 3, 2, 1, reg_, rng);
  c3_.setup(w * 3 / 2, w * 2, 3, 2, 1, reg_, rng);
  c4_.setup(w * 2, w * 3, 3, 2, 1, reg_, rng);
  int s8 = static_cast<int>(arch_.side) / 8;
  flat_dim_ = w * 3 * s8 * s8;
  feat_dim_ = w * 6;
  d1_.setup(flat_dim_, feat_dim_, reg_, rng);
  d2_.setup(feat_dim_, static_cast<int>(arch_.num_classes), reg_, rng);
}

nn::Vec Classifier::forward(const ImageTensor& img, bool train, nn::Vec* feat_out) {
  if (img.channels != arch_.channels || img.height != arch_.side || img.width != arch_.side)
    throw ConfigError("classifier: image shape does not match the model");
  int side = static_cast<int>(arch_.side);
  Eigen::Map<const nn::Mat> x(img.data.data(), static_cast<Eigen::Index>(side) * side,
                              static_cast<Eigen::Index>(arch_.channels));
  nn::Mat x0 = x.transpose();
  nn::Mat h = r1_.forward(c1_.forward(x0, side, side, train), train);
  h = r2_.forward(c2_.forward(h, side, side, train), train);
  int s2 = c2_.out_dim(side);
  h = r3_.forward(c3_.forward(h, s2, s2, train), train);
  int s4 = c3_.out_dim(s2);
  h = r4_.forward(c4_.forward(h, s4, s4, train), train);

  nn::Vec flat = Eigen::Map<const nn::Vec>(h.data(), h.size());
  nn::Vec feat = r5_.forward(d1_.forward(flat, train), train);
  if (feat_out) *feat_out = feat;
  return d2_.forward(feat, train);
}

void Classifier::backward(const nn::Vec& dlogits) {
  nn::Vec dfeat = d1_.backward(nn::Mat(r5_.backward(d2_.backward(dlogits))));
  int s8 = static_cast<int>(arch_.side) / 8;
  Eigen::Map<const nn::Mat> dh4(dfeat.data(), static_cast<Eigen::Index>(arch_.width) * 3,
                                static_cast<Eigen::Index>(s8) * s8);
  nn::Mat d = c4_.backward(r4_.backward(dh4));
  d = c3_.backward(r3_.backward(d));
  d = c2_.backward(r2_.backward(d));
  c1_.backward(r1_.backward(d));
}

nn::Vec Classifier::logits(const ImageTensor& img, bool train) {
  return forward(img, train, nullptr);
}

uint16_t Classifier::predict_one(const ImageTensor& img, float logit_scale) {
  nn::Vec z = logits(img) * logit_scale;
  Eigen::Index best;
  z.maxCoeff(&best);
  return static_cast<uint16_t>(best);
}

nn::Vec Classifier::predict_proba(const ImageTensor& img) { return nn::softmax(logits(img)); }

nn::Vec Classifier::features(const ImageTensor& img) {
  nn::Vec feat;
  forward(img, false, &feat);
  return feat;
}

float Classifier::train_batch(const std::vector<const Sample*>& batch, nn::Adam& opt) {
  opt.zero_grad(reg_);
  float total = 0.0f;
  for (const Sample* s : batch) {
    nn::Vec z = forward(s->image, true, nullptr);
    nn::Vec dz;
    total += nn::softmax_ce(z, s->label, dz);
    dz /= static_cast<float>(batch.size());
    backward(dz);
  }
  opt.step(reg_);
  return total;
}

TrainReport train_classifier(Classifier& model, const LabeledDataset& data, const TrainConfig& cfg,
                             RngStream& rng) {
  cfg.validate();
  data.validate();
  if (data.num_classes != model.arch().num_classes)
    throw ConfigError("train_classifier: class count mismatch");
  TrainReport report;
  std::vector<uint32_t> order(data.size());
  for (uint32_t i = 0; i < data.size(); ++i) order[i] = i;

  nn::Adam opt(cfg.lr);
  for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    float loss_sum = 0.0f;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Sample*> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(&data.samples[order[i]]);
      loss_sum += model.train_batch(batch, opt);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<float>(data.size()));
  }

  size_t correct = 0;
  for (const Sample& s : data.samples)
    if (model.predict_one(s.image) == s.label) ++correct;
  report.final_train_accuracy =
      data.size() ? static_cast<float>(correct) / static_cast<float>(data.size()) : 0.0f;
  return report;
}

std::vector<uint16_t> predict(Classifier& model, const std::vector<const ImageTensor*>& images) {
  std::vector<uint16_t> out;
  out.reserve(images.size());
  for (const ImageTensor* img : images) out.push_back(model.predict_one(*img));
  return out;
}

std::vector<nn::Vec> extract_features(Classifier& model,
                                      const std::vector<const ImageTensor*>& images) {
  std::vector<nn::Vec> out;
  out.reserve(images.size());
  for (const ImageTensor* img : images) out.push_back(model.features(*img));
  return out;
}

namespace {
constexpr char kMagic[] = "diffsan.classifier.v1";
}

void Classifier::save(const std::filesystem::path& file) const {
  KvDoc head;
  head.set("format", kMagic);
  head.set_u64("channels", arch_.channels);
  head.set_u64("side", arch_.side);
  head.set_u64("num_classes", arch_.num_classes);
  head.set_u64("width", arch_.width);
  std::string header = head.to_string();
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError("cannot write " + file.string());
  uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const nn::Param* p : reg_.items)
    out.write(reinterpret_cast<const char*>(p->w.data()),
              static_cast<std::streamsize>(p->w.size() * sizeof(float)));
  if (!out) throw StageError("short write: " + file.string());
}

std::unique_ptr<Classifier> Classifier::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IntegrityError("missing checkpoint: " + file.string());
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || hlen > 1 << 20) throw IntegrityError("bad checkpoint header: " + file.string());
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  KvDoc head = KvDoc::parse(header);
  if (head.get_str("format") != kMagic)
    throw IntegrityError("unexpected checkpoint format in " + file.string());
  ClassifierArch arch;
  arch.channels = static_cast<uint32_t>(head.get_u64("channels"));
  arch.side = static_cast<uint32_t>(head.get_u64("side"));
  arch.num_classes = static_cast<uint32_t>(head.get_u64("num_classes"));
  arch.width = static_cast<uint32_t>(head.get_u64("width"));
  auto model = std::make_unique<Classifier>(arch);
  for (nn::Param* p : model->reg_.items) {
    in.read(reinterpret_cast<char*>(p->w.data()),
            static_cast<std::streamsize>(p->w.size() * sizeof(float)));
    if (!in) throw IntegrityError("checkpoint truncated: " + file.string());
  }
  char extra;
  if (in.read(&extra, 1)) throw IntegrityError("checkpoint has trailing bytes: " + file.string());
  return model;
}

}  // namespace diffsan
