#include "diffsan/diffusion.hpp"

#include <cmath>
#include <fstream>

#include "diffsan/common.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

void NoiseSchedule::validate() const {
  if (beta.empty()) throw IntegrityError("schedule: empty");
  if (alpha.size() != beta.size() || alpha_bar.size() != beta.size())
    throw IntegrityError("schedule: ragged arrays");
  double prod = 1.0;
  for (size_t i = 0; i < beta.size(); ++i) {
    if (!(beta[i] > 0.0f) || !(beta[i] < 1.0f))
      throw IntegrityError("schedule: beta out of (0, 1) at step " + std::to_string(i + 1));
    if (alpha[i] != static_cast<float>(1.0 - static_cast<double>(beta[i])))
      throw IntegrityError("schedule: alpha != 1 - beta at step " + std::to_string(i + 1));
    prod *= static_cast<double>(alpha[i]);
    if (alpha_bar[i] != static_cast<float>(prod))
      throw IntegrityError("schedule: alpha_bar drifts from running product at step " +
                           std::to_string(i + 1));
    if (i > 0 && !(alpha_bar[i] < alpha_bar[i - 1]))
      throw IntegrityError("schedule: alpha_bar not strictly decreasing at step " +
                           std::to_string(i + 1));
  }
}

NoiseSchedule make_schedule(uint32_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw ConfigError("schedule: steps must be positive");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start)
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (uint32_t t = 0; t < steps; ++t) {
    double b = steps == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                             static_cast<double>(steps - 1);
    s.beta[t] = static_cast<float>(b);
    double a = 1.0 - static_cast<double>(s.beta[t]);
    s.alpha[t] = static_cast<float>(a);
    prod *= static_cast<double>(s.alpha[t]);
    s.alpha_bar[t] = static_cast<float>(prod);
  }
  return s;
}

ImageTensor forward_diffuse(const ImageTensor& x0, const NoiseSchedule& sched, uint32_t t,
                            RngStream& rng) {
  if (t < 1 || t > sched.steps()) throw ConfigError("forward_diffuse: t out of range");
  float abar = sched.alpha_bar_at(t);
  float a = std::sqrt(abar), b = std::sqrt(1.0f - abar);
  ImageTensor out = x0;
  for (float& v : out.data) v = a * v + b * rng.normal_f();
  return out;
}

void reverse_step_inplace(nn::Mat& x, int h, int w, uint32_t t, Denoiser& den,
                          const NoiseSchedule& sched, VarianceMode mode, RngStream& rng) {
  if (t < 1 || t > sched.steps()) throw ConfigError("reverse_step: t out of range");
  float beta = sched.beta_at(t);
  float alpha = sched.alpha_at(t);
  float abar = sched.alpha_bar_at(t);

  nn::Mat eps;
  den.predict_eps(x, h, w, t, eps);
  float coef = beta / std::sqrt(1.0f - abar);
  float inv_sqrt_alpha = 1.0f / std::sqrt(alpha);
  x = inv_sqrt_alpha * (x - coef * eps);

  if (t > 1) {
    float abar_prev = sched.alpha_bar_at(t - 1);
    float var = mode == VarianceMode::FixedSmall ? beta : (1.0f - abar_prev) / (1.0f - abar) * beta;
    float sigma = std::sqrt(var);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) += sigma * rng.normal_f();
  }
}

ImageTensor reverse_step(const ImageTensor& xt, uint32_t t, Denoiser& den,
                         const NoiseSchedule& sched, VarianceMode mode, RngStream& rng) {
  Eigen::Map<const nn::Mat> m(xt.data.data(),
                              static_cast<Eigen::Index>(xt.height) * xt.width, xt.channels);
  nn::Mat x = m.transpose();
  reverse_step_inplace(x, static_cast<int>(xt.height), static_cast<int>(xt.width), t, den, sched,
                       mode, rng);
  ImageTensor out(xt.channels, xt.height, xt.width);
  for (uint32_t c = 0; c < xt.channels; ++c)
    for (uint32_t p = 0; p < xt.height * xt.width; ++p)
      out.data[size_t(c) * xt.height * xt.width + p] = x(c, p);
  return out;
}

void UnetDenoiser::ResBlock::setup(int ch, int temb_dim, nn::ParamRegistry& reg, RngStream& rng) {
  gn1.setup(ch, 4, reg);
  gn2.setup(ch, 4, reg);
  conv1.setup(ch, ch, 3, 1, 1, reg, rng);
  conv2.setup(ch, ch, 3, 1, 1, reg, rng);
  temb_proj.setup(temb_dim, ch, reg, rng);
}

nn::Mat UnetDenoiser::ResBlock::forward(const nn::Mat& x, const nn::Vec& temb, int h, int w,
                                        bool train) {
  nn::Mat hcur = conv1.forward(s1.forward(gn1.forward(x, train), train), h, w, train);
  nn::Vec tb = temb_proj.forward(nn::Vec(stemb.forward(temb, train)), train);
  hcur.colwise() += tb;
  hcur = conv2.forward(s2.forward(gn2.forward(hcur, train), train), h, w, train);
  return x + hcur;
}

nn::Mat UnetDenoiser::ResBlock::backward(const nn::Mat& dy, nn::Vec& dtemb) {
  nn::Mat dh = gn2.backward(s2.backward(conv2.backward(dy)));
  nn::Vec dtb = dh.rowwise().sum();
  dtemb += nn::Vec(stemb.backward(temb_proj.backward(dtb)));
  nn::Mat dx = gn1.backward(s1.backward(conv1.backward(dh)));
  return dx + dy;
}

UnetDenoiser::UnetDenoiser(const UnetArch& arch, uint64_t init_seed) : arch_(arch) {
  if (arch_.side % 4 != 0) throw ConfigError("denoiser: side must be divisible by 4");
  if (arch_.base % 4 != 0) throw ConfigError("denoiser: base width must be divisible by 4");
  RngStream rng(child_seed(init_seed, "denoiser-init"));
  int b = static_cast<int>(arch_.base);
  int td = static_cast<int>(arch_.temb_dim);
  temb1_.setup(32, td, reg_, rng);
  temb2_.setup(td, td, reg_, rng);
  stem_.setup(static_cast<int>(arch_.in_channels), b, 3, 1, 1, reg_, rng);
  rb0_.setup(b, td, reg_, rng);
  down0_.setup(b, 2 * b, 3, 2, 1, reg_, rng);
  rb1_.setup(2 * b, td, reg_, rng);
  down1_.setup(2 * b, 4 * b, 3, 2, 1, reg_, rng);
  rb2_.setup(4 * b, td, reg_, rng);
  upc1_.setup(4 * b, 2 * b, 3, 1, 1, reg_, rng);
  rb3_.setup(2 * b, td, reg_, rng);
  upc0_.setup(2 * b, b, 3, 1, 1, reg_, rng);
  rb4_.setup(b, td, reg_, rng);
  head_gn_.setup(b, 4, reg_);
  head_.setup(b, static_cast<int>(arch_.in_channels), 3, 1, 1, reg_, rng);
  head_.weight.w.setZero();  // start as the zero noise predictor
}

nn::Mat UnetDenoiser::run(const nn::Mat& xt, uint32_t t, bool train) {
  int s = static_cast<int>(arch_.side);
  int s2 = s / 2, s4 = s / 4;
  nn::Vec te = nn::time_embedding(t, 32);
  nn::Vec temb = temb2_.forward(nn::Vec(temb_act_.forward(temb1_.forward(te, train), train)), train);
  if (train) temb_saved_ = temb;

  nn::Mat h0 = rb0_.forward(stem_.forward(xt, s, s, train), temb, s, s, train);
  nn::Mat h1 = rb1_.forward(down0_.forward(h0, s, s, train), temb, s2, s2, train);
  nn::Mat h2 = rb2_.forward(down1_.forward(h1, s2, s2, train), temb, s4, s4, train);

  nn::Mat u1 = upc1_.forward(nn::upsample2_forward(h2, s4, s4), s2, s2, train);
  u1 += h1;
  u1 = rb3_.forward(u1, temb, s2, s2, train);

  nn::Mat u0 = upc0_.forward(nn::upsample2_forward(u1, s2, s2), s, s, train);
  u0 += h0;
  u0 = rb4_.forward(u0, temb, s, s, train);

  return head_.forward(head_act_.forward(head_gn_.forward(u0, train), train), s, s, train);
}

void UnetDenoiser::predict_eps(const nn::Mat& xt, int h, int w, uint32_t t, nn::Mat& eps_out) {
  if (h != static_cast<int>(arch_.side) || w != static_cast<int>(arch_.side))
    throw ConfigError("denoiser: input side mismatch");
  eps_out = run(xt, t, false);
}

nn::Mat UnetDenoiser::forward_train(const nn::Mat& xt, uint32_t t) { return run(xt, t, true); }

void UnetDenoiser::backward(const nn::Mat& deps) {
  int s = static_cast<int>(arch_.side);
  int s2 = s / 2, s4 = s / 4;
  nn::Vec dtemb = nn::Vec::Zero(temb_saved_.size());

  nn::Mat d = head_gn_.backward(head_act_.backward(head_.backward(deps)));
  d = rb4_.backward(d, dtemb);
  nn::Mat dskip0 = d;
  nn::Mat du1 = nn::upsample2_backward(upc0_.backward(d), s2, s2);
  du1 = rb3_.backward(du1, dtemb);
  nn::Mat dskip1 = du1;
  nn::Mat dh2 = nn::upsample2_backward(upc1_.backward(du1), s4, s4);

  nn::Mat dh1 = down1_.backward(rb2_.backward(dh2, dtemb));
  dh1 += dskip1;
  nn::Mat dh0 = down0_.backward(rb1_.backward(dh1, dtemb));
  dh0 += dskip0;
  stem_.backward(rb0_.backward(dh0, dtemb));

  temb1_.backward(nn::Vec(temb_act_.backward(temb2_.backward(dtemb))));
}

void DenoiseTrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("denoise train config: batch_size must be positive");
  if (!(lr > 0.0f)) throw ConfigError("denoise train config: lr must be positive");
}

std::vector<float> train_denoiser(UnetDenoiser& model, const LabeledDataset& data,
                                  const NoiseSchedule& sched, const DenoiseTrainConfig& cfg,
                                  RngStream& rng) {
  cfg.validate();
  sched.validate();
  data.validate();
  if (data.channels() != model.channels() || data.height() != model.arch().side ||
      data.width() != model.arch().side)
    throw ConfigError("train_denoiser: dataset shape does not match model");

  int side = static_cast<int>(model.arch().side);
  Eigen::Index pos = static_cast<Eigen::Index>(side) * side;
  int ch = static_cast<int>(model.channels());

  std::vector<uint32_t> order(data.size());
  for (uint32_t i = 0; i < data.size(); ++i) order[i] = i;

  nn::Adam opt(cfg.lr);
  std::vector<float> epoch_loss;
  nn::Mat xt(ch, pos), eps(ch, pos);
  for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      size_t end = std::min(order.size(), start + cfg.batch_size);
      opt.zero_grad(model.params());
      for (size_t i = start; i < end; ++i) {
        const ImageTensor& img = data.samples[order[i]].image;
        uint32_t t = static_cast<uint32_t>(rng.uniform_below(sched.steps())) + 1;
        float abar = sched.alpha_bar_at(t);
        float a = std::sqrt(abar), b = std::sqrt(1.0f - abar);
        for (int c = 0; c < ch; ++c)
          for (Eigen::Index p = 0; p < pos; ++p) {
            float e = rng.normal_f();
            eps(c, p) = e;
            xt(c, p) = a * img.data[size_t(c) * pos + p] + b * e;
          }
        nn::Mat pred = model.forward_train(xt, t);
        nn::Mat diff = pred - eps;
        loss_sum += diff.squaredNorm() / static_cast<double>(diff.size());
        nn::Mat dpred =
            (2.0f / static_cast<float>(diff.size() * (end - start))) * diff;
        model.backward(dpred);
      }
      opt.step(model.params());
    }
    epoch_loss.push_back(static_cast<float>(loss_sum / static_cast<double>(data.size())));
  }
  return epoch_loss;
}

namespace {
constexpr char kUnetMagic[] = "diffsan.denoiser.v1";
}

void UnetDenoiser::save(const std::filesystem::path& file) const {
  KvDoc head;
  head.set("format", kUnetMagic);
  head.set_u64("in_channels", arch_.in_channels);
  head.set_u64("side", arch_.side);
  head.set_u64("base", arch_.base);
  head.set_u64("temb_dim", arch_.temb_dim);
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

std::unique_ptr<UnetDenoiser> UnetDenoiser::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IntegrityError("missing checkpoint: " + file.string());
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || hlen > 1 << 20) throw IntegrityError("bad checkpoint header: " + file.string());
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  KvDoc head = KvDoc::parse(header);
  if (head.get_str("format") != kUnetMagic)
    throw IntegrityError("unexpected checkpoint format in " + file.string());
  UnetArch arch;
  arch.in_channels = static_cast<uint32_t>(head.get_u64("in_channels"));
  arch.side = static_cast<uint32_t>(head.get_u64("side"));
  arch.base = static_cast<uint32_t>(head.get_u64("base"));
  arch.temb_dim = static_cast<uint32_t>(head.get_u64("temb_dim"));
  auto model = std::make_unique<UnetDenoiser>(arch);
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
