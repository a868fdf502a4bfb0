#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "diffsan/dataset.hpp"
#include "diffsan/nn.hpp"
#include "diffsan/rng.hpp"

namespace diffsan {

// Step indices run t = 1..steps; accessors take that 1-based t.
struct NoiseSchedule {
  std::vector<float> beta;       // beta[t-1]
  std::vector<float> alpha;      // 1 - beta
  std::vector<float> alpha_bar;  // running product of alpha, strictly decreasing

  uint32_t steps() const { return static_cast<uint32_t>(beta.size()); }
  float beta_at(uint32_t t) const { return beta[t - 1]; }
  float alpha_at(uint32_t t) const { return alpha[t - 1]; }
  float alpha_bar_at(uint32_t t) const { return t == 0 ? 1.0f : alpha_bar[t - 1]; }

  // internal consistency: alpha is the correctly rounded 1 - beta and
  // alpha_bar the correctly rounded double running product of alpha;
  // IntegrityError otherwise
  void validate() const;
};

// Linear beta ramp, endpoints inclusive; steps == 1 uses beta_start alone.
NoiseSchedule make_schedule(uint32_t steps, double beta_start, double beta_end);

// Closed-form jump to depth t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
ImageTensor forward_diffuse(const ImageTensor& x0, const NoiseSchedule& sched, uint32_t t,
                            RngStream& rng);

enum class VarianceMode {
  FixedSmall,  // sigma^2 = beta_t
  FixedLarge,  // sigma^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
};

// Noise-prediction backend. Maps are (channels x positions) as in nn.hpp.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual uint32_t channels() const = 0;
  virtual void predict_eps(const nn::Mat& xt, int h, int w, uint32_t t, nn::Mat& eps_out) = 0;
};

// One ancestral step t -> t-1. The t == 1 step is deterministic (no noise).
void reverse_step_inplace(nn::Mat& x, int h, int w, uint32_t t, Denoiser& den,
                          const NoiseSchedule& sched, VarianceMode mode, RngStream& rng);
ImageTensor reverse_step(const ImageTensor& xt, uint32_t t, Denoiser& den,
                         const NoiseSchedule& sched, VarianceMode mode, RngStream& rng);

struct UnetArch {
  uint32_t in_channels = 1;
  uint32_t side = 24;  // divisible by 4
  uint32_t base = 8;   // channel widths (base, 2*base, 4*base)
  uint32_t temb_dim = 64;
};

// Compact three-level U-Net: strided-conv downsampling, nearest upsampling,
// additive skips, GroupNorm + SiLU residual blocks with a per-block time bias.
class UnetDenoiser : public Denoiser {
 public:
  explicit UnetDenoiser(const UnetArch& arch, uint64_t init_seed = 0);

  // the registry points into this object; it must stay put
  UnetDenoiser(const UnetDenoiser&) = delete;
  UnetDenoiser& operator=(const UnetDenoiser&) = delete;

  uint32_t channels() const override { return arch_.in_channels; }
  const UnetArch& arch() const { return arch_; }
  size_t param_count() const { return reg_.count_scalars(); }
  nn::ParamRegistry& params() { return reg_; }

  void predict_eps(const nn::Mat& xt, int h, int w, uint32_t t, nn::Mat& eps_out) override;

  // forward with gradient bookkeeping + backward from d(eps)
  nn::Mat forward_train(const nn::Mat& xt, uint32_t t);
  void backward(const nn::Mat& deps);

  void save(const std::filesystem::path& file) const;
  static std::unique_ptr<UnetDenoiser> load(const std::filesystem::path& file);

 private:
  struct ResBlock {
    nn::GroupNorm gn1, gn2;
    nn::SiLU s1, s2, stemb;
    nn::Conv2d conv1, conv2;
    nn::Dense temb_proj;

    void setup(int ch, int temb_dim, nn::ParamRegistry& reg, RngStream& rng);
    nn::Mat forward(const nn::Mat& x, const nn::Vec& temb, int h, int w, bool train);
    nn::Mat backward(const nn::Mat& dy, nn::Vec& dtemb);
  };

  UnetArch arch_;
  nn::ParamRegistry reg_;
  nn::Dense temb1_, temb2_;
  nn::SiLU temb_act_;
  nn::Conv2d stem_, down0_, down1_, upc1_, upc0_, head_;
  nn::GroupNorm head_gn_;
  nn::SiLU head_act_;
  ResBlock rb0_, rb1_, rb2_, rb3_, rb4_;

  nn::Mat run(const nn::Mat& xt, uint32_t t, bool train);
  nn::Vec temb_saved_;
};

struct DenoiseTrainConfig {
  uint32_t epochs = 40;
  uint32_t batch_size = 32;
  float lr = 2e-3f;

  void validate() const;
};

// Standard eps-prediction objective: uniform t in [1, steps], fresh gaussian
// noise, MSE between predicted and injected noise. Returns per-epoch mean loss.
std::vector<float> train_denoiser(UnetDenoiser& model, const LabeledDataset& data,
                                  const NoiseSchedule& sched, const DenoiseTrainConfig& cfg,
                                  RngStream& rng);

}  // namespace diffsan
