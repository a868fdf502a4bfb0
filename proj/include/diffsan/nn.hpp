#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "diffsan/rng.hpp"

namespace diffsan::nn {

// Feature maps are (channels x positions) matrices, positions row-major
// (y * width + x). All forward/backward passes are single-image; training
// accumulates gradients over a batch in sample order, so results do not
// depend on batch partitioning.
using Mat = Eigen::MatrixXf;
using Vec = Eigen::VectorXf;

struct Param {
  Mat w, gw, m, v;

  void setup(int rows, int cols) {
    w.setZero(rows, cols);
    gw.setZero(rows, cols);
    m.setZero(rows, cols);
    v.setZero(rows, cols);
  }
};

struct ParamRegistry {
  std::vector<Param*> items;
  void add(Param& p) { items.push_back(&p); }
  size_t count_scalars() const;
};

// Adam with bias correction. Iterates the registry in registration order.
class Adam {
 public:
  explicit Adam(float lr) : lr_(lr) {}
  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }
  void zero_grad(ParamRegistry& reg);
  void step(ParamRegistry& reg);

 private:
  float lr_;
  float beta1_ = 0.9f, beta2_ = 0.999f, eps_ = 1e-8f;
  uint64_t t_ = 0;
};

void he_init(Param& p, int fan_in, RngStream& rng);

struct Conv2d {
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
  Param weight;  // (out_ch x in_ch*k*k)
  Param bias;    // (out_ch x 1)

  void setup(int in_channels, int out_channels, int kernel, int stride_, int pad_,
             ParamRegistry& reg, RngStream& rng);
  int out_dim(int n) const { return (n + 2 * pad - k) / stride + 1; }

  Mat forward(const Mat& x, int h, int w, bool train);
  Mat backward(const Mat& dy);  // uses shapes saved by forward(train=true)

 private:
  Mat cols_;
  int h_in_ = 0, w_in_ = 0;
  void im2col(const Mat& x, int h, int w);
};

struct GroupNorm {
  int ch = 0, groups = 1;
  float eps = 1e-5f;
  Param gamma, beta;

  void setup(int channels, int groups_, ParamRegistry& reg);
  Mat forward(const Mat& x, bool train);
  Mat backward(const Mat& dy);

 private:
  Mat xhat_saved_;
  std::vector<float> inv_std_saved_;
};

struct SiLU {
  Mat forward(const Mat& x, bool train);
  Mat backward(const Mat& dy);

 private:
  Mat x_saved_;
};

struct ReLU {
  Mat forward(const Mat& x, bool train);
  Mat backward(const Mat& dy);

 private:
  Mat x_saved_;
};

struct Dense {
  Param weight, bias;  // (out x in), (out x 1)

  void setup(int in_dim, int out_dim, ParamRegistry& reg, RngStream& rng);
  Vec forward(const Vec& x, bool train);
  Vec backward(const Vec& dy);

 private:
  Vec x_saved_;
};

// nearest-neighbour 2x upsample; positions layout as above
Mat upsample2_forward(const Mat& x, int h, int w);
Mat upsample2_backward(const Mat& dy, int h, int w);  // h, w of the small map

// stable softmax cross-entropy; returns loss, writes dlogits
float softmax_ce(const Vec& logits, uint16_t label, Vec& dlogits);
Vec softmax(const Vec& logits);

// sinusoidal embedding of an integer step index
Vec time_embedding(uint32_t t, int dim);

}  // namespace diffsan::nn
