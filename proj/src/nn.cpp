#include "diffsan/nn.hpp"

#include <cmath>

namespace diffsan::nn {

size_t ParamRegistry::count_scalars() const {
  size_t n = 0;
  for (const Param* p : items) n += static_cast<size_t>(p->w.size());
  return n;
}

void Adam::zero_grad(ParamRegistry& reg) {
  for (Param* p : reg.items) p->gw.setZero();
}

void Adam::step(ParamRegistry& reg) {
  ++t_;
  float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
  float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
  for (Param* p : reg.items) {
    p->m = beta1_ * p->m + (1.0f - beta1_) * p->gw;
    p->v = beta2_ * p->v + (1.0f - beta2_) * p->gw.cwiseProduct(p->gw);
    p->w.array() -=
        lr_ * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + eps_);
  }
}

void he_init(Param& p, int fan_in, RngStream& rng) {
  float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (Eigen::Index j = 0; j < p.w.cols(); ++j)
    for (Eigen::Index i = 0; i < p.w.rows(); ++i) p.w(i, j) = rng.normal_f() * std;
}

void Conv2d::setup(int in_channels, int out_channels, int kernel, int stride_, int pad_,
                   ParamRegistry& reg, RngStream& rng) {
  in_ch = in_channels;
  out_ch = out_channels;
  k = kernel;
  stride = stride_;
  pad = pad_;
  weight.setup(out_ch, in_ch * k * k);
  bias.setup(out_ch, 1);
  he_init(weight, in_ch * k * k, rng);
  reg.add(weight);
  reg.add(bias);
}

void Conv2d::im2col(const Mat& x, int h, int w) {
  int oh = out_dim(h), ow = out_dim(w);
  cols_.resize(static_cast<Eigen::Index>(in_ch) * k * k, static_cast<Eigen::Index>(oh) * ow);
  for (int ic = 0; ic < in_ch; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Eigen::Index row = (static_cast<Eigen::Index>(ic) * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            float v = 0.0f;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              v = x(ic, static_cast<Eigen::Index>(iy) * w + ix);
            cols_(row, static_cast<Eigen::Index>(oy) * ow + ox) = v;
          }
        }
      }
    }
  }
}

Mat Conv2d::forward(const Mat& x, int h, int w, bool train) {
  im2col(x, h, w);
  Mat y = weight.w * cols_;
  y.colwise() += bias.w.col(0);
  if (train) {
    h_in_ = h;
    w_in_ = w;
  }
  return y;
}

Mat Conv2d::backward(const Mat& dy) {
  // cols_ still holds im2col of this layer's input: each instance runs one
  // forward per pass and backward precedes the next forward
  weight.gw.noalias() += dy * cols_.transpose();
  bias.gw.col(0) += dy.rowwise().sum();

  Mat dcols = weight.w.transpose() * dy;
  Mat dx = Mat::Zero(in_ch, static_cast<Eigen::Index>(h_in_) * w_in_);
  int oh = out_dim(h_in_), ow = out_dim(w_in_);
  for (int ic = 0; ic < in_ch; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Eigen::Index row = (static_cast<Eigen::Index>(ic) * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h_in_) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w_in_) continue;
            dx(ic, static_cast<Eigen::Index>(iy) * w_in_ + ix) +=
                dcols(row, static_cast<Eigen::Index>(oy) * ow + ox);
          }
        }
      }
    }
  }
  return dx;
}

void GroupNorm::setup(int channels, int groups_, ParamRegistry& reg) {
  ch = channels;
  groups = groups_;
  gamma.setup(ch, 1);
  beta.setup(ch, 1);
  gamma.w.setOnes();
  reg.add(gamma);
  reg.add(beta);
}

Mat GroupNorm::forward(const Mat& x, bool train) {
  int per = ch / groups;
  Eigen::Index pos = x.cols();
  Mat xhat(ch, pos);
  std::vector<float> inv_std(groups);
  for (int g = 0; g < groups; ++g) {
    auto block = x.middleRows(static_cast<Eigen::Index>(g) * per, per);
    float mean = block.mean();
    float var = (block.array() - mean).square().mean();
    float is = 1.0f / std::sqrt(var + eps);
    inv_std[g] = is;
    xhat.middleRows(static_cast<Eigen::Index>(g) * per, per) = (block.array() - mean) * is;
  }
  Mat y = xhat.array().colwise() * gamma.w.col(0).array();
  y.colwise() += beta.w.col(0);
  if (train) {
    xhat_saved_ = std::move(xhat);
    inv_std_saved_ = std::move(inv_std);
  }
  return y;
}

Mat GroupNorm::backward(const Mat& dy) {
  int per = ch / groups;
  Eigen::Index pos = dy.cols();
  gamma.gw.col(0) += dy.cwiseProduct(xhat_saved_).rowwise().sum();
  beta.gw.col(0) += dy.rowwise().sum();

  Mat dx(ch, pos);
  for (int g = 0; g < groups; ++g) {
    auto dyb = dy.middleRows(static_cast<Eigen::Index>(g) * per, per);
    auto xh = xhat_saved_.middleRows(static_cast<Eigen::Index>(g) * per, per);
    Mat dxh = dyb.array().colwise() * gamma.w.col(0).segment(static_cast<Eigen::Index>(g) * per, per).array();
    float mean_dxh = dxh.mean();
    float mean_dxh_xh = dxh.cwiseProduct(xh).mean();
    dx.middleRows(static_cast<Eigen::Index>(g) * per, per) =
        (dxh.array() - mean_dxh - xh.array() * mean_dxh_xh) * inv_std_saved_[g];
  }
  return dx;
}

Mat SiLU::forward(const Mat& x, bool train) {
  if (train) x_saved_ = x;
  return x.array() / (1.0f + (-x.array()).exp());
}

Mat SiLU::backward(const Mat& dy) {
  auto s = (1.0f / (1.0f + (-x_saved_.array()).exp())).eval();
  return dy.array() * (s + x_saved_.array() * s * (1.0f - s));
}

Mat ReLU::forward(const Mat& x, bool train) {
  if (train) x_saved_ = x;
  return x.cwiseMax(0.0f);
}

Mat ReLU::backward(const Mat& dy) {
  return (x_saved_.array() > 0.0f).select(dy, Mat::Zero(dy.rows(), dy.cols()));
}

void Dense::setup(int in_dim, int out_dim, ParamRegistry& reg, RngStream& rng) {
  weight.setup(out_dim, in_dim);
  bias.setup(out_dim, 1);
  he_init(weight, in_dim, rng);
  reg.add(weight);
  reg.add(bias);
}

Vec Dense::forward(const Vec& x, bool train) {
  if (train) x_saved_ = x;
  return weight.w * x + bias.w.col(0);
}

Vec Dense::backward(const Vec& dy) {
  weight.gw.noalias() += dy * x_saved_.transpose();
  bias.gw.col(0) += dy;
  return weight.w.transpose() * dy;
}

Mat upsample2_forward(const Mat& x, int h, int w) {
  Mat y(x.rows(), static_cast<Eigen::Index>(4) * h * w);
  int W = 2 * w;
  for (int yy = 0; yy < 2 * h; ++yy)
    for (int xx = 0; xx < W; ++xx)
      y.col(static_cast<Eigen::Index>(yy) * W + xx) =
          x.col(static_cast<Eigen::Index>(yy / 2) * w + xx / 2);
  return y;
}

Mat upsample2_backward(const Mat& dy, int h, int w) {
  Mat dx = Mat::Zero(dy.rows(), static_cast<Eigen::Index>(h) * w);
  int W = 2 * w;
  for (int yy = 0; yy < 2 * h; ++yy)
    for (int xx = 0; xx < W; ++xx)
      dx.col(static_cast<Eigen::Index>(yy / 2) * w + xx / 2) +=
          dy.col(static_cast<Eigen::Index>(yy) * W + xx);
  return dx;
}

Vec softmax(const Vec& logits) {
  Vec z = logits.array() - logits.maxCoeff();
  Vec e = z.array().exp();
  return e / e.sum();
}

float softmax_ce(const Vec& logits, uint16_t label, Vec& dlogits) {
  Vec p = softmax(logits);
  dlogits = p;
  dlogits(label) -= 1.0f;
  return -std::log(std::max(p(label), 1e-12f));
}

Vec time_embedding(uint32_t t, int dim) {
  Vec e(dim);
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
    e(2 * i) = static_cast<float>(std::sin(t * freq));
    e(2 * i + 1) = static_cast<float>(std::cos(t * freq));
  }
  return e;
}

}  // namespace diffsan::nn
