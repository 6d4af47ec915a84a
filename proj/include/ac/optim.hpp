#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ac/errors.hpp"
#include "ac/tensor.hpp"

namespace ac {

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm. Norm accumulates in double, in parameter order.
inline double clip_global_norm(const std::vector<Tensor*>& grads, double max_norm) {
  double ss = 0.0;
  for (const Tensor* g : grads)
    for (int64_t i = 0; i < g->numel(); ++i) ss += double((*g)[i]) * double((*g)[i]);
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const float s = float(max_norm / norm);
    for (Tensor* g : grads)
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] *= s;
  }
  return norm;
}

// A NaN gradient would silently poison optimizer state, so both optimizers
// scan before touching anything and report which parameter went bad.
inline void reject_nan_grads(const std::vector<const Tensor*>& grads) {
  for (size_t k = 0; k < grads.size(); ++k) {
    const Tensor& g = *grads[k];
    for (int64_t i = 0; i < g.numel(); ++i)
      if (std::isnan(g[i]))
        fail(ErrorKind::Training, "NaN gradient for parameter " + std::to_string(k) + " " +
                                      g.shape_string() + " at element " + std::to_string(i));
  }
}

// Adam with bias correction; eps sits outside the square root.
class Adam {
 public:
  explicit Adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    check(params, grads);
    reject_nan_grads(grads);
    if (m_.empty())
      for (const Tensor* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    ++t_;
    const double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
    const double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
    for (size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      for (int64_t i = 0; i < p.numel(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1.0f - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1.0f - beta2_) * g[i] * g[i];
        const double mhat = double(m_[k][i]) / bc1;
        const double vhat = double(v_[k][i]) / bc2;
        p[i] = float(double(p[i]) - double(lr_) * mhat / (std::sqrt(vhat) + double(eps_)));
      }
    }
  }

  int64_t steps() const { return t_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, int64_t t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  static void check(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size())
      fail(ErrorKind::Consistency, "optimizer: parameter/gradient list lengths differ");
    for (size_t k = 0; k < params.size(); ++k)
      if (!params[k]->same_shape(*grads[k]))
        fail(ErrorKind::Dimension, "optimizer: parameter and gradient shapes differ at slot " +
                                       std::to_string(k));
  }

  float lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// RMSProp; eps added after the square root.
class RmsProp {
 public:
  explicit RmsProp(float lr, float decay = 0.9f, float eps = 1e-8f)
      : lr_(lr), decay_(decay), eps_(eps) {}

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size())
      fail(ErrorKind::Consistency, "optimizer: parameter/gradient list lengths differ");
    reject_nan_grads(grads);
    if (s_.empty())
      for (const Tensor* p : params) s_.emplace_back(p->shape());
    for (size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      if (!p.same_shape(g))
        fail(ErrorKind::Dimension, "optimizer: parameter and gradient shapes differ at slot " +
                                       std::to_string(k));
      for (int64_t i = 0; i < p.numel(); ++i) {
        s_[k][i] = decay_ * s_[k][i] + (1.0f - decay_) * g[i] * g[i];
        p[i] = float(double(p[i]) -
                     double(lr_) * double(g[i]) / (std::sqrt(double(s_[k][i])) + double(eps_)));
      }
    }
  }

  std::vector<Tensor>& squared_avgs() { return s_; }
  void restore(std::vector<Tensor> s) { s_ = std::move(s); }

 private:
  float lr_, decay_, eps_;
  std::vector<Tensor> s_;
};

}  // namespace ac
