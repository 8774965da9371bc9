#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mim/tensor.hpp"

namespace mim {

// Parameter slots are registered once, in a fixed order; updates are
// applied in that order, so training is deterministic.
class Optimizer {
 public:
  enum class Kind { Sgd, Adam };

  explicit Optimizer(Kind kind, double lr)
      : kind_(kind), lr_(lr) {}

  void attach(std::vector<Tensor*> params) {
    params_ = std::move(params);
    if (kind_ == Kind::Adam) {
      m_.clear();
      v_.clear();
      for (Tensor* p : params_) {
        m_.push_back(Tensor::zeros(p->shape()));
        v_.push_back(Tensor::zeros(p->shape()));
      }
      t_ = 0;
    }
  }

  // grads[i] pairs with the i-th attached parameter.
  void step(const std::vector<Tensor>& grads) {
    if (kind_ == Kind::Sgd) {
      for (std::size_t i = 0; i < params_.size(); ++i)
        for (std::size_t j = 0; j < params_[i]->size(); ++j)
          (*params_[i])[j] -= lr_ * grads[i][j];
      return;
    }
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double bc1 = 1.0 - std::pow(b1, double(t_));
    double bc2 = 1.0 - std::pow(b2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      for (std::size_t j = 0; j < params_[i]->size(); ++j) {
        double g = grads[i][j];
        m_[i][j] = b1 * m_[i][j] + (1 - b1) * g;
        v_[i][j] = b2 * v_[i][j] + (1 - b2) * g * g;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        (*params_[i])[j] -= lr_ * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  const std::vector<Tensor*>& params() const { return params_; }

 private:
  Kind kind_;
  double lr_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace mim
