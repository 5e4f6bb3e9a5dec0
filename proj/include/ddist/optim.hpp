#pragma once

#include <vector>

#include "ddist/tensor.hpp"

namespace ddist {

// Adam with bias correction. State is positional: the tensor list passed to
// step() must keep the same order and shapes across calls.
class Adam {
 public:
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double epsilon = 1e-8;

  Adam() = default;
  Adam(double lr_, double b1, double b2) : lr(lr_), beta1(b1), beta2(b2) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    require(params.size() == grads.size(), "optim: param/grad count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Arr::Zero(p.size()));
        v_.push_back(Arr::Zero(p.size()));
      }
    }
    require(m_.size() == params.size(), "optim: state size mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, t_);
    double bc2 = 1.0 - std::pow(beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Arr& g = grads[i].value();
      require(g.size() == m_[i].size(), "optim: grad shape drift");
      m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
      v_[i] = beta2 * v_[i] + (1.0 - beta2) * g * g;
      params[i].raw() -= lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + epsilon);
    }
  }

  int steps_taken() const { return t_; }

 private:
  std::vector<Arr> m_, v_;
  int t_ = 0;
};

}  // namespace ddist
