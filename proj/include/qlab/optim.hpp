#pragma once

#include <cmath>
#include <vector>

#include "qlab/errors.hpp"
#include "qlab/tensor.hpp"

namespace qlab {

// Adaptive moment estimation with the usual defaults. One instance per
// parameter group (policy, each critic member, temperature).
template <typename Real>
class Adam {
 public:
  Adam() = default;

  explicit Adam(std::vector<Tensor<Real>> params, Real lr = Real(3e-4), Real beta1 = Real(0.9),
                Real beta2 = Real(0.999), Real eps = Real(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      if (!p.requires_grad()) throw ContractError("adam: parameter does not track gradients");
      slots_.push_back({std::vector<Real>(p.size(), Real(0)), std::vector<Real>(p.size(), Real(0))});
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Optional global-norm clip before the moment update; 0 disables.
  void step(Real clip_norm = Real(0)) {
    ++t_;
    if (clip_norm > Real(0)) {
      double sq = 0;
      for (auto& p : params_)
        for (Real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > static_cast<double>(clip_norm)) {
        const Real f = static_cast<Real>(static_cast<double>(clip_norm) / norm);
        for (auto& p : params_)
          for (Real& g : p.grad()) g *= f;
      }
    }
    const Real bc1 = Real(1) - static_cast<Real>(std::pow(static_cast<double>(beta1_), t_));
    const Real bc2 = Real(1) - static_cast<Real>(std::pow(static_cast<double>(beta2_), t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto data = params_[k].data();
      auto grad = params_[k].grad();
      auto& m = slots_[k].m;
      auto& v = slots_[k].v;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const Real g = grad[i];
        m[i] = beta1_ * m[i] + (Real(1) - beta1_) * g;
        v[i] = beta2_ * v[i] + (Real(1) - beta2_) * g * g;
        const Real mhat = m[i] / bc1;
        const Real vhat = v[i] / bc2;
        data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<Real> m, v;
  };

  std::vector<Tensor<Real>> params_;
  std::vector<Slot> slots_;
  Real lr_ = Real(3e-4), beta1_ = Real(0.9), beta2_ = Real(0.999), eps_ = Real(1e-8);
  std::size_t t_ = 0;
};

}  // namespace qlab
