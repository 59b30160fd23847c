#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "segprompt/checkpoint.hpp"
#include "segprompt/errors.hpp"

namespace segprompt {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay. State is keyed by tensor identity, so the
/// same tensor must be passed on every step.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg.learning_rate > 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) ||
        !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) || !(cfg.eps > 0.0)) {
      throw ConfigError("Adam: learning rate and eps must be positive, betas in [0, 1)");
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  void step(const ParamList& params) {
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) {
        throw ContractError("optimizer step: trainable tensor '" + p.name + "' has no gradient");
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& p : params) {
      Tensor t = p.tensor;  // shares storage
      auto& st = state_[t.id()];
      auto w = t.mutable_data();
      const auto g = t.grad();
      if (st.m.empty()) {
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double m_hat = st.m[i] / c1;
        const double v_hat = st.v[i] / c2;
        w[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      }
    }
  }

  static void zero_grad(const ParamList& params) {
    for (const auto& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<const void*, Moments> state_;
};

}  // namespace segprompt
