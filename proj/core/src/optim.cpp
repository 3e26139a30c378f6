#include "fsod/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fsod {

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::runtime_error("optim: learning_rate must be positive");
  if (weight_decay < 0.0) throw std::runtime_error("optim: weight_decay must be non-negative");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw std::runtime_error("optim: betas must lie in (0, 1)");
  }
  if (!(epsilon > 0.0)) throw std::runtime_error("optim: epsilon must be positive");
}

void adamw_step(const std::vector<Param*>& params, const OptimConfig& cfg) {
  cfg.validate();
  for (Param* p : params) {
    if (!p->trainable) continue;
    if (!p->grad.has_value()) {
      throw std::runtime_error("adamw_step: trainable param '" + p->name + "' has no gradient");
    }
    const Tensor& g = *p->grad;
    if (!g.same_shape(p->t)) {
      throw std::runtime_error("adamw_step: gradient shape mismatch on '" + p->name + "'");
    }
    AdamState& st = p->adam;
    if (!st.initialized()) {
      st.m = Tensor::zeros_like(p->t);
      st.v = Tensor::zeros_like(p->t);
      st.step = 0;
    }
    st.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (int i = 0; i < p->t.numel(); ++i) {
      p->t.v[i] -= cfg.learning_rate * cfg.weight_decay * p->t.v[i];
      st.m.v[i] = cfg.beta1 * st.m.v[i] + (1.0 - cfg.beta1) * g.v[i];
      st.v.v[i] = cfg.beta2 * st.v.v[i] + (1.0 - cfg.beta2) * g.v[i] * g.v[i];
      double mhat = st.m.v[i] / bc1;
      double vhat = st.v.v[i] / bc2;
      p->t.v[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

}  // namespace fsod
