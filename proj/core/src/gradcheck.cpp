#include "fsod/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fsod {

namespace {

double eval_scalar(const std::function<Var(Tape&)>& build) {
  Tape t;
  Var root = build(t);
  const Tensor& val = t.value(root);
  if (val.numel() != 1) {
    throw std::runtime_error("grad_check: computation is not scalar, got " +
                             shape_str(val.shape));
  }
  return val.v[0];
}

}  // namespace

double grad_check(const std::function<Var(Tape&)>& build, const std::vector<Param*>& params,
                  double eps) {
  if (!(eps > 0.0) || eps > 1e-3) {
    throw std::runtime_error("grad_check: eps must lie in (0, 1e-3]");
  }
  for (Param* p : params) p->clear_grad();
  {
    Tape t;
    Var root = build(t);
    if (t.value(root).numel() != 1) {
      throw std::runtime_error("grad_check: computation is not scalar, got " +
                               shape_str(t.value(root).shape));
    }
    t.backward(root);
  }
  double max_err = 0.0;
  for (Param* p : params) {
    Tensor analytic = p->grad.has_value() ? *p->grad : Tensor::zeros_like(p->t);
    for (int i = 0; i < p->t.numel(); ++i) {
      double saved = p->t.v[i];
      p->t.v[i] = saved + eps;
      double f_plus = eval_scalar(build);
      p->t.v[i] = saved - eps;
      double f_minus = eval_scalar(build);
      p->t.v[i] = saved;
      double numeric = (f_plus - f_minus) / (2.0 * eps);
      double a = analytic.v[i];
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_err = std::max(max_err, err);
    }
  }
  for (Param* p : params) p->clear_grad();
  return max_err;
}

}  // namespace fsod
