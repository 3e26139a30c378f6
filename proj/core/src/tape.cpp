#include "fsod/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace fsod {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// log(1 + exp(t)) without overflow.
double softplus(double t) { return std::log1p(std::exp(-std::abs(t))) + std::max(t, 0.0); }

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (size_t i = 0; i < small.size(); ++i) {
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  }
  return true;
}

}  // namespace

const Tensor& Tape::value(Var a) const { return node(a).val; }

const Tape::Node& Tape::node(Var a) const {
  if (a.tape != this || a.id < 0 || a.id >= static_cast<int>(nodes_.size())) {
    fail("tape: var does not belong to this tape");
  }
  return nodes_[a.id];
}

void Tape::check_same_tape(Var a, const char* op) const {
  if (a.tape != this || a.id < 0 || a.id >= static_cast<int>(nodes_.size())) {
    fail(std::string(op) + ": var does not belong to this tape");
  }
}

int Tape::push(Tensor val, bool requires_grad, std::function<void(const Tensor&)> back,
               const char* op_name) {
  if (check_finite_ && !val.all_finite()) {
    fail(std::string("op ") + op_name + ": non-finite values in output " + shape_str(val.shape));
  }
  nodes_.push_back(Node{std::move(val), std::move(back), requires_grad, nullptr});
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor* Tape::gbuf(int id) {
  if (!nodes_[id].requires_grad) return nullptr;
  if (grads_[id].empty()) grads_[id] = Tensor::zeros_like(nodes_[id].val);
  return &grads_[id];
}

// ---------------- leaves ----------------

Var Tape::constant(Tensor t) {
  int id = push(std::move(t), false, nullptr, "constant");
  return {this, id};
}

Var Tape::leaf(Param& p) {
  int id = push(p.t, p.trainable, nullptr, "leaf");
  nodes_[id].param = &p;
  return {this, id};
}

Var Tape::detach(Var a) {
  check_same_tape(a, "detach");
  int id = push(nodes_[a.id].val, false, nullptr, "detach");
  return {this, id};
}

// ---------------- elementwise ----------------

Var Tape::add(Var a, Var b) {
  check_same_tape(a, "add");
  check_same_tape(b, "add");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  bool same = ta.same_shape(tb);
  if (!same && !is_suffix(tb.shape, ta.shape)) {
    fail("add: shape mismatch " + shape_str(ta.shape) + " + " + shape_str(tb.shape));
  }
  Tensor out = ta;
  int bn = tb.numel();
  for (int i = 0; i < out.numel(); ++i) out.v[i] += tb.v[i % bn];
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib, bn](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i];
                  }
                  if (Tensor* gb = gbuf(ib)) {
                    for (int i = 0; i < g.numel(); ++i) gb->v[i % bn] += g.v[i];
                  }
                },
                "add");
  return {this, id};
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a, "sub");
  check_same_tape(b, "sub");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  if (!ta.same_shape(tb)) {
    fail("sub: shape mismatch " + shape_str(ta.shape) + " - " + shape_str(tb.shape));
  }
  Tensor out = ta;
  for (int i = 0; i < out.numel(); ++i) out.v[i] -= tb.v[i];
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i];
                  }
                  if (Tensor* gb = gbuf(ib)) {
                    for (int i = 0; i < g.numel(); ++i) gb->v[i] -= g.v[i];
                  }
                },
                "sub");
  return {this, id};
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a, "mul");
  check_same_tape(b, "mul");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  if (!ta.same_shape(tb)) {
    fail("mul: shape mismatch " + shape_str(ta.shape) + " * " + shape_str(tb.shape));
  }
  Tensor out = ta;
  for (int i = 0; i < out.numel(); ++i) out.v[i] *= tb.v[i];
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib](const Tensor& g) {
                  const Tensor& va = nodes_[ia].val;
                  const Tensor& vb = nodes_[ib].val;
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i] * vb.v[i];
                  }
                  if (Tensor* gb = gbuf(ib)) {
                    for (int i = 0; i < g.numel(); ++i) gb->v[i] += g.v[i] * va.v[i];
                  }
                },
                "mul");
  return {this, id};
}

Var Tape::div(Var a, Var b) {
  check_same_tape(a, "div");
  check_same_tape(b, "div");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  if (!ta.same_shape(tb)) {
    fail("div: shape mismatch " + shape_str(ta.shape) + " / " + shape_str(tb.shape));
  }
  Tensor out = ta;
  for (int i = 0; i < out.numel(); ++i) out.v[i] /= tb.v[i];
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib](const Tensor& g) {
                  const Tensor& va = nodes_[ia].val;
                  const Tensor& vb = nodes_[ib].val;
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i] / vb.v[i];
                  }
                  if (Tensor* gb = gbuf(ib)) {
                    for (int i = 0; i < g.numel(); ++i) {
                      gb->v[i] -= g.v[i] * va.v[i] / (vb.v[i] * vb.v[i]);
                    }
                  }
                },
                "div");
  return {this, id};
}

Var Tape::vmin(Var a, Var b) {
  check_same_tape(a, "vmin");
  check_same_tape(b, "vmin");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  if (!ta.same_shape(tb)) {
    fail("vmin: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  }
  Tensor out = ta;
  for (int i = 0; i < out.numel(); ++i) out.v[i] = std::min(ta.v[i], tb.v[i]);
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib](const Tensor& g) {
                  const Tensor& va = nodes_[ia].val;
                  const Tensor& vb = nodes_[ib].val;
                  Tensor* ga = gbuf(ia);
                  Tensor* gb = gbuf(ib);
                  for (int i = 0; i < g.numel(); ++i) {
                    if (va.v[i] <= vb.v[i]) {  // a wins ties
                      if (ga) ga->v[i] += g.v[i];
                    } else if (gb) {
                      gb->v[i] += g.v[i];
                    }
                  }
                },
                "vmin");
  return {this, id};
}

Var Tape::vmax(Var a, Var b) {
  check_same_tape(a, "vmax");
  check_same_tape(b, "vmax");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  if (!ta.same_shape(tb)) {
    fail("vmax: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  }
  Tensor out = ta;
  for (int i = 0; i < out.numel(); ++i) out.v[i] = std::max(ta.v[i], tb.v[i]);
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib](const Tensor& g) {
                  const Tensor& va = nodes_[ia].val;
                  const Tensor& vb = nodes_[ib].val;
                  Tensor* ga = gbuf(ia);
                  Tensor* gb = gbuf(ib);
                  for (int i = 0; i < g.numel(); ++i) {
                    if (va.v[i] >= vb.v[i]) {
                      if (ga) ga->v[i] += g.v[i];
                    } else if (gb) {
                      gb->v[i] += g.v[i];
                    }
                  }
                },
                "vmax");
  return {this, id};
}

Var Tape::scale(Var a, double c) {
  check_same_tape(a, "scale");
  Tensor out = nodes_[a.id].val;
  for (double& x : out.v) x *= c;
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, c](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i] * c;
                  }
                },
                "scale");
  return {this, id};
}

Var Tape::add_scalar(Var a, double c) {
  check_same_tape(a, "add_scalar");
  Tensor out = nodes_[a.id].val;
  for (double& x : out.v) x += c;
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i];
                  }
                },
                "add_scalar");
  return {this, id};
}

Var Tape::relu(Var a) {
  check_same_tape(a, "relu");
  Tensor out = nodes_[a.id].val;
  for (double& x : out.v) x = std::max(x, 0.0);
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    const Tensor& va = nodes_[ia].val;
                    for (int i = 0; i < g.numel(); ++i) {
                      if (va.v[i] > 0.0) ga->v[i] += g.v[i];
                    }
                  }
                },
                "relu");
  return {this, id};
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a, "sigmoid");
  Tensor out = nodes_[a.id].val;
  for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  int ia = a.id, self = static_cast<int>(nodes_.size());
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, self](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    const Tensor& s = nodes_[self].val;
                    for (int i = 0; i < g.numel(); ++i) {
                      ga->v[i] += g.v[i] * s.v[i] * (1.0 - s.v[i]);
                    }
                  }
                },
                "sigmoid");
  return {this, id};
}

Var Tape::logit(Var a) {
  check_same_tape(a, "logit");
  constexpr double kLo = 1e-6, kHi = 1.0 - 1e-6;
  Tensor out = nodes_[a.id].val;
  for (double& x : out.v) {
    double p = std::clamp(x, kLo, kHi);
    x = std::log(p / (1.0 - p));
  }
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    const Tensor& va = nodes_[ia].val;
                    for (int i = 0; i < g.numel(); ++i) {
                      double p = va.v[i];
                      if (p > kLo && p < kHi) ga->v[i] += g.v[i] / (p * (1.0 - p));
                    }
                  }
                },
                "logit");
  return {this, id};
}

// ---------------- linear algebra / shape ----------------

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a, "matmul");
  check_same_tape(b, "matmul");
  const Tensor& ta = nodes_[a.id].val;
  const Tensor& tb = nodes_[b.id].val;
  if (ta.ndim() != 2 || tb.ndim() != 2 || ta.shape[1] != tb.shape[0]) {
    fail("matmul: shape mismatch " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
  }
  int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  Tensor out({m, n});
  {
    CMapM A(ta.v.data(), m, k), B(tb.v.data(), k, n);
    MapM C(out.v.data(), m, n);
    C.noalias() = A * B;
  }
  bool req = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  int ia = a.id, ib = b.id;
  int id = push(std::move(out), req,
                [this, ia, ib, m, k, n](const Tensor& g) {
                  CMapM G(g.v.data(), m, n);
                  const Tensor& va = nodes_[ia].val;
                  const Tensor& vb = nodes_[ib].val;
                  if (Tensor* ga = gbuf(ia)) {
                    CMapM B(vb.v.data(), k, n);
                    MapM GA(ga->v.data(), m, k);
                    GA.noalias() += G * B.transpose();
                  }
                  if (Tensor* gb = gbuf(ib)) {
                    CMapM A(va.v.data(), m, k);
                    MapM GB(gb->v.data(), k, n);
                    GB.noalias() += A.transpose() * G;
                  }
                },
                "matmul");
  return {this, id};
}

Var Tape::transpose(Var a) {
  check_same_tape(a, "transpose");
  const Tensor& ta = nodes_[a.id].val;
  if (ta.ndim() != 2) fail("transpose: expected 2D, got " + shape_str(ta.shape));
  int m = ta.shape[0], n = ta.shape[1];
  Tensor out({n, m});
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) out.at2(c, r) = ta.at2(r, c);
  }
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, m, n](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int r = 0; r < m; ++r) {
                      for (int c = 0; c < n; ++c) ga->at2(r, c) += g.at2(c, r);
                    }
                  }
                },
                "transpose");
  return {this, id};
}

Var Tape::reshape(Var a, Shape s) {
  check_same_tape(a, "reshape");
  const Tensor& ta = nodes_[a.id].val;
  if (numel_of(s) != ta.numel()) {
    fail("reshape: cannot view " + shape_str(ta.shape) + " as " + shape_str(s));
  }
  Tensor out(s, ta.v);
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i];
                  }
                },
                "reshape");
  return {this, id};
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
  if (axis != 0) fail("concat: only axis 0 supported");
  if (parts.empty()) fail("concat: no operands");
  for (Var p : parts) check_same_tape(p, "concat");
  const Tensor& first = nodes_[parts[0].id].val;
  Shape tail(first.shape.begin() + 1, first.shape.end());
  int total = 0;
  for (Var p : parts) {
    const Tensor& tp = nodes_[p.id].val;
    Shape t(tp.shape.begin() + 1, tp.shape.end());
    if (tp.ndim() != first.ndim() || t != tail) {
      fail("concat: incompatible shapes " + shape_str(first.shape) + " vs " +
           shape_str(tp.shape));
    }
    total += tp.shape[0];
  }
  Shape out_shape = first.shape;
  out_shape[0] = total;
  Tensor out(out_shape);
  size_t off = 0;
  bool req = false;
  std::vector<int> ids;
  std::vector<int> sizes;
  ids.reserve(parts.size());
  for (Var p : parts) {
    const Tensor& tp = nodes_[p.id].val;
    std::copy(tp.v.begin(), tp.v.end(), out.v.begin() + off);
    off += tp.v.size();
    req = req || nodes_[p.id].requires_grad;
    ids.push_back(p.id);
    sizes.push_back(tp.numel());
  }
  int id = push(std::move(out), req,
                [this, ids, sizes](const Tensor& g) {
                  size_t off = 0;
                  for (size_t j = 0; j < ids.size(); ++j) {
                    if (Tensor* gp = gbuf(ids[j])) {
                      for (int i = 0; i < sizes[j]; ++i) gp->v[i] += g.v[off + i];
                    }
                    off += sizes[j];
                  }
                },
                "concat");
  return {this, id};
}

Var Tape::slice_rows(Var a, int begin, int count) {
  check_same_tape(a, "slice_rows");
  const Tensor& ta = nodes_[a.id].val;
  if (ta.ndim() != 2) fail("slice_rows: expected 2D, got " + shape_str(ta.shape));
  if (begin < 0 || count < 1 || begin + count > ta.shape[0]) {
    fail("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
         ") out of " + shape_str(ta.shape));
  }
  int n = ta.shape[1];
  Tensor out({count, n});
  std::copy(ta.v.begin() + static_cast<size_t>(begin) * n,
            ta.v.begin() + static_cast<size_t>(begin + count) * n, out.v.begin());
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, begin, n](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    size_t base = static_cast<size_t>(begin) * n;
                    for (int i = 0; i < g.numel(); ++i) ga->v[base + i] += g.v[i];
                  }
                },
                "slice_rows");
  return {this, id};
}

Var Tape::gather_rows(Var a, std::vector<int> rows) {
  check_same_tape(a, "gather_rows");
  const Tensor& ta = nodes_[a.id].val;
  if (ta.ndim() != 2) fail("gather_rows: expected 2D, got " + shape_str(ta.shape));
  for (int r : rows) {
    if (r < 0 || r >= ta.shape[0]) {
      fail("gather_rows: row " + std::to_string(r) + " out of " + shape_str(ta.shape));
    }
  }
  int n = ta.shape[1];
  Tensor out({static_cast<int>(rows.size()), n});
  for (size_t j = 0; j < rows.size(); ++j) {
    std::copy(ta.v.begin() + static_cast<size_t>(rows[j]) * n,
              ta.v.begin() + static_cast<size_t>(rows[j] + 1) * n, out.v.begin() + j * n);
  }
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, rows, n](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (size_t j = 0; j < rows.size(); ++j) {
                      size_t src = j * n, dst = static_cast<size_t>(rows[j]) * n;
                      for (int i = 0; i < n; ++i) ga->v[dst + i] += g.v[src + i];
                    }
                  }
                },
                "gather_rows");
  return {this, id};
}

Var Tape::select_col(Var a, int col) {
  check_same_tape(a, "select_col");
  const Tensor& ta = nodes_[a.id].val;
  if (ta.ndim() != 2 || col < 0 || col >= ta.shape[1]) {
    fail("select_col: column " + std::to_string(col) + " of " + shape_str(ta.shape));
  }
  int m = ta.shape[0], n = ta.shape[1];
  Tensor out({m});
  for (int r = 0; r < m; ++r) out.v[r] = ta.v[static_cast<size_t>(r) * n + col];
  int ia = a.id;
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, col, n](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (int r = 0; r < g.numel(); ++r) {
                      ga->v[static_cast<size_t>(r) * n + col] += g.v[r];
                    }
                  }
                },
                "select_col");
  return {this, id};
}

// ---------------- reductions / normalization ----------------

Var Tape::sum(Var a) {
  check_same_tape(a, "sum");
  const Tensor& ta = nodes_[a.id].val;
  double s = 0.0;
  for (double x : ta.v) s += x;
  int ia = a.id;
  int id = push(Tensor::scalar(s), nodes_[a.id].requires_grad,
                [this, ia](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    for (double& x : ga->v) x += g.v[0];
                  }
                },
                "sum");
  return {this, id};
}

Var Tape::mean(Var a) {
  check_same_tape(a, "mean");
  const Tensor& ta = nodes_[a.id].val;
  double s = 0.0;
  for (double x : ta.v) s += x;
  int n = ta.numel();
  int ia = a.id;
  int id = push(Tensor::scalar(s / n), nodes_[a.id].requires_grad,
                [this, ia, n](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    double gi = g.v[0] / n;
                    for (double& x : ga->v) x += gi;
                  }
                },
                "mean");
  return {this, id};
}

Var Tape::softmax(Var a) {
  check_same_tape(a, "softmax");
  const Tensor& ta = nodes_[a.id].val;
  if (ta.ndim() < 1 || ta.ndim() > 2) fail("softmax: expected 1D or 2D, got " + shape_str(ta.shape));
  int n = ta.shape.back();
  int rows = ta.numel() / n;
  Tensor out = ta;
  for (int r = 0; r < rows; ++r) {
    double* p = out.v.data() + static_cast<size_t>(r) * n;
    double mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      p[i] = std::exp(p[i] - mx);
      z += p[i];
    }
    for (int i = 0; i < n; ++i) p[i] /= z;
  }
  int ia = a.id, self = static_cast<int>(nodes_.size());
  int id = push(std::move(out), nodes_[a.id].requires_grad,
                [this, ia, self, rows, n](const Tensor& g) {
                  if (Tensor* ga = gbuf(ia)) {
                    const Tensor& y = nodes_[self].val;
                    for (int r = 0; r < rows; ++r) {
                      size_t base = static_cast<size_t>(r) * n;
                      double dot = 0.0;
                      for (int i = 0; i < n; ++i) dot += g.v[base + i] * y.v[base + i];
                      for (int i = 0; i < n; ++i) {
                        ga->v[base + i] += y.v[base + i] * (g.v[base + i] - dot);
                      }
                    }
                  }
                },
                "softmax");
  return {this, id};
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  check_same_tape(x, "layer_norm");
  check_same_tape(gain, "layer_norm");
  check_same_tape(bias, "layer_norm");
  const Tensor& tx = nodes_[x.id].val;
  const Tensor& tg = nodes_[gain.id].val;
  const Tensor& tb = nodes_[bias.id].val;
  if (tx.ndim() < 1 || tx.ndim() > 2) {
    fail("layer_norm: expected 1D or 2D input, got " + shape_str(tx.shape));
  }
  int n = tx.shape.back();
  if (tg.numel() != n || tb.numel() != n) {
    fail("layer_norm: gain/bias " + shape_str(tg.shape) + "/" + shape_str(tb.shape) +
         " do not match last axis of " + shape_str(tx.shape));
  }
  int rows = tx.numel() / n;
  Tensor out = tx;
  // Saved for backward.
  auto xhat = std::make_shared<std::vector<double>>(tx.v.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (int r = 0; r < rows; ++r) {
    size_t base = static_cast<size_t>(r) * n;
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += tx.v[base + i];
    mu /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
      double d = tx.v[base + i] - mu;
      var += d * d;
    }
    var /= n;
    double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (int i = 0; i < n; ++i) {
      double xh = (tx.v[base + i] - mu) * istd;
      (*xhat)[base + i] = xh;
      out.v[base + i] = tg.v[i] * xh + tb.v[i];
    }
  }
  bool req = nodes_[x.id].requires_grad || nodes_[gain.id].requires_grad ||
             nodes_[bias.id].requires_grad;
  int ix = x.id, ig = gain.id, ib = bias.id;
  int id = push(std::move(out), req,
                [this, ix, ig, ib, rows, n, xhat, inv_std](const Tensor& g) {
                  const Tensor& tg = nodes_[ig].val;
                  Tensor* gx = gbuf(ix);
                  Tensor* gg = gbuf(ig);
                  Tensor* gb = gbuf(ib);
                  for (int r = 0; r < rows; ++r) {
                    size_t base = static_cast<size_t>(r) * n;
                    if (gg || gb) {
                      for (int i = 0; i < n; ++i) {
                        if (gb) gb->v[i] += g.v[base + i];
                        if (gg) gg->v[i] += g.v[base + i] * (*xhat)[base + i];
                      }
                    }
                    if (gx) {
                      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                      for (int i = 0; i < n; ++i) {
                        double dxh = g.v[base + i] * tg.v[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * (*xhat)[base + i];
                      }
                      double istd = (*inv_std)[r];
                      for (int i = 0; i < n; ++i) {
                        double dxh = g.v[base + i] * tg.v[i];
                        gx->v[base + i] +=
                            istd * (dxh - sum_dxh / n - (*xhat)[base + i] * sum_dxh_xh / n);
                      }
                    }
                  }
                },
                "layer_norm");
  return {this, id};
}

// ---------------- spatial ----------------

Var Tape::im2col(Var image, int ksize, int stride, int pad) {
  check_same_tape(image, "im2col");
  const Tensor& t = nodes_[image.id].val;
  if (t.ndim() != 3) fail("im2col: expected [C,H,W], got " + shape_str(t.shape));
  int c = t.shape[0], h = t.shape[1], w = t.shape[2];
  int oh = (h + 2 * pad - ksize) / stride + 1;
  int ow = (w + 2 * pad - ksize) / stride + 1;
  if (oh < 1 || ow < 1) fail("im2col: kernel does not fit " + shape_str(t.shape));
  int rows = c * ksize * ksize, cols = oh * ow;
  auto srcidx = std::make_shared<std::vector<int>>(static_cast<size_t>(rows) * cols, -1);
  Tensor out({rows, cols});
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < ksize; ++ky) {
      for (int kx = 0; kx < ksize; ++kx) {
        int row = (ch * ksize + ky) * ksize + kx;
        for (int oy = 0; oy < oh; ++oy) {
          int sy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int sx = ox * stride + kx - pad;
            size_t dst = static_cast<size_t>(row) * cols + oy * ow + ox;
            if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
              int src = (ch * h + sy) * w + sx;
              (*srcidx)[dst] = src;
              out.v[dst] = t.v[src];
            }
          }
        }
      }
    }
  }
  int ii = image.id;
  int id = push(std::move(out), nodes_[image.id].requires_grad,
                [this, ii, srcidx](const Tensor& g) {
                  if (Tensor* gi = gbuf(ii)) {
                    for (size_t i = 0; i < srcidx->size(); ++i) {
                      int s = (*srcidx)[i];
                      if (s >= 0) gi->v[s] += g.v[i];
                    }
                  }
                },
                "im2col");
  return {this, id};
}

Var Tape::upsample2x(Var map) {
  check_same_tape(map, "upsample2x");
  const Tensor& t = nodes_[map.id].val;
  if (t.ndim() != 3) fail("upsample2x: expected [C,H,W], got " + shape_str(t.shape));
  int c = t.shape[0], h = t.shape[1], w = t.shape[2];
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < 2 * w; ++x) {
        out.at3(ch, y, x) = t.at3(ch, y / 2, x / 2);
      }
    }
  }
  int im = map.id;
  int id = push(std::move(out), nodes_[map.id].requires_grad,
                [this, im, c, h, w](const Tensor& g) {
                  if (Tensor* gm = gbuf(im)) {
                    for (int ch = 0; ch < c; ++ch) {
                      for (int y = 0; y < 2 * h; ++y) {
                        for (int x = 0; x < 2 * w; ++x) {
                          gm->at3(ch, y / 2, x / 2) += g.at3(ch, y, x);
                        }
                      }
                    }
                  }
                },
                "upsample2x");
  return {this, id};
}

Var Tape::bilinear_sample(Var map, const std::vector<SamplePoint>& pts) {
  check_same_tape(map, "bilinear_sample");
  const Tensor& t = nodes_[map.id].val;
  if (t.ndim() != 3) fail("bilinear_sample: expected [C,H,W], got " + shape_str(t.shape));
  int c = t.shape[0], h = t.shape[1], w = t.shape[2];
  int n = static_cast<int>(pts.size());
  if (n == 0) fail("bilinear_sample: no sample points");
  // Cell (0,0) has its center at feature coordinate (0.5, 0.5).
  struct Corner {
    int y0, x0, y1, x1;
    double w00, w01, w10, w11;
  };
  auto corners = std::make_shared<std::vector<Corner>>(n);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    double ys = std::clamp(pts[i].y - 0.5, 0.0, static_cast<double>(h - 1));
    double xs = std::clamp(pts[i].x - 0.5, 0.0, static_cast<double>(w - 1));
    int y0 = std::min(static_cast<int>(ys), h - 1);
    int x0 = std::min(static_cast<int>(xs), w - 1);
    int y1 = std::min(y0 + 1, h - 1);
    int x1 = std::min(x0 + 1, w - 1);
    double fy = ys - y0, fx = xs - x0;
    Corner cr{y0, x0, y1, x1, (1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    (*corners)[i] = cr;
    for (int ch = 0; ch < c; ++ch) {
      out.at2(i, ch) = cr.w00 * t.at3(ch, y0, x0) + cr.w01 * t.at3(ch, y0, x1) +
                       cr.w10 * t.at3(ch, y1, x0) + cr.w11 * t.at3(ch, y1, x1);
    }
  }
  int im = map.id;
  int id = push(std::move(out), nodes_[map.id].requires_grad,
                [this, im, corners, c](const Tensor& g) {
                  if (Tensor* gm = gbuf(im)) {
                    for (size_t i = 0; i < corners->size(); ++i) {
                      const Corner& cr = (*corners)[i];
                      for (int ch = 0; ch < c; ++ch) {
                        double gi = g.at2(static_cast<int>(i), ch);
                        gm->at3(ch, cr.y0, cr.x0) += gi * cr.w00;
                        gm->at3(ch, cr.y0, cr.x1) += gi * cr.w01;
                        gm->at3(ch, cr.y1, cr.x0) += gi * cr.w10;
                        gm->at3(ch, cr.y1, cr.x1) += gi * cr.w11;
                      }
                    }
                  }
                },
                "bilinear_sample");
  return {this, id};
}

Var Tape::roi_max_pool(Var map, const RoiBinGrid& grid) {
  check_same_tape(map, "roi_max_pool");
  const Tensor& t = nodes_[map.id].val;
  if (t.ndim() != 3) fail("roi_max_pool: expected [C,H,W], got " + shape_str(t.shape));
  int c = t.shape[0], h = t.shape[1], w = t.shape[2];
  int k = grid.out_size;
  int bins = k * k;
  if (static_cast<int>(grid.y0.size()) != bins) fail("roi_max_pool: bad bin grid");
  for (int b = 0; b < bins; ++b) {
    if (grid.y0[b] < 0 || grid.y1[b] > h || grid.x0[b] < 0 || grid.x1[b] > w ||
        grid.y0[b] >= grid.y1[b] || grid.x0[b] >= grid.x1[b]) {
      fail("roi_max_pool: bin rect out of map bounds");
    }
  }
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(c) * bins);
  Tensor out({c, k, k});
  for (int ch = 0; ch < c; ++ch) {
    for (int b = 0; b < bins; ++b) {
      double best = -std::numeric_limits<double>::infinity();
      int best_idx = -1;
      for (int y = grid.y0[b]; y < grid.y1[b]; ++y) {
        for (int x = grid.x0[b]; x < grid.x1[b]; ++x) {
          int idx = (ch * h + y) * w + x;
          if (t.v[idx] > best) {
            best = t.v[idx];
            best_idx = idx;
          }
        }
      }
      out.v[static_cast<size_t>(ch) * bins + b] = best;
      (*argmax)[static_cast<size_t>(ch) * bins + b] = best_idx;
    }
  }
  int im = map.id;
  int id = push(std::move(out), nodes_[map.id].requires_grad,
                [this, im, argmax](const Tensor& g) {
                  if (Tensor* gm = gbuf(im)) {
                    for (size_t i = 0; i < argmax->size(); ++i) {
                      gm->v[(*argmax)[i]] += g.v[i];
                    }
                  }
                },
                "roi_max_pool");
  return {this, id};
}

// ---------------- losses ----------------

Var Tape::smooth_l1(Var pred, const Tensor& target, double beta) {
  check_same_tape(pred, "smooth_l1");
  const Tensor& tp = nodes_[pred.id].val;
  if (!tp.same_shape(target)) {
    fail("smooth_l1: shape mismatch " + shape_str(tp.shape) + " vs " + shape_str(target.shape));
  }
  if (beta <= 0.0) fail("smooth_l1: beta must be positive");
  Tensor out = tp;
  for (int i = 0; i < out.numel(); ++i) {
    double d = tp.v[i] - target.v[i];
    double ad = std::abs(d);
    out.v[i] = ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  auto tgt = std::make_shared<Tensor>(target);
  int ip = pred.id;
  int id = push(std::move(out), nodes_[pred.id].requires_grad,
                [this, ip, tgt, beta](const Tensor& g) {
                  if (Tensor* gp = gbuf(ip)) {
                    const Tensor& vp = nodes_[ip].val;
                    for (int i = 0; i < g.numel(); ++i) {
                      double d = vp.v[i] - tgt->v[i];
                      gp->v[i] += g.v[i] * std::clamp(d / beta, -1.0, 1.0);
                    }
                  }
                },
                "smooth_l1");
  return {this, id};
}

Var Tape::focal_bce(Var logits, const Tensor& targets01, double alpha, double gamma) {
  check_same_tape(logits, "focal_bce");
  const Tensor& tx = nodes_[logits.id].val;
  if (!tx.same_shape(targets01)) {
    fail("focal_bce: shape mismatch " + shape_str(tx.shape) + " vs " +
         shape_str(targets01.shape));
  }
  Tensor out = tx;
  for (int i = 0; i < out.numel(); ++i) {
    double x = tx.v[i];
    double log_p = -softplus(-x);
    double log_1mp = -softplus(x);
    double p = 1.0 / (1.0 + std::exp(-x));
    if (targets01.v[i] > 0.5) {
      out.v[i] = -alpha * std::pow(1.0 - p, gamma) * log_p;
    } else {
      out.v[i] = -(1.0 - alpha) * std::pow(p, gamma) * log_1mp;
    }
  }
  auto tgt = std::make_shared<Tensor>(targets01);
  int il = logits.id;
  int id = push(std::move(out), nodes_[logits.id].requires_grad,
                [this, il, tgt, alpha, gamma](const Tensor& g) {
                  if (Tensor* gl = gbuf(il)) {
                    const Tensor& vx = nodes_[il].val;
                    for (int i = 0; i < g.numel(); ++i) {
                      double x = vx.v[i];
                      double p = 1.0 / (1.0 + std::exp(-x));
                      double dldx;
                      if (tgt->v[i] > 0.5) {
                        double log_p = -softplus(-x);
                        dldx = alpha * gamma * p * std::pow(1.0 - p, gamma) * log_p -
                               alpha * std::pow(1.0 - p, gamma + 1.0);
                      } else {
                        double log_1mp = -softplus(x);
                        dldx = (1.0 - alpha) * std::pow(p, gamma + 1.0) -
                               (1.0 - alpha) * gamma * (1.0 - p) * std::pow(p, gamma) * log_1mp;
                      }
                      gl->v[i] += g.v[i] * dldx;
                    }
                  }
                },
                "focal_bce");
  return {this, id};
}

// ---------------- engine ----------------

void Tape::backward(Var root) {
  check_same_tape(root, "backward");
  const Tensor& rv = nodes_[root.id].val;
  if (rv.numel() != 1) {
    fail("backward: root must be scalar, got " + shape_str(rv.shape));
  }
  if (backward_done_) fail("backward: called twice without reset");
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor());
  if (!nodes_[root.id].requires_grad) return;  // nothing trainable reachable
  grads_[root.id] = Tensor::full(rv.shape, 1.0);
  for (int i = root.id; i >= 0; --i) {
    Node& nd = nodes_[i];
    if (!nd.requires_grad || grads_[i].empty()) continue;
    if (nd.back) nd.back(grads_[i]);
    if (nd.param && nd.param->trainable) {
      if (!nd.param->grad.has_value()) nd.param->grad = Tensor::zeros_like(nd.param->t);
      Tensor& pg = *nd.param->grad;
      for (int j = 0; j < pg.numel(); ++j) pg.v[j] += grads_[i].v[j];
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  backward_done_ = false;
}

Tensor Tape::grad_of(Var a) const {
  const Node& nd = node(a);
  if (a.id < static_cast<int>(grads_.size()) && !grads_[a.id].empty()) return grads_[a.id];
  return Tensor::zeros_like(nd.val);
}

// ---------------- composites ----------------

Var linear(Tape& t, Var x, Var w, Var b) { return t.add(t.matmul(x, w), b); }

Var sdpa(Tape& t, Var q, Var k, Var v) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  if (qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2 || qv.shape[1] != kv.shape[1] ||
      kv.shape[0] != vv.shape[0]) {
    fail("sdpa: shape mismatch q" + shape_str(qv.shape) + " k" + shape_str(kv.shape) + " v" +
         shape_str(vv.shape));
  }
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qv.shape[1]));
  Var scores = t.scale(t.matmul(q, t.transpose(k)), inv_sqrt_d);
  return t.matmul(t.softmax(scores), v);
}

Var conv2d(Tape& t, Var image, Var w, Var b, int ksize, int stride, int pad) {
  const Tensor& im = t.value(image);
  const Tensor& wv = t.value(w);
  if (im.ndim() != 3) fail("conv2d: expected [C,H,W], got " + shape_str(im.shape));
  if (wv.ndim() != 2 || wv.shape[0] != im.shape[0] * ksize * ksize) {
    fail("conv2d: weight " + shape_str(wv.shape) + " does not match input channels " +
         std::to_string(im.shape[0]) + " and kernel " + std::to_string(ksize));
  }
  int oh = (im.shape[1] + 2 * pad - ksize) / stride + 1;
  int ow = (im.shape[2] + 2 * pad - ksize) / stride + 1;
  int oc = wv.shape[1];
  Var cols = t.im2col(image, ksize, stride, pad);     // [C*k*k, OH*OW]
  Var y = linear(t, t.transpose(cols), w, b);          // [OH*OW, OC]
  return t.reshape(t.transpose(y), {oc, oh, ow});
}

}  // namespace fsod
