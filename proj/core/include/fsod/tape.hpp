#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "fsod/param.hpp"
#include "fsod/tensor.hpp"

namespace fsod {

class Tape;

// Handle into a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

// One bilinear sample location in feature-map coordinates.
struct SamplePoint {
  double y = 0.0;
  double x = 0.0;
};

// Pooling geometry for one ROI: per bin the half-open cell rectangle
// [y0,y1) x [x0,x1) on the feature map, row-major over k x k bins.
struct RoiBinGrid {
  int out_size = 0;
  std::vector<int> y0, y1, x0, x1;
};

// Append-only reverse-mode tape. Nodes are created by the op methods; a
// single backward() pass walks them in reverse creation order. Gradients of
// trainable leaf params accumulate into Param::grad.
class Tape {
 public:
  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ----
  Var constant(Tensor t);
  Var leaf(Param& p);
  Var detach(Var a);

  // ---- elementwise / broadcast ----
  Var add(Var a, Var b);  // same shape, or b's shape a suffix of a's
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var vmin(Var a, Var b);
  Var vmax(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }
  Var relu(Var a);
  Var sigmoid(Var a);
  Var logit(Var a);  // inverse sigmoid, input clamped to [1e-6, 1-1e-6]

  // ---- linear algebra / shape ----
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, Shape s);
  Var concat(const std::vector<Var>& parts, int axis);  // axis 0 only
  Var slice_rows(Var a, int begin, int count);
  Var gather_rows(Var a, std::vector<int> rows);
  Var select_col(Var a, int col);  // [m,n] -> [m]

  // ---- reductions / normalization ----
  Var sum(Var a);
  Var mean(Var a);
  Var softmax(Var a);  // last axis; ndim 1 or 2
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

  // ---- spatial ----
  Var im2col(Var image, int ksize, int stride, int pad);  // [C,H,W] -> [C*k*k, OH*OW]
  Var upsample2x(Var map);                                // nearest, [C,H,W] -> [C,2H,2W]
  Var bilinear_sample(Var map, const std::vector<SamplePoint>& pts);  // -> [N,C]
  Var roi_max_pool(Var map, const RoiBinGrid& grid);                  // -> [C,k,k]

  // ---- losses ----
  Var smooth_l1(Var pred, const Tensor& target, double beta);
  Var focal_bce(Var logits, const Tensor& targets01, double alpha, double gamma);

  // ---- engine ----
  void backward(Var root);
  void reset();

  const Tensor& value(Var a) const;
  // Gradient buffer of a node after backward(); zeros if the node was not
  // reached. Intended for tests.
  Tensor grad_of(Var a) const;

  size_t num_nodes() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    Tensor val;
    std::function<void(const Tensor&)> back;  // adds into parent grad buffers
    bool requires_grad = false;
    Param* param = nullptr;
  };

  int push(Tensor val, bool requires_grad, std::function<void(const Tensor&)> back,
           const char* op_name);
  Tensor* gbuf(int id);  // nullptr if the node does not require grad
  void check_same_tape(Var a, const char* op) const;
  const Node& node(Var a) const;

  std::deque<Node> nodes_;  // deque keeps value() references stable across pushes
  std::vector<Tensor> grads_;
  bool check_finite_ = false;
  bool backward_done_ = false;
};

// ---- composites (forward + backward derived from primitives) ----

// y = x * W + b with W stored [in, out], b [out].
Var linear(Tape& t, Var x, Var w, Var b);
// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
// q is [m,d], k and v are [n,d]; result [m,d].
Var sdpa(Tape& t, Var q, Var k, Var v);
// 3x3 / 1x1 convolution over a [C,H,W] map; weights [C*k*k, OC], bias [OC].
Var conv2d(Tape& t, Var image, Var w, Var b, int ksize, int stride, int pad);

}  // namespace fsod
