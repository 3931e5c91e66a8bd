#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "motok/common.hpp"

// Dense f32 tensors with reverse-mode differentiation. Graphs are built per
// step (define-by-run); node ids follow creation order, so walking ids in
// reverse is a valid topological order for the backward pass. Scalar losses
// accumulate in f64.

namespace motok::ad {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::vector<int64_t> row_major_strides(const Shape& s);
std::string shape_string(const Shape& s);

struct Node {
  Shape shape;
  Eigen::ArrayXf value;
  Eigen::ArrayXf grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;
  uint64_t id = 0;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Eigen::ArrayXf::Zero(value.size());
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, float v);
  static Tensor scalar(float v);
  static Tensor constant(const Shape& s, Eigen::ArrayXf data);
  /// Leaf with requires_grad set; the unit all parameters are stored as.
  static Tensor param(const Shape& s, Eigen::ArrayXf data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->value.size(); }
  int64_t dim(int i) const { return node_->shape[i]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::ArrayXf& value() { return node_->value; }
  const Eigen::ArrayXf& value() const { return node_->value; }
  Eigen::ArrayXf& grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  float item() const {
    if (node_->value.size() != 1) fail_domain("ShapeMismatch", "item() needs a scalar");
    return node_->value[0];
  }

  std::shared_ptr<Node>& node() { return node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

std::shared_ptr<Node> make_node(Shape shape, bool requires_grad,
                                std::vector<std::shared_ptr<Node>> parents);

/// Reverse-mode sweep from a scalar loss (seeds d(loss)/d(loss)=1).
void backward(const Tensor& loss);

// elementwise; rhs may share lhs's shape, be a scalar, or match a suffix of
// lhs's shape (suffix operand is tiled over the leading axes)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, float s);
Tensor add_const(const Tensor& a, float c);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor square(const Tensor& a);

/// a: [..., K] (leading axes flattened to rows), b: [K, N] -> [..., N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched: a [G, M, K], b [G, K, N] (or [G, N, K] with trans_b) -> [G, M, N].
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);

Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor cumsum(const Tensor& a, int axis);
Tensor upsample_nearest(const Tensor& a, int factor);  // [B,C,T] -> [B,C,factor*T]

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);
/// Scaled dot-product attention over q [G,Tq,Dh] and k,v [G,Tk,Dh] with a
/// causal mask: query i sees keys j ≤ i + (Tk − Tq). The offset form lets a
/// decode session attend from freshly appended positions to a longer cache.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v);
/// Multi-head causal self-attention on x [B,T,D]. wqkv [D,3D] packs the
/// query/key/value projections, wo [D,D] the output projection.
Tensor causal_attention(const Tensor& x, const Tensor& wqkv, const Tensor& bqkv,
                        const Tensor& wo, const Tensor& bo, int heads);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
/// ids index rows of table [V, D]; output [ids.size(), D].
Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids);
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);

/// Mean of per-position cross entropy weighted by `weights` (sums in f64).
/// Optionally reports the unweighted per-position losses.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                     const std::vector<float>& weights,
                     std::vector<float>* per_position = nullptr);
Tensor smooth_l1(const Tensor& a, const Tensor& b, float beta = 1.0f);
Tensor mse(const Tensor& a, const Tensor& b);

/// Forward takes `values`; backward hands the gradient to src unchanged.
Tensor straight_through(const Eigen::ArrayXf& values, const Tensor& src);
Tensor stop_gradient(const Tensor& a);

int64_t conv_out_len(int64_t t, int64_t kernel, int stride, int padding);

}  // namespace motok::ad
