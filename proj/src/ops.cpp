#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "motok/tensor.hpp"

namespace motok::ad {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

uint64_t& node_counter() {
  static uint64_t counter = 0;
  return counter;
}

[[noreturn]] void shape_fail(const std::string& what) {
  fail_domain("ShapeMismatch", what);
}

bool any_requires_grad(const std::vector<std::shared_ptr<Node>>& parents) {
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

// rhs broadcast: exact shape, single scalar, or a suffix of lhs's shape
enum class Bc { kSame, kScalar, kSuffix };

Bc classify_broadcast(const Shape& a, const Shape& b) {
  if (a == b) return Bc::kSame;
  if (numel(b) == 1) return Bc::kScalar;
  if (b.size() <= a.size()) {
    bool suffix = true;
    for (size_t i = 0; i < b.size(); ++i)
      if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) suffix = false;
    if (suffix) return Bc::kSuffix;
  }
  shape_fail("cannot broadcast " + shape_string(b) + " against " + shape_string(a));
}

Eigen::ArrayXf tile_to(const Eigen::ArrayXf& b, int64_t n) {
  if (b.size() == n) return b;
  Eigen::ArrayXf out(n);
  if (b.size() == 1) {
    out.setConstant(b[0]);
    return out;
  }
  const int64_t nb = b.size();
  for (int64_t r = 0; r < n / nb; ++r) out.segment(r * nb, nb) = b;
  return out;
}

// sum a full-size gradient back down to the broadcast operand's shape
void reduce_into(Eigen::ArrayXf& dst, const Eigen::ArrayXf& full) {
  const int64_t nb = dst.size();
  if (full.size() == nb) {
    dst += full;
    return;
  }
  if (nb == 1) {
    dst[0] += static_cast<float>(full.cast<double>().sum());
    return;
  }
  for (int64_t r = 0; r < full.size() / nb; ++r) dst += full.segment(r * nb, nb);
}

struct Split {
  int64_t outer, axis, inner;
};

Split split_at(const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) shape_fail("axis out of range");
  Split sp{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

template <typename FwdFn, typename BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  classify_broadcast(a.shape(), b.shape());
  auto out = make_node(a.shape(), false, {a.node(), b.node()});
  out->requires_grad = any_requires_grad(out->parents);
  Eigen::ArrayXf bt = tile_to(b.value(), a.numel());
  out->value = fwd(a.value(), bt);
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backward_fn = [raw, an, bn, bt = std::move(bt), bwd]() {
      Eigen::ArrayXf da, db;
      bwd(raw->grad, an->value, bt, da, db);
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad += da;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        reduce_into(bn->grad, db);
      }
    };
  }
  return Tensor(out);
}

}  // namespace

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

std::shared_ptr<Node> make_node(Shape shape, bool requires_grad,
                                std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  n->parents = std::move(parents);
  n->id = ++node_counter();
  return n;
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = make_node(s, requires_grad, {});
  n->value = Eigen::ArrayXf::Zero(motok::ad::numel(s));
  return Tensor(n);
}

Tensor Tensor::full(const Shape& s, float v) {
  auto n = make_node(s, false, {});
  n->value = Eigen::ArrayXf::Constant(motok::ad::numel(s), v);
  return Tensor(n);
}

Tensor Tensor::scalar(float v) { return full({1}, v); }

Tensor Tensor::constant(const Shape& s, Eigen::ArrayXf data) {
  if (data.size() != motok::ad::numel(s)) shape_fail("constant data does not match shape");
  auto n = make_node(s, false, {});
  n->value = std::move(data);
  return Tensor(n);
}

Tensor Tensor::param(const Shape& s, Eigen::ArrayXf data) {
  if (data.size() != motok::ad::numel(s)) shape_fail("param data does not match shape");
  auto n = make_node(s, true, {});
  n->value = std::move(data);
  return Tensor(n);
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) shape_fail("backward needs a scalar loss");
  if (!std::isfinite(loss.item()))
    fail(ErrorKind::kNumeric, "NonFiniteLoss", "loss is not finite");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0f;
  for (Node* n : order) {
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn();
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](const Eigen::ArrayXf& x, const Eigen::ArrayXf& y) { return (x + y).eval(); },
      [](const Eigen::ArrayXf& g, const Eigen::ArrayXf&, const Eigen::ArrayXf&,
         Eigen::ArrayXf& da, Eigen::ArrayXf& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](const Eigen::ArrayXf& x, const Eigen::ArrayXf& y) { return (x - y).eval(); },
      [](const Eigen::ArrayXf& g, const Eigen::ArrayXf&, const Eigen::ArrayXf&,
         Eigen::ArrayXf& da, Eigen::ArrayXf& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](const Eigen::ArrayXf& x, const Eigen::ArrayXf& y) { return (x * y).eval(); },
      [](const Eigen::ArrayXf& g, const Eigen::ArrayXf& x, const Eigen::ArrayXf& y,
         Eigen::ArrayXf& da, Eigen::ArrayXf& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](const Eigen::ArrayXf& x, const Eigen::ArrayXf& y) { return (x / y).eval(); },
      [](const Eigen::ArrayXf& g, const Eigen::ArrayXf& x, const Eigen::ArrayXf& y,
         Eigen::ArrayXf& da, Eigen::ArrayXf& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

Tensor scale(const Tensor& a, float s) {
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  out->value = a.value() * s;
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, s]() {
      an->ensure_grad();
      an->grad += raw->grad * s;
    };
  }
  return Tensor(out);
}

Tensor add_const(const Tensor& a, float c) {
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  out->value = a.value() + c;
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an]() {
      an->ensure_grad();
      an->grad += raw->grad;
    };
  }
  return Tensor(out);
}

Tensor relu(const Tensor& a) {
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  out->value = a.value().max(0.0f);
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an]() {
      an->ensure_grad();
      an->grad += raw->grad * (an->value > 0.0f).cast<float>();
    };
  }
  return Tensor(out);
}

Tensor gelu(const Tensor& a) {
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  const float inv_sqrt2 = 0.70710678f;
  Eigen::ArrayXf cdf =
      a.value().unaryExpr([inv_sqrt2](float x) { return 0.5f * (1.0f + std::erf(x * inv_sqrt2)); });
  out->value = a.value() * cdf;
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, inv_sqrt2]() {
      an->ensure_grad();
      const Eigen::ArrayXf& x = an->value;
      Eigen::ArrayXf phi = x.unaryExpr(
          [inv_sqrt2](float v) { return 0.5f * (1.0f + std::erf(v * inv_sqrt2)); });
      Eigen::ArrayXf pdf = (-0.5f * x * x).exp() * 0.3989423f;
      an->grad += raw->grad * (phi + x * pdf);
    };
  }
  return Tensor(out);
}

Tensor sqrt_op(const Tensor& a) {
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  out->value = a.value().sqrt();
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an]() {
      an->ensure_grad();
      an->grad += raw->grad * 0.5f / raw->value.max(1e-12f);
    };
  }
  return Tensor(out);
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2) shape_fail("matmul rhs must be 2-D");
  const int64_t k = b.dim(0), n = b.dim(1);
  if (a.rank() < 1 || a.shape().back() != k)
    shape_fail("matmul inner dims disagree: " + shape_string(a.shape()) + " x " +
               shape_string(b.shape()));
  const int64_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  auto out = make_node(out_shape, false, {a.node(), b.node()});
  out->requires_grad = any_requires_grad(out->parents);
  out->value.resize(m * n);
  CMapM am(a.value().data(), m, k), bm(b.value().data(), k, n);
  MapM(out->value.data(), m, n).noalias() = am * bm;
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backward_fn = [raw, an, bn, m, k, n]() {
      CMapM g(raw->grad.data(), m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        CMapM bm(bn->value.data(), k, n);
        MapM(an->grad.data(), m, k).noalias() += g * bm.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        CMapM am(an->value.data(), m, k);
        MapM(bn->grad.data(), k, n).noalias() += am.transpose() * g;
      }
    };
  }
  return Tensor(out);
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3) shape_fail("bmm needs rank-3 inputs");
  const int64_t g_count = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int64_t bk = trans_b ? b.dim(2) : b.dim(1);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != g_count || bk != k)
    shape_fail("bmm shapes disagree: " + shape_string(a.shape()) + " x " +
               shape_string(b.shape()));
  auto out = make_node({g_count, m, n}, false, {a.node(), b.node()});
  out->requires_grad = any_requires_grad(out->parents);
  out->value.resize(g_count * m * n);
  for (int64_t g = 0; g < g_count; ++g) {
    CMapM am(a.value().data() + g * m * k, m, k);
    MapM cm(out->value.data() + g * m * n, m, n);
    if (trans_b) {
      CMapM bm(b.value().data() + g * n * k, n, k);
      cm.noalias() = am * bm.transpose();
    } else {
      CMapM bm(b.value().data() + g * k * n, k, n);
      cm.noalias() = am * bm;
    }
  }
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backward_fn = [raw, an, bn, g_count, m, k, n, trans_b]() {
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int64_t g = 0; g < g_count; ++g) {
        CMapM gm(raw->grad.data() + g * m * n, m, n);
        CMapM am(an->value.data() + g * m * k, m, k);
        if (trans_b) {
          CMapM bm(bn->value.data() + g * n * k, n, k);
          if (an->requires_grad) MapM(an->grad.data() + g * m * k, m, k).noalias() += gm * bm;
          if (bn->requires_grad)
            MapM(bn->grad.data() + g * n * k, n, k).noalias() += gm.transpose() * am;
        } else {
          CMapM bm(bn->value.data() + g * k * n, k, n);
          if (an->requires_grad)
            MapM(an->grad.data() + g * m * k, m, k).noalias() += gm * bm.transpose();
          if (bn->requires_grad)
            MapM(bn->grad.data() + g * k * n, k, n).noalias() += am.transpose() * gm;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, const Shape& s) {
  if (numel(s) != a.numel())
    shape_fail("reshape " + shape_string(a.shape()) + " -> " + shape_string(s));
  auto out = make_node(s, a.requires_grad(), {a.node()});
  out->value = a.value();
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an]() {
      an->ensure_grad();
      an->grad += raw->grad;
    };
  }
  return Tensor(out);
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) shape_fail("permute arity");
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  auto in_strides = row_major_strides(a.shape());
  // stride in the input for each output axis
  std::vector<int64_t> gather(r);
  for (int i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
  auto out_strides = row_major_strides(out_shape);
  const int64_t n = a.numel();
  auto out = make_node(out_shape, a.requires_grad(), {a.node()});
  out->value.resize(n);
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      src += (rem / out_strides[i]) * gather[i];
      rem %= out_strides[i];
    }
    out->value[o] = a.value()[src];
  }
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, out_strides, gather, r, n]() {
      an->ensure_grad();
      for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o, src = 0;
        for (int i = 0; i < r; ++i) {
          src += (rem / out_strides[i]) * gather[i];
          rem %= out_strides[i];
        }
        an->grad[src] += raw->grad[o];
      }
    };
  }
  return Tensor(out);
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  auto sp = split_at(a.shape(), axis);
  if (start < 0 || len < 1 || start + len > sp.axis) shape_fail("slice out of bounds");
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  auto out = make_node(out_shape, a.requires_grad(), {a.node()});
  out->value.resize(numel(out_shape));
  for (int64_t o = 0; o < sp.outer; ++o)
    out->value.segment(o * len * sp.inner, len * sp.inner) =
        a.value().segment((o * sp.axis + start) * sp.inner, len * sp.inner);
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, sp, start, len]() {
      an->ensure_grad();
      for (int64_t o = 0; o < sp.outer; ++o)
        an->grad.segment((o * sp.axis + start) * sp.inner, len * sp.inner) +=
            raw->grad.segment(o * len * sp.inner, len * sp.inner);
    };
  }
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) shape_fail("concat of nothing");
  Shape out_shape = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank()) shape_fail("concat rank mismatch");
    for (int i = 0; i < x.rank(); ++i)
      if (i != axis && x.shape()[i] != out_shape[i]) shape_fail("concat shape mismatch");
    total += x.shape()[axis];
  }
  out_shape[axis] = total;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& x : xs) parents.push_back(x.node());
  auto out = make_node(out_shape, any_requires_grad(parents), parents);
  out->value.resize(numel(out_shape));
  auto sp = split_at(out_shape, axis);
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t ax = x.shape()[axis];
    for (int64_t o = 0; o < sp.outer; ++o)
      out->value.segment((o * total + off) * sp.inner, ax * sp.inner) =
          x.value().segment(o * ax * sp.inner, ax * sp.inner);
    off += ax;
  }
  if (out->requires_grad) {
    Node* raw = out.get();
    std::vector<int64_t> sizes;
    for (const auto& x : xs) sizes.push_back(x.shape()[axis]);
    out->backward_fn = [raw, sp, total, sizes]() {
      int64_t off = 0;
      for (size_t i = 0; i < sizes.size(); ++i) {
        auto& p = raw->parents[i];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t o = 0; o < sp.outer; ++o)
            p->grad.segment(o * sizes[i] * sp.inner, sizes[i] * sp.inner) +=
                raw->grad.segment((o * total + off) * sp.inner, sizes[i] * sp.inner);
        }
        off += sizes[i];
      }
    };
  }
  return Tensor(out);
}

Tensor cumsum(const Tensor& a, int axis) {
  auto sp = split_at(a.shape(), axis);
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  out->value = a.value();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t t = 1; t < sp.axis; ++t)
      out->value.segment((o * sp.axis + t) * sp.inner, sp.inner) +=
          out->value.segment((o * sp.axis + t - 1) * sp.inner, sp.inner);
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, sp]() {
      an->ensure_grad();
      // d/dx_s = sum over t >= s of dy_t: a reverse cumulative sum
      for (int64_t o = 0; o < sp.outer; ++o) {
        Eigen::ArrayXf acc = Eigen::ArrayXf::Zero(sp.inner);
        for (int64_t t = sp.axis - 1; t >= 0; --t) {
          acc += raw->grad.segment((o * sp.axis + t) * sp.inner, sp.inner);
          an->grad.segment((o * sp.axis + t) * sp.inner, sp.inner) += acc;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor upsample_nearest(const Tensor& a, int factor) {
  if (factor < 1) shape_fail("upsample factor must be >= 1");
  const int64_t t_in = a.shape().back();
  Shape out_shape = a.shape();
  out_shape.back() = t_in * factor;
  const int64_t rows = a.numel() / t_in;
  auto out = make_node(out_shape, a.requires_grad(), {a.node()});
  out->value.resize(rows * t_in * factor);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t t = 0; t < t_in * factor; ++t)
      out->value[r * t_in * factor + t] = a.value()[r * t_in + t / factor];
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, rows, t_in, factor]() {
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t t = 0; t < t_in * factor; ++t)
          an->grad[r * t_in + t / factor] += raw->grad[r * t_in * factor + t];
    };
  }
  return Tensor(out);
}

Tensor sum_all(const Tensor& a) {
  auto out = make_node({1}, a.requires_grad(), {a.node()});
  out->value.resize(1);
  out->value[0] = static_cast<float>(a.value().cast<double>().sum());
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an]() {
      an->ensure_grad();
      an->grad += raw->grad[0];
    };
  }
  return Tensor(out);
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0f / static_cast<float>(a.numel())); }

Tensor softmax_lastdim(const Tensor& a) {
  const int64_t l = a.shape().back();
  const int64_t rows = a.numel() / l;
  auto out = make_node(a.shape(), a.requires_grad(), {a.node()});
  out->value.resize(a.numel());
  for (int64_t r = 0; r < rows; ++r) {
    auto row = a.value().segment(r * l, l);
    Eigen::ArrayXf e = (row - row.maxCoeff()).exp();
    out->value.segment(r * l, l) = e / e.sum();
  }
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    out->backward_fn = [raw, an, rows, l]() {
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        auto y = raw->value.segment(r * l, l);
        auto g = raw->grad.segment(r * l, l);
        const float dot = (y * g).sum();
        an->grad.segment(r * l, l) += y * (g - dot);
      }
    };
  }
  return Tensor(out);
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) shape_fail("attention wants [G,T,Dh]");
  const int64_t g = q.dim(0), tq = q.dim(1), dh = q.dim(2), tk = k.dim(1);
  if (k.dim(0) != g || v.dim(0) != g || k.dim(2) != dh || v.dim(1) != tk || v.dim(2) != dh)
    shape_fail("attention operand mismatch");
  if (tk < tq) shape_fail("attention needs keys covering every query");
  const int64_t off = tk - tq;
  Eigen::ArrayXf mask(tq * tk);
  for (int64_t i = 0; i < tq; ++i)
    for (int64_t j = 0; j < tk; ++j) mask[i * tk + j] = j <= i + off ? 0.0f : -1e30f;
  Tensor scores = scale(bmm(q, k, true), 1.0f / std::sqrt(static_cast<float>(dh)));
  Tensor att = softmax_lastdim(add(scores, Tensor::constant({tq, tk}, std::move(mask))));
  return bmm(att, v);
}

Tensor causal_attention(const Tensor& x, const Tensor& wqkv, const Tensor& bqkv, const Tensor& wo,
                        const Tensor& bo, int heads) {
  if (x.rank() != 3) shape_fail("causal_attention wants [B,T,D]");
  const int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads < 1 || d % heads != 0) shape_fail("heads must divide the model width");
  if (wqkv.rank() != 2 || wqkv.dim(0) != d || wqkv.dim(1) != 3 * d || bqkv.numel() != 3 * d ||
      wo.rank() != 2 || wo.dim(0) != d || wo.dim(1) != d || bo.numel() != d)
    shape_fail("causal_attention projection shapes");
  const int64_t dh = d / heads;
  Tensor qkv = add(matmul(x, wqkv), bqkv);
  auto split = [&](int64_t part) {
    Tensor s = slice(qkv, 2, part * d, d);
    return reshape(permute(reshape(s, {b, t, heads, dh}), {0, 2, 1, 3}), {b * heads, t, dh});
  };
  Tensor ctx = masked_attention(split(0), split(1), split(2));
  Tensor merged = reshape(permute(reshape(ctx, {b, heads, t, dh}), {0, 2, 1, 3}), {b, t, d});
  return add(matmul(merged, wo), bo);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) shape_fail("layer_norm affine size");
  const int64_t rows = x.numel() / d;
  auto out = make_node(x.shape(), false, {x.node(), gamma.node(), beta.node()});
  out->requires_grad = any_requires_grad(out->parents);
  out->value.resize(x.numel());
  Eigen::ArrayXf xhat(x.numel());
  Eigen::ArrayXf inv_std(rows);
  for (int64_t r = 0; r < rows; ++r) {
    auto row = x.value().segment(r * d, d);
    const float mu = row.mean();
    const float var = (row - mu).square().mean();
    inv_std[r] = 1.0f / std::sqrt(var + eps);
    xhat.segment(r * d, d) = (row - mu) * inv_std[r];
    out->value.segment(r * d, d) = xhat.segment(r * d, d) * gamma.value() + beta.value();
  }
  if (out->requires_grad) {
    Node* raw = out.get();
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    out->backward_fn = [raw, xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std),
                        rows, d]() {
      for (int64_t r = 0; r < rows; ++r) {
        auto g = raw->grad.segment(r * d, d);
        auto xh = xhat.segment(r * d, d);
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad += g * xh;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad += g;
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          Eigen::ArrayXf dxhat = g * gn->value;
          const float m1 = dxhat.mean();
          const float m2 = (dxhat * xh).mean();
          xn->grad.segment(r * d, d) += inv_std[r] * (dxhat - m1 - xh * m2);
        }
      }
    };
  }
  return Tensor(out);
}

Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids) {
  if (table.rank() != 2) shape_fail("embedding table must be 2-D");
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= v) shape_fail("embedding id out of range");
  const int64_t n = static_cast<int64_t>(ids.size());
  auto out = make_node({n, d}, table.requires_grad(), {table.node()});
  out->value.resize(n * d);
  for (int64_t i = 0; i < n; ++i)
    out->value.segment(i * d, d) = table.value().segment(static_cast<int64_t>(ids[i]) * d, d);
  if (out->requires_grad) {
    Node* raw = out.get();
    auto tn = table.node();
    out->backward_fn = [raw, tn, ids, d]() {
      tn->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i)
        tn->grad.segment(static_cast<int64_t>(ids[i]) * d, d) +=
            raw->grad.segment(static_cast<int64_t>(i) * d, d);
    };
  }
  return Tensor(out);
}

int64_t conv_out_len(int64_t t, int64_t kernel, int stride, int padding) {
  return (t + 2 * padding - kernel) / stride + 1;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  if (x.rank() != 3 || w.rank() != 3) shape_fail("conv1d wants x[B,C,T], w[O,C,K]");
  const int64_t batch = x.dim(0), c_in = x.dim(1), t_in = x.dim(2);
  const int64_t c_out = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != c_in || b.numel() != c_out) shape_fail("conv1d channel mismatch");
  if (stride < 1 || padding < 0 || kernel > t_in + 2 * padding)
    shape_fail("conv1d kernel does not fit");
  const int64_t t_out = conv_out_len(t_in, kernel, stride, padding);

  // one big GEMM over the unrolled input: W[c_out, c_in*k] x cols[c_in*k, B*t_out]
  auto cols = std::make_shared<MatRM>(c_in * kernel, batch * t_out);
  cols->setZero();
  for (int64_t bi = 0; bi < batch; ++bi)
    for (int64_t ci = 0; ci < c_in; ++ci)
      for (int64_t kk = 0; kk < kernel; ++kk)
        for (int64_t to = 0; to < t_out; ++to) {
          const int64_t ti = to * stride + kk - padding;
          if (ti >= 0 && ti < t_in)
            (*cols)(ci * kernel + kk, bi * t_out + to) =
                x.value()[(bi * c_in + ci) * t_in + ti];
        }

  auto out = make_node({batch, c_out, t_out}, false, {x.node(), w.node(), b.node()});
  out->requires_grad = any_requires_grad(out->parents);
  out->value.resize(batch * c_out * t_out);
  MatRM y(c_out, batch * t_out);
  {
    CMapM wm(w.value().data(), c_out, c_in * kernel);
    y.noalias() = wm * (*cols);
    y.colwise() += Eigen::Map<const Eigen::VectorXf>(b.value().data(), c_out);
  }
  for (int64_t bi = 0; bi < batch; ++bi)
    for (int64_t o = 0; o < c_out; ++o)
      for (int64_t to = 0; to < t_out; ++to)
        out->value[(bi * c_out + o) * t_out + to] = y(o, bi * t_out + to);

  if (out->requires_grad) {
    Node* raw = out.get();
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    out->backward_fn = [raw, xn, wn, bn, cols, batch, c_in, t_in, c_out, t_out, kernel, stride,
                        padding]() {
      MatRM gy(c_out, batch * t_out);
      for (int64_t bi = 0; bi < batch; ++bi)
        for (int64_t o = 0; o < c_out; ++o)
          for (int64_t to = 0; to < t_out; ++to)
            gy(o, bi * t_out + to) = raw->grad[(bi * c_out + o) * t_out + to];
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t o = 0; o < c_out; ++o)
          bn->grad[o] += static_cast<float>(gy.row(o).cast<double>().sum());
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        MapM(wn->grad.data(), c_out, c_in * kernel).noalias() += gy * cols->transpose();
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        MatRM gcols(c_in * kernel, batch * t_out);
        CMapM wm(wn->value.data(), c_out, c_in * kernel);
        gcols.noalias() = wm.transpose() * gy;
        for (int64_t bi = 0; bi < batch; ++bi)
          for (int64_t ci = 0; ci < c_in; ++ci)
            for (int64_t kk = 0; kk < kernel; ++kk)
              for (int64_t to = 0; to < t_out; ++to) {
                const int64_t ti = to * stride + kk - padding;
                if (ti >= 0 && ti < t_in)
                  xn->grad[(bi * c_in + ci) * t_in + ti] += gcols(ci * kernel + kk, bi * t_out + to);
              }
      }
    };
  }
  return Tensor(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                     const std::vector<float>& weights, std::vector<float>* per_position) {
  if (logits.rank() != 2) shape_fail("cross_entropy wants [N,V] logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(weights.size()) != n)
    shape_fail("cross_entropy target arity");
  for (int32_t t : targets)
    if (t < 0 || t >= v) shape_fail("target id out of range");

  double weight_sum = 0.0, loss_sum = 0.0;
  std::vector<float> losses(n);
  auto probs = std::make_shared<Eigen::ArrayXf>(n * v);
  for (int64_t i = 0; i < n; ++i) {
    auto row = logits.value().segment(i * v, v);
    const float mx = row.maxCoeff();
    Eigen::ArrayXf e = (row - mx).exp();
    const double z = e.cast<double>().sum();
    probs->segment(i * v, v) = e / static_cast<float>(z);
    losses[i] = static_cast<float>(std::log(z) + mx - row[targets[i]]);
    loss_sum += static_cast<double>(weights[i]) * losses[i];
    weight_sum += weights[i];
  }
  if (per_position) *per_position = losses;
  const double denom = weight_sum > 0.0 ? weight_sum : 1.0;

  auto out = make_node({1}, logits.requires_grad(), {logits.node()});
  out->value.resize(1);
  out->value[0] = static_cast<float>(loss_sum / denom);
  if (out->requires_grad) {
    Node* raw = out.get();
    auto ln = logits.node();
    out->backward_fn = [raw, ln, probs, targets, weights, denom, n, v]() {
      ln->ensure_grad();
      const float g = raw->grad[0];
      for (int64_t i = 0; i < n; ++i) {
        if (weights[i] == 0.0f) continue;
        const float wi = g * weights[i] / static_cast<float>(denom);
        ln->grad.segment(i * v, v) += wi * probs->segment(i * v, v);
        ln->grad[i * v + targets[i]] -= wi;
      }
    };
  }
  return Tensor(out);
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, float beta) {
  if (a.shape() != b.shape()) shape_fail("smooth_l1 shape mismatch");
  if (!(beta > 0.0f)) shape_fail("smooth_l1 beta must be positive");
  const int64_t n = a.numel();
  Eigen::ArrayXf d = a.value() - b.value();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double ad = std::abs(static_cast<double>(d[i]));
    acc += ad < beta ? 0.5 * ad * ad / beta : ad - 0.5 * beta;
  }
  auto out = make_node({1}, false, {a.node(), b.node()});
  out->requires_grad = any_requires_grad(out->parents);
  out->value.resize(1);
  out->value[0] = static_cast<float>(acc / static_cast<double>(n));
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backward_fn = [raw, an, bn, d = std::move(d), beta, n]() {
      const float g = raw->grad[0] / static_cast<float>(n);
      Eigen::ArrayXf dd =
          (d.abs() < beta).select(d / beta, d.sign()) * g;
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad += dd;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad -= dd;
      }
    };
  }
  return Tensor(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mse shape mismatch");
  const int64_t n = a.numel();
  Eigen::ArrayXf d = a.value() - b.value();
  auto out = make_node({1}, false, {a.node(), b.node()});
  out->requires_grad = any_requires_grad(out->parents);
  out->value.resize(1);
  out->value[0] = static_cast<float>(d.cast<double>().square().sum() / static_cast<double>(n));
  if (out->requires_grad) {
    Node* raw = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backward_fn = [raw, an, bn, d = std::move(d), n]() {
      Eigen::ArrayXf dd = d * (2.0f * raw->grad[0] / static_cast<float>(n));
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad += dd;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad -= dd;
      }
    };
  }
  return Tensor(out);
}

Tensor straight_through(const Eigen::ArrayXf& values, const Tensor& src) {
  if (values.size() != src.numel()) shape_fail("straight_through size mismatch");
  auto out = make_node(src.shape(), src.requires_grad(), {src.node()});
  out->value = values;
  if (out->requires_grad) {
    Node* raw = out.get();
    auto sn = src.node();
    out->backward_fn = [raw, sn]() {
      sn->ensure_grad();
      sn->grad += raw->grad;
    };
  }
  return Tensor(out);
}

Tensor stop_gradient(const Tensor& a) {
  auto out = make_node(a.shape(), false, {});
  out->value = a.value();
  return Tensor(out);
}

}  // namespace motok::ad
