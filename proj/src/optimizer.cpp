#include "motok/optimizer.hpp"

#include <cmath>

namespace motok::ad {

Tensor ParameterStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) fail_domain("DuplicateParameter", name);
  if (!t.requires_grad()) fail_domain("NotAParameter", name + " does not require grad");
  index_[name] = entries_.size();
  entries_.push_back({name, t, Eigen::ArrayXf::Zero(t.numel()), Eigen::ArrayXf::Zero(t.numel())});
  return t;
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail_domain("UnknownParameter", name);
  return entries_[it->second].tensor;
}

bool ParameterStore::has(const std::string& name) const { return index_.count(name) > 0; }

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail_domain("UnknownParameter", name);
  return entries_[it->second];
}

int64_t ParameterStore::parameter_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterStore::ensure_zero_grads() {
  for (auto& e : entries_) {
    e.tensor.node()->ensure_grad();
    e.tensor.node()->grad.setZero();
  }
}

void adam_step(ParameterStore& store, float lr, float beta1, float beta2, float eps) {
  store.step_ += 1;
  const double t = static_cast<double>(store.step_);
  const float c1 = 1.0f / static_cast<float>(1.0 - std::pow(beta1, t));
  const float c2 = 1.0f / static_cast<float>(1.0 - std::pow(beta2, t));
  for (auto& e : store.entries_) {
    auto& node = *e.tensor.node();
    if (node.grad.size() != node.value.size())
      fail(ErrorKind::kNumeric, "MissingGrad", e.name + " has no gradient");
    e.m = beta1 * e.m + (1.0f - beta1) * node.grad;
    e.v = beta2 * e.v + (1.0f - beta2) * node.grad.square();
    node.value -= lr * (e.m * c1) / ((e.v * c2).sqrt() + eps);
    node.grad.setZero();
  }
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double eps, int samples, Rng& rng) {
  if (eps < 1e-5 || eps > 1e-2) fail_domain("BadEps", "grad_check eps outside [1e-5, 1e-2]");
  Tensor loss = f();
  for (const auto& p : params) {
    p.node()->ensure_grad();
    p.node()->grad.setZero();
  }
  backward(loss);
  std::vector<Eigen::ArrayXf> analytic;
  for (const auto& p : params) {
    analytic.push_back(p.node()->grad);
    p.node()->grad.setZero();
  }

  GradCheckReport report;
  for (int s = 0; s < samples; ++s) {
    const int pi = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(params.size()) - 1));
    auto& val = params[pi].node()->value;
    const int64_t ci = rng.uniform_int(0, val.size() - 1);
    const float saved = val[ci];
    val[ci] = saved + static_cast<float>(eps);
    const double lp = f().item();
    val[ci] = saved - static_cast<float>(eps);
    const double lm = f().item();
    val[ci] = saved;
    const double numeric = (lp - lm) / (2.0 * eps);
    const double a = analytic[pi][ci];
    if (!std::isfinite(numeric) || !std::isfinite(a))
      fail(ErrorKind::kNumeric, "NonFiniteLoss", "grad_check hit a non-finite value");
    const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    report.max_rel_error = std::max(report.max_rel_error, rel);
    report.checked += 1;
  }
  return report;
}

}  // namespace motok::ad
