#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "motok/tensor.hpp"

namespace motok::ad {

/// Named parameter registry with per-parameter Adam moments. Iteration
/// follows registration order, which keeps updates and checkpoints
/// deterministic.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    Eigen::ArrayXf m, v;  // first/second Adam moments
  };

  Tensor add(const std::string& name, Tensor t);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const;
  Entry& entry(const std::string& name);

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }
  int64_t parameter_count() const;

  /// Allocates zero gradients on every parameter; call before backward so a
  /// parameter outside the step's graph still has a (zero) gradient.
  void ensure_zero_grads();

  friend void adam_step(ParameterStore& store, float lr, float beta1, float beta2, float eps);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
  int64_t step_ = 0;
};

void adam_step(ParameterStore& store, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
               float eps = 1e-8f);

struct GradCheckReport {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Central-difference check of d(f)/d(param) on sampled coordinates.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double eps, int samples, Rng& rng);

}  // namespace motok::ad
