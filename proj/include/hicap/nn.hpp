#pragma once

// Small reverse-mode autodiff over dense row-major f64 tensors.
//
// Every op returns a Var (shared node). When gradient recording is enabled and
// at least one input requires a gradient, the node keeps its parents and a
// backward closure. Leaves with requires_grad accumulate into `grad`;
// intermediate gradients are reset on each call to backward(), so replaying
// the same recorded graph is deterministic.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace hicap::nn {

using Shape = std::vector<std::size_t>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;
  bool all_finite() const noexcept;
  std::string shape_str() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Node {
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Gradient storage, zero-filled on first access.
  std::vector<double>& grad_buffer();
  bool is_leaf() const noexcept { return !backward_fn; }
};

using Var = std::shared_ptr<Node>;

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

Var leaf(Tensor value, bool requires_grad);
inline Var constant(Tensor value) { return leaf(std::move(value), false); }
// Same value, no history.
Var detach(const Var& x);

// [m,k] x [k,n]
Var matmul(const Var& a, const Var& b);
// [m,k] x [n,k]^T
Var matmul_nt(const Var& a, const Var& b);
// Same shape, or `b` a single row broadcast over the rows of `a`, or `b` scalar.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// scale * a + shift
Var affine(const Var& a, double scale, double shift = 0.0);
Var relu(const Var& a);
Var gelu(const Var& a);
Var tanh(const Var& a);
Var softmax_rows(const Var& a);
// `allowed` is rows*cols; disallowed entries get probability exactly 0.
// Every row must allow at least one entry.
Var masked_softmax_rows(const Var& a, const std::vector<std::uint8_t>& allowed);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// Gathers rows of `table` ([V,d]) -> [ids.size(), d].
Var embedding(const Var& table, std::span<const int> ids);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
// Column-wise mean -> [1, cols].
Var mean_rows(const Var& a);
Var sum(const Var& a);
// Cosine of two flattened tensors of equal size -> scalar. Zero norm is rejected.
Var cosine(const Var& a, const Var& b);
// Sum over rows of -log softmax(logits[t])[targets[t]].
Var nll_rows(const Var& logits, std::span<const int> targets);

// Loss must be a scalar reachable through recorded ops.
void backward(const Var& loss);

class ParameterSet {
 public:
  // Registers a trainable tensor; duplicate paths are rejected.
  const Var& add(const std::string& path, Tensor init);
  const Var& at(const std::string& path) const;
  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  void freeze(const std::string& path);
  void freeze_prefix(const std::string& prefix);
  void unfreeze_all() { frozen_.clear(); }
  bool is_frozen(const std::string& path) const { return frozen_.count(path) != 0; }
  const std::set<std::string>& frozen() const noexcept { return frozen_; }

  void zero_grad();
  double grad_norm() const;
  // Rescales all gradients so the global norm is at most `max_norm`.
  void clip_grad_norm(double max_norm);

  std::size_t scalar_count() const;
  const std::map<std::string, Var>& entries() const noexcept { return params_; }

 private:
  std::map<std::string, Var> params_;
  std::set<std::string> frozen_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Updates every non-frozen parameter, then zeroes all gradients.
  void step(ParameterSet& params);
  long steps() const noexcept { return steps_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamConfig config_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

// max_i |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-8)
double grad_check(const std::function<Var(const Var&)>& fn, const Tensor& point, double eps);

// Same measure over every coordinate of every parameter in `params`.
// `loss_fn` must rebuild the graph from the current parameter values.
double grad_check(const std::function<Var()>& loss_fn, ParameterSet& params, double eps);

Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng);

}  // namespace hicap::nn
