#include "hicap/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "hicap/error.hpp"

namespace hicap::nn {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw UsageError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw UsageError("tensor dimensions must be positive");
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw UsageError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(fn);
    }
  }
  return node;
}

// C[m,n] += A[m,k] B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T B[k,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return Shape{rows, cols}; }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != product(shape_)) {
    throw UsageError("tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str());
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str());
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Ops

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var detach(const Var& x) { return leaf(x->value, false); }

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av, bv);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(matrix_shape(m, n));
  gemm_nn(m, k, n, av.data().data(), bv.data().data(), out.data().data());
  return make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (pa->requires_grad) gemm_nt(m, n, k, self.grad.data(), pb->value.data().data(), pa->grad_buffer().data());
    if (pb->requires_grad) gemm_tn(k, m, n, pa->value.data().data(), self.grad.data(), pb->grad_buffer().data());
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.cols() != bv.cols()) shape_mismatch("matmul_nt", av, bv);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out(matrix_shape(m, n));
  gemm_nt(m, k, n, av.data().data(), bv.data().data(), out.data().data());
  return make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    // dA[m,k] += dC[m,n] B[n,k]; dB[n,k] += dC^T A
    if (pa->requires_grad) gemm_nn(m, n, k, self.grad.data(), pb->value.data().data(), pa->grad_buffer().data());
    if (pb->requires_grad) gemm_tn(n, m, k, self.grad.data(), pa->value.data().data(), pb->grad_buffer().data());
  });
}

Var add(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  enum class Mode { same, row, scalar } mode;
  if (av.shape() == bv.shape()) {
    mode = Mode::same;
  } else if (bv.size() == av.cols() && bv.rows() == 1) {
    mode = Mode::row;
  } else if (bv.size() == 1) {
    mode = Mode::scalar;
  } else {
    shape_mismatch("add", av, bv);
  }
  Tensor out = av;
  const std::size_t cols = av.cols();
  auto& od = out.storage();
  for (std::size_t i = 0; i < od.size(); ++i) {
    od[i] += mode == Mode::same ? bv[i] : mode == Mode::row ? bv[i % cols] : bv[0];
  }
  return make_result(std::move(out), {a, b}, [mode, cols](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[mode == Mode::same ? i : mode == Mode::row ? i % cols : 0] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  if (a->value.shape() != b->value.shape()) shape_mismatch("sub", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (a->value.shape() != b->value.shape()) shape_mismatch("mul", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var affine(const Var& a, double scale, double shift) {
  Tensor out = a->value;
  for (auto& v : out.storage()) v = scale * v + shift;
  return make_result(std::move(out), {a}, [scale](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& pa = self.parents[0];
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.storage()) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    v = 0.5 * v * (1.0 + t);
  }
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& pa = self.parents[0];
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa->value[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Var tanh(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.storage()) v = std::tanh(v);
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

namespace {

Var softmax_impl(const Var& a, const std::vector<std::uint8_t>* allowed) {
  const std::size_t rows = a->value.rows(), cols = a->value.cols();
  Tensor out(a->value.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a->value.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!allowed || (*allowed)[r * cols + c]) mx = std::max(mx, x[c]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax: row " + std::to_string(r) + " has no finite allowed entry");
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = (!allowed || (*allowed)[r * cols + c]) ? std::exp(x[c] - mx) : 0.0;
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data().data() + r * cols;
      const double* dy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
    }
  });
}

}  // namespace

Var softmax_rows(const Var& a) { return softmax_impl(a, nullptr); }

Var masked_softmax_rows(const Var& a, const std::vector<std::uint8_t>& allowed) {
  if (allowed.size() != a->value.size()) {
    throw UsageError("masked_softmax_rows: mask length " + std::to_string(allowed.size()) + " vs input " +
                     a->value.shape_str());
  }
  return softmax_impl(a, &allowed);
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  if (gain->value.size() != cols) shape_mismatch("layer_norm(gain)", x->value, gain->value);
  if (bias->value.size() != cols) shape_mismatch("layer_norm(bias)", x->value, bias->value);
  Tensor out(x->value.shape());
  std::vector<double> xhat(x->value.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x->value.data().data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mean) * inv_std[r];
      xhat[r * cols + c] = h;
      out.at(r, c) = gain->value[c] * h + bias->value[c];
    }
  }
  return make_result(std::move(out), {x, gain, bias},
                     [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const auto& px = self.parents[0];
                       const auto& pg = self.parents[1];
                       const auto& pb = self.parents[2];
                       if (pg->requires_grad) {
                         auto& g = pg->grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % cols] += self.grad[i] * xhat[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % cols] += self.grad[i];
                       }
                       if (!px->requires_grad) return;
                       auto& g = px->grad_buffer();
                       const double n = static_cast<double>(cols);
                       std::vector<double> dh(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           dh[c] = self.grad[r * cols + c] * pg->value[c];
                           mean_dh += dh[c];
                           mean_dh_h += dh[c] * xhat[r * cols + c];
                         }
                         mean_dh /= n;
                         mean_dh_h /= n;
                         for (std::size_t c = 0; c < cols; ++c) {
                           g[r * cols + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * cols + c] * mean_dh_h);
                         }
                       }
                     });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const std::size_t vocab = table->value.rows(), d = table->value.cols();
  if (ids.empty()) throw UsageError("embedding: empty id list");
  Tensor out(matrix_shape(ids.size(), d));
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw UsageError("embedding: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(table->value.data().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data().data() + i * d);
  }
  return make_result(std::move(out), {table}, [d, idx = std::move(idx)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* row = g.data() + static_cast<std::size_t>(idx[i]) * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += self.grad[i * d + c];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const std::size_t cols = parts[0]->value.cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols) shape_mismatch("concat_rows", parts[0]->value, p->value);
    rows += p->value.rows();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data().begin(), p->value.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p->value.size();
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
    std::size_t off = 0;
    for (const auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t rows = parts[0]->value.rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p->value.rows() != rows) shape_mismatch("concat_cols", parts[0]->value, p->value);
    cols += p->value.cols();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p->value.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pc; ++c) out.at(r, col0 + c) = p->value.at(r, c);
    }
    col0 += pc;
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [rows, cols](Node& self) {
    std::size_t c0 = 0;
    for (const auto& p : self.parents) {
      const std::size_t pc = p->value.cols();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad[r * cols + c0 + c];
        }
      }
      c0 += pc;
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t rows = a->value.rows(), cols = a->value.cols();
  if (count == 0 || begin + count > rows) {
    throw UsageError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + a->value.shape_str());
  }
  std::vector<double> data(a->value.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                           a->value.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  Tensor out(matrix_shape(count, cols), std::move(data));
  return make_result(std::move(out), {a}, [begin, cols](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t rows = a->value.rows(), cols = a->value.cols();
  if (count == 0 || begin + count > cols) {
    throw UsageError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + a->value.shape_str());
  }
  Tensor out(matrix_shape(rows, count));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = a->value.at(r, begin + c);
  }
  return make_result(std::move(out), {a}, [rows, cols, begin, count](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) g[r * cols + begin + c] += self.grad[r * count + c];
    }
  });
}

Var mean_rows(const Var& a) {
  const std::size_t rows = a->value.rows(), cols = a->value.cols();
  Tensor out(matrix_shape(1, cols));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += a->value.at(r, c);
  }
  for (auto& v : out.storage()) v /= static_cast<double>(rows);
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c] * inv;
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a->value.data()) total += v;
  return make_result(Tensor::scalar(total), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Var cosine(const Var& a, const Var& b) {
  if (a->value.size() != b->value.size()) shape_mismatch("cosine", a->value, b->value);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    dot += a->value[i] * b->value[i];
    na += a->value[i] * a->value[i];
    nb += b->value[i] * b->value[i];
  }
  if (na == 0.0 || nb == 0.0) throw UsageError("cosine: zero-norm vector");
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const double cos = dot / (na * nb);
  return make_result(Tensor::scalar(cos), {a, b}, [na, nb, cos](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    const double up = self.grad[0];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += up * (pb->value[i] / (na * nb) - cos * pa->value[i] / (na * na));
      }
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += up * (pa->value[i] / (na * nb) - cos * pb->value[i] / (nb * nb));
      }
    }
  });
}

Var nll_rows(const Var& logits, std::span<const int> targets) {
  const std::size_t rows = logits->value.rows(), cols = logits->value.cols();
  if (targets.size() != rows) {
    throw UsageError("nll_rows: " + std::to_string(targets.size()) + " targets for logits " + logits->value.shape_str());
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> probs(logits->value.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= cols) {
      throw UsageError("nll_rows: target " + std::to_string(tgt[r]) + " outside vocabulary of " + std::to_string(cols));
    }
    const double* z = logits->value.data().data() + r * cols;
    double mx = *std::max_element(z, z + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs[r * cols + c] = std::exp(z[c] - mx);
      s += probs[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= s;
    total += (mx + std::log(s)) - z[static_cast<std::size_t>(tgt[r])];
  }
  return make_result(Tensor::scalar(total), {logits}, [cols, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * probs[i];
    for (std::size_t r = 0; r < tgt.size(); ++r) g[r * cols + static_cast<std::size_t>(tgt[r])] -= up;
  });
}

void backward(const Var& loss) {
  if (loss->value.size() != 1) throw UsageError("backward: loss must be a scalar, got " + loss->value.shape_str());
  if (!loss->requires_grad) return;

  // Iterative post-order DFS -> topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  loss->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Parameters and optimizer

const Var& ParameterSet::add(const std::string& path, Tensor init) {
  if (params_.count(path)) throw UsageError("duplicate parameter path '" + path + "'");
  return params_.emplace(path, leaf(std::move(init), true)).first->second;
}

const Var& ParameterSet::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw UsageError("unknown parameter path '" + path + "'");
  return it->second;
}

void ParameterSet::freeze(const std::string& path) {
  at(path);
  frozen_.insert(path);
}

void ParameterSet::freeze_prefix(const std::string& prefix) {
  for (const auto& [path, _] : params_) {
    if (path.rfind(prefix, 0) == 0) frozen_.insert(path);
  }
}

void ParameterSet::zero_grad() {
  for (auto& [_, p] : params_) p->grad.assign(p->value.size(), 0.0);
}

double ParameterSet::grad_norm() const {
  double total = 0.0;
  for (const auto& [path, p] : params_) {
    if (frozen_.count(path)) continue;
    for (double g : p->grad) total += g * g;
  }
  return std::sqrt(total);
}

void ParameterSet::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm <= max_norm || norm == 0.0) return;
  const double scale = max_norm / norm;
  for (auto& [path, p] : params_) {
    for (auto& g : p->grad) g *= scale;
  }
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p->value.size();
  return n;
}

void Adam::step(ParameterSet& params) {
  for (const auto& [path, p] : params.entries()) {
    if (!params.is_frozen(path) && p->grad.size() != p->value.size()) {
      throw UsageError("optimizer step: parameter '" + path + "' has no gradient");
    }
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (const auto& [path, p] : params.entries()) {
    if (params.is_frozen(path)) continue;
    auto& mom = moments_[path];
    if (mom.m.size() != p->value.size()) {
      mom.m.assign(p->value.size(), 0.0);
      mom.v.assign(p->value.size(), 0.0);
    }
    auto& w = p->value.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = p->grad[i];
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g;
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  params.zero_grad();
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double eval_scalar(const Var& v, const char* where, std::size_t coord) {
  const double x = v->value.item();
  if (!std::isfinite(x)) {
    throw NumericError(std::string("grad_check: non-finite function value at coordinate ") + std::to_string(coord) +
                       " (" + where + ")");
  }
  return x;
}

// Relative error after discounting the rounding error of the central
// difference itself, about max(|f|, 1) * machine epsilon / eps (the floor of 1
// covers small losses built from order-one intermediates, e.g. cos - c).
// Without this, coordinates whose true gradient is exactly zero report pure
// rounding noise.
double rel_err(double analytic, double fp, double fm, double eps) {
  const double numeric = (fp - fm) / (2.0 * eps);
  const double noise = 8.0 * std::max(std::abs(fp) + std::abs(fm), 1.0) * std::numeric_limits<double>::epsilon() / (2.0 * eps);
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::max(0.0, std::abs(analytic - numeric) - noise) / denom;
}

}  // namespace

double grad_check(const std::function<Var(const Var&)>& fn, const Tensor& point, double eps) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  Var x = leaf(point, true);
  Var loss = fn(x);
  if (loss->value.size() != 1) throw UsageError("grad_check: function must return a scalar");
  backward(loss);
  const std::vector<double> analytic = x->grad_buffer();
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < point.size(); ++i) {
    Tensor plus = point, minus = point;
    plus[i] += eps;
    minus[i] -= eps;
    const double fp = eval_scalar(fn(leaf(plus, false)), "+eps", i);
    const double fm = eval_scalar(fn(leaf(minus, false)), "-eps", i);
    worst = std::max(worst, rel_err(analytic[i], fp, fm, eps));
  }
  return worst;
}

double grad_check(const std::function<Var()>& loss_fn, ParameterSet& params, double eps) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  params.zero_grad();
  backward(loss_fn());
  double worst = 0.0;
  NoGradGuard guard;
  std::size_t coord = 0;
  for (const auto& [path, p] : params.entries()) {
    const std::vector<double> analytic = p->grad;
    auto& w = p->value.storage();
    for (std::size_t i = 0; i < w.size(); ++i, ++coord) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double fp = eval_scalar(loss_fn(), "+eps", coord);
      w[i] = orig - eps;
      const double fm = eval_scalar(loss_fn(), "-eps", coord);
      w[i] = orig;
      worst = std::max(worst, rel_err(analytic[i], fp, fm, eps));
    }
  }
  params.zero_grad();
  return worst;
}

Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

}  // namespace hicap::nn
