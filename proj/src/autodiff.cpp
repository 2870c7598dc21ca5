#include "figrot/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace figrot::ad {

namespace {

// C (m x n) += A' * B with A'(i, p) = a[i * si + p * sp] and B (k x n)
// row-major. Blocked for cache; every C element still sums p in order.
template <typename T>
void gemm_kernel(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t si, std::size_t sp,
                 const T* b, T* c) {
  constexpr std::size_t kJB = 512, kIB = 64, kPB = 128;
  for (std::size_t j0 = 0; j0 < n; j0 += kJB) {
    const std::size_t j1 = std::min(n, j0 + kJB);
    for (std::size_t i0 = 0; i0 < m; i0 += kIB) {
      const std::size_t i1 = std::min(m, i0 + kIB);
      for (std::size_t p0 = 0; p0 < k; p0 += kPB) {
        const std::size_t p1 = std::min(k, p0 + kPB);
        for (std::size_t i = i0; i < i1; ++i) {
          T* __restrict crow = c + i * n;
          for (std::size_t p = p0; p < p1; ++p) {
            const T av = a[i * si + p * sp];
            if (av == T(0)) continue;
            const T* __restrict brow = b + p * n;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
}

// C (m x n) += A (m x k) * B (k x n)
template <typename T>
void gemm_nn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  gemm_kernel(m, n, k, a.data().data(), k, 1, b.data().data(), c.data().data());
}

// C (m x n) += A (m x k) * B^T, B is (n x k)
template <typename T>
void gemm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<T> bt(k * n);
  const T* pb = b.data().data();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = pb[j * k + p];
  }
  gemm_kernel(m, n, k, a.data().data(), k, 1, bt.data(), c.data().data());
}

// C (m x n) += A^T * B, A is (k x m), B is (k x n)
template <typename T>
void gemm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  gemm_kernel(m, n, k, a.data().data(), 1, m, b.data().data(), c.data().data());
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    fail(ErrorKind::kShape,
         std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <typename T>
T stable_logistic(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Hands f the gradient buffer of input k of node `self`, if that input is
// differentiable.
template <typename T, typename F>
void with_input_grad(Tape<T>& tape, std::size_t self, std::size_t k, F&& f) {
  const std::size_t in = tape.input(self, k);
  if (tape.requires_grad(in)) f(tape.grad_buffer(in));
}

}  // namespace

// ---- Tape ----------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  if (!value.all_finite()) fail(ErrorKind::kNumeric, "constant: non-finite input value");
  Node node;
  node.op = "constant";
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  nodes_.back().value = &nodes_.back().owned;
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant_ref(const Tensor<T>& value) {
  Node node;
  node.op = "constant";
  node.value = &value;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node node;
  node.op = "parameter";
  node.value = &p.value;
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs,
                       BackwardFn backward) {
  if (!value.all_finite()) {
    fail(ErrorKind::kNumeric, std::string(op) + ": non-finite output");
  }
  Node node;
  node.op = op;
  node.owned = std::move(value);
  node.inputs = std::move(inputs);
  for (std::size_t in : node.inputs) node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  nodes_.back().value = &nodes_.back().owned;
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0 && n.value->size() != 0) {
    n.grad = Tensor<T>(n.value->rows(), n.value->cols());
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) fail(ErrorKind::kValidation, "backward: loss belongs to another tape");
  const Node& root = nodes_[loss.id];
  if (root.value->size() != 1) {
    fail(ErrorKind::kShape, "backward: loss must be scalar, got " + root.value->shape_string());
  }
  if (!root.requires_grad) {
    fail(ErrorKind::kValidation, "backward: loss is disconnected from all parameters");
  }
  grad_buffer(loss.id)[0] += T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.size() == 0) continue;
    auto& dst = n.param->grad;
    if (!dst.same_shape(*n.value)) dst = Tensor<T>(n.value->rows(), n.value->cols());
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
  }
}

// ---- ops -------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    fail(ErrorKind::kShape, "matmul: " + av.shape_string() + " x " + bv.shape_string());
  }
  Tensor<T> out(av.rows(), bv.cols());
  gemm_nn(av, bv, out);
  return a.tape->record("matmul", std::move(out), {a.id, b.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& x = t.value(t.input(s, 0));
    const auto& y = t.value(t.input(s, 1));
    with_input_grad(t, s, 0, [&](Tensor<T>& dx) { gemm_nt(g, y, dx); });
    with_input_grad(t, s, 1, [&](Tensor<T>& dy) { gemm_tn(x, g, dy); });
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    fail(ErrorKind::kShape, "matmul_nt: " + av.shape_string() + " x " + bv.shape_string() + "^T");
  }
  Tensor<T> out(av.rows(), bv.rows());
  gemm_nt(av, bv, out);
  return a.tape->record("matmul_nt", std::move(out), {a.id, b.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& x = t.value(t.input(s, 0));
    const auto& y = t.value(t.input(s, 1));
    with_input_grad(t, s, 0, [&](Tensor<T>& dx) { gemm_nn(g, y, dx); });
    with_input_grad(t, s, 1, [&](Tensor<T>& dy) { gemm_tn(g, x, dy); });
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a.id, b.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    for (std::size_t k = 0; k < 2; ++k) {
      with_input_grad(t, s, k, [&](Tensor<T>& d) {
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
      });
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record("sub", std::move(out), {a.id, b.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    });
    with_input_grad(t, s, 1, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    });
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a.id, b.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& x = t.value(t.input(s, 0));
    const auto& y = t.value(t.input(s, 1));
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
    });
    with_input_grad(t, s, 1, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * x[i];
    });
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    fail(ErrorKind::kShape, "add_row: " + av.shape_string() + " + " + rv.shape_string());
  }
  Tensor<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += rv[c];
  }
  return a.tape->record("add_row", std::move(out), {a.id, row.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    });
    with_input_grad(t, s, 1, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        for (std::size_t c = 0; c < gr.size(); ++c) d[c] += gr[c];
      }
    });
  });
}

template <typename T>
Var<T> mul_col(Var<T> a, Var<T> col) {
  const auto& av = a.value();
  const auto& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) {
    fail(ErrorKind::kShape, "mul_col: " + av.shape_string() + " * " + cv.shape_string());
  }
  Tensor<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (auto& x : out.row(r)) x *= cv[r];
  }
  return a.tape->record("mul_col", std::move(out), {a.id, col.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& x = t.value(t.input(s, 0));
    const auto& c = t.value(t.input(s, 1));
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < d.rows(); ++r) {
        auto dr = d.row(r);
        auto gr = g.row(r);
        for (std::size_t k = 0; k < dr.size(); ++k) dr[k] += gr[k] * c[r];
      }
    });
    with_input_grad(t, s, 1, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        auto xr = x.row(r);
        T acc = 0;
        for (std::size_t k = 0; k < gr.size(); ++k) acc += gr[k] * xr[k];
        d[r] += acc;
      }
    });
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= factor;
  return a.tape->record("scale", std::move(out), {a.id}, [factor](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
    });
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x += offset;
  return a.tape->record("add_scalar", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    });
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::kShape, "concat_cols: row count mismatch");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor<T> out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.row(r).data(), v.cols(), out.row(r).data() + offset);
    offset += v.cols();
  }
  return parts[0].tape->record("concat_cols", std::move(out), std::move(ids), [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    std::size_t off = 0;
    for (std::size_t k = 0;; ++k) {
      if (off >= g.cols()) break;
      const std::size_t width = t.value(t.input(s, k)).cols();
      with_input_grad(t, s, k, [&](Tensor<T>& d) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r);
          auto dr = d.row(r);
          for (std::size_t c = 0; c < width; ++c) dr[c] += gr[off + c];
        }
      });
      off += width;
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::kShape, "concat_rows: column count mismatch");
    rows += p.rows();
    ids.push_back(p.id);
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts[0].tape->record("concat_rows", Tensor<T>(rows, cols, std::move(data)), std::move(ids),
                               [](Tape<T>& t, std::size_t s) {
                                 const auto& g = t.grad(s);
                                 std::size_t off = 0;
                                 for (std::size_t k = 0; off < g.size(); ++k) {
                                   const std::size_t n = t.value(t.input(s, k)).size();
                                   with_input_grad(t, s, k, [&](Tensor<T>& d) {
                                     for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
                                   });
                                   off += n;
                                 }
                               });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (begin >= end || end > av.cols()) {
    fail(ErrorKind::kShape, "slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") of " + av.shape_string());
  }
  const std::size_t width = end - begin;
  Tensor<T> out(av.rows(), width);
  for (std::size_t r = 0; r < av.rows(); ++r) std::copy_n(av.row(r).data() + begin, width, out.row(r).data());
  return a.tape->record("slice_cols", std::move(out), {a.id}, [begin, width](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        auto dr = d.row(r);
        for (std::size_t c = 0; c < width; ++c) dr[begin + c] += gr[c];
      }
    });
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (begin >= end || end > av.rows()) {
    fail(ErrorKind::kShape, "slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") of " + av.shape_string());
  }
  const std::size_t cols = av.cols();
  std::vector<T> data(av.data().begin() + begin * cols, av.data().begin() + end * cols);
  return a.tape->record("slice_rows", Tensor<T>(end - begin, cols, std::move(data)), {a.id},
                        [offset = begin * cols](Tape<T>& t, std::size_t s) {
                          const auto& g = t.grad(s);
                          with_input_grad(t, s, 0, [&](Tensor<T>& d) {
                            for (std::size_t i = 0; i < g.size(); ++i) d[offset + i] += g[i];
                          });
                        });
}

template <typename T>
Var<T> logistic(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = stable_logistic(x);
  return a.tape->record("logistic", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& y = t.value(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (auto& x : out.data()) x = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  return a.tape->record("gelu", std::move(out), {a.id}, [inv_sqrt2](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& x = t.value(t.input(s, 0));
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        const T xi = x[i];
        const T cdf = T(0.5) * (T(1) + std::erf(xi * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xi * xi);
        d[i] += g[i] * (cdf + xi * pdf);
      }
    });
  });
}

template <typename T>
Var<T> hinge(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = x > T(0) ? x : T(0);
  return a.tape->record("hinge", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& x = t.value(t.input(s, 0));
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (x[i] > T(0)) d[i] += g[i];
      }
    });
  });
}

template <typename T>
Var<T> softmax(Var<T> a) {
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T total = 0;
    for (auto& x : row) {
      x = std::exp(x - mx);
      total += x;
    }
    for (auto& x : row) x /= total;
  }
  return a.tape->record("softmax", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& y = t.value(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = g.row(r);
        auto dr = d.row(r);
        T dot = 0;
        for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
        for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += yr[c] * (gr[c] - dot);
      }
    });
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const auto top = std::max_element(row.begin(), row.end());
    const T mx = *top;
    // log1p over the non-max terms keeps tiny losses from rounding to zero.
    T rest = 0;
    for (auto it = row.begin(); it != row.end(); ++it) {
      if (it != top) rest += std::exp(*it - mx);
    }
    const T offset = std::log1p(rest);
    for (auto& x : row) x = (x - mx) - offset;
  }
  return a.tape->record("log_softmax", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& y = t.value(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = g.row(r);
        auto dr = d.row(r);
        T gsum = 0;
        for (T v : gr) gsum += v;
        for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += gr[c] - std::exp(yr[c]) * gsum;
      }
    });
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    fail(ErrorKind::kShape, "layer_norm: affine parameters must be 1x" + std::to_string(cols));
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = xv.row(r);
    T mu = 0;
    for (T v : xr) mu += v;
    mu /= T(cols);
    T var = 0;
    for (T v : xr) var += (v - mu) * (v - mu);
    var /= T(cols);
    const T rstd = T(1) / std::sqrt(var + eps);
    auto orow = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) orow[c] = (xr[c] - mu) * rstd * gv[c] + bv[c];
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x.id, gamma.id, beta.id}, [eps](Tape<T>& t, std::size_t s) {
        const auto& g = t.grad(s);
        const auto& xv = t.value(t.input(s, 0));
        const auto& gv = t.value(t.input(s, 1));
        const std::size_t rows = xv.rows(), cols = xv.cols();
        const bool need_x = t.requires_grad(t.input(s, 0));
        const bool need_g = t.requires_grad(t.input(s, 1));
        const bool need_b = t.requires_grad(t.input(s, 2));
        Tensor<T>* dx = need_x ? &t.grad_buffer(t.input(s, 0)) : nullptr;
        Tensor<T>* dg = need_g ? &t.grad_buffer(t.input(s, 1)) : nullptr;
        Tensor<T>* db = need_b ? &t.grad_buffer(t.input(s, 2)) : nullptr;
        std::vector<T> xhat(cols), dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          auto xr = xv.row(r);
          auto gr = g.row(r);
          T mu = 0;
          for (T v : xr) mu += v;
          mu /= T(cols);
          T var = 0;
          for (T v : xr) var += (v - mu) * (v - mu);
          var /= T(cols);
          const T rstd = T(1) / std::sqrt(var + eps);
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            xhat[c] = (xr[c] - mu) * rstd;
            dxhat[c] = gr[c] * gv[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
            if (dg) (*dg)[c] += gr[c] * xhat[c];
            if (db) (*db)[c] += gr[c];
          }
          if (dx) {
            mean_dxhat /= T(cols);
            mean_dxhat_xhat /= T(cols);
            auto dr = dx->row(r);
            for (std::size_t c = 0; c < cols; ++c) {
              dr[c] += rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
            }
          }
        }
      });
}

template <typename T>
Var<T> column_mean(Var<T> a) {
  const auto& av = a.value();
  if (av.rows() == 0) fail(ErrorKind::kShape, "column_mean: empty batch");
  Tensor<T> out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto row = av.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
  for (auto& v : out.data()) v /= T(av.rows());
  return a.tape->record("column_mean", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      const T inv = T(1) / T(d.rows());
      for (std::size_t r = 0; r < d.rows(); ++r) {
        auto dr = d.row(r);
        for (std::size_t c = 0; c < dr.size(); ++c) dr[c] += g[c] * inv;
      }
    });
  });
}

template <typename T>
Var<T> column_variance(Var<T> a) {
  const auto& av = a.value();
  if (av.rows() == 0) fail(ErrorKind::kShape, "column_variance: empty batch");
  const std::size_t rows = av.rows(), cols = av.cols();
  std::vector<T> mu(cols, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = av.row(r);
    for (std::size_t c = 0; c < cols; ++c) mu[c] += row[c];
  }
  for (auto& m : mu) m /= T(rows);
  Tensor<T> out(1, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = av.row(r);
    for (std::size_t c = 0; c < cols; ++c) out[c] += (row[c] - mu[c]) * (row[c] - mu[c]);
  }
  for (auto& v : out.data()) v /= T(rows);
  return a.tape->record("column_variance", std::move(out), {a.id},
                        [mu = std::move(mu)](Tape<T>& t, std::size_t s) {
                          const auto& g = t.grad(s);
                          const auto& x = t.value(t.input(s, 0));
                          with_input_grad(t, s, 0, [&](Tensor<T>& d) {
                            const T two_over_n = T(2) / T(x.rows());
                            for (std::size_t r = 0; r < x.rows(); ++r) {
                              auto xr = x.row(r);
                              auto dr = d.row(r);
                              for (std::size_t c = 0; c < xr.size(); ++c) {
                                dr[c] += g[c] * two_over_n * (xr[c] - mu[c]);
                              }
                            }
                          });
                        });
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> a, T eps) {
  const auto& av = a.value();
  Tensor<T> out = av;
  std::vector<T> norms(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    T ss = 0;
    for (T v : av.row(r)) ss += v * v;
    norms[r] = std::sqrt(ss);
    const T denom = std::max(norms[r], eps);
    for (auto& v : out.row(r)) v /= denom;
  }
  return a.tape->record(
      "l2_normalize_rows", std::move(out), {a.id}, [eps, norms = std::move(norms)](Tape<T>& t, std::size_t s) {
        const auto& g = t.grad(s);
        const auto& y = t.value(s);
        with_input_grad(t, s, 0, [&](Tensor<T>& d) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            auto yr = y.row(r);
            auto gr = g.row(r);
            auto dr = d.row(r);
            if (norms[r] > eps) {
              T dot = 0;
              for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
              for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += (gr[c] - yr[c] * dot) / norms[r];
            } else {
              for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += gr[c] / eps;
            }
          }
        });
      });
}

template <typename T>
Var<T> row_sum(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    T acc = 0;
    for (T v : av.row(r)) acc += v;
    out[r] = acc;
  }
  return a.tape->record("row_sum", std::move(out), {a.id}, [](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (std::size_t r = 0; r < d.rows(); ++r) {
        for (auto& v : d.row(r)) v += g[r];
      }
    });
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = 0;
  for (T v : a.value().data()) acc += v;
  return a.tape->record("sum", Tensor<T>::scalar(acc), {a.id}, [](Tape<T>& t, std::size_t s) {
    const T g = t.grad(s)[0];
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (auto& v : d.data()) v += g;
    });
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) fail(ErrorKind::kShape, "mean: empty tensor");
  T acc = 0;
  for (T v : a.value().data()) acc += v;
  return a.tape->record("mean", Tensor<T>::scalar(acc / T(n)), {a.id}, [n](Tape<T>& t, std::size_t s) {
    const T g = t.grad(s)[0] / T(n);
    with_input_grad(t, s, 0, [&](Tensor<T>& d) {
      for (auto& v : d.data()) v += g;
    });
  });
}

// ---- gradient check ----------------------------------------------------------

GradCheckResult finite_diff_check(const Objective& objective,
                                  std::span<Parameter<double>* const> params, double step) {
  auto evaluate = [&]() {
    Tape<double> tape;
    return objective(tape).value().item();
  };

  for (auto* p : params) p->zero_grad();
  double baseline = 0.0;
  {
    Tape<double> tape;
    Var<double> loss = objective(tape);
    baseline = loss.value().item();
    tape.backward(loss);
  }
  if (evaluate() != baseline) {
    fail(ErrorKind::kValidation, "finite_diff_check: objective is not deterministic");
  }

  GradCheckResult result;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double plus = evaluate();
      p->value[i] = saved - step;
      const double minus = evaluate();
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double analytic = p->grad[i];
      const double rel = std::abs(numeric - analytic) / std::max(1.0, std::abs(analytic));
      ++result.coordinates;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = p->name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

// ---- explicit instantiations ----------------------------------------------------

#define FIGROT_INSTANTIATE_AD(T)                                                  \
  template class Tape<T>;                                                         \
  template Var<T> matmul(Var<T>, Var<T>);                                         \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                      \
  template Var<T> add(Var<T>, Var<T>);                                            \
  template Var<T> sub(Var<T>, Var<T>);                                            \
  template Var<T> mul(Var<T>, Var<T>);                                            \
  template Var<T> add_row(Var<T>, Var<T>);                                        \
  template Var<T> mul_col(Var<T>, Var<T>);                                        \
  template Var<T> scale(Var<T>, T);                                               \
  template Var<T> add_scalar(Var<T>, T);                                          \
  template Var<T> concat_cols(std::span<const Var<T>>);                           \
  template Var<T> concat_rows(std::span<const Var<T>>);                           \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                   \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                   \
  template Var<T> logistic(Var<T>);                                               \
  template Var<T> gelu(Var<T>);                                                   \
  template Var<T> hinge(Var<T>);                                                  \
  template Var<T> softmax(Var<T>);                                                \
  template Var<T> log_softmax(Var<T>);                                            \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                          \
  template Var<T> column_mean(Var<T>);                                            \
  template Var<T> column_variance(Var<T>);                                        \
  template Var<T> l2_normalize_rows(Var<T>, T);                                   \
  template Var<T> row_sum(Var<T>);                                                \
  template Var<T> sum(Var<T>);                                                    \
  template Var<T> mean(Var<T>);

FIGROT_INSTANTIATE_AD(float)
FIGROT_INSTANTIATE_AD(double)

#undef FIGROT_INSTANTIATE_AD

}  // namespace figrot::ad
