#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "affetto/kernels.hpp"
#include "affetto/tensor.hpp"

namespace affetto {

namespace detail {
inline thread_local int no_grad_depth = 0;
}

// Disables graph recording in scope; forwards run value-only.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
struct NodeT {
  TensorT<T> value;
  TensorT<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  // Receives this node's (grad, value); accumulates into parent grads.
  std::function<void(const TensorT<T>&, const TensorT<T>&)> backward_fn;

  TensorT<T>& ensure_grad() {
    if (grad.v.empty()) grad = TensorT<T>::zeros(value.shape);
    return grad;
  }
};

template <typename T>
class VarT {
 public:
  VarT() : n_(std::make_shared<NodeT<T>>()) {}
  explicit VarT(TensorT<T> value, bool requires_grad = false)
      : n_(std::make_shared<NodeT<T>>()) {
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
  }
  explicit VarT(std::shared_ptr<NodeT<T>> n) : n_(std::move(n)) {}

  const TensorT<T>& val() const { return n_->value; }
  TensorT<T>& mutable_val() { return n_->value; }
  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return !n_->grad.v.empty(); }
  const TensorT<T>& grad() const { return n_->grad; }
  TensorT<T>& ensure_grad() { return n_->ensure_grad(); }
  void clear_grad() { n_->grad = TensorT<T>(); }
  const std::shared_ptr<NodeT<T>>& node() const { return n_; }

 private:
  std::shared_ptr<NodeT<T>> n_;
};

using Var = VarT<float>;
using Var64 = VarT<double>;

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const std::string& a,
                                     const std::string& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + a + " vs " + b);
}

template <typename T>
VarT<T> make_op(const char* op, TensorT<T> value, std::vector<VarT<T>> parents,
                std::function<void(const TensorT<T>&, const TensorT<T>&)> backward_fn) {
  auto node = std::make_shared<NodeT<T>>();
  node->value = std::move(value);
  node->op = op;
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& p : parents) need = need || p.requires_grad();
  }
  node->requires_grad = need;
  if (need) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return VarT<T>(node);
}

}  // namespace detail

// ---- core op set -----------------------------------------------------------

// Batched matrix product over rank-2 or rank-3 operands with matching leading
// dims. With trans_b, b holds [.., n, k] and is used transposed.
template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b, bool trans_b = false) {
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.rank() < 2 || bv.rank() != av.rank() || av.rank() > 3)
    detail::shape_error("matmul", av.shape_str(), bv.shape_str());
  int64_t batch = av.rank() == 3 ? av.dim(0) : 1;
  if (av.rank() == 3 && bv.dim(0) != batch)
    detail::shape_error("matmul", av.shape_str(), bv.shape_str());
  int64_t m = av.dim(av.rank() - 2), k = av.dim(av.rank() - 1);
  int64_t bk = trans_b ? bv.dim(bv.rank() - 1) : bv.dim(bv.rank() - 2);
  int64_t n = trans_b ? bv.dim(bv.rank() - 2) : bv.dim(bv.rank() - 1);
  if (bk != k) detail::shape_error("matmul", av.shape_str(), bv.shape_str());

  std::vector<int64_t> out_shape = av.shape;
  out_shape.back() = n;
  TensorT<T> out(out_shape);
  for (int64_t i = 0; i < batch; ++i)
    detail::gemm(av.v.data() + i * m * k, bv.v.data() + i * n * k,
                 out.v.data() + i * m * n, m, n, k, false, trans_b, false);

  return detail::make_op<T>(
      "matmul", std::move(out), {a, b},
      [a, b, trans_b, batch, m, n, k](const TensorT<T>& g, const TensorT<T>&) {
        if (a.requires_grad()) {
          auto& da = const_cast<VarT<T>&>(a).ensure_grad();
          for (int64_t i = 0; i < batch; ++i) {
            // dA = dC * op(B)^T
            detail::gemm(g.v.data() + i * m * n, b.val().v.data() + i * n * k,
                         da.v.data() + i * m * k, m, k, n, false, !trans_b, true);
          }
        }
        if (b.requires_grad()) {
          auto& db = const_cast<VarT<T>&>(b).ensure_grad();
          for (int64_t i = 0; i < batch; ++i) {
            if (trans_b) {
              // dB[n,k] = dC^T[n,m] * A[m,k]  with dC stored [m,n]
              detail::gemm(g.v.data() + i * m * n, a.val().v.data() + i * m * k,
                           db.v.data() + i * n * k, n, k, m, true, false, true);
            } else {
              // dB[k,n] = A^T[k,m] * dC[m,n]  with A stored [m,k]
              detail::gemm(a.val().v.data() + i * m * k, g.v.data() + i * m * n,
                           db.v.data() + i * k * n, k, n, m, true, false, true);
            }
          }
        }
      });
}

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
  if (!a.val().same_shape(b.val()))
    detail::shape_error("add", a.val().shape_str(), b.val().shape_str());
  TensorT<T> out = a.val();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.val().v[i];
  return detail::make_op<T>("add", std::move(out), {a, b},
                            [a, b](const TensorT<T>& g, const TensorT<T>&) {
                              for (const VarT<T>* p : {&a, &b}) {
                                if (!p->requires_grad()) continue;
                                auto& d = const_cast<VarT<T>*>(p)->ensure_grad();
                                for (size_t i = 0; i < g.v.size(); ++i) d.v[i] += g.v[i];
                              }
                            });
}

// x[..., n] + bias[n], broadcast over leading dims.
template <typename T>
VarT<T> add_bias(const VarT<T>& x, const VarT<T>& bias) {
  int64_t n = x.val().last_dim();
  if (bias.val().rank() != 1 || bias.val().dim(0) != n)
    detail::shape_error("add_bias", x.val().shape_str(), bias.val().shape_str());
  int64_t rows = x.val().rows();
  TensorT<T> out = x.val();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < n; ++c) out.v[r * n + c] += bias.val().v[c];
  return detail::make_op<T>(
      "add_bias", std::move(out), {x, bias},
      [x, bias, rows, n](const TensorT<T>& g, const TensorT<T>&) {
        if (x.requires_grad()) {
          auto& d = const_cast<VarT<T>&>(x).ensure_grad();
          for (size_t i = 0; i < g.v.size(); ++i) d.v[i] += g.v[i];
        }
        if (bias.requires_grad()) {
          auto& d = const_cast<VarT<T>&>(bias).ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < n; ++c) d.v[c] += g.v[r * n + c];
        }
      });
}

template <typename T>
VarT<T> scale(const VarT<T>& x, double c) {
  TensorT<T> out = x.val();
  for (T& v : out.v) v = static_cast<T>(v * c);
  return detail::make_op<T>("scale", std::move(out), {x},
                            [x, c](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& d = const_cast<VarT<T>&>(x).ensure_grad();
                              for (size_t i = 0; i < g.v.size(); ++i)
                                d.v[i] += static_cast<T>(g.v[i] * c);
                            });
}

template <typename T>
VarT<T> concat_rows(const VarT<T>& a, const VarT<T>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().dim(1) != b.val().dim(1))
    detail::shape_error("concat_rows", a.val().shape_str(), b.val().shape_str());
  int64_t la = a.val().dim(0), lb = b.val().dim(0), d = a.val().dim(1);
  TensorT<T> out({la + lb, d});
  std::copy(a.val().v.begin(), a.val().v.end(), out.v.begin());
  std::copy(b.val().v.begin(), b.val().v.end(), out.v.begin() + la * d);
  return detail::make_op<T>(
      "concat_rows", std::move(out), {a, b},
      [a, b, la, lb, d](const TensorT<T>& g, const TensorT<T>&) {
        if (a.requires_grad()) {
          auto& da = const_cast<VarT<T>&>(a).ensure_grad();
          for (int64_t i = 0; i < la * d; ++i) da.v[i] += g.v[i];
        }
        if (b.requires_grad()) {
          auto& db = const_cast<VarT<T>&>(b).ensure_grad();
          for (int64_t i = 0; i < lb * d; ++i) db.v[i] += g.v[la * d + i];
        }
      });
}

template <typename T>
VarT<T> concat_cols(const VarT<T>& a, const VarT<T>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().dim(0) != b.val().dim(0))
    detail::shape_error("concat_cols", a.val().shape_str(), b.val().shape_str());
  int64_t l = a.val().dim(0), da = a.val().dim(1), db = b.val().dim(1);
  TensorT<T> out({l, da + db});
  for (int64_t r = 0; r < l; ++r) {
    std::copy_n(a.val().v.begin() + r * da, da, out.v.begin() + r * (da + db));
    std::copy_n(b.val().v.begin() + r * db, db, out.v.begin() + r * (da + db) + da);
  }
  return detail::make_op<T>(
      "concat_cols", std::move(out), {a, b},
      [a, b, l, da, db](const TensorT<T>& g, const TensorT<T>&) {
        if (a.requires_grad()) {
          auto& d = const_cast<VarT<T>&>(a).ensure_grad();
          for (int64_t r = 0; r < l; ++r)
            for (int64_t c = 0; c < da; ++c) d.v[r * da + c] += g.v[r * (da + db) + c];
        }
        if (b.requires_grad()) {
          auto& d = const_cast<VarT<T>&>(b).ensure_grad();
          for (int64_t r = 0; r < l; ++r)
            for (int64_t c = 0; c < db; ++c) d.v[r * db + c] += g.v[r * (da + db) + da + c];
        }
      });
}

template <typename T>
VarT<T> slice_rows(const VarT<T>& x, int64_t start, int64_t len) {
  if (x.val().rank() != 2 || start < 0 || start + len > x.val().dim(0))
    throw std::invalid_argument("slice_rows: window [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") outside " +
                                x.val().shape_str());
  int64_t d = x.val().dim(1);
  TensorT<T> out({len, d});
  std::copy_n(x.val().v.begin() + start * d, len * d, out.v.begin());
  return detail::make_op<T>("slice_rows", std::move(out), {x},
                            [x, start, len, d](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (int64_t i = 0; i < len * d; ++i)
                                dx.v[start * d + i] += g.v[i];
                            });
}

template <typename T>
VarT<T> slice_cols(const VarT<T>& x, int64_t start, int64_t len) {
  if (x.val().rank() != 2 || start < 0 || start + len > x.val().dim(1))
    throw std::invalid_argument("slice_cols: window [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") outside " +
                                x.val().shape_str());
  int64_t l = x.val().dim(0), d = x.val().dim(1);
  TensorT<T> out({l, len});
  for (int64_t r = 0; r < l; ++r)
    std::copy_n(x.val().v.begin() + r * d + start, len, out.v.begin() + r * len);
  return detail::make_op<T>(
      "slice_cols", std::move(out), {x},
      [x, start, len, l, d](const TensorT<T>& g, const TensorT<T>&) {
        if (!x.requires_grad()) return;
        auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
        for (int64_t r = 0; r < l; ++r)
          for (int64_t c = 0; c < len; ++c) dx.v[r * d + start + c] += g.v[r * len + c];
      });
}

// [1, d] -> [rows, d] broadcast.
template <typename T>
VarT<T> repeat_rows(const VarT<T>& x, int64_t rows) {
  if (x.val().rank() != 2 || x.val().dim(0) != 1)
    throw std::invalid_argument("repeat_rows: expected [1,d], got " + x.val().shape_str());
  int64_t d = x.val().dim(1);
  TensorT<T> out({rows, d});
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(x.val().v.begin(), d, out.v.begin() + r * d);
  return detail::make_op<T>("repeat_rows", std::move(out), {x},
                            [x, rows, d](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                for (int64_t c = 0; c < d; ++c) dx.v[c] += g.v[r * d + c];
                            });
}

template <typename T>
VarT<T> embedding(const VarT<T>& table, const std::vector<int>& ids) {
  if (table.val().rank() != 2)
    throw std::invalid_argument("embedding: table must be rank 2, got " +
                                table.val().shape_str());
  int64_t v_size = table.val().dim(0), d = table.val().dim(1);
  for (int id : ids)
    if (id < 0 || id >= v_size)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table " +
                              table.val().shape_str());
  TensorT<T> out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.val().v.begin() + static_cast<int64_t>(ids[i]) * d, d,
                out.v.begin() + static_cast<int64_t>(i) * d);
  return detail::make_op<T>("embedding", std::move(out), {table},
                            [table, ids, d](const TensorT<T>& g, const TensorT<T>&) {
                              if (!table.requires_grad()) return;
                              auto& dt = const_cast<VarT<T>&>(table).ensure_grad();
                              for (size_t i = 0; i < ids.size(); ++i)
                                for (int64_t c = 0; c < d; ++c)
                                  dt.v[static_cast<int64_t>(ids[i]) * d + c] +=
                                      g.v[static_cast<int64_t>(i) * d + c];
                            });
}

template <typename T>
VarT<T> softmax_lastdim(const VarT<T>& x) {
  int64_t rows = x.val().rows(), n = x.val().last_dim();
  TensorT<T> out = x.val();
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out.v.data() + r * n;
    T m = row[0];
    for (int64_t c = 1; c < n; ++c) m = std::max(m, row[c]);
    T sum = 0;
    for (int64_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - m);
      sum += row[c];
    }
    for (int64_t c = 0; c < n; ++c) row[c] /= sum;
  }
  return detail::make_op<T>(
      "softmax", std::move(out), {x},
      [x, rows, n](const TensorT<T>& g, const TensorT<T>& y) {
        if (!x.requires_grad()) return;
        auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y.v.data() + r * n;
          const T* gr = g.v.data() + r * n;
          T dot = 0;
          for (int64_t c = 0; c < n; ++c) dot += gr[c] * yr[c];
          for (int64_t c = 0; c < n; ++c) dx.v[r * n + c] += yr[c] * (gr[c] - dot);
        }
      });
}

template <typename T>
VarT<T> layer_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                   double eps = 1e-5) {
  int64_t n = x.val().last_dim();
  if (gamma.val().rank() != 1 || gamma.val().dim(0) != n || !gamma.val().same_shape(beta.val()))
    detail::shape_error("layer_norm", x.val().shape_str(), gamma.val().shape_str());
  int64_t rows = x.val().rows();
  TensorT<T> out(x.val().shape);
  auto xhat = std::make_shared<std::vector<T>>(x.val().v.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.val().v.data() + r * n;
    T mu = 0;
    for (int64_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<T>(n);
    T var = 0;
    for (int64_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(n);
    T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
    (*inv_std)[r] = inv;
    for (int64_t c = 0; c < n; ++c) {
      T xh = (xr[c] - mu) * inv;
      (*xhat)[r * n + c] = xh;
      out.v[r * n + c] = gamma.val().v[c] * xh + beta.val().v[c];
    }
  }
  return detail::make_op<T>(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, rows, n](const TensorT<T>& g, const TensorT<T>&) {
        if (gamma.requires_grad()) {
          auto& dg = const_cast<VarT<T>&>(gamma).ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < n; ++c) dg.v[c] += g.v[r * n + c] * (*xhat)[r * n + c];
        }
        if (beta.requires_grad()) {
          auto& db = const_cast<VarT<T>&>(beta).ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < n; ++c) db.v[c] += g.v[r * n + c];
        }
        if (x.requires_grad()) {
          auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            T mean_dxh = 0, mean_dxh_xh = 0;
            for (int64_t c = 0; c < n; ++c) {
              T dxh = g.v[r * n + c] * gamma.val().v[c];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * (*xhat)[r * n + c];
            }
            mean_dxh /= static_cast<T>(n);
            mean_dxh_xh /= static_cast<T>(n);
            for (int64_t c = 0; c < n; ++c) {
              T dxh = g.v[r * n + c] * gamma.val().v[c];
              dx.v[r * n + c] +=
                  (*inv_std)[r] * (dxh - mean_dxh - (*xhat)[r * n + c] * mean_dxh_xh);
            }
          }
        }
      });
}

template <typename T>
VarT<T> relu(const VarT<T>& x) {
  TensorT<T> out = x.val();
  for (T& v : out.v) v = v > 0 ? v : T(0);
  return detail::make_op<T>("relu", std::move(out), {x},
                            [x](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (size_t i = 0; i < g.v.size(); ++i)
                                if (x.val().v[i] > 0) dx.v[i] += g.v[i];
                            });
}

// Inverted dropout; identity when not training or p == 0. The mask is drawn
// from its own generator so a fixed seed reproduces the op exactly.
template <typename T>
VarT<T> dropout(const VarT<T>& x, double p, uint64_t seed, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto mask = std::make_shared<std::vector<T>>(x.val().v.size());
  T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  TensorT<T> out = x.val();
  for (size_t i = 0; i < out.v.size(); ++i) {
    T m = uni(rng) < 1.0 - p ? keep_scale : T(0);
    (*mask)[i] = m;
    out.v[i] *= m;
  }
  return detail::make_op<T>("dropout", std::move(out), {x},
                            [x, mask](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (size_t i = 0; i < g.v.size(); ++i)
                                dx.v[i] += g.v[i] * (*mask)[i];
                            });
}

inline constexpr int kIgnoreIndex = -1;

// Mean negative log-likelihood over rows whose target is not ignore_index.
// Ignored rows contribute exactly zero gradient.
template <typename T>
VarT<T> cross_entropy(const VarT<T>& logits, const std::vector<int>& targets,
                      int ignore_index = kIgnoreIndex) {
  if (logits.val().rank() != 2 ||
      logits.val().dim(0) != static_cast<int64_t>(targets.size()))
    throw std::invalid_argument("cross_entropy: logits " + logits.val().shape_str() +
                                " vs " + std::to_string(targets.size()) + " targets");
  int64_t rows = logits.val().dim(0), n = logits.val().dim(1);
  auto probs = std::make_shared<std::vector<T>>(logits.val().v.size());
  double loss = 0.0;
  int64_t n_valid = 0;
  for (int64_t r = 0; r < rows; ++r) {
    int t = targets[static_cast<size_t>(r)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= n)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " outside vocab of " + std::to_string(n));
    const T* row = logits.val().v.data() + r * n;
    T m = row[0];
    for (int64_t c = 1; c < n; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < n; ++c) sum += std::exp(static_cast<double>(row[c] - m));
    for (int64_t c = 0; c < n; ++c)
      (*probs)[r * n + c] = static_cast<T>(std::exp(static_cast<double>(row[c] - m)) / sum);
    loss -= static_cast<double>(row[t] - m) - std::log(sum);
    ++n_valid;
  }
  if (n_valid > 0) loss /= static_cast<double>(n_valid);
  TensorT<T> out({1});
  out.v[0] = static_cast<T>(loss);
  return detail::make_op<T>(
      "cross_entropy", std::move(out), {logits},
      [logits, targets, probs, rows, n, n_valid, ignore_index](const TensorT<T>& g,
                                                               const TensorT<T>&) {
        if (!logits.requires_grad() || n_valid == 0) return;
        auto& dx = const_cast<VarT<T>&>(logits).ensure_grad();
        T w = g.v[0] / static_cast<T>(n_valid);
        for (int64_t r = 0; r < rows; ++r) {
          int t = targets[static_cast<size_t>(r)];
          if (t == ignore_index) continue;
          for (int64_t c = 0; c < n; ++c) {
            T p = (*probs)[r * n + c];
            dx.v[r * n + c] += w * (p - (c == t ? T(1) : T(0)));
          }
        }
      });
}

template <typename T>
VarT<T> transpose2d(const VarT<T>& x) {
  if (x.val().rank() != 2)
    throw std::invalid_argument("transpose2d: expected rank 2, got " + x.val().shape_str());
  int64_t m = x.val().dim(0), n = x.val().dim(1);
  TensorT<T> out({n, m});
  for (int64_t r = 0; r < m; ++r)
    for (int64_t c = 0; c < n; ++c) out.v[c * m + r] = x.val().v[r * n + c];
  return detail::make_op<T>("transpose2d", std::move(out), {x},
                            [x, m, n](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (int64_t r = 0; r < m; ++r)
                                for (int64_t c = 0; c < n; ++c)
                                  dx.v[r * n + c] += g.v[c * m + r];
                            });
}

// Fills positions where mask is true. x is [r,c] or [batch,r,c]; the [r,c]
// mask broadcasts over the batch. Filled positions pass no gradient.
template <typename T>
VarT<T> masked_fill(const VarT<T>& x, std::shared_ptr<const std::vector<uint8_t>> mask,
                    T value) {
  int64_t rc = x.val().rank() >= 2
                   ? x.val().dim(x.val().rank() - 2) * x.val().dim(x.val().rank() - 1)
                   : x.val().numel();
  if (static_cast<int64_t>(mask->size()) != rc)
    throw std::invalid_argument("masked_fill: mask size " + std::to_string(mask->size()) +
                                " vs trailing plane of " + x.val().shape_str());
  int64_t batch = x.val().numel() / rc;
  TensorT<T> out = x.val();
  for (int64_t i = 0; i < batch; ++i)
    for (int64_t j = 0; j < rc; ++j)
      if ((*mask)[static_cast<size_t>(j)]) out.v[i * rc + j] = value;
  return detail::make_op<T>("masked_fill", std::move(out), {x},
                            [x, mask, batch, rc](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (int64_t i = 0; i < batch; ++i)
                                for (int64_t j = 0; j < rc; ++j)
                                  if (!(*mask)[static_cast<size_t>(j)])
                                    dx.v[i * rc + j] += g.v[i * rc + j];
                            });
}

// [L, H*dh] -> [H, L, dh]
template <typename T>
VarT<T> split_heads(const VarT<T>& x, int64_t n_heads) {
  if (x.val().rank() != 2 || x.val().dim(1) % n_heads != 0)
    throw std::invalid_argument("split_heads: " + x.val().shape_str() + " into " +
                                std::to_string(n_heads) + " heads");
  int64_t l = x.val().dim(0), dh = x.val().dim(1) / n_heads;
  TensorT<T> out({n_heads, l, dh});
  for (int64_t h = 0; h < n_heads; ++h)
    for (int64_t r = 0; r < l; ++r)
      std::copy_n(x.val().v.begin() + r * n_heads * dh + h * dh, dh,
                  out.v.begin() + (h * l + r) * dh);
  return detail::make_op<T>(
      "split_heads", std::move(out), {x},
      [x, n_heads, l, dh](const TensorT<T>& g, const TensorT<T>&) {
        if (!x.requires_grad()) return;
        auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
        for (int64_t h = 0; h < n_heads; ++h)
          for (int64_t r = 0; r < l; ++r)
            for (int64_t c = 0; c < dh; ++c)
              dx.v[r * n_heads * dh + h * dh + c] += g.v[(h * l + r) * dh + c];
      });
}

// [H, L, dh] -> [L, H*dh]
template <typename T>
VarT<T> merge_heads(const VarT<T>& x) {
  if (x.val().rank() != 3)
    throw std::invalid_argument("merge_heads: expected rank 3, got " + x.val().shape_str());
  int64_t h_n = x.val().dim(0), l = x.val().dim(1), dh = x.val().dim(2);
  TensorT<T> out({l, h_n * dh});
  for (int64_t h = 0; h < h_n; ++h)
    for (int64_t r = 0; r < l; ++r)
      std::copy_n(x.val().v.begin() + (h * l + r) * dh, dh,
                  out.v.begin() + r * h_n * dh + h * dh);
  return detail::make_op<T>(
      "merge_heads", std::move(out), {x},
      [x, h_n, l, dh](const TensorT<T>& g, const TensorT<T>&) {
        if (!x.requires_grad()) return;
        auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
        for (int64_t h = 0; h < h_n; ++h)
          for (int64_t r = 0; r < l; ++r)
            for (int64_t c = 0; c < dh; ++c)
              dx.v[(h * l + r) * dh + c] += g.v[r * h_n * dh + h * dh + c];
      });
}

// The music-transformer skew: per head, pad one column on the left, reshape
// [L, L+1] -> [L+1, L] and drop the first row. Sends entry [i, c] of the
// input to [i, j] with c = L + j - i - 1, so row i, column j <= i of the
// result holds q_i . rel[i - j]. Entries above the diagonal are junk and get
// masked downstream.
template <typename T>
VarT<T> skew_rel(const VarT<T>& x) {
  if (x.val().rank() != 3 || x.val().dim(1) != x.val().dim(2))
    throw std::invalid_argument("skew_rel: expected [H,L,L], got " + x.val().shape_str());
  int64_t heads = x.val().dim(0), l = x.val().dim(1);
  TensorT<T> out(x.val().shape);
  for (int64_t h = 0; h < heads; ++h) {
    const T* in = x.val().v.data() + h * l * l;
    T* o = out.v.data() + h * l * l;
    for (int64_t r = 0; r < l; ++r) {
      for (int64_t c = 0; c < l; ++c) {
        int64_t p = (r + 1) * l + c;
        int64_t pr = p / (l + 1), pc = p % (l + 1);
        o[r * l + c] = pc == 0 ? T(0) : in[pr * l + pc - 1];
      }
    }
  }
  return detail::make_op<T>("skew_rel", std::move(out), {x},
                            [x, heads, l](const TensorT<T>& g, const TensorT<T>&) {
                              if (!x.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
                              for (int64_t h = 0; h < heads; ++h) {
                                const T* go = g.v.data() + h * l * l;
                                T* d = dx.v.data() + h * l * l;
                                for (int64_t r = 0; r < l; ++r) {
                                  for (int64_t c = 0; c < l; ++c) {
                                    int64_t p = (r + 1) * l + c;
                                    int64_t pr = p / (l + 1), pc = p % (l + 1);
                                    if (pc != 0) d[pr * l + pc - 1] += go[r * l + c];
                                  }
                                }
                              }
                            });
}

// Mean over rows flagged in keep -> [1, d]. At least one row must be kept.
template <typename T>
VarT<T> masked_mean_rows(const VarT<T>& x, std::shared_ptr<const std::vector<uint8_t>> keep) {
  if (x.val().rank() != 2 || keep->size() != static_cast<size_t>(x.val().dim(0)))
    throw std::invalid_argument("masked_mean_rows: keep size " +
                                std::to_string(keep->size()) + " vs " + x.val().shape_str());
  int64_t l = x.val().dim(0), d = x.val().dim(1);
  int64_t kept = 0;
  for (uint8_t k : *keep) kept += k ? 1 : 0;
  if (kept == 0) throw std::invalid_argument("masked_mean_rows: no rows kept");
  TensorT<T> out({1, d});
  for (int64_t r = 0; r < l; ++r) {
    if (!(*keep)[static_cast<size_t>(r)]) continue;
    for (int64_t c = 0; c < d; ++c) out.v[c] += x.val().v[r * d + c];
  }
  for (int64_t c = 0; c < d; ++c) out.v[c] /= static_cast<T>(kept);
  return detail::make_op<T>(
      "masked_mean_rows", std::move(out), {x},
      [x, keep, l, d, kept](const TensorT<T>& g, const TensorT<T>&) {
        if (!x.requires_grad()) return;
        auto& dx = const_cast<VarT<T>&>(x).ensure_grad();
        for (int64_t r = 0; r < l; ++r) {
          if (!(*keep)[static_cast<size_t>(r)]) continue;
          for (int64_t c = 0; c < d; ++c) dx.v[r * d + c] += g.v[c] / static_cast<T>(kept);
        }
      });
}

// Mean squared error against a constant target -> [1].
template <typename T>
VarT<T> mse_loss(const VarT<T>& pred, const TensorT<T>& target) {
  if (!pred.val().same_shape(target))
    detail::shape_error("mse_loss", pred.val().shape_str(), target.shape_str());
  double sum = 0.0;
  for (size_t i = 0; i < target.v.size(); ++i) {
    double diff = static_cast<double>(pred.val().v[i]) - static_cast<double>(target.v[i]);
    sum += diff * diff;
  }
  int64_t n = pred.val().numel();
  TensorT<T> out({1});
  out.v[0] = static_cast<T>(sum / static_cast<double>(n));
  auto tgt = std::make_shared<TensorT<T>>(target);
  return detail::make_op<T>("mse_loss", std::move(out), {pred},
                            [pred, tgt, n](const TensorT<T>& g, const TensorT<T>&) {
                              if (!pred.requires_grad()) return;
                              auto& dx = const_cast<VarT<T>&>(pred).ensure_grad();
                              T w = g.v[0] * T(2) / static_cast<T>(n);
                              for (size_t i = 0; i < dx.v.size(); ++i)
                                dx.v[i] += w * (pred.val().v[i] - tgt->v[i]);
                            });
}

// ---- backward driver -------------------------------------------------------

template <typename T>
void backward(const VarT<T>& loss) {
  if (loss.val().numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                loss.val().shape_str());
  if (!loss.requires_grad()) return;

  // Post-order DFS over parents, emitting reverse topological order.
  std::vector<std::shared_ptr<NodeT<T>>> order;
  std::unordered_set<const NodeT<T>*> seen;
  std::vector<std::pair<std::shared_ptr<NodeT<T>>, size_t>> stack;
  stack.push_back({loss.node(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && !seen.count(parent.get())) {
        seen.insert(parent.get());
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad().v[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& node = *it;
    if (node->backward_fn) node->backward_fn(node->ensure_grad(), node->value);
  }
}

}  // namespace affetto
