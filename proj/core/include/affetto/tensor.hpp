#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace affetto {

// Dense row-major tensor. 32-bit floats carry training; the 64-bit
// instantiation exists for finite-difference gradient checks.
template <typename T>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<T> v;

  TensorT() = default;
  explicit TensorT(std::vector<int64_t> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  TensorT(std::vector<int64_t> s, std::vector<T> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != numel_of(shape))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str());
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  // Product of all dimensions but the last.
  int64_t rows() const { return shape.empty() ? 1 : numel() / std::max<int64_t>(1, last_dim()); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
  }

  static TensorT zeros(std::vector<int64_t> s) { return TensorT(std::move(s)); }

  static TensorT full(std::vector<int64_t> s, T value) {
    TensorT t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  static TensorT randn(std::vector<int64_t> s, T stddev, std::mt19937_64& rng) {
    TensorT t(std::move(s));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (T& x : t.v) x = static_cast<T>(dist(rng));
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace affetto
