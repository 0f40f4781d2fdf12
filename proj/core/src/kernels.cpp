#include "affetto/kernels.hpp"

#include <Eigen/Core>

namespace affetto::detail {

namespace {

template <typename T>
using MatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using MutMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k,
          bool trans_a, bool trans_b, bool accumulate) {
  MatMap<T> ma(a, trans_a ? k : m, trans_a ? m : k);
  MatMap<T> mb(b, trans_b ? n : k, trans_b ? k : n);
  MutMap<T> mc(c, m, n);
  auto assign = [&](const auto& product) {
    if (accumulate)
      mc.noalias() += product;
    else
      mc.noalias() = product;
  };
  if (!trans_a && !trans_b)
    assign(ma * mb);
  else if (!trans_a && trans_b)
    assign(ma * mb.transpose());
  else if (trans_a && !trans_b)
    assign(ma.transpose() * mb);
  else
    assign(ma.transpose() * mb.transpose());
}

template void gemm<float>(const float*, const float*, float*, int64_t, int64_t, int64_t,
                          bool, bool, bool);
template void gemm<double>(const double*, const double*, double*, int64_t, int64_t, int64_t,
                           bool, bool, bool);

}  // namespace affetto::detail
