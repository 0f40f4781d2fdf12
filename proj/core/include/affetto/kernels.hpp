#pragma once

#include <cstdint>

namespace affetto::detail {

// C[m,n] (+)= op(A) * op(B) on row-major contiguous buffers, where
// op(A) is A[m,k] or, when trans_a, A stored as [k,m] and used transposed;
// likewise op(B) is B[k,n] or, when trans_b, B stored as [n,k].
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k,
          bool trans_a, bool trans_b, bool accumulate);

}  // namespace affetto::detail
