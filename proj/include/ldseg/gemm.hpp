#pragma once

#include <cstddef>

namespace ldseg {

// Small row-major matrix kernels. Four-row blocking amortizes the streaming
// of B; each output element is accumulated in a fixed order so results are
// reproducible bit-for-bit run to run.

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename S>
void gemm_nn(int M, int N, int K, const S* A, const S* B, S* C, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(M) * N; ++i) C[i] = S(0);
  }
  int i = 0;
  for (; i + 4 <= M; i += 4) {
    const S* a0 = A + static_cast<std::size_t>(i + 0) * K;
    const S* a1 = A + static_cast<std::size_t>(i + 1) * K;
    const S* a2 = A + static_cast<std::size_t>(i + 2) * K;
    const S* a3 = A + static_cast<std::size_t>(i + 3) * K;
    S* c0 = C + static_cast<std::size_t>(i + 0) * N;
    S* c1 = C + static_cast<std::size_t>(i + 1) * N;
    S* c2 = C + static_cast<std::size_t>(i + 2) * N;
    S* c3 = C + static_cast<std::size_t>(i + 3) * N;
    for (int k = 0; k < K; ++k) {
      const S v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      const S* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) {
        const S bv = b[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < M; ++i) {
    const S* a = A + static_cast<std::size_t>(i) * K;
    S* c = C + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const S av = a[k];
      const S* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T  (row-dot-row)
template <typename S>
void gemm_nt(int M, int N, int K, const S* A, const S* B, S* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    const S* a = A + static_cast<std::size_t>(i) * K;
    S* c = C + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const S* b = B + static_cast<std::size_t>(j) * K;
      S acc = S(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] = accumulate ? c[j] + acc : acc;
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]  (outer-product accumulation)
template <typename S>
void gemm_tn(int M, int N, int K, const S* A, const S* B, S* C, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(M) * N; ++i) C[i] = S(0);
  }
  for (int k = 0; k < K; ++k) {
    const S* a = A + static_cast<std::size_t>(k) * M;
    const S* b = B + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const S av = a[i];
      if (av == S(0)) continue;
      S* c = C + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace ldseg
