#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

namespace ac {

// Single-threaded float32 matrix kernels. One tuned NN kernel (4-row axpy
// form, which the compiler vectorizes without reassociating sums); the
// transposed variants materialize the transpose and reuse it. All loops have
// a fixed iteration order, so results are bit-reproducible run to run.

inline void transpose_rm(const float* src, float* dst, int64_t rows, int64_t cols) {
  constexpr int64_t BL = 32;
  for (int64_t i0 = 0; i0 < rows; i0 += BL)
    for (int64_t j0 = 0; j0 < cols; j0 += BL) {
      const int64_t i1 = std::min(i0 + BL, rows), j1 = std::min(j0 + BL, cols);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

// C (+)= A(MxK) * B(KxN)
inline void gemm_nn(const float* A, const float* B, float* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate = false) {
  if (!accumulate) std::memset(C, 0, sizeof(float) * size_t(M * N));
  if (N >= 32) {
    int64_t i = 0;
    for (; i + 4 <= M; i += 4) {
      float* c0 = C + i * N;
      float* c1 = c0 + N;
      float* c2 = c1 + N;
      float* c3 = c2 + N;
      const float* a0 = A + i * K;
      const float* a1 = a0 + K;
      const float* a2 = a1 + K;
      const float* a3 = a2 + K;
      for (int64_t k = 0; k < K; ++k) {
        const float x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
        const float* bk = B + k * N;
        for (int64_t j = 0; j < N; ++j) {
          const float b = bk[j];
          c0[j] += x0 * b;
          c1[j] += x1 * b;
          c2[j] += x2 * b;
          c3[j] += x3 * b;
        }
      }
    }
    for (; i < M; ++i) {
      float* ci = C + i * N;
      const float* ai = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const float a = ai[k];
        const float* bk = B + k * N;
        for (int64_t j = 0; j < N; ++j) ci[j] += a * bk[j];
      }
    }
  } else {
    // Narrow C rows: the unrolled form loses to plain axpy here.
    for (int64_t i = 0; i < M; ++i) {
      float* ci = C + i * N;
      const float* ai = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const float a = ai[k];
        const float* bk = B + k * N;
        for (int64_t j = 0; j < N; ++j) ci[j] += a * bk[j];
      }
    }
  }
}

// C (+)= A(MxK) * B(NxK)^T
inline void gemm_nt(const float* A, const float* B, float* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate = false) {
  std::vector<float> bt(size_t(K * N));
  transpose_rm(B, bt.data(), N, K);
  gemm_nn(A, bt.data(), C, M, K, N, accumulate);
}

// C (+)= A(KxM)^T * B(KxN)
inline void gemm_tn(const float* A, const float* B, float* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate = false) {
  std::vector<float> at(size_t(K * M));
  transpose_rm(A, at.data(), K, M);
  gemm_nn(at.data(), B, C, M, K, N, accumulate);
}

}  // namespace ac
