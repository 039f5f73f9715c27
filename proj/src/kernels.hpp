#pragma once

#include <cstddef>

namespace circuitscope::kernels {

// C[M,N] = A[M,K] * B[K,N], all row-major. C is overwritten.
inline void matmul(const float* A, const float* B, float* C, std::size_t M, std::size_t K,
                   std::size_t N) {
  for (std::size_t i = 0; i < M * N; ++i) C[i] = 0.0f;
  for (std::size_t i = 0; i < M; ++i) {
    float* c = C + i * N;
    const float* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const float aik = a[k];
      if (aik == 0.0f) continue;
      const float* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

inline void add_bias(float* C, const float* bias, std::size_t M, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += bias[j];
}

}  // namespace circuitscope::kernels
