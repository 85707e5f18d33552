#pragma once

// Dense and similarity kernels. Every kernel has a serial reference in
// kbd::kernels::serial and an OpenMP version in kbd::kernels::omp with the
// same signature. The OpenMP versions partition work so that each output
// element is written by exactly one thread, so results match the serial
// reference bit-for-bit.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace kbd {

using Real = double;

enum class Exec { serial, parallel };

namespace kernels {

/// Ids with multiplicities, e.g. history tokens collapsed to unique ids.
struct WeightedIds {
  std::vector<std::uint32_t> ids;
  std::vector<Real> weights;
};

/// Row-major matrix view over an embedding table.
struct TableView {
  const Real* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  const Real* row(std::size_t r) const { return data + r * cols; }
};

inline constexpr Real kCosineEps = 1e-8;

#define KBD_KERNEL_DECLS                                                             \
  /* y = W x */                                                                      \
  void gemv(const Real* w, std::size_t rows, std::size_t cols, const Real* x,        \
            Real* y);                                                                \
  /* gx += W^T g */                                                                  \
  void gemv_t_acc(const Real* w, std::size_t rows, std::size_t cols, const Real* g,  \
                  Real* gx);                                                         \
  /* gw += g x^T */                                                                  \
  void ger_acc(Real* gw, std::size_t rows, std::size_t cols, const Real* g,          \
               const Real* x);                                                       \
  /* scores[m] = sum_u w_u sum_{v in records[m]} cos(E[u], E[v]) */                  \
  std::vector<Real> record_scores(TableView table, const WeightedIds& history,       \
                                  std::span<const std::vector<std::uint32_t>> records); \
  /* Backward of record_scores: accumulates into grad (same shape as table). */      \
  void record_scores_backward(TableView table, const WeightedIds& history,           \
                              std::span<const std::vector<std::uint32_t>> records,   \
                              std::span<const Real> grad_scores, Real* grad);        \
  /* sum over pairs of cos(E[a], E[b]) */                                            \
  Real pair_cosine_sum(TableView table,                                              \
                       std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs); \
  /* Accumulates scale * d(pair_cosine_sum)/dE into grad. */                         \
  void pair_cosine_sum_backward(                                                     \
      TableView table, std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs, \
      Real scale, Real* grad);

namespace serial {
KBD_KERNEL_DECLS
}  // namespace serial

namespace omp {
KBD_KERNEL_DECLS
}  // namespace omp

#undef KBD_KERNEL_DECLS

// Dispatch helpers.
void gemv(Exec exec, const Real* w, std::size_t rows, std::size_t cols, const Real* x,
          Real* y);
void gemv_t_acc(Exec exec, const Real* w, std::size_t rows, std::size_t cols,
                const Real* g, Real* gx);
void ger_acc(Exec exec, Real* gw, std::size_t rows, std::size_t cols, const Real* g,
             const Real* x);
std::vector<Real> record_scores(Exec exec, TableView table, const WeightedIds& history,
                                std::span<const std::vector<std::uint32_t>> records);
void record_scores_backward(Exec exec, TableView table, const WeightedIds& history,
                            std::span<const std::vector<std::uint32_t>> records,
                            std::span<const Real> grad_scores, Real* grad);
Real pair_cosine_sum(Exec exec, TableView table,
                     std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs);
void pair_cosine_sum_backward(Exec exec, TableView table,
                              std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs,
                              Real scale, Real* grad);

/// eps-guarded cosine: a.b / ((|a|+eps)(|b|+eps)).
Real cosine(const Real* a, const Real* b, std::size_t n);

/// Adds d cos(a,b)/da * scale into ga and d cos(a,b)/db * scale into gb.
/// Either output may be null.
void cosine_grad_acc(const Real* a, const Real* b, std::size_t n, Real scale, Real* ga,
                     Real* gb);

}  // namespace kernels
}  // namespace kbd
