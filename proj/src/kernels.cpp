#include "kbdistill/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace kbd::kernels {

Real cosine(const Real* a, const Real* b, std::size_t n) {
  Real dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / ((std::sqrt(na) + kCosineEps) * (std::sqrt(nb) + kCosineEps));
}

void cosine_grad_acc(const Real* a, const Real* b, std::size_t n, Real scale, Real* ga,
                     Real* gb) {
  Real dot = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    sa += a[i] * a[i];
    sb += b[i] * b[i];
  }
  const Real na = std::sqrt(sa), nb = std::sqrt(sb);
  const Real da = na + kCosineEps, db = nb + kCosineEps;
  const Real inv = scale / (da * db);
  // d/da [a.b / (da db)] = b/(da db) - a.b/(da^2 db) * a/|a|
  const Real ca = na > 0.0 ? scale * dot / (da * da * db * na) : 0.0;
  const Real cb = nb > 0.0 ? scale * dot / (da * db * db * nb) : 0.0;
  if (ga != nullptr) {
    for (std::size_t i = 0; i < n; ++i) ga[i] += inv * b[i] - ca * a[i];
  }
  if (gb != nullptr) {
    for (std::size_t i = 0; i < n; ++i) gb[i] += inv * a[i] - cb * b[i];
  }
}

namespace {

template <bool Parallel>
void gemv_impl(const Real* w, std::size_t rows, std::size_t cols, const Real* x, Real* y) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    const Real* wr = w + static_cast<std::size_t>(r) * cols;
    Real acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

template <bool Parallel>
void gemv_t_acc_impl(const Real* w, std::size_t rows, std::size_t cols, const Real* g,
                     Real* gx) {
  // Parallel over output columns; each gx[c] has a single writer and sums rows in order.
  const auto n = static_cast<std::ptrdiff_t>(cols);
  if constexpr (Parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < n; ++c) {
      Real acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += w[r * cols + c] * g[r];
      gx[c] += acc;
    }
  } else {
    for (std::ptrdiff_t c = 0; c < n; ++c) {
      Real acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += w[r * cols + c] * g[r];
      gx[c] += acc;
    }
  }
}

template <bool Parallel>
void ger_acc_impl(Real* gw, std::size_t rows, std::size_t cols, const Real* g,
                  const Real* x) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    const Real gr = g[r];
    if (gr == 0.0) continue;
    Real* row = gw + static_cast<std::size_t>(r) * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += gr * x[c];
  }
}

struct ValueIndex {
  std::vector<std::uint32_t> unique;
  std::unordered_map<std::uint32_t, std::size_t> slot;
};

ValueIndex index_values(std::span<const std::vector<std::uint32_t>> records) {
  ValueIndex idx;
  for (const auto& rec : records) {
    for (auto v : rec) {
      if (idx.slot.emplace(v, idx.unique.size()).second) idx.unique.push_back(v);
    }
  }
  return idx;
}

template <bool Parallel>
std::vector<Real> cosine_matrix(TableView table, const WeightedIds& history,
                                const ValueIndex& values) {
  const std::size_t nu = history.ids.size();
  const std::size_t nv = values.unique.size();
  std::vector<Real> sims(nu * nv);
  const auto n = static_cast<std::ptrdiff_t>(nu);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t u = 0; u < n; ++u) {
    const Real* a = table.row(history.ids[static_cast<std::size_t>(u)]);
    for (std::size_t v = 0; v < nv; ++v) {
      sims[static_cast<std::size_t>(u) * nv + v] =
          cosine(a, table.row(values.unique[v]), table.cols);
    }
  }
  return sims;
}

template <bool Parallel>
std::vector<Real> record_scores_impl(TableView table, const WeightedIds& history,
                                     std::span<const std::vector<std::uint32_t>> records) {
  const ValueIndex values = index_values(records);
  const std::vector<Real> sims = cosine_matrix<Parallel>(table, history, values);
  const std::size_t nv = values.unique.size();
  // Per-value column sums weighted by history multiplicity.
  std::vector<Real> column(nv, 0.0);
  for (std::size_t u = 0; u < history.ids.size(); ++u) {
    for (std::size_t v = 0; v < nv; ++v) column[v] += history.weights[u] * sims[u * nv + v];
  }
  std::vector<Real> scores(records.size(), 0.0);
  for (std::size_t m = 0; m < records.size(); ++m) {
    for (auto v : records[m]) scores[m] += column[values.slot.at(v)];
  }
  return scores;
}

template <bool Parallel>
void record_scores_backward_impl(TableView table, const WeightedIds& history,
                                 std::span<const std::vector<std::uint32_t>> records,
                                 std::span<const Real> grad_scores, Real* grad) {
  const ValueIndex values = index_values(records);
  const std::size_t nv = values.unique.size();
  const std::size_t nu = history.ids.size();
  const std::size_t d = table.cols;
  std::vector<Real> value_grad(nv, 0.0);
  for (std::size_t m = 0; m < records.size(); ++m) {
    for (auto v : records[m]) value_grad[values.slot.at(v)] += grad_scores[m];
  }
  std::vector<Real> gu(nu * d, 0.0);
  std::vector<Real> gv(nv * d, 0.0);
  const auto nu_i = static_cast<std::ptrdiff_t>(nu);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t ui = 0; ui < nu_i; ++ui) {
    const auto u = static_cast<std::size_t>(ui);
    const Real* a = table.row(history.ids[u]);
    for (std::size_t v = 0; v < nv; ++v) {
      const Real s = history.weights[u] * value_grad[v];
      if (s != 0.0) cosine_grad_acc(a, table.row(values.unique[v]), d, s, gu.data() + u * d, nullptr);
    }
  }
  const auto nv_i = static_cast<std::ptrdiff_t>(nv);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t vi = 0; vi < nv_i; ++vi) {
    const auto v = static_cast<std::size_t>(vi);
    const Real* b = table.row(values.unique[v]);
    for (std::size_t u = 0; u < nu; ++u) {
      const Real s = history.weights[u] * value_grad[v];
      if (s != 0.0) cosine_grad_acc(table.row(history.ids[u]), b, d, s, nullptr, gv.data() + v * d);
    }
  }
  for (std::size_t u = 0; u < nu; ++u) {
    Real* row = grad + static_cast<std::size_t>(history.ids[u]) * d;
    for (std::size_t k = 0; k < d; ++k) row[k] += gu[u * d + k];
  }
  for (std::size_t v = 0; v < nv; ++v) {
    Real* row = grad + static_cast<std::size_t>(values.unique[v]) * d;
    for (std::size_t k = 0; k < d; ++k) row[k] += gv[v * d + k];
  }
}

template <bool Parallel>
Real pair_cosine_sum_impl(TableView table,
                          std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs) {
  std::vector<Real> sims(pairs.size());
  const auto n = static_cast<std::ptrdiff_t>(pairs.size());
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t p = 0; p < n; ++p) {
    const auto& [a, b] = pairs[static_cast<std::size_t>(p)];
    sims[static_cast<std::size_t>(p)] = cosine(table.row(a), table.row(b), table.cols);
  }
  Real total = 0.0;
  for (Real s : sims) total += s;
  return total;
}

template <bool Parallel>
void pair_cosine_sum_backward_impl(
    TableView table, std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs,
    Real scale, Real* grad) {
  // Group by entity so each gradient row has a single writer.
  std::vector<std::uint32_t> entities;
  std::unordered_map<std::uint32_t, std::size_t> slot;
  std::vector<std::vector<std::uint32_t>> partners;
  for (const auto& [a, b] : pairs) {
    for (auto [self, other] : {std::pair{a, b}, std::pair{b, a}}) {
      auto [it, fresh] = slot.emplace(self, entities.size());
      if (fresh) {
        entities.push_back(self);
        partners.emplace_back();
      }
      partners[it->second].push_back(other);
    }
  }
  const std::size_t d = table.cols;
  const auto n = static_cast<std::ptrdiff_t>(entities.size());
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::ptrdiff_t ei = 0; ei < n; ++ei) {
    const auto e = static_cast<std::size_t>(ei);
    Real* row = grad + static_cast<std::size_t>(entities[e]) * d;
    const Real* a = table.row(entities[e]);
    for (auto other : partners[e]) cosine_grad_acc(a, table.row(other), d, scale, row, nullptr);
  }
}

}  // namespace

#define KBD_DEFINE_KERNELS(NS, PAR)                                                   \
  namespace NS {                                                                      \
  void gemv(const Real* w, std::size_t rows, std::size_t cols, const Real* x, Real* y) { \
    gemv_impl<PAR>(w, rows, cols, x, y);                                              \
  }                                                                                   \
  void gemv_t_acc(const Real* w, std::size_t rows, std::size_t cols, const Real* g,   \
                  Real* gx) {                                                         \
    gemv_t_acc_impl<PAR>(w, rows, cols, g, gx);                                       \
  }                                                                                   \
  void ger_acc(Real* gw, std::size_t rows, std::size_t cols, const Real* g,           \
               const Real* x) {                                                       \
    ger_acc_impl<PAR>(gw, rows, cols, g, x);                                          \
  }                                                                                   \
  std::vector<Real> record_scores(TableView table, const WeightedIds& history,        \
                                  std::span<const std::vector<std::uint32_t>> records) { \
    return record_scores_impl<PAR>(table, history, records);                          \
  }                                                                                   \
  void record_scores_backward(TableView table, const WeightedIds& history,            \
                              std::span<const std::vector<std::uint32_t>> records,    \
                              std::span<const Real> grad_scores, Real* grad) {        \
    record_scores_backward_impl<PAR>(table, history, records, grad_scores, grad);     \
  }                                                                                   \
  Real pair_cosine_sum(TableView table,                                               \
                       std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs) { \
    return pair_cosine_sum_impl<PAR>(table, pairs);                                   \
  }                                                                                   \
  void pair_cosine_sum_backward(                                                      \
      TableView table, std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs, \
      Real scale, Real* grad) {                                                       \
    pair_cosine_sum_backward_impl<PAR>(table, pairs, scale, grad);                    \
  }                                                                                   \
  }

KBD_DEFINE_KERNELS(serial, false)
KBD_DEFINE_KERNELS(omp, true)

#undef KBD_DEFINE_KERNELS

void gemv(Exec exec, const Real* w, std::size_t rows, std::size_t cols, const Real* x,
          Real* y) {
  exec == Exec::parallel ? omp::gemv(w, rows, cols, x, y) : serial::gemv(w, rows, cols, x, y);
}

void gemv_t_acc(Exec exec, const Real* w, std::size_t rows, std::size_t cols,
                const Real* g, Real* gx) {
  exec == Exec::parallel ? omp::gemv_t_acc(w, rows, cols, g, gx)
                         : serial::gemv_t_acc(w, rows, cols, g, gx);
}

void ger_acc(Exec exec, Real* gw, std::size_t rows, std::size_t cols, const Real* g,
             const Real* x) {
  exec == Exec::parallel ? omp::ger_acc(gw, rows, cols, g, x)
                         : serial::ger_acc(gw, rows, cols, g, x);
}

std::vector<Real> record_scores(Exec exec, TableView table, const WeightedIds& history,
                                std::span<const std::vector<std::uint32_t>> records) {
  return exec == Exec::parallel ? omp::record_scores(table, history, records)
                                : serial::record_scores(table, history, records);
}

void record_scores_backward(Exec exec, TableView table, const WeightedIds& history,
                            std::span<const std::vector<std::uint32_t>> records,
                            std::span<const Real> grad_scores, Real* grad) {
  exec == Exec::parallel
      ? omp::record_scores_backward(table, history, records, grad_scores, grad)
      : serial::record_scores_backward(table, history, records, grad_scores, grad);
}

Real pair_cosine_sum(Exec exec, TableView table,
                     std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs) {
  return exec == Exec::parallel ? omp::pair_cosine_sum(table, pairs)
                                : serial::pair_cosine_sum(table, pairs);
}

void pair_cosine_sum_backward(Exec exec, TableView table,
                              std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs,
                              Real scale, Real* grad) {
  exec == Exec::parallel ? omp::pair_cosine_sum_backward(table, pairs, scale, grad)
                         : serial::pair_cosine_sum_backward(table, pairs, scale, grad);
}

}  // namespace kbd::kernels
