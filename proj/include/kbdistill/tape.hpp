#pragma once

// Reverse-mode differentiation over flat real vectors.
//
// A Tape records every operation applied to Vars; backward() walks the
// records in reverse and accumulates parameter gradients into a GradBuffer.
// A Tape built without a GradBuffer computes values only.
//
// Matrices are represented as row-stacked vectors; ops that need the row
// width take it explicitly.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kbdistill/kernels.hpp"

namespace kbd {

using Vec = std::vector<Real>;

struct Param {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t id = 0;
  Vec value;

  std::size_t size() const { return value.size(); }
  const Real* row(std::size_t r) const { return value.data() + r * cols; }
  Real* row(std::size_t r) { return value.data() + r * cols; }
};

/// Owns parameters with stable addresses.
class ParamStore {
 public:
  Param& add(std::string name, std::size_t rows, std::size_t cols);
  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return *params_[i]; }
  const Param& operator[](std::size_t i) const { return *params_[i]; }
  Param* find(std::string_view name);
  const Param* find(std::string_view name) const;
  std::size_t total_values() const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

/// Dense gradient storage matching a ParamStore.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParamStore& store);
  Vec& operator[](std::size_t id) { return grads_[id]; }
  const Vec& operator[](std::size_t id) const { return grads_[id]; }
  std::size_t size() const { return grads_.size(); }
  void zero();
  void add(const GradBuffer& other);
  void scale(Real s);
  Real norm() const;

 private:
  std::vector<Vec> grads_;
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

/// GRU weights in gate order (reset, update, candidate).
struct GruParams {
  const Param* wx = nullptr;  // 3h x in
  const Param* wh = nullptr;  // 3h x h
  const Param* bx = nullptr;  // 3h
  const Param* bh = nullptr;  // 3h
  std::size_t hidden = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Vec& grad_out)>;

  explicit Tape(GradBuffer* grads = nullptr, Exec exec = Exec::serial);

  bool recording() const { return grads_ != nullptr; }
  Exec exec() const { return exec_; }
  std::size_t node_count() const { return nodes_.size(); }

  const Vec& value(Var v) const { return nodes_[v.id].value; }
  Real scalar(Var v) const { return nodes_[v.id].value.front(); }
  std::size_t size(Var v) const { return nodes_[v.id].value.size(); }

  /// Gradient slot of a node, sized on first use. Only valid during backward.
  Vec& grad(Var v);
  /// Gradient slot of a parameter.
  Vec& param_grad(const Param& p) { return (*grads_)[p.id]; }

  /// Generic node constructor for fused ops defined outside this file.
  Var push(Vec value, const char* op, Backward back);

  Var constant(Vec v);
  Var scalar_constant(Real x);
  Var embed(const Param& table, std::size_t row);
  /// W x + b with W (rows x cols); bias may be null.
  Var affine(const Param& w, Var x, const Param* bias = nullptr);
  /// Applies W (out x in) to each row of a row-stacked input.
  Var affine_rows(const Param& w, Var rows);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  /// a * s where s is a scalar node.
  Var scale(Var a, Var s);
  Var one_minus(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts) { return concat(std::span(parts.begin(), parts.size())); }
  Var dot(Var a, Var b);
  Var sum(Var a);
  Var softmax(Var a);
  /// Elementwise log(max(a, eps)); gradient is zero where clamped.
  Var log_clamped(Var a, Real eps = 1e-12);
  Var gather(Var a, std::vector<std::uint32_t> idx);
  /// a / sum(a).
  Var normalize(Var a);
  /// sum_k w_k * row_k for a row-stacked input of width `width`.
  Var weighted_rows(Var weights, Var rows, std::size_t width);
  /// s_k = v . tanh(key_k + query) for row-stacked keys of width |query|.
  Var attention_scores(Var keys, Var query, const Param& v);
  /// out_k = row_k . v for a row-stacked input of width |v|.
  Var rows_dot(Var rows, Var v);
  /// out[s] = sum of a[i] over i with segment[i] == s.
  Var segment_sum(Var a, std::vector<std::uint32_t> segment, std::size_t segments);
  /// Adds `row` to every row of a row-stacked input.
  Var add_to_rows(Var rows, Var row);
  Var dropout(Var a, Real rate, std::mt19937_64& rng);
  Var gru(const GruParams& p, Var x, Var h);
  Var cosine(Var a, Var b);

  /// Seeds d(root)/d(root) = seed and propagates.
  void backward(Var root, Real seed = 1.0);

  /// Name of the first op whose output holds a NaN or infinity.
  std::optional<std::string> first_non_finite() const;

 private:
  struct Node {
    Vec value;
    Vec grad;
    const char* op = "";
    Backward back;
  };

  GradBuffer* grads_;
  Exec exec_;
  std::vector<Node> nodes_;
};

}  // namespace kbd
