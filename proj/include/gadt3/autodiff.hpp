#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation executed through the free functions below.
// Each op stores its output value and a closure that pushes the output
// gradient back to its inputs. backward() walks the record in exact reverse
// order, so gradients of values used more than once accumulate additively.
//
// Graph-structured ops (gather_rows, segment_*, pair_min) take index arrays
// produced from CSR adjacency; they are what the GNN and loss code compose.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "gadt3/matrix.hpp"
#include "gadt3/rng.hpp"

namespace gadt3::ad {

class Tape;

// Handle to a value on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double scalar() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Runs the backward pass from a 1x1 loss. May be called once per tape.
  void backward(Var loss);

  // Gradient of a recorded value; all zeros if nothing reached it.
  Matrix grad(Var v) const;

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // For op implementations.
  Var record(std::string_view op, Matrix value, bool requires_grad, BackwardFn backward);
  const Matrix& out_grad(std::size_t id) const { return nodes_[id].grad; }
  Matrix& grad_slot(std::size_t id);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

using Index = std::vector<std::uint32_t>;
using Offsets = std::vector<std::size_t>;

Var matmul(Var a, Var b);     // a · b
Var matmul_nt(Var a, Var b);  // a · bᵀ
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_row(Var a, Var row);  // broadcast a 1 x c row over every row of a
Var concat_cols(Var a, Var b);
Var relu(Var a);  // relu'(0) = 0
Var sigmoid(Var a);
Var mul(Var a, Var b);                 // elementwise
Var mul_const(Var a, const Matrix& c);  // elementwise by a constant
Var scale_rows(Var a, Var weights);     // row r of a times weights(r, 0)
Var negate(Var a);
Var scalar_mul(Var a, double s);
Var sum(Var a);       // 1 x 1
Var mean(Var a);      // 1 x 1
Var row_sum(Var a);   // n x 1
Var row_mean(Var a);  // n x 1

// Row-wise softmax over entries where mask != 0. Masked entries are exactly 0
// and receive zero gradient; a row with no allowed entries is all zeros.
// Uses per-row max subtraction.
Var masked_row_softmax(Var scores, const Matrix& mask);

// Cosine similarity of matching rows, n x 1. The denominator is guarded so a
// zero-norm row yields 0.
inline constexpr double kCosineEps = 1e-12;
Var cosine_rows(Var a, Var b);

// out.row(i) = a.row(index[i]); backward scatter-adds.
Var gather_rows(Var a, const Index& index);

// Segments are rows [offsets[s], offsets[s+1]) of a; output has
// offsets.size() - 1 rows. Empty segments produce zero rows.
Var segment_sum(Var a, const Offsets& offsets);
Var segment_mean(Var a, const Offsets& offsets);
// a is an E x 1 column; softmax within each segment, max-subtracted.
Var segment_softmax(Var a, const Offsets& offsets);

// a is an E x 1 column and partner an involution on [0, E).
// out[e] = min(a[e], a[partner[e]]). The gradient goes to the smaller entry;
// on a tie each output keeps its own entry.
Var pair_min(Var a, const Index& partner);

// Mean binary cross-entropy of probabilities against 0/1 targets, with
// probabilities clamped to [kProbClamp, 1 - kProbClamp] first.
inline constexpr double kProbClamp = 1e-7;
Var binary_cross_entropy(Var probs, const Matrix& targets);

// Inverted dropout. Identity when !training or rate == 0.
Var dropout(Var x, double rate, Rng& rng, bool training);

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

// Entries with |analytic| and |numeric| both below this are compared
// absolutely, so round-off on near-zero gradients does not dominate.
inline constexpr double kGradCheckFloor = 1e-4;

using MultiFn = std::function<Var(Tape&, std::span<const Var>)>;

// Compares analytic gradients against central differences
// (f(x+h) - f(x-h)) / 2h for every entry of every point. The relative error
// of an entry is |a - n| / max(|a|, |n|, kGradCheckFloor); the check passes
// iff the maximum is <= tol. f must be deterministic in its inputs.
GradCheckReport grad_check(const MultiFn& f, const std::vector<Matrix>& points, double step,
                           double tol);
GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& point,
                           double step, double tol);

}  // namespace gadt3::ad
