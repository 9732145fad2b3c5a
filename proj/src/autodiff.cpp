#include "gadt3/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gadt3/error.hpp"

namespace gadt3::ad {

namespace {

void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw UsageError(std::string(op) + ": " + what);
}

void require_same_tape(Var a, Var b, std::string_view op) {
  require(a.tape() != nullptr && a.tape() == b.tape(), op, "operands on different tapes");
}

std::string shapes(const Matrix& a, const Matrix& b) {
  return "shape mismatch " + a.shape_string() + " vs " + b.shape_string();
}

// Adds g into the gradient slot of `id` if that value participates in
// differentiation.
void accumulate(Tape& t, std::size_t id, const Matrix& g) {
  if (!t.requires_grad(id)) return;
  Matrix& slot = t.grad_slot(id);
  for (std::size_t i = 0; i < g.size(); ++i) slot.data[i] += g.data[i];
}

bool any_grad(std::initializer_list<Var> vars) {
  for (const Var& v : vars)
    if (v.requires_grad()) return true;
  return false;
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& m = value();
  if (m.rows != 1 || m.cols != 1) throw UsageError("Var::scalar: value is " + m.shape_string());
  return m.data[0];
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Matrix value, bool requires_grad) {
  return record("leaf", std::move(value), requires_grad, nullptr);
}

Var Tape::record(std::string_view op, Matrix value, bool requires_grad, BackwardFn backward) {
  if (!all_finite(value)) throw NumericalError(std::string(op) + ": non-finite result");
  nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, false, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Matrix(n.value.rows, n.value.cols, 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.has_grad) return n.grad;
  return Matrix(n.value.rows, n.value.cols, 0.0);
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("backward: loss recorded on a different tape");
  if (consumed_) throw UsageError("backward: already run on this tape; re-run the forward pass");
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows != 1 || lv.cols != 1) throw UsageError("backward: loss must be scalar, got " + lv.shape_string());
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_slot(loss.id()).data[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this, id);
  }
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols == B.rows, "matmul", shapes(A, B));
  Matrix out(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < B.cols; ++j) out(i, j) += aik * B(k, j);
    }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", std::move(out), any_grad({a, b}), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix& ga = t.grad_slot(ia);  // G · Bᵀ
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t k = 0; k < B.rows; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < G.cols; ++j) s += G(i, j) * B(k, j);
          ga(i, k) += s;
        }
    }
    if (t.requires_grad(ib)) {
      Matrix& gb = t.grad_slot(ib);  // Aᵀ · G
      for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t k = 0; k < A.cols; ++k) {
          const double aik = A(i, k);
          if (aik == 0.0) continue;
          for (std::size_t j = 0; j < G.cols; ++j) gb(k, j) += aik * G(i, j);
        }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b, "matmul_nt");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols == B.cols, "matmul_nt", shapes(A, B));
  Matrix out(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i) {
    const auto ar = A.row(i);
    for (std::size_t j = 0; j < B.rows; ++j) {
      const auto br = B.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < A.cols; ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("matmul_nt", std::move(out), any_grad({a, b}), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);  // rows(A) x rows(B)
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix& ga = t.grad_slot(ia);  // G · B
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = 0; j < G.cols; ++j) {
          const double g = G(i, j);
          if (g == 0.0) continue;
          const auto br = B.row(j);
          auto gr = ga.row(i);
          for (std::size_t k = 0; k < B.cols; ++k) gr[k] += g * br[k];
        }
    }
    if (t.requires_grad(ib)) {
      Matrix& gb = t.grad_slot(ib);  // Gᵀ · A
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = 0; j < G.cols; ++j) {
          const double g = G(i, j);
          if (g == 0.0) continue;
          const auto ar = A.row(i);
          auto gr = gb.row(j);
          for (std::size_t k = 0; k < A.cols; ++k) gr[k] += g * ar[k];
        }
    }
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  require(a.value().same_shape(b.value()), "add", shapes(a.value(), b.value()));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("add", std::move(out), any_grad({a, b}), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    accumulate(t, ia, G);
    accumulate(t, ib, G);
  });
}

Var sub(Var a, Var b) { return add(a, negate(b)); }

Var add_row(Var a, Var row) {
  require_same_tape(a, row, "add_row");
  const Matrix& A = a.value();
  const Matrix& R = row.value();
  require(R.rows == 1 && R.cols == A.cols, "add_row", shapes(A, R));
  Matrix out = A;
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += R(0, j);
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape()->record("add_row", std::move(out), any_grad({a, row}), [ia, ir](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    accumulate(t, ia, G);
    if (t.requires_grad(ir)) {
      Matrix& gr = t.grad_slot(ir);
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = 0; j < G.cols; ++j) gr(0, j) += G(i, j);
    }
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b, "concat_cols");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.rows == B.rows, "concat_cols", shapes(A, B));
  Matrix out(A.rows, A.cols + B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    std::copy(A.row(i).begin(), A.row(i).end(), out.row(i).begin());
    std::copy(B.row(i).begin(), B.row(i).end(), out.row(i).begin() + A.cols);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("concat_cols", std::move(out), any_grad({a, b}), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const std::size_t ca = t.value(ia).cols;
    if (t.requires_grad(ia)) {
      Matrix& g = t.grad_slot(ia);
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = 0; j < ca; ++j) g(i, j) += G(i, j);
    }
    if (t.requires_grad(ib)) {
      Matrix& g = t.grad_slot(ib);
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = ca; j < G.cols; ++j) g(i, j - ca) += G(i, j);
    }
  });
}

Var relu(Var a) {
  Matrix out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape()->record("relu", std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const Matrix& X = t.value(ia);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < G.size(); ++i)
      if (X.data[i] > 0.0) g.data[i] += G.data[i];
  });
}

Var sigmoid(Var a) {
  Matrix out = a.value();
  for (double& v : out.data) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  const std::size_t ia = a.id();
  return a.tape()->record("sigmoid", std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const Matrix& Y = t.value(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * Y.data[i] * (1.0 - Y.data[i]);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  require(a.value().same_shape(b.value()), "mul", shapes(a.value(), b.value()));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("mul", std::move(out), any_grad({a, b}), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    if (t.requires_grad(ia)) {
      Matrix& g = t.grad_slot(ia);
      const Matrix& B = t.value(ib);
      for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * B.data[i];
    }
    if (t.requires_grad(ib)) {
      Matrix& g = t.grad_slot(ib);
      const Matrix& A = t.value(ia);
      for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * A.data[i];
    }
  });
}

Var mul_const(Var a, const Matrix& c) {
  require(a.value().same_shape(c), "mul_const", shapes(a.value(), c));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= c.data[i];
  const std::size_t ia = a.id();
  return a.tape()->record("mul_const", std::move(out), a.requires_grad(), [ia, c](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * c.data[i];
  });
}

Var scale_rows(Var a, Var weights) {
  require_same_tape(a, weights, "scale_rows");
  const Matrix& A = a.value();
  const Matrix& W = weights.value();
  require(W.cols == 1 && W.rows == A.rows, "scale_rows", shapes(A, W));
  Matrix out = A;
  for (std::size_t i = 0; i < A.rows; ++i)
    for (double& v : out.row(i)) v *= W(i, 0);
  const std::size_t ia = a.id(), iw = weights.id();
  return a.tape()->record("scale_rows", std::move(out), any_grad({a, weights}), [ia, iw](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const Matrix& A = t.value(ia);
    const Matrix& W = t.value(iw);
    if (t.requires_grad(ia)) {
      Matrix& g = t.grad_slot(ia);
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = 0; j < G.cols; ++j) g(i, j) += G(i, j) * W(i, 0);
    }
    if (t.requires_grad(iw)) {
      Matrix& g = t.grad_slot(iw);
      for (std::size_t i = 0; i < G.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < G.cols; ++j) s += G(i, j) * A(i, j);
        g(i, 0) += s;
      }
    }
  });
}

Var negate(Var a) { return scalar_mul(a, -1.0); }

Var scalar_mul(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data) v *= s;
  const std::size_t ia = a.id();
  return a.tape()->record("scalar_mul", std::move(out), a.requires_grad(), [ia, s](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += s * G.data[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const std::size_t ia = a.id();
  return a.tape()->record("sum", Matrix(1, 1, s), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const double g0 = t.out_grad(self).data[0];
    Matrix& g = t.grad_slot(ia);
    for (double& v : g.data) v += g0;
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean", "empty input");
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(Var a) {
  const Matrix& A = a.value();
  Matrix out(A.rows, 1);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (double v : A.row(i)) out(i, 0) += v;
  const std::size_t ia = a.id();
  return a.tape()->record("row_sum", std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (double& v : g.row(i)) v += G(i, 0);
  });
}

Var row_mean(Var a) {
  require(a.cols() > 0, "row_mean", "zero columns");
  return scalar_mul(row_sum(a), 1.0 / static_cast<double>(a.cols()));
}

Var masked_row_softmax(Var scores, const Matrix& mask) {
  const Matrix& S = scores.value();
  require(S.same_shape(mask), "masked_row_softmax", shapes(S, mask));
  Matrix out(S.rows, S.cols);
  for (std::size_t i = 0; i < S.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < S.cols; ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, S(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < S.cols; ++j)
      if (mask(i, j) != 0.0) z += (out(i, j) = std::exp(S(i, j) - mx));
    for (std::size_t j = 0; j < S.cols; ++j) out(i, j) /= z;
  }
  const std::size_t is = scores.id();
  return scores.tape()->record("masked_row_softmax", std::move(out), scores.requires_grad(),
                               [is](Tape& t, std::size_t self) {
                                 const Matrix& G = t.out_grad(self);
                                 const Matrix& Y = t.value(self);
                                 Matrix& g = t.grad_slot(is);
                                 for (std::size_t i = 0; i < Y.rows; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < Y.cols; ++j) dot += G(i, j) * Y(i, j);
                                   // Y is exactly 0 off-mask, so masked entries get exactly 0.
                                   for (std::size_t j = 0; j < Y.cols; ++j) g(i, j) += Y(i, j) * (G(i, j) - dot);
                                 }
                               });
}

Var cosine_rows(Var a, Var b) {
  require_same_tape(a, b, "cosine_rows");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.same_shape(B), "cosine_rows", shapes(A, B));
  Matrix out(A.rows, 1);
  for (std::size_t i = 0; i < A.rows; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < A.cols; ++k) {
      dot += A(i, k) * B(i, k);
      na += A(i, k) * A(i, k);
      nb += B(i, k) * B(i, k);
    }
    out(i, 0) = dot / (std::sqrt(na) * std::sqrt(nb) + kCosineEps);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("cosine_rows", std::move(out), any_grad({a, b}), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
    for (std::size_t i = 0; i < A.rows; ++i) {
      const double gi = G(i, 0);
      if (gi == 0.0) continue;
      double dot = 0.0, na2 = 0.0, nb2 = 0.0;
      for (std::size_t k = 0; k < A.cols; ++k) {
        dot += A(i, k) * B(i, k);
        na2 += A(i, k) * A(i, k);
        nb2 += B(i, k) * B(i, k);
      }
      const double na = std::sqrt(na2), nb = std::sqrt(nb2);
      const double d = na * nb + kCosineEps;
      // c = dot / d;  dc/da = b/d - dot * (nb * a / na) / d²  (zero-norm terms vanish)
      if (ga_on) {
        auto g = t.grad_slot(ia).row(i);
        const double coef = na > 0.0 ? dot * nb / (na * d * d) : 0.0;
        for (std::size_t k = 0; k < A.cols; ++k) g[k] += gi * (B(i, k) / d - coef * A(i, k));
      }
      if (gb_on) {
        auto g = t.grad_slot(ib).row(i);
        const double coef = nb > 0.0 ? dot * na / (nb * d * d) : 0.0;
        for (std::size_t k = 0; k < A.cols; ++k) g[k] += gi * (A(i, k) / d - coef * B(i, k));
      }
    }
  });
}

Var gather_rows(Var a, const Index& index) {
  const Matrix& A = a.value();
  Matrix out(index.size(), A.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < A.rows, "gather_rows", "index out of range");
    std::copy(A.row(index[i]).begin(), A.row(index[i]).end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return a.tape()->record("gather_rows", std::move(out), a.requires_grad(), [ia, index](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto dst = g.row(index[i]);
      const auto src = G.row(i);
      for (std::size_t k = 0; k < G.cols; ++k) dst[k] += src[k];
    }
  });
}

namespace {

void check_offsets(const Offsets& offsets, std::size_t rows, std::string_view op) {
  require(!offsets.empty() && offsets.front() == 0 && offsets.back() == rows, op, "offsets do not cover input rows");
  for (std::size_t s = 1; s < offsets.size(); ++s) require(offsets[s - 1] <= offsets[s], op, "offsets not monotone");
}

Var segment_reduce(Var a, const Offsets& offsets, bool average) {
  const std::string_view op = average ? "segment_mean" : "segment_sum";
  const Matrix& A = a.value();
  check_offsets(offsets, A.rows, op);
  const std::size_t nseg = offsets.size() - 1;
  Matrix out(nseg, A.cols);
  for (std::size_t s = 0; s < nseg; ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    if (b == e) continue;
    auto o = out.row(s);
    for (std::size_t r = b; r < e; ++r)
      for (std::size_t k = 0; k < A.cols; ++k) o[k] += A(r, k);
    if (average)
      for (double& v : o) v /= static_cast<double>(e - b);
  }
  const std::size_t ia = a.id();
  return a.tape()->record(op, std::move(out), a.requires_grad(), [ia, offsets, average](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const std::size_t b = offsets[s], e = offsets[s + 1];
      if (b == e) continue;
      const double f = average ? 1.0 / static_cast<double>(e - b) : 1.0;
      const auto gs = G.row(s);
      for (std::size_t r = b; r < e; ++r) {
        auto gr = g.row(r);
        for (std::size_t k = 0; k < G.cols; ++k) gr[k] += f * gs[k];
      }
    }
  });
}

}  // namespace

Var segment_sum(Var a, const Offsets& offsets) { return segment_reduce(a, offsets, false); }
Var segment_mean(Var a, const Offsets& offsets) { return segment_reduce(a, offsets, true); }

Var segment_softmax(Var a, const Offsets& offsets) {
  const Matrix& A = a.value();
  require(A.cols == 1, "segment_softmax", "expects a column, got " + A.shape_string());
  check_offsets(offsets, A.rows, "segment_softmax");
  Matrix out(A.rows, 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    if (b == e) continue;
    double mx = A(b, 0);
    for (std::size_t r = b + 1; r < e; ++r) mx = std::max(mx, A(r, 0));
    double z = 0.0;
    for (std::size_t r = b; r < e; ++r) z += (out(r, 0) = std::exp(A(r, 0) - mx));
    for (std::size_t r = b; r < e; ++r) out(r, 0) /= z;
  }
  const std::size_t ia = a.id();
  return a.tape()->record("segment_softmax", std::move(out), a.requires_grad(), [ia, offsets](Tape& t, std::size_t self) {
    const Matrix& G = t.out_grad(self);
    const Matrix& Y = t.value(self);
    Matrix& g = t.grad_slot(ia);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const std::size_t b = offsets[s], e = offsets[s + 1];
      double dot = 0.0;
      for (std::size_t r = b; r < e; ++r) dot += G(r, 0) * Y(r, 0);
      for (std::size_t r = b; r < e; ++r) g(r, 0) += Y(r, 0) * (G(r, 0) - dot);
    }
  });
}

Var pair_min(Var a, const Index& partner) {
  const Matrix& A = a.value();
  require(A.cols == 1 && partner.size() == A.rows, "pair_min", "expects an E x 1 column and E partners");
  Matrix out(A.rows, 1);
  std::vector<std::uint32_t> source(A.rows);
  for (std::size_t e = 0; e < A.rows; ++e) {
    const std::uint32_t p = partner[e];
    require(p < A.rows && partner[p] == e, "pair_min", "partner map is not an involution");
    source[e] = A(p, 0) < A(e, 0) ? p : static_cast<std::uint32_t>(e);
    out(e, 0) = A(source[e], 0);
  }
  const std::size_t ia = a.id();
  return a.tape()->record("pair_min", std::move(out), a.requires_grad(),
                          [ia, source = std::move(source)](Tape& t, std::size_t self) {
                            const Matrix& G = t.out_grad(self);
                            Matrix& g = t.grad_slot(ia);
                            for (std::size_t e = 0; e < source.size(); ++e) g(source[e], 0) += G(e, 0);
                          });
}

Var binary_cross_entropy(Var probs, const Matrix& targets) {
  const Matrix& P = probs.value();
  require(P.same_shape(targets), "binary_cross_entropy", shapes(P, targets));
  require(P.size() > 0, "binary_cross_entropy", "empty input");
  const double n = static_cast<double>(P.size());
  double total = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double p = std::clamp(P.data[i], kProbClamp, 1.0 - kProbClamp);
    const double y = targets.data[i];
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  const std::size_t ip = probs.id();
  return probs.tape()->record("binary_cross_entropy", Matrix(1, 1, total / n), probs.requires_grad(),
                              [ip, targets, n](Tape& t, std::size_t self) {
                                const double g0 = t.out_grad(self).data[0];
                                const Matrix& P = t.value(ip);
                                Matrix& g = t.grad_slot(ip);
                                for (std::size_t i = 0; i < P.size(); ++i) {
                                  const double raw = P.data[i];
                                  // Clamp is flat outside its range.
                                  if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;
                                  const double y = targets.data[i];
                                  g.data[i] += g0 * (-y / raw + (1.0 - y) / (1.0 - raw)) / n;
                                }
                              });
}

Var dropout(Var x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw UsageError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  Matrix mask(x.rows(), x.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.data) m = rng.uniform() < rate ? 0.0 : keep_scale;
  return mul_const(x, mask);
}

GradCheckReport grad_check(const MultiFn& f, const std::vector<Matrix>& points, double step, double tol) {
  auto evaluate = [&](const std::vector<Matrix>& at, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(at.size());
    for (const Matrix& m : at) vars.push_back(tape.leaf(m, grads != nullptr));
    Var out = f(tape, vars);
    if (out.rows() != 1 || out.cols() != 1) throw UsageError("grad_check: function is not scalar-valued");
    const double value = out.scalar();
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (const Var& v : vars) grads->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<Matrix> analytic;
  evaluate(points, &analytic);

  GradCheckReport report;
  std::vector<Matrix> probe = points;
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (std::size_t i = 0; i < points[p].size(); ++i) {
      const double x0 = points[p].data[i];
      probe[p].data[i] = x0 + step;
      const double fp = evaluate(probe, nullptr);
      probe[p].data[i] = x0 - step;
      const double fm = evaluate(probe, nullptr);
      probe[p].data[i] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[p].data[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.entries_checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_param = p;
        report.worst_entry = i;
      }
      ++report.entries_checked;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& point, double step, double tol) {
  return grad_check([&](Tape& t, std::span<const Var> v) { return f(t, v[0]); }, std::vector<Matrix>{point}, step, tol);
}

}  // namespace gadt3::ad
