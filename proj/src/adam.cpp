#include "gadt3/adam.hpp"

#include <cmath>

#include "gadt3/error.hpp"

namespace gadt3 {

void Adam::step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw UsageError("adam: parameter/gradient count mismatch");
  if (state_.first_moment.empty()) {
    for (const Matrix* p : params) {
      state_.first_moment.emplace_back(p->rows, p->cols, 0.0);
      state_.second_moment.emplace_back(p->rows, p->cols, 0.0);
    }
  }
  if (state_.first_moment.size() != params.size()) throw UsageError("adam: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i]) || !params[i]->same_shape(state_.first_moment[i]))
      throw UsageError("adam: shape mismatch for parameter " + std::to_string(i) + " (" +
                       params[i]->shape_string() + " vs grad " + grads[i].shape_string() + ")");
  }

  const AdamOptions& o = state_.options;
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bias1 = 1.0 - std::pow(o.beta1, t);
  const double bias2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix& m = state_.first_moment[i];
    Matrix& v = state_.second_moment[i];
    const Matrix& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m.data[k] = o.beta1 * m.data[k] + (1.0 - o.beta1) * g.data[k];
      v.data[k] = o.beta2 * v.data[k] + (1.0 - o.beta2) * g.data[k] * g.data[k];
      const double m_hat = m.data[k] / bias1;
      const double v_hat = v.data[k] / bias2;
      p.data[k] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

}  // namespace gadt3
