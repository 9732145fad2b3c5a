#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gadt3/matrix.hpp"

namespace gadt3 {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
};

// Adam with bias correction. Moments are created lazily, zero-initialized,
// on the first step and matched positionally to `params` afterwards.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) { state_.options = options; }

  void step(std::span<Matrix* const> params, std::span<const Matrix> grads);

  const AdamState& state() const { return state_; }

 private:
  AdamState state_;
};

}  // namespace gadt3
