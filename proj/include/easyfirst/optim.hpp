#pragma once

#include "easyfirst/tensor.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace easyfirst {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of a single parameter buffer. `step` is the
/// 1-based update count after this call.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t step,
                 const AdamOptions& opt) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam_update: parameter/gradient/moment sizes disagree");
  }
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * grad[i];
    v[i] = b2 * v[i] + (T{1} - b2) * grad[i] * grad[i];
    const double mhat = static_cast<double>(m[i]) / c1;
    const double vhat = static_cast<double>(v[i]) / c2;
    param[i] -= static_cast<T>(opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
  }
}

/// Applies Adam to every tensor in `params` using its accumulated gradient.
/// Moments are zero-initialized on the first call.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamOptions& opt) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T{0});
      state.second_moment.emplace_back(p.size(), T{0});
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state holds " + std::to_string(state.first_moment.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.first_moment[i].size() != p.size()) {
      throw DimensionError("adam_step: moment shape mismatch for parameter " + std::to_string(i) + " " +
                           to_string(p.shape()));
    }
    adam_update<T>(p.mutable_data(), p.grad(), state.first_moment[i], state.second_moment[i], state.step, opt);
  }
}

}  // namespace easyfirst
