#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "distillscope/tensor.hpp"

namespace distillscope {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update; `step` is the 1-based timestep.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> first_moment, std::span<T> second_moment,
               const AdamConfig& config, std::uint64_t step);

/// Moments for a named parameter collection.
struct AdamState {
  std::map<std::string, Tensor<float>> first_moment;
  std::map<std::string, Tensor<float>> second_moment;
  std::uint64_t step = 0;

  /// Advances the timestep once and updates every parameter that has a gradient.
  void update(std::map<std::string, Tensor<float>>& params, const std::map<std::string, Tensor<float>>& grads,
              const AdamConfig& config);
};

}  // namespace distillscope
