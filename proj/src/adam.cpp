#include "distillscope/adam.hpp"

#include <cmath>

#include "distillscope/errors.hpp"

namespace distillscope {

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, const AdamConfig& c,
               std::uint64_t step) {
  if (params.size() != grads.size() || params.size() != m.size() || params.size() != v.size())
    throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
  if (step < 1) throw ParameterError("adam_step: timestep must be >= 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = c.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon);
    params[i] = static_cast<T>(params[i] - update);
  }
}

template void adam_step<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                               const AdamConfig&, std::uint64_t);
template void adam_step<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                const AdamConfig&, std::uint64_t);

void AdamState::update(std::map<std::string, Tensor<float>>& params, const std::map<std::string, Tensor<float>>& grads,
                       const AdamConfig& config) {
  ++step;
  for (auto& [key, p] : params) {
    auto g = grads.find(key);
    if (g == grads.end()) continue;
    if (g->second.shape() != p.shape()) throw DimensionError("gradient shape mismatch for " + key);
    auto m = first_moment.try_emplace(key, p.shape()).first;
    auto v = second_moment.try_emplace(key, p.shape()).first;
    adam_step<float>(p.data(), g->second.data(), m->second.data(), v->second.data(), config, step);
  }
}

}  // namespace distillscope
