#pragma once

#include <span>
#include <vector>

#include "distillscope/graph.hpp"
#include "distillscope/network.hpp"

namespace distillscope {

inline constexpr double kDefaultCosineEpsilon = 1e-8;

/// How per-layer cosine similarities combine into the directional loss.
///   PerLayer: sum_i (1 - cos_i)   -- in [0, 2 N_CP], zero iff aligned
///   Literal:  1 - sum_i cos_i     -- same gradient, offset by N_CP - 1
enum class DirectionalForm { PerLayer, Literal };

enum class LossKind { Value, Direction, Total };

/// Weighted combination  value_weight * L_val + direction_weight * L_dir.
struct Objective {
  double value_weight = 1.0;
  double direction_weight = 0.0;
  double cosine_epsilon = kDefaultCosineEpsilon;
  DirectionalForm form = DirectionalForm::PerLayer;

  /// L_val + lambda * L_dir
  static Objective total(double lambda, double epsilon = kDefaultCosineEpsilon,
                         DirectionalForm form = DirectionalForm::PerLayer) {
    return {1.0, lambda, epsilon, form};
  }
  static Objective for_kind(LossKind kind, double lambda, double epsilon = kDefaultCosineEpsilon,
                            DirectionalForm form = DirectionalForm::PerLayer);
};

/// Per-sample value and directional terms for a batch of aligned activations.
struct LossTerms {
  std::vector<double> value;
  std::vector<double> direction;

  double mean_value() const;
  double mean_direction() const;
  /// Per-sample objective values.
  std::vector<double> combined(const Objective& objective) const;
  /// Batch mean of the objective.
  double mean(const Objective& objective) const;
};

template <typename T>
LossTerms loss_terms(std::span<const Tensor<T>* const> source, std::span<const Tensor<T>* const> cloner,
                     double epsilon = kDefaultCosineEpsilon, DirectionalForm form = DirectionalForm::PerLayer);

template <typename T>
LossTerms loss_terms(const ActivationSet<T>& source, const ActivationSet<T>& cloner,
                     double epsilon = kDefaultCosineEpsilon, DirectionalForm form = DirectionalForm::PerLayer);

/// Batch-averaged sum over critical points of the per-layer mean squared difference.
template <typename T>
double loss_val(const ActivationSet<T>& source, const ActivationSet<T>& cloner);

/// Batch-averaged directional loss; norms are guarded by max(||.||, epsilon).
template <typename T>
double loss_dir(const ActivationSet<T>& source, const ActivationSet<T>& cloner,
                double epsilon = kDefaultCosineEpsilon, DirectionalForm form = DirectionalForm::PerLayer);

template <typename T>
double loss_total(const ActivationSet<T>& source, const ActivationSet<T>& cloner, double lambda,
                  double epsilon = kDefaultCosineEpsilon, DirectionalForm form = DirectionalForm::PerLayer);

/// Differentiable batch-mean objective over critical activations. Gradients
/// flow into both argument lists wherever they require them.
template <typename T>
Var discrepancy(Graph<T>& graph, std::span<const Var> source, std::span<const Var> cloner, const Objective& objective);

}  // namespace distillscope
