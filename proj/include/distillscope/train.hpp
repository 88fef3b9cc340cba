#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "distillscope/adam.hpp"
#include "distillscope/data.hpp"
#include "distillscope/graph.hpp"
#include "distillscope/network.hpp"

namespace distillscope {

/// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels);

struct TrainConfig {
  std::size_t epochs = 2;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct TrainEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

struct TrainResult {
  Network<float> network;
  std::vector<TrainEpoch> history;
  double train_accuracy = 0.0;  // accuracy during the last epoch
  double test_accuracy = 0.0;   // 0 when no test set is given
};

using TrainCallback = std::function<void(const TrainEpoch&)>;

/// Cross-entropy training of a classifier with a DENSE head using Adam.
/// epochs == 0 returns the seeded initialisation unchanged.
TrainResult train_source_classifier(const NetworkSpec& spec, std::span<const Sample> train,
                                    std::span<const Sample> test, const TrainConfig& config,
                                    const TrainCallback& on_epoch = {});

/// Fraction of samples whose arg-max logit equals the label.
double classification_accuracy(const Network<float>& net, std::span<const Sample> samples, std::size_t batch_size = 256);

/// Number of output classes of a spec ending in a DENSE layer.
std::size_t output_classes(const NetworkSpec& spec);

}  // namespace distillscope
