#include "distillscope/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "distillscope/rng.hpp"

namespace distillscope {

template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels) {
  const Tensor<T>& z = g.value(logits);
  if (z.rank() != 2) throw DimensionError("cross-entropy expects logits [N,K], got " + shape_string(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels.size() != n)
    throw DimensionError("cross-entropy: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) +
                         " labels");
  std::vector<double> prob(n * k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ParameterError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
    const T* row = z.raw() + i * k;
    const double peak = *std::max_element(row, row + k);
    double norm = 0.0;
    for (std::size_t j = 0; j < k; ++j) norm += prob[i * k + j] = std::exp(static_cast<double>(row[j]) - peak);
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] /= norm;
    total += -(static_cast<double>(row[labels[i]]) - peak - std::log(norm));
  }
  std::vector<int> target(labels.begin(), labels.end());
  return g.record("cross_entropy", {logits}, Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))),
                  [logits, prob = std::move(prob), target = std::move(target), n, k](Graph<T>& gr,
                                                                                      const Tensor<T>& gout) {
                    const double up = static_cast<double>(gout[0]) / static_cast<double>(n);
                    auto dz = gr.grad_buffer(logits);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < k; ++j) {
                        const double onehot = static_cast<std::size_t>(target[i]) == j ? 1.0 : 0.0;
                        dz[i * k + j] += static_cast<T>(up * (prob[i * k + j] - onehot));
                      }
                  });
}

std::size_t output_classes(const NetworkSpec& spec) {
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::Dense)
    throw SpecError("network '" + spec.name + "' does not end in a DENSE head");
  return static_cast<std::size_t>(spec.layers.back().units);
}

namespace {

std::size_t count_correct(const Tensor<float>& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.raw() + i * k;
    correct += static_cast<int>(std::max_element(row, row + k) - row) == labels[i] ? 1 : 0;
  }
  return correct;
}

void check_labels(std::span<const Sample> samples, std::size_t classes) {
  for (const auto& s : samples)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)
      throw DataError("sample " + s.id + " has label " + std::to_string(s.label) + " outside [0, " +
                           std::to_string(classes) + ")");
}

}  // namespace

double classification_accuracy(const Network<float>& net, std::span<const Sample> samples, std::size_t batch_size) {
  if (samples.empty()) throw DataError("accuracy of an empty dataset");
  check_labels(samples, output_classes(net.spec));
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const auto chunk = samples.subspan(start, std::min(batch_size, samples.size() - start));
    std::vector<int> labels;
    for (const auto& s : chunk) labels.push_back(s.label);
    correct += count_correct(forward_collect(net, batch_images(chunk), false).output, labels);
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train_source_classifier(const NetworkSpec& spec, std::span<const Sample> train,
                                    std::span<const Sample> test, const TrainConfig& config,
                                    const TrainCallback& on_epoch) {
  validate(spec);
  const std::size_t classes = output_classes(spec);
  if (train.empty()) throw DataError("source training set is empty");
  if (config.batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(config.learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  check_labels(train, classes);
  check_labels(test, classes);

  TrainResult result;
  result.network = build_network<float>(spec, mix_seed(config.seed, 0x50));
  AdamState adam;
  const AdamConfig adam_config{config.learning_rate};
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(mix_seed(config.seed, epoch, 0x5eedULL)).shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train[i].label);
      Graph<float> g;
      Var in = g.leaf(batch_images(train, idx), false, "input");
      ForwardTrace trace = forward(result.network, g, in, true);
      Var loss = softmax_cross_entropy<float>(g, trace.output, labels);
      loss_sum += static_cast<double>(g.value(loss)[0]) * static_cast<double>(idx.size());
      correct += count_correct(g.value(trace.output), labels);
      g.backward(loss);
      std::map<std::string, Tensor<float>> grads;
      for (const auto& [key, v] : trace.parameters) grads.emplace(key, g.grad(v));
      adam.update(result.network.weights, grads, adam_config);
    }
    const double n = static_cast<double>(train.size());
    result.history.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n});
    result.train_accuracy = result.history.back().train_accuracy;
    if (on_epoch) on_epoch(result.history.back());
  }
  if (!test.empty()) result.test_accuracy = classification_accuracy(result.network, test);
  return result;
}

template Var softmax_cross_entropy<float>(Graph<float>&, Var, std::span<const int>);
template Var softmax_cross_entropy<double>(Graph<double>&, Var, std::span<const int>);

}  // namespace distillscope
