#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "distillscope/errors.hpp"
#include "distillscope/train.hpp"
#include "test_support.hpp"

using namespace distillscope;

namespace {

NetworkSpec toy_spec() {
  NetworkSpec s;
  s.input_shape = {1, 4, 4};
  s.layers = {LayerSpec::conv(4), LayerSpec::relu(), LayerSpec::maxpool(2, 2, true), LayerSpec::flatten(),
              LayerSpec::dense(2)};
  return s;
}

// Class 0 is bright on the left half, class 1 on the right half.
std::vector<Sample> halves(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = std::to_string(i);
    s.label = static_cast<int>(i % 2);
    s.image = Tensor<float>(Shape{1, 4, 4});
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        const bool lit = (x < 2) == (s.label == 0);
        s.image[y * 4 + x] = static_cast<float>((lit ? 0.8 : 0.1) + 0.1 * rng.uniform());
      }
    out.push_back(std::move(s));
  }
  return out;
}

double reference_cross_entropy(const Tensor<double>& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[i * k + j] - mx);
    total += -(logits[i * k + labels[i]] - mx - std::log(z));
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("softmax cross-entropy value and gradient") {
  const auto logits = testing::random_tensor<double>(Shape{3, 4}, 1, -3.0, 3.0);
  const std::vector<int> labels{0, 3, 1};
  Graph<double> g;
  const Var x = g.leaf(logits, true);
  const Var loss = softmax_cross_entropy(g, x, labels);
  CHECK(g.value(loss)[0] == doctest::Approx(reference_cross_entropy(logits, labels)).epsilon(1e-12));
  g.backward(loss);
  auto f = [&](const Tensor<double>& t) { return reference_cross_entropy(t, labels); };
  const auto r = testing::check_gradient(f, logits, g.grad(x), 1e-5, 1e-6, 1e-8);
  CHECK_MESSAGE(r.failures == 0, r.first_failure);

  // uniform logits give log K
  Graph<double> u;
  CHECK(u.value(softmax_cross_entropy(u, u.leaf(Tensor<double>(Shape{2, 5}, 0.0), false), std::vector<int>{1, 4}))[0] ==
        doctest::Approx(std::log(5.0)));
  Graph<double> e;
  CHECK_THROWS_AS(softmax_cross_entropy(e, e.leaf(Tensor<double>(Shape{2, 3}, 0.0), false), std::vector<int>{0, 3}),
                  ParameterError);
}

TEST_CASE("separable toy data is learned") {
  const auto train = halves(64, 1), test = halves(32, 2);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.seed = 3;
  const auto r = train_source_classifier(toy_spec(), train, test, cfg);
  CHECK(r.history.size() == 50);
  CHECK(classification_accuracy(r.network, train) >= 0.99);
  CHECK(r.test_accuracy >= 0.99);
  CHECK(r.history.back().loss < r.history.front().loss);
}

TEST_CASE("zero epochs returns the initial network") {
  const auto train = halves(8, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto a = train_source_classifier(toy_spec(), train, {}, cfg);
  const auto b = train_source_classifier(toy_spec(), train, {}, cfg);
  CHECK(a.history.empty());
  CHECK(a.network.weights == b.network.weights);
  cfg.epochs = 1;
  CHECK_FALSE(train_source_classifier(toy_spec(), train, {}, cfg).network.weights == a.network.weights);
}

TEST_CASE("training is deterministic") {
  const auto train = halves(32, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  const auto a = train_source_classifier(toy_spec(), train, {}, cfg);
  const auto b = train_source_classifier(toy_spec(), train, {}, cfg);
  CHECK(a.network.weights == b.network.weights);
}

TEST_CASE("training errors") {
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_source_classifier(toy_spec(), {}, {}, cfg), DataError);
  auto bad = halves(4, 1);
  bad[2].label = 2;
  CHECK_THROWS_AS(train_source_classifier(toy_spec(), bad, {}, cfg), DataError);
  NetworkSpec headless = toy_spec();
  headless.layers.resize(3);
  CHECK_THROWS_AS(train_source_classifier(headless, halves(4, 1), {}, cfg), SpecError);
  CHECK(output_classes(toy_spec()) == 2);
}
