#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cmath>
#include <memory>

#include "distillscope/errors.hpp"
#include "distillscope/scoring.hpp"
#include "test_support.hpp"

using namespace distillscope;

namespace {

NetworkSpec scoring_spec(bool bias) {
  NetworkSpec s;
  s.input_shape = {1, 8, 8};
  s.layers = {LayerSpec::conv(4, 3, 1, bias), LayerSpec::relu(), LayerSpec::maxpool(2, 2, true),
              LayerSpec::conv(6, 3, 1, bias), LayerSpec::relu(), LayerSpec::maxpool(2, 2, true),
              LayerSpec::flatten(), LayerSpec::dense(2, bias)};
  return s;
}

std::vector<Sample> random_samples(std::size_t n, std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "img_" + std::to_string(i);
    s.image = testing::random_tensor<float>(Shape{1, 8, 8}, mix_seed(seed, i), 0.0, 1.0);
    s.anomalous = i % 3 == 0;
    out.push_back(std::move(s));
  }
  return out;
}

double rank_auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  std::unique_ptr<bool[]> flags(new bool[labels.size()]);
  for (std::size_t i = 0; i < labels.size(); ++i) flags[i] = labels[i];
  return auroc(std::span<const double>(scores), std::span<const bool>(flags.get(), labels.size()));
}

}  // namespace

TEST_CASE("auroc examples") {
  CHECK(rank_auroc({0, 0, 1, 1, 0}, {false, false, true, true, false}) == 1.0);
  CHECK(rank_auroc({1, 1, 0, 0}, {false, false, true, true}) == 0.0);
  CHECK(rank_auroc({0.3, 0.3, 0.3, 0.3, 0.3}, {true, false, false, true, false}) == 0.5);
  CHECK_THROWS_AS(rank_auroc({1, 2, 3}, {false, false, false}), UndefinedMetricError);
  CHECK_THROWS_AS(rank_auroc({1, 2, 3}, {true, true, true}), UndefinedMetricError);
  CHECK_THROWS_AS(rank_auroc({1, std::nan(""), 3}, {true, false, true}), NumericError);
}

TEST_CASE("auroc equals pairwise counting on random sets with ties") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> scores(n);
    std::vector<bool> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid so ties are frequent
      scores[i] = std::floor(rng.uniform(0.0, 10.0)) / 2.0;
      labels[i] = rng.below(2) == 1;
    }
    labels[0] = true;
    labels[1] = false;
    CHECK(rank_auroc(scores, labels) == testing::pairwise_auroc(scores, labels));
  }
}

TEST_CASE("auroc is invariant under a strictly increasing transform") {
  Rng rng(7);
  std::vector<double> scores(150), transformed(150);
  std::vector<bool> labels(150);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform(-3.0, 3.0);
    transformed[i] = std::exp(scores[i]);
    labels[i] = rng.uniform() < 0.4;
  }
  CHECK(rank_auroc(scores, labels) == rank_auroc(transformed, labels));
}

TEST_CASE("auroc over scored samples requires every label") {
  std::vector<ScoredSample> s{{"a", 0.1, false}, {"b", 0.9, true}, {"d", 0.2, false}};
  CHECK(auroc(s) == 1.0);
  const EvalResult r = evaluate(s);
  CHECK(r.auroc == 1.0);
  CHECK(r.n_normal == 2);
  CHECK(r.n_anomalous == 1);
  s.push_back({"c", 5.0, std::nullopt});
  CHECK_THROWS_AS(auroc(s), UndefinedMetricError);
}

TEST_CASE("identity cloner scores zero") {
  const auto source = build_network<float>(scoring_spec(false), 3);
  const auto cloner = copy_matching_weights(source, make_cloner_spec(source.spec, 1.0));
  for (const auto& s : random_samples(10, 1)) CHECK(anomaly_score(source, cloner, Objective::total(1.3), s.image) < 1e-10);
}

TEST_CASE("anomaly_score equals loss_total on the sample's activations") {
  const auto source = build_network<float>(scoring_spec(true), 3);
  const auto cloner = build_network<float>(make_cloner_spec(source.spec, 0.5), 4);
  const double lambda = 0.8;
  for (const auto& s : random_samples(5, 2)) {
    const Tensor<float> batch = s.image.reshaped(Shape{1, 1, 8, 8});
    const double expected =
        loss_total(collect_activations(source, batch), collect_activations(cloner, batch), lambda);
    const double got = anomaly_score(source, cloner, Objective::total(lambda), s.image);
    CHECK(got == expected);
    CHECK(anomaly_score(source, cloner, Objective::total(lambda), s.image) == got);
  }
  CHECK_THROWS_AS(anomaly_score(source, cloner, Objective::total(lambda), Tensor<float>(Shape{1, 7, 8})),
                  DimensionError);
}

TEST_CASE("score_dataset is independent of batch size and thread count") {
  const auto source = build_network<float>(scoring_spec(true), 3);
  const auto cloner = build_network<float>(make_cloner_spec(source.spec, 0.5), 4);
  const auto data = random_samples(37, 5);
  const Objective o = Objective::total(0.5);
  const auto one = score_dataset(source, cloner, o, data, 1, 1);
  const auto many = score_dataset(source, cloner, o, data, 64, 1);
  const auto threaded = score_dataset(source, cloner, o, data, 5, 3);
  REQUIRE(one.size() == data.size());
  REQUIRE(many.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(one[i].sample_id == data[i].id);
    CHECK(one[i].anomalous == data[i].anomalous);
    CHECK(std::abs(one[i].score - many[i].score) <= 1e-5 * std::max(1.0, std::abs(one[i].score)));
    CHECK(threaded[i].sample_id == data[i].id);
    CHECK(std::abs(threaded[i].score - many[i].score) <= 1e-5 * std::max(1.0, std::abs(many[i].score)));
  }
  CHECK(score_dataset(source, cloner, o, std::span<const Sample>(), 8).empty());
}

TEST_CASE("score_dataset names the offending sample on a shape mismatch") {
  const auto source = build_network<float>(scoring_spec(true), 3);
  const auto cloner = build_network<float>(make_cloner_spec(source.spec, 0.5), 4);
  auto data = random_samples(4, 5);
  data[2].image = Tensor<float>(Shape{1, 9, 9});
  try {
    score_dataset(source, cloner, Objective::total(1.0), data, 2, 1);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("img_2") != std::string::npos);
  }
}

TEST_CASE("score csv round trip") {
  const auto dir = testing::scratch_dir("scores");
  const std::vector<ScoredSample> s{{"a", 0.125, false}, {"b", 1e-20, true}, {"d", 3.0 / 7.0, std::nullopt}};
  write_score_csv(dir / "s.csv", s);
  const std::string text = testing::read_file(dir / "s.csv");
  CHECK(text.rfind("sample_id,score,label\n", 0) == 0);
  CHECK(text.find('\r') == std::string::npos);
  const auto back = read_score_csv(dir / "s.csv");
  REQUIRE(back.size() == s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(back[i].sample_id == s[i].sample_id);
    CHECK(back[i].score == s[i].score);
    CHECK(back[i].anomalous == s[i].anomalous);
  }
  const std::vector<ScoredSample> bad{{"x,y", 1.0, true}};
  CHECK_THROWS_AS(write_score_csv(dir / "bad.csv", bad), Error);
}

TEST_CASE("parallel_for covers every index once and rethrows") {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw DataError("boom");
                               }),
                  DataError);
}
