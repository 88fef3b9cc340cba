#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distillscope/data.hpp"
#include "distillscope/losses.hpp"
#include "distillscope/network.hpp"

namespace distillscope {

struct ScoredSample {
  std::string sample_id;
  double score = 0.0;
  std::optional<bool> anomalous;  // unknown when absent
};

struct EvalResult {
  double auroc = 0.0;
  std::size_t n_normal = 0;
  std::size_t n_anomalous = 0;
  std::filesystem::path score_file;
};

/// Objective of one sample (two forward passes, no gradients).
double anomaly_score(const Network<float>& source, const Network<float>& cloner, const Objective& objective,
                     const Tensor<float>& sample);

/// Batched scores in dataset order. Batches are spread over up to
/// `threads` workers (0 = evaluation_threads()).
std::vector<ScoredSample> score_dataset(const Network<float>& source, const Network<float>& cloner,
                                        const Objective& objective, std::span<const Sample> dataset,
                                        std::size_t batch_size, std::size_t threads = 0);

/// Mann-Whitney AUROC with midrank ties; labels true = anomalous.
/// Throws UndefinedMetricError when only one class is present.
double auroc(std::span<const double> scores, std::span<const bool> labels);
double auroc(std::span<const ScoredSample> scores);

EvalResult evaluate(std::span<const ScoredSample> scores);

// Score file: "sample_id,score,label", label in {normal, anomalous, ""}.
void write_score_csv(const std::filesystem::path& path, std::span<const ScoredSample> scores);
std::vector<ScoredSample> read_score_csv(const std::filesystem::path& path);

/// Worker count for evaluation: DISTILLSCOPE_THREADS if set, else hardware concurrency.
std::size_t evaluation_threads();

/// Runs fn(i) for i in [0, count) over `threads` workers; the first exception is rethrown.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace distillscope
