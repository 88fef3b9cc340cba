#include "distillscope/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include "distillscope/csv.hpp"

namespace distillscope {
namespace fs = std::filesystem;

std::size_t evaluation_threads() {
  if (const char* env = std::getenv("DISTILLSCOPE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

double anomaly_score(const Network<float>& source, const Network<float>& cloner, const Objective& objective,
                     const Tensor<float>& sample) {
  Tensor<float> batch = sample.rank() == 3 ? sample.reshaped(Shape{1, sample.dim(0), sample.dim(1), sample.dim(2)})
                                           : sample;
  if (batch.rank() != 4 || batch.dim(0) != 1)
    throw ContractError("anomaly_score expects a single image, got " + shape_string(sample.shape()));
  const auto s = collect_activations(source, batch);
  const auto c = collect_activations(cloner, batch);
  return loss_terms(s, c, objective.cosine_epsilon, objective.form).combined(objective)[0];
}

std::vector<ScoredSample> score_dataset(const Network<float>& source, const Network<float>& cloner,
                                        const Objective& objective, std::span<const Sample> dataset,
                                        std::size_t batch_size, std::size_t threads) {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  std::vector<ScoredSample> out(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Shape& s = dataset[i].image.shape();
    const auto& in = source.spec.input_shape;
    if (s.size() != 3 || s[0] != in[0] || s[1] != in[1] || s[2] != in[2])
      throw DimensionError("sample " + dataset[i].id + ": shape " + shape_string(s) + " does not match network input");
    out[i].sample_id = dataset[i].id;
    out[i].anomalous = dataset[i].anomalous;
  }
  const std::size_t n_batches = (dataset.size() + batch_size - 1) / batch_size;
  parallel_for(n_batches, threads ? threads : evaluation_threads(), [&](std::size_t b) {
    const std::size_t start = b * batch_size, stop = std::min(dataset.size(), start + batch_size);
    const Tensor<float> batch = batch_images(dataset.subspan(start, stop - start));
    const auto s = collect_activations(source, batch);
    const auto c = collect_activations(cloner, batch);
    const auto scores = loss_terms(s, c, objective.cosine_epsilon, objective.form).combined(objective);
    for (std::size_t k = 0; k < scores.size(); ++k) out[start + k].score = scores[k];
  });
  return out;
}

double auroc(std::span<const double> scores, std::span<const bool> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auroc: score and label counts differ");
  const std::size_t n = scores.size();
  std::uint64_t n_pos = 0;
  for (bool l : labels) n_pos += l ? 1 : 0;
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw UndefinedMetricError("AUROC is undefined: need both normal and anomalous samples (got " +
                               std::to_string(n_neg) + " normal, " + std::to_string(n_pos) + " anomalous)");
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("auroc: NaN score");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // twice the midrank sum of the positives, kept integral
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_midrank = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) twice_rank_sum += twice_midrank;
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auroc(std::span<const ScoredSample> scores) {
  std::vector<double> s;
  auto labels = std::make_unique<bool[]>(scores.size());
  for (const auto& x : scores) {
    if (!x.anomalous) throw UndefinedMetricError("sample " + x.sample_id + " has no label");
    labels[s.size()] = *x.anomalous;
    s.push_back(x.score);
  }
  return auroc(s, std::span<const bool>(labels.get(), s.size()));
}

EvalResult evaluate(std::span<const ScoredSample> scores) {
  EvalResult r;
  for (const auto& s : scores) {
    if (!s.anomalous) continue;
    (*s.anomalous ? r.n_anomalous : r.n_normal) += 1;
  }
  r.auroc = auroc(scores);
  return r;
}

void write_score_csv(const fs::path& path, std::span<const ScoredSample> scores) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << "sample_id,score,label\n";
  for (const auto& s : scores) {
    if (s.sample_id.find(',') != std::string::npos) throw Error("sample id contains a comma: " + s.sample_id);
    f << s.sample_id << ',' << format_double(s.score) << ','
      << (s.anomalous ? (*s.anomalous ? "anomalous" : "normal") : "") << '\n';
  }
}

std::vector<ScoredSample> read_score_csv(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read score file " + path.string());
  std::string line;
  if (!std::getline(f, line) || split_csv_line(line) != std::vector<std::string>{"sample_id", "score", "label"})
    throw Error("score file " + path.string() + " lacks the header sample_id,score,label");
  std::vector<ScoredSample> out;
  std::size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 3) throw Error("row " + std::to_string(row) + " of " + path.string() + " is malformed");
    ScoredSample s;
    s.sample_id = cells[0];
    s.score = parse_double(cells[1]);
    if (cells[2] == "anomalous") s.anomalous = true;
    else if (cells[2] == "normal") s.anomalous = false;
    else if (!cells[2].empty()) throw Error("row " + std::to_string(row) + ": unknown label '" + cells[2] + "'");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace distillscope
