#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "distillscope/config.hpp"
#include "distillscope/distill.hpp"
#include "distillscope/localize.hpp"
#include "distillscope/scoring.hpp"
#include "distillscope/train.hpp"

namespace distillscope {

using Logger = std::function<void(const std::string&)>;

struct LabeledData {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Raw labelled data (IDX) or folder data, with limits and preprocessing applied.
LabeledData load_labeled_data(const DataConfig& data);
Split make_split(const DataConfig& data, const LabeledData& labeled);

std::array<std::size_t, 3> input_shape_of(std::span<const Sample> samples);

/// Source spec with the configured critical-point subset.
NetworkSpec configured_source_spec(const RunConfig& config, std::array<std::size_t, 3> input_shape);
NetworkSpec configured_cloner_spec(const RunConfig& config, const NetworkSpec& source_spec);

Network<float> load_source(const RunConfig& config, std::array<std::size_t, 3> input_shape);

// ---- commands; each writes its resolved config next to its outputs ----

struct SourceReport {
  TrainResult result;
  std::filesystem::path weights;
};
SourceReport cmd_train_source(const RunConfig& config, const Logger& log = {});
SourceReport train_source_stage(const RunConfig& config, const LabeledData& labeled, const Logger& log = {});

struct DistillReport {
  NetworkSpec cloner_spec;
  DistillState state;
  Objective objective;
  std::filesystem::path checkpoint;
  bool reused = false;
};
DistillReport cmd_distill(const RunConfig& config, bool resume, const Logger& log = {});
/// Distils into config.checkpoint_dir(). With `reuse`, a finished checkpoint
/// with the same config hash is loaded instead of retrained.
DistillReport distill_stage(const RunConfig& config, const Network<float>& source, std::span<const Sample> train,
                            bool resume, bool reuse, const Logger& log = {});

struct ScoreReport {
  std::vector<ScoredSample> scores;
  std::filesystem::path score_file;
  std::optional<EvalResult> eval;  // present when both labels occur
};
ScoreReport cmd_score(const RunConfig& config, const Logger& log = {});
ScoreReport score_stage(const RunConfig& config, const Network<float>& source, const DistillReport& distilled,
                        std::span<const Sample> test, const std::filesystem::path& score_file);

/// Reads a score file, computes AUROC and writes "<stem>_eval.csv" beside it
/// (or to `report` when given).
EvalResult cmd_eval(const std::filesystem::path& score_file, const std::optional<std::filesystem::path>& report = {});
void write_eval_report(const std::filesystem::path& path, const EvalResult& result);

struct LocalizeReport {
  std::vector<LocalizationMap> maps;
  std::vector<Tensor<float>> masks;
  std::optional<double> pixel_auroc;
  std::filesystem::path directory;
};
LocalizeReport cmd_localize(const RunConfig& config, const Logger& log = {});
/// Test images that carry masks, or synthetic square defects on normal test images.
std::vector<Sample> localization_samples(const RunConfig& config, const Split& split);
LocalizeReport localize_stage(const RunConfig& config, const Network<float>& source, const DistillReport& distilled,
                              std::span<const Sample> samples, const std::filesystem::path& directory,
                              const Logger& log = {});

struct AblationRow {
  std::string variant;
  std::string metric;
  std::vector<double> per_seed;
  double mean = 0.0;
};
struct AblationReport {
  std::vector<AblationRow> rows;
  std::filesystem::path table;
};
AblationReport cmd_ablate(const RunConfig& config, const Logger& log = {});
void write_ablation_table(const std::filesystem::path& path, AblationStudy study, const std::vector<AblationRow>& rows);

/// File-name-safe version of a sample id.
std::string safe_file_name(const std::string& id);

}  // namespace distillscope
