#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "distillscope/data.hpp"
#include "distillscope/distill.hpp"
#include "distillscope/localize.hpp"
#include "distillscope/network.hpp"

namespace distillscope {

enum class DataFormat { Idx, Folder };

struct DataConfig {
  DataFormat format = DataFormat::Idx;
  std::filesystem::path root;  // defaults to $DISTILLSCOPE_MNIST_DIR or /root/data/mnist for IDX
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::optional<int> normal_class = 8;
  std::optional<std::pair<std::size_t, std::size_t>> resize;
  std::optional<Normalization> normalization;
  std::optional<std::size_t> limit_train;  // keep the first N labelled training samples
  std::optional<std::size_t> limit_test;
};

struct SourceConfig {
  std::optional<std::filesystem::path> weights;  // defaults to <out>/source/source.mkdw
  std::vector<int> block_widths{16, 32, 64, 64};
  int convs_per_block = 2;
  int num_classes = 10;
  std::size_t epochs = 2;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
};

/// Critical-point subsets: the last 1, 2 or 4 pools, or every pool.
enum class CriticalPoints { Last, Last2, Last4, All };
std::string to_string(CriticalPoints cps);
CriticalPoints parse_critical_points(const std::string& text);
std::size_t critical_point_count(CriticalPoints cps);  // 0 = all

struct ClonerConfig {
  double width_ratio = 0.5;
  CriticalPoints critical_points = CriticalPoints::Last4;
};

struct DefectConfig {
  std::size_t count = 100;
  std::size_t size = 4;
  float value = 1.0f;
};

struct LocalizeConfig {
  LocalizationParams params;
  bool normalize_per_image = false;
  bool raw_csv = false;
  std::optional<std::size_t> limit;
  DefectConfig defects;  // synthetic defects when the dataset carries no masks
};

enum class AblationStudy { Layers, Width, Loss, Interpretability };
std::string to_string(AblationStudy study);
AblationStudy parse_ablation_study(const std::string& text);

struct AblationConfig {
  AblationStudy study = AblationStudy::Layers;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  DataConfig data;
  SourceConfig source;
  ClonerConfig cloner;
  DistillConfig distill;
  std::size_t eval_batch_size = 256;
  LocalizeConfig localize;
  AblationConfig ablation;

  std::filesystem::path source_weights() const;
  std::filesystem::path checkpoint_dir() const { return out / "distill"; }
  /// Distillation settings with the run seed applied.
  DistillConfig distill_config() const;
};

std::filesystem::path default_mnist_dir();

/// Parses a config document; unknown keys and wrong types raise ConfigError
/// naming the offending path (e.g. "distill.max_epochs").
RunConfig parse_config(const nlohmann::json& document);
RunConfig load_config(const std::filesystem::path& path);

/// Fully resolved config, every field spelled out.
nlohmann::ordered_json to_json(const RunConfig& config);
/// Writes the resolved config as JSON.
void write_resolved_config(const RunConfig& config, const std::filesystem::path& path);

/// FNV-1a over the canonical JSON text, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);
/// Hash of everything that determines a distillation run except max_epochs.
std::string distill_config_hash(const RunConfig& config);

}  // namespace distillscope
