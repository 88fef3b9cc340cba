#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "distillscope/tensor.hpp"

namespace distillscope {

struct Sample {
  std::string id;
  Tensor<float> image;  // [C,H,W], values in [0,1] before normalization
  int label = -1;       // class label; -1 when unknown
  std::optional<bool> anomalous;
  std::optional<Tensor<float>> mask;  // [H,W] of 0/1
};

/// MNIST-style IDX pair (0x00000803 images, 0x00000801 labels).
std::vector<Sample> load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

struct FolderDataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// root/train/good/*, root/test/<category>/*, root/ground_truth/<category>/<stem>[_mask].*
/// Test samples are anomalous unless they live under a "good" directory.
FolderDataset load_folder(const std::filesystem::path& root, bool with_masks);

enum class SplitMode { OneClass, Folder };

struct Normalization {
  std::vector<float> mean;  // one value per channel, or a single value for all
  std::vector<float> std;
};

struct SplitSpec {
  SplitMode mode = SplitMode::OneClass;
  std::optional<int> normal_class;
  std::optional<std::pair<std::size_t, std::size_t>> resize_to;  // H, W
  std::optional<Normalization> normalization;
};

struct Split {
  std::vector<Sample> train;  // normal samples only
  std::vector<Sample> test;   // every test sample, with anomaly flags
};

Split make_one_class_split(std::span<const Sample> train, std::span<const Sample> test, const SplitSpec& spec);

/// Bilinear resize (half-pixel centres) then per-channel (x - mean) / std.
/// Masks are resized nearest-neighbour.
Sample preprocess(const Sample& sample, const SplitSpec& spec);

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width);
Tensor<float> resize_nearest(const Tensor<float>& map, std::size_t height, std::size_t width);

struct AugmentParams {
  double angle_deg = 0.0;
  double scale = 1.0;
};

inline constexpr double kMaxRotationDeg = 20.0;
inline constexpr double kMinScale = 0.9;
inline constexpr double kMaxScale = 1.05;

AugmentParams draw_augment_params(std::uint64_t seed);

/// Rotation about the image centre plus isotropic scaling, bilinear
/// resampling with reflected borders.
Sample apply_augmentation(const Sample& sample, const AugmentParams& params);
Sample augment(const Sample& sample, std::uint64_t seed);

/// Stacks sample images into [N,C,H,W].
Tensor<float> batch_images(std::span<const Sample> samples);
Tensor<float> batch_images(std::span<const Sample> samples, std::span<const std::size_t> indices);

/// Copies of `normals` with a filled square pasted at a seeded position;
/// each result carries the square as its ground-truth mask.
std::vector<Sample> make_square_defects(std::span<const Sample> normals, std::size_t count, std::size_t size,
                                        float value, std::uint64_t seed);

}  // namespace distillscope
