#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distillscope/data.hpp"
#include "distillscope/losses.hpp"
#include "distillscope/network.hpp"

namespace distillscope {

enum class AttributionMethod { Gradients, SmoothGrad, GuidedBackprop };

std::string to_string(AttributionMethod method);
AttributionMethod parse_attribution_method(const std::string& text);

/// Binary footprint with odd extents, centred on its middle element.
struct StructuringElement {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::vector<std::uint8_t> mask{1};

  /// Filled ellipse inscribed in a rows x cols box (3x3 gives the 4-connected cross).
  static StructuringElement ellipse(std::size_t rows, std::size_t cols);
  static StructuringElement square(std::size_t size);
  void validate() const;
  bool operator==(const StructuringElement&) const = default;
};

inline constexpr double kDefaultSigma = 4.0;
inline constexpr std::size_t kDefaultSmoothGradSamples = 25;
inline constexpr double kDefaultSmoothGradNoise = 0.1;

struct LocalizationParams {
  AttributionMethod method = AttributionMethod::Gradients;
  double sigma = kDefaultSigma;
  StructuringElement element = StructuringElement::ellipse(3, 3);
  bool filter = true;  // false skips blur and opening
  std::size_t smoothgrad_samples = kDefaultSmoothGradSamples;
  double smoothgrad_noise = kDefaultSmoothGradNoise;  // fraction of the input's value range
  std::uint64_t seed = 0;

  void validate() const;
};

struct LocalizationMap {
  std::string sample_id;
  Tensor<float> values;  // [H,W], filtered
  Tensor<float> raw;     // [H,W], attribution before filtering
  AttributionMethod method = AttributionMethod::Gradients;
  double sigma = kDefaultSigma;
  bool filtered = true;
  StructuringElement element;
  std::size_t smoothgrad_samples = kDefaultSmoothGradSamples;
  double smoothgrad_noise = kDefaultSmoothGradNoise;
};

/// Gradient of the objective w.r.t. a single input image [C,H,W] or [1,C,H,W],
/// taken through both networks in one backward sweep. Returns [C,H,W].
template <typename T>
Tensor<T> input_gradient(const Network<T>& source, const Network<T>& cloner, const Objective& objective,
                         const Tensor<T>& sample, BackwardMode mode = BackwardMode::Standard);

/// Mean absolute value over channels: [C,H,W] -> [H,W].
template <typename T>
Tensor<T> collapse_channels(const Tensor<T>& gradient);

/// Per-pixel attribution [H,W]. SmoothGrad draws its noise from `noise_seed`.
template <typename T>
Tensor<T> attribution(const Network<T>& source, const Network<T>& cloner, const Objective& objective,
                      const Tensor<T>& sample, AttributionMethod method,
                      std::size_t smoothgrad_samples = kDefaultSmoothGradSamples,
                      double smoothgrad_noise = kDefaultSmoothGradNoise, std::uint64_t noise_seed = 0);

/// Separable Gaussian blur, radius ceil(3 sigma), half-sample reflect borders.
Tensor<float> gaussian_filter(const Tensor<float>& map, double sigma);
std::vector<double> gaussian_kernel(double sigma);

// Grayscale morphology with replicate borders.
Tensor<float> erosion(const Tensor<float>& map, const StructuringElement& element);
Tensor<float> dilation(const Tensor<float>& map, const StructuringElement& element);
Tensor<float> opening(const Tensor<float>& map, const StructuringElement& element);

/// Attribution, then (unless params.filter is false) blur and opening.
LocalizationMap localization_map(const Network<float>& source, const Network<float>& cloner,
                                 const Objective& objective, const Sample& sample, const LocalizationParams& params,
                                 std::uint64_t noise_seed);

/// Maps for a whole dataset, in order; image i uses noise seed mix_seed(params.seed, i).
std::vector<LocalizationMap> localize_dataset(const Network<float>& source, const Network<float>& cloner,
                                              const Objective& objective, std::span<const Sample> samples,
                                              const LocalizationParams& params, std::size_t threads = 0);

/// Pools every pixel of every image; mask values > 0.5 count as anomalous.
double pixel_auroc(std::span<const Tensor<float>> maps, std::span<const Tensor<float>> masks,
                   bool normalize_per_image = false, std::span<const std::string> ids = {});
double pixel_auroc(std::span<const LocalizationMap> maps, std::span<const Tensor<float>> masks,
                   bool normalize_per_image = false, bool use_raw = false);

/// Min-max scaling to [0,1]; a constant map becomes all zeros.
Tensor<float> normalize_min_max(const Tensor<float>& map);

}  // namespace distillscope
