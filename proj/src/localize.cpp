#include "distillscope/localize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "distillscope/borders.hpp"
#include "distillscope/rng.hpp"
#include "distillscope/scoring.hpp"

namespace distillscope {

std::string to_string(AttributionMethod method) {
  switch (method) {
    case AttributionMethod::Gradients: return "gradients";
    case AttributionMethod::SmoothGrad: return "smoothgrad";
    case AttributionMethod::GuidedBackprop: return "gbp";
  }
  return "?";
}

AttributionMethod parse_attribution_method(const std::string& text) {
  if (text == "gradients") return AttributionMethod::Gradients;
  if (text == "smoothgrad") return AttributionMethod::SmoothGrad;
  if (text == "gbp") return AttributionMethod::GuidedBackprop;
  throw ParameterError("unknown attribution method '" + text + "' (expected gradients, smoothgrad or gbp)");
}

StructuringElement StructuringElement::ellipse(std::size_t rows, std::size_t cols) {
  StructuringElement e{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
  e.validate();
  const double ry = rows / 2, rx = cols / 2;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double dy = ry > 0 ? (double(r) - ry) / ry : 0.0;
      const double dx = rx > 0 ? (double(c) - rx) / rx : 0.0;
      e.mask[r * cols + c] = dy * dy + dx * dx <= 1.0 ? 1 : 0;
    }
  return e;
}

StructuringElement StructuringElement::square(std::size_t size) {
  StructuringElement e{size, size, std::vector<std::uint8_t>(size * size, 1)};
  e.validate();
  return e;
}

void StructuringElement::validate() const {
  if (rows % 2 == 0 || cols % 2 == 0)
    throw ParameterError("structuring element extents must be odd, got " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  if (mask.size() != rows * cols) throw ParameterError("structuring element mask size does not match its extents");
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw ParameterError("structuring element is empty");
}

void LocalizationParams::validate() const {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ParameterError("sigma must be finite and >= 0");
  element.validate();
  if (smoothgrad_samples < 1) throw ParameterError("smoothgrad_samples must be >= 1");
  if (!(smoothgrad_noise >= 0.0) || !std::isfinite(smoothgrad_noise))
    throw ParameterError("smoothgrad_noise must be finite and >= 0");
}

template <typename T>
Tensor<T> input_gradient(const Network<T>& source, const Network<T>& cloner, const Objective& objective,
                         const Tensor<T>& sample, BackwardMode mode) {
  if (sample.rank() == 4 && sample.dim(0) != 1)
    throw ContractError("attribution takes a single image, got a batch of " + std::to_string(sample.dim(0)));
  if (sample.rank() != 3 && sample.rank() != 4)
    throw ContractError("attribution takes a [C,H,W] image, got " + shape_string(sample.shape()));
  const Shape chw = sample.rank() == 3 ? sample.shape() : Shape{sample.dim(1), sample.dim(2), sample.dim(3)};
  Graph<T> g(mode);
  Var x = g.leaf(sample.reshaped(Shape{1, chw[0], chw[1], chw[2]}), true, "input");
  const ForwardTrace s = forward(source, g, x, false);
  const ForwardTrace c = forward(cloner, g, x, false);
  Var loss = discrepancy<T>(g, s.activations, c.activations, objective);
  g.backward(loss);
  return g.grad(x).reshaped(chw);
}

template <typename T>
Tensor<T> collapse_channels(const Tensor<T>& gradient) {
  if (gradient.rank() != 3) throw DimensionError("expected [C,H,W], got " + shape_string(gradient.shape()));
  const std::size_t c = gradient.dim(0), hw = gradient.dim(1) * gradient.dim(2);
  Tensor<T> out(Shape{gradient.dim(1), gradient.dim(2)});
  const T* g = gradient.raw();
  for (std::size_t p = 0; p < hw; ++p) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += std::abs(static_cast<double>(g[k * hw + p]));
    out[p] = static_cast<T>(acc / static_cast<double>(c));
  }
  return out;
}

template <typename T>
Tensor<T> attribution(const Network<T>& source, const Network<T>& cloner, const Objective& objective,
                      const Tensor<T>& sample, AttributionMethod method, std::size_t smoothgrad_samples,
                      double smoothgrad_noise, std::uint64_t noise_seed) {
  switch (method) {
    case AttributionMethod::Gradients:
      return collapse_channels(input_gradient(source, cloner, objective, sample, BackwardMode::Standard));
    case AttributionMethod::GuidedBackprop:
      return collapse_channels(input_gradient(source, cloner, objective, sample, BackwardMode::Guided));
    case AttributionMethod::SmoothGrad: break;
  }
  if (smoothgrad_samples < 1) throw ParameterError("smoothgrad_samples must be >= 1");
  if (!(smoothgrad_noise >= 0.0)) throw ParameterError("smoothgrad_noise must be >= 0");
  const auto data = sample.data();
  if (data.empty()) throw DimensionError("empty sample");
  const auto [lo, hi] = std::minmax_element(data.begin(), data.end());
  const double stddev = smoothgrad_noise * (static_cast<double>(*hi) - static_cast<double>(*lo));

  Rng rng(noise_seed);
  std::vector<double> acc;
  Shape map_shape;
  for (std::size_t s = 0; s < smoothgrad_samples; ++s) {
    Tensor<T> noisy = sample;
    for (auto& v : noisy.data()) v = static_cast<T>(static_cast<double>(v) + stddev * rng.normal());
    const Tensor<T> a = collapse_channels(input_gradient(source, cloner, objective, noisy, BackwardMode::Standard));
    if (acc.empty()) {
      acc.assign(a.numel(), 0.0);
      map_shape = a.shape();
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(a[i]);
  }
  Tensor<T> out(map_shape);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(smoothgrad_samples));
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw ParameterError("sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (long i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  for (double& v : k) v /= total;
  return k;
}

namespace {

void check_map(const Tensor<float>& map) {
  if (map.rank() != 2) throw DimensionError("expected an [H,W] map, got " + shape_string(map.shape()));
}

}  // namespace

Tensor<float> gaussian_filter(const Tensor<float>& map, double sigma) {
  check_map(map);
  if (sigma == 0.0) return map;
  const std::vector<double> k = gaussian_kernel(sigma);
  const long radius = static_cast<long>(k.size() / 2);
  const long h = static_cast<long>(map.dim(0)), w = static_cast<long>(map.dim(1));
  std::vector<double> rows(map.numel());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long d = -radius; d <= radius; ++d) acc += k[d + radius] * map[y * w + reflect_index(x + d, w)];
      rows[y * w + x] = acc;
    }
  Tensor<float> out(map.shape());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long d = -radius; d <= radius; ++d) acc += k[d + radius] * rows[reflect_index(y + d, h) * w + x];
      out[y * w + x] = static_cast<float>(acc);
    }
  return out;
}

namespace {

template <typename Pick>
Tensor<float> morph(const Tensor<float>& map, const StructuringElement& e, int sign, Pick pick, float init) {
  check_map(map);
  e.validate();
  const long h = static_cast<long>(map.dim(0)), w = static_cast<long>(map.dim(1));
  const long cy = static_cast<long>(e.rows / 2), cx = static_cast<long>(e.cols / 2);
  Tensor<float> out(map.shape());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      float v = init;
      for (long r = 0; r < static_cast<long>(e.rows); ++r)
        for (long c = 0; c < static_cast<long>(e.cols); ++c) {
          if (!e.mask[r * e.cols + c]) continue;
          const long yy = clamp_index(y + sign * (r - cy), h), xx = clamp_index(x + sign * (c - cx), w);
          v = pick(v, map[yy * w + xx]);
        }
      out[y * w + x] = v;
    }
  return out;
}

}  // namespace

Tensor<float> erosion(const Tensor<float>& map, const StructuringElement& element) {
  return morph(map, element, +1, [](float a, float b) { return std::min(a, b); },
               std::numeric_limits<float>::infinity());
}

Tensor<float> dilation(const Tensor<float>& map, const StructuringElement& element) {
  return morph(map, element, -1, [](float a, float b) { return std::max(a, b); },
               -std::numeric_limits<float>::infinity());
}

Tensor<float> opening(const Tensor<float>& map, const StructuringElement& element) {
  return dilation(erosion(map, element), element);
}

LocalizationMap localization_map(const Network<float>& source, const Network<float>& cloner,
                                 const Objective& objective, const Sample& sample, const LocalizationParams& params,
                                 std::uint64_t noise_seed) {
  params.validate();
  LocalizationMap m;
  m.sample_id = sample.id;
  m.method = params.method;
  m.sigma = params.sigma;
  m.filtered = params.filter;
  m.element = params.element;
  m.smoothgrad_samples = params.smoothgrad_samples;
  m.smoothgrad_noise = params.smoothgrad_noise;
  try {
    m.raw = attribution(source, cloner, objective, sample.image, params.method, params.smoothgrad_samples,
                        params.smoothgrad_noise, noise_seed);
  } catch (const DimensionError& e) {
    throw DimensionError("sample " + sample.id + ": " + e.what());
  }
  m.values = params.filter ? opening(gaussian_filter(m.raw, params.sigma), params.element) : m.raw;
  return m;
}

std::vector<LocalizationMap> localize_dataset(const Network<float>& source, const Network<float>& cloner,
                                              const Objective& objective, std::span<const Sample> samples,
                                              const LocalizationParams& params, std::size_t threads) {
  params.validate();
  std::vector<LocalizationMap> out(samples.size());
  parallel_for(samples.size(), threads ? threads : evaluation_threads(), [&](std::size_t i) {
    out[i] = localization_map(source, cloner, objective, samples[i], params, mix_seed(params.seed, i));
  });
  return out;
}

Tensor<float> normalize_min_max(const Tensor<float>& map) {
  Tensor<float> out(map.shape(), 0.0f);
  const auto d = map.data();
  if (d.empty()) return out;
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < d.size(); ++i)
    out[i] = static_cast<float>((static_cast<double>(d[i]) - static_cast<double>(*lo)) / range);
  return out;
}

double pixel_auroc(std::span<const Tensor<float>> maps, std::span<const Tensor<float>> masks, bool normalize_per_image,
                   std::span<const std::string> ids) {
  if (maps.size() != masks.size())
    throw DimensionError("pixel_auroc: " + std::to_string(maps.size()) + " maps but " + std::to_string(masks.size()) +
                         " masks");
  std::vector<double> values;
  std::vector<char> labels;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].shape() != masks[i].shape()) {
      const std::string id = i < ids.size() ? ids[i] : "#" + std::to_string(i);
      throw DimensionError("image " + id + ": map " + shape_string(maps[i].shape()) + " vs mask " +
                           shape_string(masks[i].shape()));
    }
    const Tensor<float> m = normalize_per_image ? normalize_min_max(maps[i]) : maps[i];
    for (std::size_t p = 0; p < m.numel(); ++p) {
      values.push_back(m[p]);
      labels.push_back(masks[i][p] > 0.5f);
    }
  }
  auto flags = std::make_unique<bool[]>(labels.size());
  std::copy(labels.begin(), labels.end(), flags.get());
  return auroc(values, std::span<const bool>(flags.get(), labels.size()));
}

double pixel_auroc(std::span<const LocalizationMap> maps, std::span<const Tensor<float>> masks,
                   bool normalize_per_image, bool use_raw) {
  std::vector<Tensor<float>> values;
  std::vector<std::string> ids;
  for (const auto& m : maps) {
    values.push_back(use_raw ? m.raw : m.values);
    ids.push_back(m.sample_id);
  }
  return pixel_auroc(values, masks, normalize_per_image, ids);
}

#define DISTILLSCOPE_INSTANTIATE_LOCALIZE(T)                                                                     \
  template Tensor<T> input_gradient<T>(const Network<T>&, const Network<T>&, const Objective&, const Tensor<T>&, \
                                       BackwardMode);                                                          \
  template Tensor<T> collapse_channels<T>(const Tensor<T>&);                                                    \
  template Tensor<T> attribution<T>(const Network<T>&, const Network<T>&, const Objective&, const Tensor<T>&,   \
                                    AttributionMethod, std::size_t, double, std::uint64_t);

DISTILLSCOPE_INSTANTIATE_LOCALIZE(float)
DISTILLSCOPE_INSTANTIATE_LOCALIZE(double)

}  // namespace distillscope
