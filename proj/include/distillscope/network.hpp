#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "distillscope/graph.hpp"
#include "distillscope/tensor.hpp"

namespace distillscope {

enum class LayerKind { Conv, Relu, MaxPool, Flatten, Dense };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int channels = 0;     // conv output channels
  int in_channels = 0;  // conv input channels; 0 = inferred from the previous layer
  int kernel = 3;
  int stride = 1;       // conv stride, or pooling stride
  int padding = 0;
  int window = 2;       // pooling window
  int units = 0;        // dense output width
  int in_features = 0;  // dense input width; 0 = inferred
  bool use_bias = false;
  bool critical = false;

  static LayerSpec conv(int channels, int kernel = 3, int padding = 1, bool use_bias = true);
  static LayerSpec relu();
  static LayerSpec maxpool(int window = 2, int stride = 2, bool critical = false);
  static LayerSpec flatten();
  static LayerSpec dense(int units, bool use_bias = true);

  bool has_parameters() const { return kind == LayerKind::Conv || kind == LayerKind::Dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::string name;
  std::array<std::size_t, 3> input_shape{1, 28, 28};  // C, H, W
  std::vector<LayerSpec> layers;
  /// Allows critical points on layers other than MAXPOOL.
  bool any_layer_critical = false;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Per-sample output shape of every layer ([C,H,W] or [D]). Throws
/// SpecError naming the first inconsistent layer.
std::vector<Shape> infer_shapes(const NetworkSpec& spec);

/// Full validation: shapes plus critical-point placement rules.
void validate(const NetworkSpec& spec);

std::vector<std::size_t> critical_layers(const NetworkSpec& spec);
std::size_t critical_count(const NetworkSpec& spec);

/// Expected weight entries (key -> shape) for a spec.
std::map<std::string, Shape> parameter_shapes(const NetworkSpec& spec);
std::string parameter_key(std::size_t layer, const char* role);

/// VGG-style source: one block per width, each block `convs_per_block` x
/// (3x3 CONV + RELU) followed by a critical 2x2 MAXPOOL, then a dense head.
NetworkSpec default_source_spec(std::array<std::size_t, 3> input_shape, std::vector<int> block_widths = {16, 32, 64, 64},
                                int convs_per_block = 2, int num_classes = 10);

/// Head-less, bias-free, width-scaled mirror of `source`. Output channels of
/// the conv feeding each critical point keep the source width so critical
/// activations have identical shapes in both networks.
NetworkSpec make_cloner_spec(const NetworkSpec& source, double width_ratio);

/// Keeps only the last `count` pooling layers as critical points (0 = all).
NetworkSpec select_critical_points(const NetworkSpec& spec, std::size_t count);

template <typename T>
struct Network {
  NetworkSpec spec;
  std::map<std::string, Tensor<T>> weights;

  template <typename U>
  Network<U> cast() const {
    Network<U> out{spec, {}};
    for (const auto& [k, v] : weights) out.weights.emplace(k, v.template cast<U>());
    return out;
  }
};

/// Kaiming-normal kernels (std = sqrt(2 / fan_in)), zero biases.
template <typename T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed);

/// Copies every weight of `source` whose key also exists in `target_spec`
/// (used to build identity cloners); throws on shape disagreement.
template <typename T>
Network<T> copy_matching_weights(const Network<T>& source, const NetworkSpec& target_spec);

/// Activations recorded at each critical point, in network depth order.
template <typename T>
struct ActivationSet {
  std::vector<std::size_t> layers;
  std::vector<Tensor<T>> values;

  std::size_t size() const { return values.size(); }
};

/// Graph handles produced by one forward pass.
struct ForwardTrace {
  Var input;
  Var output;
  std::vector<std::size_t> cp_layers;
  std::vector<Var> activations;
  std::map<std::string, Var> parameters;
};

/// Appends the network's layers to `graph`, starting from `input`.
template <typename T>
ForwardTrace forward(const Network<T>& net, Graph<T>& graph, Var input, bool params_require_grad);

template <typename T>
struct ForwardResult {
  Graph<T> graph;
  ForwardTrace trace;
  Tensor<T> output;
  ActivationSet<T> activations;
};

template <typename T>
ForwardResult<T> forward_collect(const Network<T>& net, const Tensor<T>& batch, bool track_grad);

/// Forward pass without gradient bookkeeping; returns only the critical activations.
template <typename T>
ActivationSet<T> collect_activations(const Network<T>& net, const Tensor<T>& batch);

void check_input_shape(const NetworkSpec& spec, const Shape& batch_shape);

// Weight files: "MKDW", u32 version, u32 count, then per entry
// u16 key length, key, u8 rank, u32 extents, f32 values (all little-endian).
inline constexpr std::uint32_t kWeightFileVersion = 1;

void write_tensor_file(const std::filesystem::path& path, const std::map<std::string, Tensor<float>>& entries);
std::map<std::string, Tensor<float>> read_tensor_file(const std::filesystem::path& path);

void save_weights(const Network<float>& net, const std::filesystem::path& path);
Network<float> load_weights(const NetworkSpec& spec, const std::filesystem::path& path);

}  // namespace distillscope
