#include "distillscope/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "distillscope/rng.hpp"

namespace distillscope {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv(int channels, int kernel, int padding, bool use_bias) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.channels = channels;
  l.kernel = kernel;
  l.padding = padding;
  l.use_bias = use_bias;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool(int window, int stride, bool critical) {
  LayerSpec l;
  l.kind = LayerKind::MaxPool;
  l.window = window;
  l.stride = stride;
  l.critical = critical;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::Flatten;
  return l;
}

LayerSpec LayerSpec::dense(int units, bool use_bias) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.units = units;
  l.use_bias = use_bias;
  return l;
}

namespace {

[[noreturn]] void spec_error(std::size_t layer, const LayerSpec& l, const std::string& what) {
  throw SpecError("layer " + std::to_string(layer) + " (" + to_string(l.kind) + "): " + what);
}

}  // namespace

std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
  Shape cur{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  if (shape_numel(cur) == 0) throw SpecError("input shape must be positive");
  std::vector<Shape> out;
  out.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (cur.size() != 3) spec_error(i, l, "expects [C,H,W] input, got " + shape_string(cur));
        if (l.channels < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0)
          spec_error(i, l, "invalid channels/kernel/stride/padding");
        if (l.in_channels != 0 && static_cast<std::size_t>(l.in_channels) != cur[0])
          spec_error(i, l, "declares " + std::to_string(l.in_channels) + " input channels but receives " +
                               std::to_string(cur[0]));
        const std::size_t k = l.kernel, p = 2 * static_cast<std::size_t>(l.padding);
        if (k > cur[1] + p || k > cur[2] + p) spec_error(i, l, "kernel larger than padded input " + shape_string(cur));
        cur = Shape{static_cast<std::size_t>(l.channels), (cur[1] + p - k) / l.stride + 1,
                    (cur[2] + p - k) / l.stride + 1};
        break;
      }
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool: {
        if (cur.size() != 3) spec_error(i, l, "expects [C,H,W] input, got " + shape_string(cur));
        if (l.window < 1 || l.stride < 1) spec_error(i, l, "invalid window/stride");
        const std::size_t w = l.window;
        if (w > cur[1] || w > cur[2]) spec_error(i, l, "window larger than input " + shape_string(cur));
        cur = Shape{cur[0], (cur[1] - w) / l.stride + 1, (cur[2] - w) / l.stride + 1};
        break;
      }
      case LayerKind::Flatten:
        if (cur.size() != 3) spec_error(i, l, "expects [C,H,W] input, got " + shape_string(cur));
        cur = Shape{shape_numel(cur)};
        break;
      case LayerKind::Dense:
        if (cur.size() != 1) spec_error(i, l, "expects flattened input, got " + shape_string(cur));
        if (l.units < 1) spec_error(i, l, "units must be positive");
        if (l.in_features != 0 && static_cast<std::size_t>(l.in_features) != cur[0])
          spec_error(i, l, "declares " + std::to_string(l.in_features) + " input features but receives " +
                               std::to_string(cur[0]));
        cur = Shape{static_cast<std::size_t>(l.units)};
        break;
    }
    out.push_back(cur);
  }
  return out;
}

void validate(const NetworkSpec& spec) {
  infer_shapes(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.critical && l.kind != LayerKind::MaxPool && !spec.any_layer_critical)
      spec_error(i, l, "critical points must be pooling layers unless any-layer mode is enabled");
    if (l.use_bias && !l.has_parameters()) spec_error(i, l, "bias on a parameter-free layer");
  }
}

std::vector<std::size_t> critical_layers(const NetworkSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].critical) out.push_back(i);
  return out;
}

std::size_t critical_count(const NetworkSpec& spec) { return critical_layers(spec).size(); }

std::string parameter_key(std::size_t layer, const char* role) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "L%03zu.%s", layer, role);
  return buf;
}

std::map<std::string, Shape> parameter_shapes(const NetworkSpec& spec) {
  const auto shapes = infer_shapes(spec);
  std::map<std::string, Shape> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const Shape& in = i == 0 ? Shape{spec.input_shape.begin(), spec.input_shape.end()} : shapes[i - 1];
    if (l.kind == LayerKind::Conv) {
      const std::size_t k = l.kernel;
      out[parameter_key(i, "kernel")] = Shape{static_cast<std::size_t>(l.channels), in[0], k, k};
      if (l.use_bias) out[parameter_key(i, "bias")] = Shape{static_cast<std::size_t>(l.channels)};
    } else if (l.kind == LayerKind::Dense) {
      out[parameter_key(i, "weight")] = Shape{in[0], static_cast<std::size_t>(l.units)};
      if (l.use_bias) out[parameter_key(i, "bias")] = Shape{static_cast<std::size_t>(l.units)};
    }
  }
  return out;
}

NetworkSpec default_source_spec(std::array<std::size_t, 3> input_shape, std::vector<int> block_widths,
                                int convs_per_block, int num_classes) {
  NetworkSpec spec;
  spec.name = "source";
  spec.input_shape = input_shape;
  for (int width : block_widths) {
    for (int c = 0; c < convs_per_block; ++c) {
      spec.layers.push_back(LayerSpec::conv(width, 3, 1, true));
      spec.layers.push_back(LayerSpec::relu());
    }
    spec.layers.push_back(LayerSpec::maxpool(2, 2, true));
  }
  spec.layers.push_back(LayerSpec::flatten());
  spec.layers.push_back(LayerSpec::dense(num_classes, true));
  validate(spec);
  return spec;
}

NetworkSpec make_cloner_spec(const NetworkSpec& source, double width_ratio) {
  if (!(width_ratio > 0.0 && width_ratio <= 1.0))
    throw ParameterError("width_ratio must lie in (0, 1], got " + std::to_string(width_ratio));
  validate(source);
  const auto cps = critical_layers(source);
  if (cps.empty()) throw SpecError("cloner construction needs at least one critical point");

  std::vector<bool> keep_width(source.layers.size(), false);
  for (std::size_t cp : cps) {
    for (std::size_t i = cp + 1; i-- > 0;) {
      const LayerKind k = source.layers[i].kind;
      if (k == LayerKind::Conv || k == LayerKind::Dense) {
        keep_width[i] = true;
        break;
      }
    }
  }

  NetworkSpec cloner;
  cloner.name = source.name + "-cloner";
  cloner.input_shape = source.input_shape;
  cloner.any_layer_critical = source.any_layer_critical;
  for (std::size_t i = 0; i <= cps.back(); ++i) {
    LayerSpec l = source.layers[i];
    l.use_bias = false;
    l.in_channels = 0;
    l.in_features = 0;
    if (l.kind == LayerKind::Conv && !keep_width[i])
      l.channels = std::max(1, static_cast<int>(std::ceil(l.channels * width_ratio - 1e-9)));
    cloner.layers.push_back(l);
  }
  validate(cloner);
  return cloner;
}

NetworkSpec select_critical_points(const NetworkSpec& spec, std::size_t count) {
  std::vector<std::size_t> pools;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::MaxPool) pools.push_back(i);
  if (count > pools.size())
    throw SpecError("requested " + std::to_string(count) + " critical points but the network has only " +
                    std::to_string(pools.size()) + " pooling layers");
  if (count == 0) count = pools.size();
  NetworkSpec out = spec;
  for (auto& l : out.layers) l.critical = false;
  for (std::size_t i = pools.size() - count; i < pools.size(); ++i) out.layers[pools[i]].critical = true;
  return out;
}

template <typename T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  Network<T> net{spec, {}};
  Rng rng(seed);
  for (const auto& [key, shape] : parameter_shapes(spec)) {
    Tensor<T> t(shape);
    if (key.ends_with(".kernel") || key.ends_with(".weight")) {
      // conv kernel [F, C, kh, kw]: fan-in C*kh*kw; dense weight [D, K]: fan-in D
      const std::size_t fan_in = key.ends_with(".kernel") ? shape_numel(shape) / shape[0] : shape[0];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
    }
    net.weights.emplace(key, std::move(t));
  }
  return net;
}

template <typename T>
Network<T> copy_matching_weights(const Network<T>& source, const NetworkSpec& target_spec) {
  Network<T> out{target_spec, {}};
  for (const auto& [key, shape] : parameter_shapes(target_spec)) {
    auto it = source.weights.find(key);
    if (it == source.weights.end()) throw ShapeMismatchError("source has no weight entry " + key);
    if (it->second.shape() != shape)
      throw ShapeMismatchError("entry " + key + ": source " + shape_string(it->second.shape()) + " vs target " +
                               shape_string(shape));
    out.weights.emplace(key, it->second);
  }
  return out;
}

void check_input_shape(const NetworkSpec& spec, const Shape& s) {
  if (s.size() != 4 || s[1] != spec.input_shape[0] || s[2] != spec.input_shape[1] || s[3] != spec.input_shape[2])
    throw DimensionError("network '" + spec.name + "' expects [N," + std::to_string(spec.input_shape[0]) + "," +
                         std::to_string(spec.input_shape[1]) + "," + std::to_string(spec.input_shape[2]) +
                         "] input, got " + shape_string(s));
}

template <typename T>
ForwardTrace forward(const Network<T>& net, Graph<T>& graph, Var input, bool params_require_grad) {
  check_input_shape(net.spec, graph.value(input).shape());
  ForwardTrace trace;
  trace.input = input;
  auto param = [&](std::size_t layer, const char* role) {
    const std::string key = parameter_key(layer, role);
    auto it = net.weights.find(key);
    if (it == net.weights.end()) throw ShapeMismatchError("network is missing weight entry " + key);
    Var v = graph.leaf(it->second, params_require_grad, key);
    trace.parameters.emplace(key, v);
    return v;
  };

  Var x = input;
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    const LayerSpec& l = net.spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        Var k = param(i, "kernel");
        std::optional<Var> b;
        if (l.use_bias) b = param(i, "bias");
        x = conv2d(graph, x, k, b, l.stride, l.padding);
        break;
      }
      case LayerKind::Relu:
        x = relu(graph, x);
        break;
      case LayerKind::MaxPool:
        x = maxpool2d(graph, x, l.window, l.stride);
        break;
      case LayerKind::Flatten:
        x = flatten(graph, x);
        break;
      case LayerKind::Dense: {
        Var w = param(i, "weight");
        std::optional<Var> b;
        if (l.use_bias) b = param(i, "bias");
        x = dense(graph, x, w, b);
        break;
      }
    }
    if (l.critical) {
      trace.cp_layers.push_back(i);
      trace.activations.push_back(x);
    }
  }
  trace.output = x;
  return trace;
}

template <typename T>
ForwardResult<T> forward_collect(const Network<T>& net, const Tensor<T>& batch, bool track_grad) {
  ForwardResult<T> r;
  Var in = r.graph.leaf(batch, track_grad, "input");
  r.trace = forward(net, r.graph, in, track_grad);
  r.output = r.graph.value(r.trace.output);
  r.activations.layers = r.trace.cp_layers;
  for (Var a : r.trace.activations) r.activations.values.push_back(r.graph.value(a));
  return r;
}

template <typename T>
ActivationSet<T> collect_activations(const Network<T>& net, const Tensor<T>& batch) {
  return forward_collect(net, batch, false).activations;
}

// ---- weight files ----

namespace {

constexpr char kMagic[4] = {'M', 'K', 'D', 'W'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw TruncatedFileError(std::string("weight file truncated while reading ") + what);
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const std::map<std::string, Tensor<float>>& entries) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kWeightFileVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [key, t] : entries) {
    if (key.size() > 0xffff) throw WeightFileError("key too long: " + key);
    if (t.rank() > 0xff) throw WeightFileError("rank too large for entry " + key);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(key.size()));
    out += key;
    out.push_back(static_cast<char>(t.rank()));
    for (auto e : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_le<std::uint32_t>(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw WeightFileError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw WeightFileError("failed writing " + path.string());
}

std::map<std::string, Tensor<float>> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw WeightFileError("cannot open weight file " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(f), {}));
  const std::string magic = r.take(4, "magic");
  if (magic != std::string(kMagic, 4)) throw BadMagicError("not a weight file (bad magic): " + path.string());
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightFileVersion)
    throw VersionError("unsupported weight file version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("entry count");
  std::map<std::string, Tensor<float>> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto klen = r.get<std::uint16_t>("key length");
    std::string key = r.take(klen, "key");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (unsigned i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>("extent"));
    if (shape.empty() || shape_numel(shape) == 0) throw WeightFileError("entry " + key + " has an empty shape");
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) {
      const auto bits = r.get<std::uint32_t>("tensor data");
      std::memcpy(&v, &bits, 4);
    }
    if (!out.emplace(key, Tensor<float>(shape, std::move(values))).second)
      throw WeightFileError("duplicate entry " + key);
  }
  if (!r.at_end()) throw WeightFileError("trailing bytes after last entry in " + path.string());
  return out;
}

void save_weights(const Network<float>& net, const std::filesystem::path& path) {
  write_tensor_file(path, net.weights);
}

Network<float> load_weights(const NetworkSpec& spec, const std::filesystem::path& path) {
  auto entries = read_tensor_file(path);
  const auto expected = parameter_shapes(spec);
  for (const auto& [key, shape] : expected) {
    auto it = entries.find(key);
    if (it == entries.end()) throw ShapeMismatchError("weight file lacks entry " + key);
    if (it->second.shape() != shape)
      throw ShapeMismatchError("entry " + key + ": file has " + shape_string(it->second.shape()) + ", spec wants " +
                               shape_string(shape));
  }
  for (const auto& [key, t] : entries)
    if (!expected.contains(key)) throw ShapeMismatchError("weight file has unexpected entry " + key);
  return Network<float>{spec, std::move(entries)};
}

#define DISTILLSCOPE_INSTANTIATE_NETWORK(T)                                                  \
  template Network<T> build_network<T>(const NetworkSpec&, std::uint64_t);                   \
  template Network<T> copy_matching_weights<T>(const Network<T>&, const NetworkSpec&);       \
  template ForwardTrace forward<T>(const Network<T>&, Graph<T>&, Var, bool);                 \
  template ForwardResult<T> forward_collect<T>(const Network<T>&, const Tensor<T>&, bool);   \
  template ActivationSet<T> collect_activations<T>(const Network<T>&, const Tensor<T>&);

DISTILLSCOPE_INSTANTIATE_NETWORK(float)
DISTILLSCOPE_INSTANTIATE_NETWORK(double)

}  // namespace distillscope
