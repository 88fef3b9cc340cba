#include "distillscope/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include "distillscope/errors.hpp"

namespace distillscope {
namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(CriticalPoints cps) {
  switch (cps) {
    case CriticalPoints::Last: return "last";
    case CriticalPoints::Last2: return "last2";
    case CriticalPoints::Last4: return "last4";
    case CriticalPoints::All: return "all";
  }
  return "?";
}

CriticalPoints parse_critical_points(const std::string& text) {
  if (text == "last") return CriticalPoints::Last;
  if (text == "last2") return CriticalPoints::Last2;
  if (text == "last4") return CriticalPoints::Last4;
  if (text == "all") return CriticalPoints::All;
  throw ConfigError("unknown critical point set '" + text + "' (expected last, last2, last4 or all)");
}

std::size_t critical_point_count(CriticalPoints cps) {
  switch (cps) {
    case CriticalPoints::Last: return 1;
    case CriticalPoints::Last2: return 2;
    case CriticalPoints::Last4: return 4;
    case CriticalPoints::All: return 0;
  }
  return 0;
}

std::string to_string(AblationStudy study) {
  switch (study) {
    case AblationStudy::Layers: return "layers";
    case AblationStudy::Width: return "width";
    case AblationStudy::Loss: return "loss";
    case AblationStudy::Interpretability: return "interpretability";
  }
  return "?";
}

AblationStudy parse_ablation_study(const std::string& text) {
  if (text == "layers") return AblationStudy::Layers;
  if (text == "width") return AblationStudy::Width;
  if (text == "loss") return AblationStudy::Loss;
  if (text == "interpretability") return AblationStudy::Interpretability;
  throw ConfigError("unknown ablation study '" + text + "' (expected layers, width, loss or interpretability)");
}

namespace {

std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::Value: return "val";
    case LossKind::Direction: return "dir";
    case LossKind::Total: return "total";
  }
  return "?";
}

LossKind parse_loss(const std::string& s) {
  if (s == "val") return LossKind::Value;
  if (s == "dir") return LossKind::Direction;
  if (s == "total") return LossKind::Total;
  throw ConfigError("unknown loss '" + s + "' (expected val, dir or total)");
}

std::string form_name(DirectionalForm f) { return f == DirectionalForm::PerLayer ? "per_layer" : "literal"; }

DirectionalForm parse_form(const std::string& s) {
  if (s == "per_layer") return DirectionalForm::PerLayer;
  if (s == "literal") return DirectionalForm::Literal;
  throw ConfigError("unknown directional form '" + s + "' (expected per_layer or literal)");
}

/// One JSON object; remembers which keys were read so leftovers can be rejected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  Section child(const char* key) {
    const json* v = find(key);
    static const json kEmpty = json::object();
    return Section(v ? *v : kEmpty, name(key));
  }

  void read(const char* key, double& out) {
    if (const json* v = find(key)) out = number(*v, key);
  }
  void read(const char* key, float& out) {
    if (const json* v = find(key)) out = static_cast<float>(number(*v, key));
  }
  void read(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(name(key) + " must be an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, std::size_t& out) {
    if (const json* v = find(key)) out = count(*v, key);
  }
  void read(const char* key, std::uint64_t& out, int) {
    if (const json* v = find(key)) out = count(*v, key);
  }
  void read(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(name(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(name(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, fs::path& out) {
    std::string s = out.string();
    read(key, s);
    out = s;
  }
  template <typename T>
  void read_optional(const char* key, std::optional<T>& out) {
    const json* v = find(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    T value{};
    if constexpr (std::is_same_v<T, double>) value = number(*v, key);
    else if constexpr (std::is_same_v<T, std::size_t>) value = count(*v, key);
    else if constexpr (std::is_same_v<T, int>) {
      if (!v->is_number_integer()) throw ConfigError(name(key) + " must be an integer or null");
      value = v->get<int>();
    } else if constexpr (std::is_same_v<T, fs::path>) {
      if (!v->is_string()) throw ConfigError(name(key) + " must be a string or null");
      value = v->get<std::string>();
    }
    out = value;
  }

  template <typename T>
  std::vector<T> list(const char* key, std::vector<T> fallback) {
    const json* v = find(key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(name(key) + " must be an array");
    std::vector<T> out;
    for (const auto& e : *v) {
      if constexpr (std::is_integral_v<T>) {
        if (!e.is_number_integer()) throw ConfigError(name(key) + " must contain integers");
        if constexpr (std::is_unsigned_v<T>)
          if (e.get<long long>() < 0) throw ConfigError(name(key) + " must contain non-negative integers");
        out.push_back(e.get<T>());
      } else {
        out.push_back(static_cast<T>(number(e, key)));
      }
    }
    return out;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key().c_str()) + "'");
  }

  std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  double number(const json& v, const char* key) const {
    if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
    return v.get<double>();
  }
  std::size_t count(const json& v, const char* key) const {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ConfigError(name(key) + " must be a non-negative integer");
    return v.get<std::size_t>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

fs::path default_mnist_dir() {
  if (const char* env = std::getenv("DISTILLSCOPE_MNIST_DIR"); env && *env) return env;
  return "/root/data/mnist";
}

fs::path RunConfig::source_weights() const { return source.weights ? *source.weights : out / "source" / "source.mkdw"; }

DistillConfig RunConfig::distill_config() const {
  DistillConfig d = distill;
  d.seed = seed;
  return d;
}

namespace {

RunConfig parse_config_impl(const json& document) {
  RunConfig c;
  Section root(document, "");
  root.read("seed", c.seed, 0);
  root.read("out", c.out);

  {
    Section s = root.child("data");
    std::string format = "idx";
    s.read("format", format);
    if (format == "idx") c.data.format = DataFormat::Idx;
    else if (format == "folder") c.data.format = DataFormat::Folder;
    else throw ConfigError("data.format must be 'idx' or 'folder'");
    s.read("root", c.data.root);
    s.read("train_images", c.data.train_images);
    s.read("train_labels", c.data.train_labels);
    s.read("test_images", c.data.test_images);
    s.read("test_labels", c.data.test_labels);
    s.read_optional("normal_class", c.data.normal_class);
    if (const json* r = s.find("resize"); r && !r->is_null()) {
      if (!r->is_array() || r->size() != 2 || !(*r)[0].is_number_unsigned() || !(*r)[1].is_number_unsigned())
        throw ConfigError("data.resize must be [height, width] or null");
      c.data.resize = std::pair{(*r)[0].get<std::size_t>(), (*r)[1].get<std::size_t>()};
    }
    if (const json* n = s.find("normalization"); n && !n->is_null()) {
      Section ns(*n, "data.normalization");
      Normalization norm;
      norm.mean = ns.list<float>("mean", {});
      norm.std = ns.list<float>("std", {});
      ns.finish();
      if (norm.mean.empty() || norm.std.empty()) throw ConfigError("data.normalization needs mean and std");
      c.data.normalization = norm;
    }
    s.read_optional("limit_train", c.data.limit_train);
    s.read_optional("limit_test", c.data.limit_test);
    s.finish();
  }
  if (c.data.root.empty() && c.data.format == DataFormat::Idx) c.data.root = default_mnist_dir();

  {
    Section s = root.child("source");
    s.read_optional("weights", c.source.weights);
    c.source.block_widths = s.list<int>("block_widths", c.source.block_widths);
    s.read("convs_per_block", c.source.convs_per_block);
    s.read("num_classes", c.source.num_classes);
    s.read("epochs", c.source.epochs);
    s.read("learning_rate", c.source.learning_rate);
    s.read("batch_size", c.source.batch_size);
    s.finish();
  }
  {
    Section s = root.child("cloner");
    s.read("width_ratio", c.cloner.width_ratio);
    std::string cps = to_string(c.cloner.critical_points);
    s.read("critical_points", cps);
    c.cloner.critical_points = parse_critical_points(cps);
    s.finish();
  }
  {
    Section s = root.child("distill");
    s.read_optional("lambda", c.distill.lambda);
    s.read("learning_rate", c.distill.learning_rate);
    s.read("batch_size", c.distill.batch_size);
    s.read("max_epochs", c.distill.max_epochs);
    s.read("convergence_rel_tol", c.distill.convergence_rel_tol);
    s.read("convergence_window", c.distill.convergence_window);
    s.read("cosine_epsilon", c.distill.cosine_epsilon);
    std::string loss = loss_name(c.distill.loss), form = form_name(c.distill.form);
    s.read("loss", loss);
    s.read("directional_form", form);
    c.distill.loss = parse_loss(loss);
    c.distill.form = parse_form(form);
    s.read("augment", c.distill.augment);
    s.read("adam_beta1", c.distill.adam_beta1);
    s.read("adam_beta2", c.distill.adam_beta2);
    s.read("adam_epsilon", c.distill.adam_epsilon);
    s.finish();
  }
  {
    Section s = root.child("eval");
    s.read("batch_size", c.eval_batch_size);
    s.finish();
  }
  {
    Section s = root.child("localize");
    std::string method = to_string(c.localize.params.method);
    s.read("method", method);
    c.localize.params.method = parse_attribution_method(method);
    s.read("sigma", c.localize.params.sigma);
    s.read("filter", c.localize.params.filter);
    if (s.has("element")) {
      Section e = s.child("element");
      std::string shape = "ellipse";
      std::size_t rows = 3, cols = 3;
      e.read("shape", shape);
      e.read("rows", rows);
      e.read("cols", cols);
      e.finish();
      if (shape == "ellipse") c.localize.params.element = StructuringElement::ellipse(rows, cols);
      else if (shape == "square" && rows == cols) c.localize.params.element = StructuringElement::square(rows);
      else throw ConfigError("localize.element.shape must be 'ellipse' or 'square' (square needs rows == cols)");
    } else {
      s.find("element");
    }
    s.read("smoothgrad_samples", c.localize.params.smoothgrad_samples);
    s.read("smoothgrad_noise", c.localize.params.smoothgrad_noise);
    s.read("normalize_per_image", c.localize.normalize_per_image);
    s.read("raw_csv", c.localize.raw_csv);
    s.read_optional("limit", c.localize.limit);
    Section d = s.child("defects");
    d.read("count", c.localize.defects.count);
    d.read("size", c.localize.defects.size);
    d.read("value", c.localize.defects.value);
    d.finish();
    s.finish();
  }
  {
    Section s = root.child("ablation");
    std::string study = to_string(c.ablation.study);
    s.read("study", study);
    c.ablation.study = parse_ablation_study(study);
    c.ablation.seeds = s.list<std::uint64_t>("seeds", c.ablation.seeds);
    if (c.ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
    s.finish();
  }
  root.finish();

  c.localize.params.seed = c.seed;
  try {
    c.distill.validate();
    c.localize.params.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (!(c.cloner.width_ratio > 0.0 && c.cloner.width_ratio <= 1.0))
    throw ConfigError("cloner.width_ratio must be in (0, 1]");
  return c;
}

}  // namespace

RunConfig parse_config(const json& document) {
  try {
    return parse_config_impl(document);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  json document;
  try {
    document = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(document);
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  auto& d = j["data"];
  d["format"] = c.data.format == DataFormat::Idx ? "idx" : "folder";
  d["root"] = c.data.root.string();
  d["train_images"] = c.data.train_images;
  d["train_labels"] = c.data.train_labels;
  d["test_images"] = c.data.test_images;
  d["test_labels"] = c.data.test_labels;
  d["normal_class"] = c.data.normal_class ? ordered_json(*c.data.normal_class) : ordered_json(nullptr);
  d["resize"] = c.data.resize ? ordered_json::array({c.data.resize->first, c.data.resize->second})
                              : ordered_json(nullptr);
  if (c.data.normalization)
    d["normalization"] = {{"mean", c.data.normalization->mean}, {"std", c.data.normalization->std}};
  else
    d["normalization"] = nullptr;
  d["limit_train"] = c.data.limit_train ? ordered_json(*c.data.limit_train) : ordered_json(nullptr);
  d["limit_test"] = c.data.limit_test ? ordered_json(*c.data.limit_test) : ordered_json(nullptr);

  auto& s = j["source"];
  s["weights"] = c.source_weights().string();
  s["block_widths"] = c.source.block_widths;
  s["convs_per_block"] = c.source.convs_per_block;
  s["num_classes"] = c.source.num_classes;
  s["epochs"] = c.source.epochs;
  s["learning_rate"] = c.source.learning_rate;
  s["batch_size"] = c.source.batch_size;

  j["cloner"] = {{"width_ratio", c.cloner.width_ratio}, {"critical_points", to_string(c.cloner.critical_points)}};

  auto& di = j["distill"];
  di["lambda"] = c.distill.lambda ? ordered_json(*c.distill.lambda) : ordered_json(nullptr);
  di["learning_rate"] = c.distill.learning_rate;
  di["batch_size"] = c.distill.batch_size;
  di["max_epochs"] = c.distill.max_epochs;
  di["convergence_rel_tol"] = c.distill.convergence_rel_tol;
  di["convergence_window"] = c.distill.convergence_window;
  di["cosine_epsilon"] = c.distill.cosine_epsilon;
  di["loss"] = loss_name(c.distill.loss);
  di["directional_form"] = form_name(c.distill.form);
  di["augment"] = c.distill.augment;
  di["adam_beta1"] = c.distill.adam_beta1;
  di["adam_beta2"] = c.distill.adam_beta2;
  di["adam_epsilon"] = c.distill.adam_epsilon;

  j["eval"] = {{"batch_size", c.eval_batch_size}};

  auto& l = j["localize"];
  const auto& p = c.localize.params;
  l["method"] = to_string(p.method);
  l["sigma"] = p.sigma;
  l["filter"] = p.filter;
  const bool square = std::all_of(p.element.mask.begin(), p.element.mask.end(), [](auto m) { return m != 0; }) &&
                      p.element.rows == p.element.cols && p.element.rows > 1;
  l["element"] = {{"shape", square ? "square" : "ellipse"}, {"rows", p.element.rows}, {"cols", p.element.cols}};
  l["smoothgrad_samples"] = p.smoothgrad_samples;
  l["smoothgrad_noise"] = p.smoothgrad_noise;
  l["normalize_per_image"] = c.localize.normalize_per_image;
  l["raw_csv"] = c.localize.raw_csv;
  l["limit"] = c.localize.limit ? ordered_json(*c.localize.limit) : ordered_json(nullptr);
  l["defects"] = {{"count", c.localize.defects.count},
                  {"size", c.localize.defects.size},
                  {"value", c.localize.defects.value}};

  j["ablation"] = {{"study", to_string(c.ablation.study)}, {"seeds", c.ablation.seeds}};
  return j;
}

void write_resolved_config(const RunConfig& config, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << to_json(config).dump(2) << '\n';
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string distill_config_hash(const RunConfig& config) {
  ordered_json j = to_json(config);
  j["distill"].erase("max_epochs");
  ordered_json relevant;
  relevant["seed"] = j["seed"];
  relevant["data"] = j["data"];
  relevant["source"] = j["source"];
  relevant["cloner"] = j["cloner"];
  relevant["distill"] = j["distill"];
  return fnv1a_hex(relevant.dump());
}

}  // namespace distillscope
