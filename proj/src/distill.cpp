#include "distillscope/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "distillscope/csv.hpp"
#include "distillscope/rng.hpp"

namespace distillscope {
namespace fs = std::filesystem;

void DistillConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(cosine_epsilon > 0.0)) throw ParameterError("cosine_epsilon must be positive");
  if (convergence_window < 1) throw ParameterError("convergence_window must be >= 1");
  if (lambda && !(std::isfinite(*lambda) && *lambda >= 0.0)) throw ParameterError("lambda must be finite and >= 0");
}

double calibrate_lambda(const Network<float>& source, const Network<float>& cloner, const Tensor<float>& batch,
                        double epsilon, DirectionalForm form) {
  const auto s = collect_activations(source, batch);
  const auto c = collect_activations(cloner, batch);
  bool silent = true;
  for (const auto& t : s.values)
    silent = silent && std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == 0.0f; });
  if (silent) throw CalibrationError("source activations are all zero on the calibration batch");
  const LossTerms terms = loss_terms(s, c, epsilon, form);
  const double val = terms.mean_value(), dir = terms.mean_direction();
  constexpr double kTiny = 1e-12;
  if (!(val > kTiny) || !(dir > kTiny))
    throw CalibrationError("degenerate calibration batch: L_val = " + format_double(val) +
                           ", L_dir = " + format_double(dir));
  return val / std::max(dir, epsilon);
}

double resolve_lambda(const DistillConfig& config, const Network<float>& source, const Network<float>& cloner,
                      std::span<const Sample> train_data) {
  if (config.lambda) return *config.lambda;
  if (config.loss != LossKind::Total) return 0.0;
  if (train_data.empty()) throw DataError("no training data for lambda calibration");
  const std::size_t n = std::min(config.batch_size, train_data.size());
  return calibrate_lambda(source, cloner, batch_images(train_data.first(n)), config.cosine_epsilon, config.form);
}

DistillState init_distill(const Network<float>& source, Network<float> cloner, std::span<const Sample> train_data,
                          const DistillConfig& config) {
  config.validate();
  if (train_data.empty()) throw DataError("distillation needs at least one training sample");
  const auto s_cp = critical_count(source.spec), c_cp = critical_count(cloner.spec);
  if (s_cp != c_cp)
    throw ContractError("source has " + std::to_string(s_cp) + " critical points, cloner " + std::to_string(c_cp));
  DistillState state;
  state.lambda = resolve_lambda(config, source, cloner, train_data);
  state.cloner = std::move(cloner);
  return state;
}

DistillState init_distill(const Network<float>& source, const NetworkSpec& cloner_spec,
                          std::span<const Sample> train_data, const DistillConfig& config) {
  return init_distill(source, build_network<float>(cloner_spec, mix_seed(config.seed, 0xc10e)), train_data, config);
}

bool has_converged(const std::vector<EpochLoss>& history, std::size_t window, double rel_tol) {
  if (history.size() <= window) return false;
  const double before = history[history.size() - 1 - window].total;
  const double now = history.back().total;
  const double scale = std::max(std::abs(before), 1e-300);
  return (before - now) / scale < rel_tol;
}

void run_distill(const Network<float>& source, DistillState& state, std::span<const Sample> train_data,
                 const DistillConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_data.empty()) throw DataError("distillation needs at least one training sample");
  const Objective objective = config.objective(state.lambda);
  const AdamConfig adam = config.adam();
  std::vector<std::size_t> order(train_data.size());

  while (state.epoch < config.max_epochs && !state.converged) {
    const std::size_t epoch = state.epoch + 1;
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(mix_seed(config.seed, epoch, 0x5eedULL)).shuffle(order.begin(), order.end());

    double sum_val = 0.0, sum_dir = 0.0, sum_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<Sample> batch_samples;
      batch_samples.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const Sample& s = train_data[order[k]];
        batch_samples.push_back(config.augment ? augment(s, mix_seed(config.seed, epoch, order[k])) : s);
      }
      const Tensor<float> batch = batch_images(batch_samples);

      try {
        // one gradient-free pass through the frozen source
        const ActivationSet<float> target = collect_activations(source, batch);
        Graph<float> g;
        Var in = g.leaf(batch, false, "input");
        ForwardTrace trace = forward(state.cloner, g, in, true);
        std::vector<Var> s_vars;
        for (const auto& t : target.values) s_vars.push_back(g.leaf(t, false, "source_activation"));
        Var loss = discrepancy<float>(g, s_vars, trace.activations, objective);

        std::vector<const Tensor<float>*> sv, cv;
        for (const auto& t : target.values) sv.push_back(&t);
        for (Var v : trace.activations) cv.push_back(&g.value(v));
        const LossTerms terms = loss_terms<float>(sv, cv, config.cosine_epsilon, config.form);
        const double n = static_cast<double>(stop - start);
        sum_val += terms.mean_value() * n;
        sum_dir += terms.mean_direction() * n;
        sum_total += terms.mean(objective) * n;
        if (!std::isfinite(sum_total)) throw NumericError("non-finite distillation loss");

        g.backward(loss);
        std::map<std::string, Tensor<float>> grads;
        for (const auto& [key, v] : trace.parameters) grads.emplace(key, g.grad(v));
        state.adam.update(state.cloner.weights, grads, adam);
      } catch (const NumericError& e) {
        std::string where = config.checkpoint_dir && state.epoch > 0
                                ? config.checkpoint_dir->string() + " (epoch " + std::to_string(state.epoch) + ")"
                                : std::string("none");
        throw NumericError(std::string(e.what()) + " during epoch " + std::to_string(epoch) +
                           "; last good checkpoint: " + where);
      }
    }

    const double total_n = static_cast<double>(order.size());
    state.epoch = epoch;
    state.history.push_back({epoch, sum_val / total_n, sum_dir / total_n, sum_total / total_n});
    state.converged = has_converged(state.history, config.convergence_window, config.convergence_rel_tol);
    if (config.checkpoint_dir) save_checkpoint(state, *config.checkpoint_dir, "");
    if (on_epoch) on_epoch(state);
  }
}

DistillState distill(const Network<float>& source, const NetworkSpec& cloner_spec, std::span<const Sample> train_data,
                     const DistillConfig& config, const EpochCallback& on_epoch) {
  DistillState state = init_distill(source, cloner_spec, train_data, config);
  run_distill(source, state, train_data, config, on_epoch);
  return state;
}

void write_loss_history(const fs::path& path, const std::vector<EpochLoss>& history) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << "epoch,loss_val,loss_dir,loss_total\n";
  for (const auto& e : history)
    f << e.epoch << ',' << format_double(e.value) << ',' << format_double(e.direction) << ','
      << format_double(e.total) << '\n';
}

std::vector<EpochLoss> read_loss_history(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (split_csv_line(line) != std::vector<std::string>{"epoch", "loss_val", "loss_dir", "loss_total"})
    throw Error("unexpected loss history header in " + path.string());
  std::vector<EpochLoss> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4) throw Error("malformed loss history row: " + line);
    out.push_back({static_cast<std::size_t>(std::stoull(cells[0])), parse_double(cells[1]), parse_double(cells[2]),
                   parse_double(cells[3])});
  }
  return out;
}

void save_checkpoint(const DistillState& state, const fs::path& dir, const std::string& config_hash) {
  fs::create_directories(dir);
  std::string hash = config_hash;
  if (hash.empty() && fs::exists(dir / "checkpoint.json")) {
    std::ifstream prev(dir / "checkpoint.json");
    hash = nlohmann::json::parse(prev, nullptr, false).value("config_hash", "");
  }
  save_weights(state.cloner, dir / "cloner.mkdw");
  std::map<std::string, Tensor<float>> moments;
  for (const auto& [k, v] : state.adam.first_moment) moments.emplace("m/" + k, v);
  for (const auto& [k, v] : state.adam.second_moment) moments.emplace("v/" + k, v);
  write_tensor_file(dir / "adam.mkdw", moments);
  nlohmann::ordered_json meta;
  meta["lambda"] = state.lambda;
  meta["epoch"] = state.epoch;
  meta["adam_step"] = state.adam.step;
  meta["converged"] = state.converged;
  meta["config_hash"] = hash;
  meta["loss_history"] = "loss_history.csv";
  std::ofstream(dir / "checkpoint.json", std::ios::trunc) << meta.dump(2) << '\n';
  write_loss_history(dir / "loss_history.csv", state.history);
}

DistillState load_checkpoint(const NetworkSpec& cloner_spec, const fs::path& dir, std::string* config_hash) {
  std::ifstream f(dir / "checkpoint.json");
  if (!f) throw Error("no checkpoint in " + dir.string());
  const auto meta = nlohmann::json::parse(f);
  DistillState state;
  state.cloner = load_weights(cloner_spec, dir / "cloner.mkdw");
  for (auto& [k, v] : read_tensor_file(dir / "adam.mkdw")) {
    if (k.starts_with("m/")) state.adam.first_moment.emplace(k.substr(2), std::move(v));
    else if (k.starts_with("v/")) state.adam.second_moment.emplace(k.substr(2), std::move(v));
    else throw WeightFileError("unexpected optimizer entry " + k);
  }
  state.lambda = meta.at("lambda").get<double>();
  state.epoch = meta.at("epoch").get<std::size_t>();
  state.adam.step = meta.at("adam_step").get<std::uint64_t>();
  state.converged = meta.value("converged", false);
  state.history = read_loss_history(dir / "loss_history.csv");
  if (config_hash) *config_hash = meta.value("config_hash", "");
  if (!state.history.empty() && state.history.back().epoch != state.epoch)
    throw Error("checkpoint epoch disagrees with loss history in " + dir.string());
  return state;
}

}  // namespace distillscope
