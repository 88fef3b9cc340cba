#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distillscope/adam.hpp"
#include "distillscope/data.hpp"
#include "distillscope/losses.hpp"
#include "distillscope/network.hpp"

namespace distillscope {

struct DistillConfig {
  std::optional<double> lambda;  // calibrated on the untrained cloner when absent
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 100;
  double convergence_rel_tol = 1e-4;
  std::size_t convergence_window = 10;
  std::uint64_t seed = 0;
  double cosine_epsilon = kDefaultCosineEpsilon;
  LossKind loss = LossKind::Total;
  DirectionalForm form = DirectionalForm::PerLayer;
  bool augment = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// When set, a checkpoint is written here after every epoch.
  std::optional<std::filesystem::path> checkpoint_dir;

  void validate() const;
  AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
  Objective objective(double lambda) const { return Objective::for_kind(loss, lambda, cosine_epsilon, form); }
};

struct EpochLoss {
  std::size_t epoch = 0;
  double value = 0.0;
  double direction = 0.0;
  double total = 0.0;
};

struct DistillState {
  Network<float> cloner;
  double lambda = 0.0;
  AdamState adam;
  std::size_t epoch = 0;
  std::vector<EpochLoss> history;
  bool converged = false;
};

/// lambda = L_val / max(L_dir, epsilon) on one batch. Throws CalibrationError
/// when the batch is degenerate (either term vanishes or the source is silent).
double calibrate_lambda(const Network<float>& source, const Network<float>& cloner,
                        const Tensor<float>& calibration_batch, double epsilon = kDefaultCosineEpsilon,
                        DirectionalForm form = DirectionalForm::PerLayer);

/// The configured lambda if present, otherwise calibrate_lambda on the first
/// batch_size training samples.
double resolve_lambda(const DistillConfig& config, const Network<float>& source, const Network<float>& cloner,
                      std::span<const Sample> train_data);

/// Fresh state: cloner initialised from the seed, lambda resolved.
DistillState init_distill(const Network<float>& source, const NetworkSpec& cloner_spec,
                          std::span<const Sample> train_data, const DistillConfig& config);

/// Same, but starting from given cloner weights.
DistillState init_distill(const Network<float>& source, Network<float> cloner, std::span<const Sample> train_data,
                          const DistillConfig& config);

using EpochCallback = std::function<void(const DistillState&)>;

/// Adam epochs on the cloner until the epoch-mean loss stops improving by
/// convergence_rel_tol over convergence_window epochs, or max_epochs.
void run_distill(const Network<float>& source, DistillState& state, std::span<const Sample> train_data,
                 const DistillConfig& config, const EpochCallback& on_epoch = {});

DistillState distill(const Network<float>& source, const NetworkSpec& cloner_spec, std::span<const Sample> train_data,
                     const DistillConfig& config, const EpochCallback& on_epoch = {});

/// True once the last `window` epochs improved by less than rel_tol.
bool has_converged(const std::vector<EpochLoss>& history, std::size_t window, double rel_tol);

// Checkpoint layout inside a directory:
//   cloner.mkdw, adam.mkdw, checkpoint.json (lambda, epoch, step, config hash), loss_history.csv
void save_checkpoint(const DistillState& state, const std::filesystem::path& dir, const std::string& config_hash);
DistillState load_checkpoint(const NetworkSpec& cloner_spec, const std::filesystem::path& dir,
                             std::string* config_hash = nullptr);

void write_loss_history(const std::filesystem::path& path, const std::vector<EpochLoss>& history);
std::vector<EpochLoss> read_loss_history(const std::filesystem::path& path);

}  // namespace distillscope
