#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "repscope/datasets.hpp"
#include "repscope/dump.hpp"
#include "repscope/error.hpp"
#include "repscope/model.hpp"

namespace repscope {

// Adam(beta1 0.9, beta2 0.999) with linear warmup over the first
// `warmup_fraction` of steps followed by cosine decay to zero.
struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;  // decoupled, applied to matrices only
  double warmup_fraction = 0.05;
  double grad_clip = 1.0;     // global-norm clip; 0 disables
  std::uint64_t seed = 0;     // batch shuffling
  std::size_t workers = 1;

  std::string to_json() const;
};

// Learning rate the toy models were tuned with: ViT with a CLS head 1e-3,
// ViT with a GAP head 0.3 times that, CNN 1e-3.
double default_learning_rate(const ToyModel& model);

struct TrainReport {
  double final_train_accuracy = 0.0;
  double final_eval_accuracy = 0.0;
  std::vector<double> loss_curve;  // mean training loss per epoch
  std::string config_json;         // model and optimiser settings
  double wall_time = 0.0;          // seconds
  std::size_t steps = 0;

  std::string to_json() const;
  static TrainReport from_json(std::string_view json);
};

class TrainingDiverged : public DataError {
 public:
  TrainingDiverged(std::size_t epoch, double loss);
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

struct TrainResult {
  std::vector<double> params;
  TrainReport report;
};

// Deterministic for fixed (model seed, config seed, worker count).
// Parameters are initialised from model.seed().
TrainResult train(const ToyModel& model, const Dataset& train_set, const Dataset* eval_set, const TrainConfig& config);

double accuracy(const ToyModel& model, std::span<const double> params, const Dataset& data);

// Builds a model from the JSON produced by ToyModel::config_json().
std::unique_ptr<ToyModel> make_model(std::string_view config_json);

// Checkpoint directory: manifest.json (architecture, model config, report,
// parameter table) plus params/<slot>.npy stored as float64 so that a
// reload is lossless.
void save_checkpoint(const std::filesystem::path& dir, const ToyModel& model, std::span<const double> params,
                     const TrainReport* report = nullptr);

struct Checkpoint {
  std::unique_ptr<ToyModel> model;
  std::vector<double> params;
  std::optional<TrainReport> report;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Runs the model over `data` and writes an activation-store dump holding
// every capture point whose kind is in `capture` plus the raw images and
// labels.
DumpManifest dump_activations(const ToyModel& model, std::span<const double> params, const Dataset& data,
                              const KindSet& capture, const std::filesystem::path& dir, std::string model_name);

// All kinds a toy model can capture.
KindSet all_capture_kinds();

}  // namespace repscope
