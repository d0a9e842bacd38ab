#include "repscope/train.hpp"

#include <chrono>
#include <cmath>
#include <json.hpp>
#include <numbers>

#include "repscope/cnn.hpp"
#include "repscope/npy.hpp"
#include "repscope/rng.hpp"
#include "repscope/vit.hpp"

namespace repscope {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kEvalChunk = 256;

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = begin + i;
  return v;
}

double schedule(std::size_t step, std::size_t total, double warmup_fraction) {
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
  if (warm > 0 && step < warm) return static_cast<double>(step + 1) / static_cast<double>(warm);
  const double t = total > warm ? static_cast<double>(step - warm) / static_cast<double>(total - warm) : 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace

std::string TrainConfig::to_json() const {
  return json{{"epochs", epochs},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"weight_decay", weight_decay},
              {"warmup_fraction", warmup_fraction},
              {"grad_clip", grad_clip},
              {"seed", seed},
              {"workers", workers},
              {"optimizer", "adam"},
              {"beta1", 0.9},
              {"beta2", 0.999}}
      .dump();
}

double default_learning_rate(const ToyModel& model) {
  if (const auto* vit = dynamic_cast<const ViT*>(&model)) {
    return vit->config().head_type == HeadType::gap ? 0.3e-3 : 0.7e-3;
  }
  return 1e-3;
}

std::string TrainReport::to_json() const {
  json j{{"final_train_accuracy", final_train_accuracy},
         {"final_eval_accuracy", final_eval_accuracy},
         {"loss_curve", loss_curve},
         {"wall_time", wall_time},
         {"steps", steps}};
  j["config"] = config_json.empty() ? json::object() : json::parse(config_json);
  return j.dump();
}

TrainReport TrainReport::from_json(std::string_view text) {
  TrainReport r;
  try {
    const auto j = json::parse(text);
    r.final_train_accuracy = j.at("final_train_accuracy").get<double>();
    r.final_eval_accuracy = j.at("final_eval_accuracy").get<double>();
    r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
    r.wall_time = j.value("wall_time", 0.0);
    r.steps = j.value("steps", std::size_t{0});
    if (j.contains("config")) r.config_json = j.at("config").dump();
  } catch (const json::exception& e) {
    throw DataError(std::string("train report: ") + e.what());
  }
  return r;
}

TrainingDiverged::TrainingDiverged(std::size_t epoch, double loss)
    : DataError("training diverged in epoch " + std::to_string(epoch) + " (loss " + std::to_string(loss) + ")"),
      epoch_(epoch) {}

double accuracy(const ToyModel& model, std::span<const double> params, const Dataset& data) {
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(data.size(), begin + kEvalChunk);
    const auto rows = iota(begin, end);
    const ForwardResult r = model.forward(params, gather_examples(data.images, rows));
    const std::size_t c = r.logits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto pred = argmax_lowest(r.logits.data().subspan(i * c, c));
      if (static_cast<int>(pred) == data.labels[begin + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train(const ToyModel& model, const Dataset& train_set, const Dataset* eval_set, const TrainConfig& config) {
  if (config.batch_size == 0 || config.epochs == 0) throw InvalidArgument("train: epochs and batch_size must be >= 1");
  if (!(config.learning_rate > 0.0)) throw InvalidArgument("train: learning rate must be positive");
  if (train_set.size() == 0) throw InvalidArgument("train: empty training set");
  if (train_set.num_classes != model.num_classes()) {
    throw DataError("train: dataset has " + std::to_string(train_set.num_classes) + " classes, model expects " +
                    std::to_string(model.num_classes()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t m = train_set.size();
  const std::size_t batch = std::min(config.batch_size, m);
  const std::size_t per_epoch = m / batch;
  const std::size_t total = per_epoch * config.epochs;

  std::vector<double> params = model.init_params(model.seed());
  std::vector<double> mom(params.size(), 0.0), vel(params.size(), 0.0);
  std::vector<bool> decay(params.size(), false);
  for (const auto& s : model.layout().slots()) {
    if (s.shape.size() >= 2) std::fill_n(decay.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size, true);
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, epoch));
    const auto order = rng.permutation(m);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::span<const std::size_t> rows(order.data() + b * batch, batch);
      std::vector<int> labels(batch);
      for (std::size_t i = 0; i < batch; ++i) labels[i] = train_set.labels[rows[i]];
      Gradients g = model.backward(params, gather_examples(train_set.images, rows), labels, config.workers);
      if (!std::isfinite(g.loss)) throw TrainingDiverged(epoch, g.loss);
      epoch_loss += g.loss;
      double clip = 1.0;
      if (config.grad_clip > 0.0) {
        double norm = 0.0;
        for (double v : g.params) norm += v * v;
        norm = std::sqrt(norm);
        if (!std::isfinite(norm)) throw TrainingDiverged(epoch, norm);
        if (norm > config.grad_clip) clip = config.grad_clip / norm;
      }
      const double lr = config.learning_rate * schedule(step, total, config.warmup_fraction);
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
      for (std::size_t k = 0; k < params.size(); ++k) {
        const double gk = g.params[k] * clip;
        mom[k] = b1 * mom[k] + (1.0 - b1) * gk;
        vel[k] = b2 * vel[k] + (1.0 - b2) * gk * gk;
        double update = (mom[k] / c1) / (std::sqrt(vel[k] / c2) + eps);
        if (decay[k]) update += config.weight_decay * params[k];
        params[k] -= lr * update;
      }
    }
    epoch_loss /= static_cast<double>(per_epoch);
    if (!std::isfinite(epoch_loss)) throw TrainingDiverged(epoch, epoch_loss);
    result.report.loss_curve.push_back(epoch_loss);
  }
  result.report.steps = step;
  result.report.final_train_accuracy = accuracy(model, params, train_set);
  if (eval_set) result.report.final_eval_accuracy = accuracy(model, params, *eval_set);
  json cfg;
  cfg["model"] = json::parse(model.config_json());
  cfg["train"] = json::parse(config.to_json());
  cfg["train_dataset"] = train_set.id;
  if (eval_set) cfg["eval_dataset"] = eval_set->id;
  result.report.config_json = cfg.dump();
  result.report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.params = std::move(params);
  return result;
}

std::unique_ptr<ToyModel> make_model(std::string_view config_json) {
  std::string arch;
  try {
    arch = json::parse(config_json).at("architecture").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  if (arch == "vit") return std::make_unique<ViT>(vit_config_from_json(config_json));
  if (arch == "cnn") return std::make_unique<Cnn>(cnn_config_from_json(config_json));
  throw DataError("model config: unknown architecture '" + arch + "'");
}

void save_checkpoint(const fs::path& dir, const ToyModel& model, std::span<const double> params,
                     const TrainReport* report) {
  model.check_params(params);
  std::error_code ec;
  fs::create_directories(dir / "params", ec);
  if (ec) throw IoError("cannot create " + (dir / "params").string() + ": " + ec.message());
  json table = json::array();
  for (const auto& s : model.layout().slots()) {
    const std::string file = "params/" + s.name + ".npy";
    std::vector<double> values(params.begin() + static_cast<std::ptrdiff_t>(s.offset),
                               params.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size));
    write_npy(dir / file, Tensor(s.shape, std::move(values)), NpyDtype::f64);
    table.push_back({{"name", s.name}, {"shape", s.shape}, {"file", file}});
  }
  json j;
  j["format"] = "repscope-checkpoint";
  j["architecture"] = model.architecture();
  j["model_config"] = json::parse(model.config_json());
  j["parameters"] = table;
  if (report) j["report"] = json::parse(report->to_json());
  write_file_bytes(dir / "manifest.json", j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  json j;
  try {
    j = json::parse(read_file_bytes(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    if (j.value("format", std::string()) != "repscope-checkpoint") {
      throw DataError(dir.string() + " is not a repscope checkpoint");
    }
    ck.model = make_model(j.at("model_config").dump());
    ck.params.assign(ck.model->layout().total(), 0.0);
    const auto& table = j.at("parameters");
    if (table.size() != ck.model->layout().slots().size()) {
      throw DataError(dir.string() + ": parameter table does not match the model layout");
    }
    for (const auto& entry : table) {
      const auto& slot = ck.model->layout().find(entry.at("name").get<std::string>());
      const Tensor t = read_npy(dir / entry.at("file").get<std::string>());
      if (t.shape() != slot.shape) {
        throw DataError(dir.string() + ": parameter '" + slot.name + "' has shape " + shape_to_string(t.shape()) +
                        ", expected " + shape_to_string(slot.shape));
      }
      std::copy(t.data().begin(), t.data().end(), ck.params.begin() + static_cast<std::ptrdiff_t>(slot.offset));
    }
    if (j.contains("report")) ck.report = TrainReport::from_json(j.at("report").dump());
  } catch (const json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
  return ck;
}

KindSet all_capture_kinds() {
  return {LayerKind::block_output,        LayerKind::attention_output,  LayerKind::mlp_hidden,
          LayerKind::norm_output,         LayerKind::pre_residual_branch, LayerKind::skip_branch,
          LayerKind::attention_weights,   LayerKind::conv_stage_output};
}

DumpManifest dump_activations(const ToyModel& model, std::span<const double> params, const Dataset& data,
                              const KindSet& capture, const fs::path& dir, std::string model_name) {
  if (capture.empty()) throw InvalidArgument("dump_activations: empty capture set");
  DumpManifest manifest = model.manifest_template();
  manifest.model_name = std::move(model_name);
  manifest.dataset_id = data.id;
  manifest.num_examples = data.size();
  DumpPayload payload;
  const std::size_t m = data.size();
  for (const auto& cp : model.capture_points()) {
    if (!capture.count(cp.kind)) continue;
    Shape full{m};
    full.insert(full.end(), cp.per_example.begin(), cp.per_example.end());
    manifest.layers.push_back({cp.name, cp.kind, full, default_layer_file(cp.name)});
    payload.layers.emplace(cp.name, Tensor(full));
  }
  if (manifest.layers.empty()) throw InvalidArgument("dump_activations: model captures none of the requested kinds");
  for (std::size_t begin = 0; begin < m; begin += kEvalChunk) {
    const std::size_t end = std::min(m, begin + kEvalChunk);
    const auto rows = iota(begin, end);
    const ForwardResult r = model.forward(params, gather_examples(data.images, rows), capture);
    for (auto& [name, t] : payload.layers) {
      const Tensor& part = r.captured.at(name);
      const std::size_t stride = part.size() / rows.size();
      std::copy(part.data().begin(), part.data().end(), t.data().begin() + static_cast<std::ptrdiff_t>(begin * stride));
    }
  }
  manifest.images_file = "inputs/images.npy";
  manifest.labels_file = "inputs/labels.npy";
  payload.images = data.images;
  std::vector<double> labels(data.labels.begin(), data.labels.end());
  payload.labels = Tensor({m}, std::move(labels));
  write_dump(manifest, payload, dir);
  return manifest;
}

}  // namespace repscope
