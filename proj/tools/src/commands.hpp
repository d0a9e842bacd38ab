#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "repscope/analyses.hpp"
#include "repscope/cka.hpp"
#include "repscope/cnn.hpp"
#include "repscope/datasets.hpp"
#include "repscope/probes.hpp"
#include "repscope/train.hpp"
#include "repscope/vit.hpp"

namespace repscope::cli {

// Caller-facing usage problem detected after flag parsing (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path out;
};

// Output tree <out>/csv and <out>/fig.
struct OutputDirs {
  explicit OutputDirs(const std::filesystem::path& out);
  std::filesystem::path csv(const std::string& name) const;
  std::filesystem::path fig(const std::string& stem) const;

  std::filesystem::path root;
};

struct CkaOptions {
  std::size_t batch_size = 128;
  std::size_t examples = 2560;
  std::size_t passes = 10;

  CkaConfig config(std::uint64_t seed) const { return {batch_size, examples, passes, seed}; }
};

KindSet parse_kinds(const std::vector<std::string>& names);

// ---- train-toy ----

// Defaults reproduce the toy model family of the acceptance suite.
struct TrainToyOptions {
  TrainToyOptions() {
    cnn.stem_channels = 8;
    shapes.pixel_noise = 0.3;
    shapes.background_amplitude = 0.0;
    train.epochs = 15;
  }

  std::string arch = "vit";
  ViTConfig vit;
  CnnConfig cnn;
  std::string stages = "2x8x1,2x16x2,2x32x2";  // blocks x channels x stride
  std::optional<std::size_t> model_seed;

  std::string dataset = "shapes";  // shapes | cifar | npy
  ShapesSpec shapes;
  std::vector<std::filesystem::path> cifar_train, cifar_eval;
  std::filesystem::path npy_images, npy_labels;
  std::size_t train_examples = 2000;
  std::size_t eval_examples = 1000;
  std::size_t dump_examples = 512;

  TrainConfig train;
  std::optional<double> learning_rate;
  std::vector<std::string> capture{"all"};
  std::string name;
};
int run_train_toy(const GlobalOptions& g, TrainToyOptions o);

// ---- analyses over a dump ----

struct HeatmapOptions {
  std::filesystem::path dump;
  std::filesystem::path dump_b;
  std::vector<std::string> kinds;
  std::vector<std::string> kinds_b;
  CkaOptions cka;
};
int run_cka_heatmap(const GlobalOptions& g, const HeatmapOptions& o);
int run_cross_cka(const GlobalOptions& g, const HeatmapOptions& o);

struct HeadSubsetOptions {
  std::filesystem::path dump;
  std::filesystem::path peer_dump;
  std::string layer;
  std::string peer;
  std::vector<std::size_t> heads;
  std::optional<std::size_t> token;
  CkaOptions cka;
};
int run_head_subset_cka(const GlobalOptions& g, const HeadSubsetOptions& o);

struct AttnDistanceOptions {
  std::filesystem::path dump;
  std::size_t max_examples = 512;
  std::size_t subsets = 4;
};
int run_attn_distance(const GlobalOptions& g, const AttnDistanceOptions& o);

struct ErfOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path dump;
  std::string layer;
  std::string variant = "both";
  std::size_t samples = 32;
};
int run_erf(const GlobalOptions& g, const ErfOptions& o);

struct BranchNormOptions {
  std::filesystem::path dump;
};
int run_branch_norms(const GlobalOptions& g, const BranchNormOptions& o);

struct LocalizeOptions {
  std::filesystem::path dump;
  std::string layer;  // default: last block output
  std::string tokens = "interior";  // interior | all | comma list
  CkaOptions cka;
};
int run_localize(const GlobalOptions& g, const LocalizeOptions& o);

struct ProbeOptions {
  std::filesystem::path dump;
  std::vector<std::string> aggregations{"mean-all"};
  std::vector<std::string> kinds;
  ProbeSpec spec;
};
int run_probe(const GlobalOptions& g, const ProbeOptions& o);

struct ReportOptions {
  std::filesystem::path dump;
  std::filesystem::path checkpoint;
  CkaOptions cka;
  std::size_t attention_examples = 512;
  std::size_t erf_samples = 32;
  std::size_t shots = 10;
};
int run_report(const GlobalOptions& g, const ReportOptions& o);

struct ValidateOptions {
  std::filesystem::path dump;
};
int run_validate(const ValidateOptions& o);

}  // namespace repscope::cli
