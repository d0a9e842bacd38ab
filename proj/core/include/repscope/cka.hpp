#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "repscope/dump.hpp"
#include "repscope/tensor.hpp"

namespace repscope {

// K' = H K H with H = I - (1/n) 1 1^T.
Tensor center_gram(const Tensor& k);

// vec(K') . vec(L') / (n - 1)^2
double hsic_biased(const Tensor& k, const Tensor& l);

// Unbiased estimator over Grams with zeroed diagonals (K~, L~):
//   [tr(K~L~) + (1'K~1)(1'L~1)/((n-1)(n-2)) - 2/(n-2) 1'K~L~1] / (n(n-3))
// Requires n >= 4.
double hsic_unbiased(const Tensor& k, const Tensor& l);

struct CkaConfig {
  std::size_t batch_size = 1024;
  std::size_t num_examples = 10240;  // sampled without replacement per pass, capped at m
  std::size_t passes = 20;
  std::uint64_t seed = 0;

  // Reduced setting that the full-size protocol reports as equivalent.
  static CkaConfig desk_scale(std::uint64_t seed = 0) { return {128, 2560, 10, seed}; }
  // One batch holding every example, one pass.
  static CkaConfig full_batch(std::size_t m) { return {m, m, 1, 0}; }
};

// Every minibatch of every pass, in evaluation order.
struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
  std::size_t batch_size = 0;
};

BatchPlan make_batch_plan(std::size_t num_examples, const CkaConfig& config);

// Sums of the three per-minibatch HSIC terms; divides once at the end.
// Sums are taken over the sorted per-batch terms, so the result does not
// depend on the order batches were added.
class HsicAccumulator {
 public:
  explicit HsicAccumulator(std::size_t batch_size = 0) : batch_size_(batch_size) {}

  void add(double kl, double kk, double ll);

  double sum_kl() const;
  double sum_kk() const;
  double sum_ll() const;
  std::size_t batches() const { return kl_.size(); }
  std::size_t batch_size() const { return batch_size_; }

  // sum_kl / sqrt(sum_kk * sum_ll). Throws DataError when no batches were
  // added or a self-term total is not positive.
  double finalize() const;

 private:
  std::size_t batch_size_;
  std::vector<double> kl_;
  std::vector<double> kk_;
  std::vector<double> ll_;
};

// Unclamped CKA. Values slightly outside [0, 1] are possible with the
// unbiased estimator.
double minibatch_cka(const ActivationMatrix& x, const ActivationMatrix& y, const BatchPlan& plan);
double minibatch_cka(const ActivationMatrix& x, const ActivationMatrix& y, const CkaConfig& config);

// Unbiased CKA over the whole example set as a single batch.
double cka_unbiased(const ActivationMatrix& x, const ActivationMatrix& y);

double clamp_unit(double score);

struct CkaHeatmap {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  Tensor scores;  // [rows, cols]
};
using HeatmapResult = CkaHeatmap;

// All-pairs CKA between two lists of representations over one batch plan.
// With `symmetric` the lists must be identical and only the upper triangle
// is evaluated.
CkaHeatmap cka_matrix(std::span<const ActivationMatrix> a, std::span<const ActivationMatrix> b,
                      const BatchPlan& plan, bool symmetric, std::size_t workers = 1);

// Whole-layer representations of every layer whose kind is in `kinds`
// (empty = every non-attention-weights layer), in manifest order.
std::vector<ActivationMatrix> load_layer_matrices(const DumpReader& dump, const KindSet& kinds);

CkaHeatmap layer_pair_heatmap(const DumpReader& dump, const KindSet& kinds, const CkaConfig& config,
                              std::size_t workers = 1);

// Rows are layers of `a`, columns layers of `b`. Both dumps must cover the
// same dataset_id and example count.
CkaHeatmap cross_model_heatmap(const DumpReader& a, const DumpReader& b, const CkaConfig& config,
                               const KindSet& kinds_a = {}, const KindSet& kinds_b = {}, std::size_t workers = 1);

void require_same_examples(const DumpManifest& a, const DumpManifest& b);

// [m, T, heads*dh] -> [m, T, heads, dh]
Tensor split_heads(const Tensor& attention_output, std::size_t heads);

// Concatenates the selected heads' slices of [m, T, heads, dh] into an
// [m, T*|subset|*dh] matrix and returns its CKA with `peer`.
double head_subset_cka(const Tensor& attention_output, std::span<const std::size_t> head_subset,
                       const ActivationMatrix& peer, const CkaConfig& config);
ActivationMatrix head_subset_matrix(const Tensor& attention_output, std::span<const std::size_t> head_subset);

}  // namespace repscope
