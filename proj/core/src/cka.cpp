#include "repscope/cka.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "repscope/error.hpp"
#include "repscope/parallel.hpp"
#include "repscope/rng.hpp"

namespace repscope {

namespace {

void require_square_pair(const Tensor& k, const Tensor& l, const char* what) {
  if (k.rank() != 2 || k.dim(0) != k.dim(1)) throw InvalidArgument(std::string(what) + ": K must be square");
  if (l.rank() != 2 || l.dim(0) != l.dim(1)) throw InvalidArgument(std::string(what) + ": L must be square");
  if (k.dim(0) != l.dim(0)) {
    throw InvalidArgument(std::string(what) + ": Gram sizes differ (" + std::to_string(k.dim(0)) + " vs " +
                          std::to_string(l.dim(0)) + ")");
  }
}

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

// Zero-diagonal Gram of one batch of one representation, reduced to what
// the unbiased estimator needs.
struct BatchGram {
  std::vector<double> k;     // n*n, zero diagonal
  std::vector<double> rows;  // K~ 1
  double total = 0.0;        // 1' K~ 1
  std::size_t n = 0;
};

BatchGram batch_gram(const Tensor& x, std::span<const std::size_t> batch) {
  const std::size_t n = batch.size();
  const std::size_t p = x.dim(1);
  const double* xd = x.data().data();
  BatchGram g;
  g.n = n;
  g.k.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = xd + batch[i] * p;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* xj = xd + batch[j] * p;
      double s = 0.0;
      for (std::size_t q = 0; q < p; ++q) s += xi[q] * xj[q];
      g.k[i * n + j] = s;
      g.k[j * n + i] = s;
    }
  }
  g.rows.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += g.k[i * n + j];
    g.rows[i] = s;
  }
  for (double r : g.rows) g.total += r;
  return g;
}

BatchGram full_gram(const Tensor& k) {
  const std::size_t n = k.dim(0);
  BatchGram g;
  g.n = n;
  g.k.assign(k.data().begin(), k.data().end());
  for (std::size_t i = 0; i < n; ++i) g.k[i * n + i] = 0.0;
  g.rows.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += g.k[i * n + j];
    g.rows[i] = s;
  }
  for (double r : g.rows) g.total += r;
  return g;
}

double hsic_from_grams(const BatchGram& a, const BatchGram& b) {
  const double n = static_cast<double>(a.n);
  double trace = 0.0;
  for (std::size_t i = 0; i < a.k.size(); ++i) trace += a.k[i] * b.k[i];
  double cross = 0.0;
  for (std::size_t i = 0; i < a.n; ++i) cross += a.rows[i] * b.rows[i];
  return (trace + a.total * b.total / ((n - 1.0) * (n - 2.0)) - 2.0 / (n - 2.0) * cross) / (n * (n - 3.0));
}

void require_matching_examples(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.examples() != y.examples()) {
    throw InvalidArgument("CKA inputs '" + x.layer_name + "' and '" + y.layer_name +
                          "' cover different example counts (" + std::to_string(x.examples()) + " vs " +
                          std::to_string(y.examples()) + ")");
  }
}

}  // namespace

Tensor center_gram(const Tensor& k) {
  if (k.rank() != 2 || k.dim(0) != k.dim(1)) {
    throw InvalidArgument("center_gram: expected a square matrix, got " + shape_to_string(k.shape()));
  }
  const std::size_t n = k.dim(0);
  std::vector<double> row_mean(n, 0.0);
  std::vector<double> col_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += k(i, j);
      col_mean[j] += k(i, j);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    grand += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
    col_mean[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  Tensor c({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) c(i, j) = k(i, j) - row_mean[i] - col_mean[j] + grand;
  }
  return c;
}

double hsic_biased(const Tensor& k, const Tensor& l) {
  require_square_pair(k, l, "hsic_biased");
  const Tensor kc = center_gram(k);
  const Tensor lc = center_gram(l);
  double s = 0.0;
  for (std::size_t i = 0; i < kc.size(); ++i) s += kc[i] * lc[i];
  const double n1 = static_cast<double>(k.dim(0)) - 1.0;
  return s / (n1 * n1);
}

double hsic_unbiased(const Tensor& k, const Tensor& l) {
  require_square_pair(k, l, "hsic_unbiased");
  if (k.dim(0) < 4) throw InvalidArgument("hsic_unbiased needs n >= 4, got " + std::to_string(k.dim(0)));
  return hsic_from_grams(full_gram(k), full_gram(l));
}

BatchPlan make_batch_plan(std::size_t m, const CkaConfig& config) {
  if (config.batch_size < 4) throw InvalidArgument("CKA batch_size must be >= 4");
  if (config.passes == 0) throw InvalidArgument("CKA passes must be >= 1");
  const std::size_t sample = std::min(config.num_examples, m);
  if (sample < config.batch_size) {
    throw DataError("CKA needs at least batch_size=" + std::to_string(config.batch_size) + " examples, have " +
                    std::to_string(sample));
  }
  const std::size_t per_pass = sample / config.batch_size;
  BatchPlan plan;
  plan.batch_size = config.batch_size;
  for (std::size_t pass = 0; pass < config.passes; ++pass) {
    Rng rng(derive_seed(config.seed, pass));
    const auto perm = rng.permutation(m);
    for (std::size_t b = 0; b < per_pass; ++b) {
      plan.batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b * config.batch_size),
                                perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * config.batch_size));
    }
  }
  return plan;
}

void HsicAccumulator::add(double kl, double kk, double ll) {
  kl_.push_back(kl);
  kk_.push_back(kk);
  ll_.push_back(ll);
}

double HsicAccumulator::sum_kl() const { return sorted_sum(kl_); }
double HsicAccumulator::sum_kk() const { return sorted_sum(kk_); }
double HsicAccumulator::sum_ll() const { return sorted_sum(ll_); }

double HsicAccumulator::finalize() const {
  if (kl_.empty()) throw DataError("HSIC accumulator finalized with no batches");
  const double kk = sum_kk();
  const double ll = sum_ll();
  if (!(kk > 0.0) || !(ll > 0.0)) {
    throw DataError("degenerate representation: self-HSIC total is not positive (constant layer?)");
  }
  return sum_kl() / std::sqrt(kk * ll);
}

double minibatch_cka(const ActivationMatrix& x, const ActivationMatrix& y, const BatchPlan& plan) {
  require_matching_examples(x, y);
  HsicAccumulator acc(plan.batch_size);
  for (const auto& batch : plan.batches) {
    const BatchGram gx = batch_gram(x.values, batch);
    const BatchGram gy = batch_gram(y.values, batch);
    acc.add(hsic_from_grams(gx, gy), hsic_from_grams(gx, gx), hsic_from_grams(gy, gy));
  }
  try {
    return acc.finalize();
  } catch (const DataError& e) {
    throw DataError("CKA('" + x.layer_name + "', '" + y.layer_name + "'): " + e.what());
  }
}

double minibatch_cka(const ActivationMatrix& x, const ActivationMatrix& y, const CkaConfig& config) {
  require_matching_examples(x, y);
  return minibatch_cka(x, y, make_batch_plan(x.examples(), config));
}

double cka_unbiased(const ActivationMatrix& x, const ActivationMatrix& y) {
  require_matching_examples(x, y);
  const Tensor k = gram(x);
  const Tensor l = gram(y);
  const double kl = hsic_unbiased(k, l);
  const double kk = hsic_unbiased(k, k);
  const double ll = hsic_unbiased(l, l);
  if (!(kk > 0.0) || !(ll > 0.0)) throw DataError("degenerate representation in cka_unbiased");
  return kl / std::sqrt(kk * ll);
}

double clamp_unit(double score) { return std::clamp(score, 0.0, 1.0); }

CkaHeatmap cka_matrix(std::span<const ActivationMatrix> a, std::span<const ActivationMatrix> b, const BatchPlan& plan,
                      bool symmetric, std::size_t workers) {
  if (a.empty() || b.empty()) throw InvalidArgument("cka_matrix: empty layer list");
  const std::size_t m = a.front().examples();
  for (const auto& x : a) require_matching_examples(a.front(), x);
  for (const auto& y : b) require_matching_examples(a.front(), y);
  if (symmetric && a.size() != b.size()) throw InvalidArgument("cka_matrix: symmetric mode needs equal lists");
  for (const auto& batch : plan.batches) {
    for (auto i : batch) {
      if (i >= m) throw InvalidArgument("cka_matrix: batch plan indexes beyond the example count");
    }
  }

  struct Cell {
    std::size_t i, j;
  };
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = symmetric ? i : 0; j < b.size(); ++j) cells.push_back({i, j});
  }
  std::vector<HsicAccumulator> acc(cells.size(), HsicAccumulator(plan.batch_size));
  std::vector<BatchGram> ga(a.size());
  std::vector<BatchGram> gb(symmetric ? 0 : b.size());
  std::vector<double> self_a(a.size());
  std::vector<double> self_b(b.size());

  for (const auto& batch : plan.batches) {
    parallel_for(a.size(), workers, [&](std::size_t i) {
      ga[i] = batch_gram(a[i].values, batch);
      self_a[i] = hsic_from_grams(ga[i], ga[i]);
    });
    if (!symmetric) {
      parallel_for(b.size(), workers, [&](std::size_t j) {
        gb[j] = batch_gram(b[j].values, batch);
        self_b[j] = hsic_from_grams(gb[j], gb[j]);
      });
    } else {
      self_b = self_a;
    }
    const auto& right = symmetric ? ga : gb;
    parallel_for(cells.size(), workers, [&](std::size_t c) {
      const auto [i, j] = cells[c];
      const double kl = (symmetric && i == j) ? self_a[i] : hsic_from_grams(ga[i], right[j]);
      acc[c].add(kl, self_a[i], self_b[j]);
    });
  }

  CkaHeatmap h;
  for (const auto& x : a) h.rows.push_back(x.layer_name);
  for (const auto& y : b) h.cols.push_back(y.layer_name);
  h.scores = Tensor({a.size(), b.size()});
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto [i, j] = cells[c];
    double v;
    try {
      v = acc[c].finalize();
    } catch (const DataError& e) {
      throw DataError("CKA('" + a[i].layer_name + "', '" + b[j].layer_name + "'): " + e.what());
    }
    h.scores(i, j) = v;
    if (symmetric) h.scores(j, i) = v;
  }
  return h;
}

std::vector<ActivationMatrix> load_layer_matrices(const DumpReader& dump, const KindSet& kinds) {
  const auto& m = dump.manifest();
  const bool drop_cls = m.has_cls_token && !m.whole_layer_includes_cls;
  std::vector<ActivationMatrix> out;
  for (const auto* l : m.layers_of_kind(kinds)) {
    if (kinds.empty() && l->kind == LayerKind::attention_weights) continue;
    out.push_back(whole_layer_matrix(dump.load(l->name), l->name, drop_cls && l->shape.size() == 3));
  }
  return out;
}

CkaHeatmap layer_pair_heatmap(const DumpReader& dump, const KindSet& kinds, const CkaConfig& config,
                              std::size_t workers) {
  const auto layers = load_layer_matrices(dump, kinds);
  if (layers.size() < 2) {
    throw DataError("layer_pair_heatmap: need at least 2 layers after filtering, have " +
                    std::to_string(layers.size()));
  }
  const BatchPlan plan = make_batch_plan(dump.manifest().num_examples, config);
  return cka_matrix(layers, layers, plan, true, workers);
}

void require_same_examples(const DumpManifest& a, const DumpManifest& b) {
  if (a.dataset_id != b.dataset_id) {
    throw DataError("dataset mismatch: '" + a.model_name + "' covers '" + a.dataset_id + "' but '" + b.model_name +
                    "' covers '" + b.dataset_id + "'");
  }
  if (a.num_examples != b.num_examples) {
    throw DataError("dataset mismatch: example counts differ (" + std::to_string(a.num_examples) + " vs " +
                    std::to_string(b.num_examples) + ")");
  }
}

CkaHeatmap cross_model_heatmap(const DumpReader& a, const DumpReader& b, const CkaConfig& config,
                               const KindSet& kinds_a, const KindSet& kinds_b, std::size_t workers) {
  require_same_examples(a.manifest(), b.manifest());
  const auto la = load_layer_matrices(a, kinds_a);
  const auto lb = load_layer_matrices(b, kinds_b);
  if (la.empty() || lb.empty()) throw DataError("cross_model_heatmap: no layers selected");
  const BatchPlan plan = make_batch_plan(a.manifest().num_examples, config);
  return cka_matrix(la, lb, plan, false, workers);
}

Tensor split_heads(const Tensor& attention_output, std::size_t heads) {
  if (attention_output.rank() == 4) {
    if (attention_output.dim(2) != heads) throw InvalidArgument("split_heads: head count mismatch");
    return attention_output;
  }
  if (attention_output.rank() != 3) throw InvalidArgument("split_heads: expected [m, T, d]");
  const std::size_t d = attention_output.dim(2);
  if (heads == 0 || d % heads != 0) throw InvalidArgument("split_heads: width not divisible by head count");
  return attention_output.reshaped({attention_output.dim(0), attention_output.dim(1), heads, d / heads});
}

ActivationMatrix head_subset_matrix(const Tensor& attn, std::span<const std::size_t> subset) {
  if (attn.rank() != 4) throw InvalidArgument("head_subset_matrix: expected [m, T, heads, dh]");
  if (subset.empty()) throw InvalidArgument("head subset must be nonempty");
  const std::size_t m = attn.dim(0);
  const std::size_t t = attn.dim(1);
  const std::size_t h = attn.dim(2);
  const std::size_t dh = attn.dim(3);
  for (auto s : subset) {
    if (s >= h) throw InvalidArgument("head index " + std::to_string(s) + " out of range for " + std::to_string(h) + " heads");
  }
  const std::size_t width = t * subset.size() * dh;
  Tensor out({m, width});
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t col = 0;
    for (std::size_t tok = 0; tok < t; ++tok) {
      for (auto s : subset) {
        const double* src = attn.data().data() + ((i * t + tok) * h + s) * dh;
        for (std::size_t q = 0; q < dh; ++q) out(i, col++) = src[q];
      }
    }
  }
  std::string name = "heads{";
  for (std::size_t k = 0; k < subset.size(); ++k) name += (k ? "," : "") + std::to_string(subset[k]);
  name += "}";
  return ActivationMatrix(std::move(out), std::move(name));
}

double head_subset_cka(const Tensor& attention_output, std::span<const std::size_t> head_subset,
                       const ActivationMatrix& peer, const CkaConfig& config) {
  return minibatch_cka(head_subset_matrix(attention_output, head_subset), peer, config);
}

}  // namespace repscope
