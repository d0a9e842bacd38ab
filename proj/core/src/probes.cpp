#include "repscope/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "repscope/datasets.hpp"
#include "repscope/error.hpp"
#include "repscope/parallel.hpp"

namespace repscope {

namespace {

Tensor targets(std::span<const int> labels, std::span<const std::size_t> rows, std::size_t num_classes) {
  Tensor y = Tensor::filled({rows.size(), num_classes}, -1.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int c = labels[rows[i]];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw DataError("probe label out of range");
    y(i, static_cast<std::size_t>(c)) = 1.0;
  }
  return y;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

}  // namespace

std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::first_token:
      return "first-token";
    case Aggregation::mean_all:
      return "mean-all";
    case Aggregation::mean_excluding_first:
      return "mean-excluding-first";
    case Aggregation::single_token:
      return "single-token";
    case Aggregation::per_token:
      return "per-token";
    case Aggregation::resnet_patch_flatten_pool:
      return "resnet-patch-flatten-pool";
  }
  return "mean-all";
}

Aggregation parse_aggregation(std::string_view text) {
  for (auto a : {Aggregation::first_token, Aggregation::mean_all, Aggregation::mean_excluding_first,
                 Aggregation::single_token, Aggregation::per_token, Aggregation::resnet_patch_flatten_pool}) {
    if (text == to_string(a)) return a;
  }
  throw InvalidArgument("unknown aggregation '" + std::string(text) + "'");
}

void ProbeSpec::validate() const {
  if (shots == 0) throw InvalidArgument("probe shots must be >= 1");
  if (ridge_grid.empty()) throw InvalidArgument("probe ridge grid is empty");
  for (double l : ridge_grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw InvalidArgument("probe ridge values must be finite and >= 0");
  }
  if (ridge_grid.size() > 1 && shots < 2) throw InvalidArgument("selecting lambda needs at least 2 shots per class");
}

Tensor Probe::scores(const Tensor& features) const {
  const std::size_t d = weights.dim(0) - 1, c = weights.dim(1);
  if (features.rank() != 2 || features.dim(1) != d) {
    throw InvalidArgument("probe expects " + std::to_string(d) + " features, got " + shape_to_string(features.shape()));
  }
  const std::size_t n = features.dim(0);
  Tensor s({n, c});
  kernels::gemm_nn(features.data().data(), weights.data().data(), s.data().data(), n, d, c, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) s(i, j) += weights(d, j);
  }
  return s;
}

std::vector<int> Probe::predict(const Tensor& features) const {
  const Tensor s = scores(features);
  const std::size_t n = s.dim(0), c = s.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = s(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, s(i, j));
    std::size_t best = 0;
    while (s(i, best) < mx - kProbeTieTolerance) ++best;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Probe fit_probe(const Tensor& features, std::span<const int> labels, std::size_t num_classes, double lambda) {
  if (features.rank() != 2) throw InvalidArgument("fit_probe: features must be [n, d]");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) throw InvalidArgument("fit_probe: label count does not match features");
  if (num_classes < 2) throw InvalidArgument("fit_probe: need at least 2 classes");
  if (!(lambda >= 0.0)) throw InvalidArgument("fit_probe: lambda must be >= 0");
  if (lambda == 0.0 && d >= n) {
    throw InvalidArgument("fit_probe: lambda = 0 with d = " + std::to_string(d) + " >= n = " + std::to_string(n) +
                          " is singular; supply lambda > 0");
  }
  const auto rows = all_rows(n);
  Tensor y = targets(labels, rows, num_classes);
  std::vector<double> xm(d, 0.0), ym(num_classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) xm[j] += features(i, j);
    for (std::size_t j = 0; j < num_classes; ++j) ym[j] += y(i, j);
  }
  for (double& v : xm) v /= static_cast<double>(n);
  for (double& v : ym) v /= static_cast<double>(n);
  Tensor xc({n, d}), yc({n, num_classes});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) xc(i, j) = features(i, j) - xm[j];
    for (std::size_t j = 0; j < num_classes; ++j) yc(i, j) = y(i, j) - ym[j];
  }
  Tensor wc({d, num_classes});
  if (d <= n) {
    Tensor a({d, d});
    kernels::gemm_tn(xc.data().data(), xc.data().data(), a.data().data(), d, n, d, false);
    for (std::size_t j = 0; j < d; ++j) a(j, j) += lambda;
    Tensor b({d, num_classes});
    kernels::gemm_tn(xc.data().data(), yc.data().data(), b.data().data(), d, n, num_classes, false);
    wc = cholesky_solve(a, b);
  } else {
    Tensor g = gram(xc);
    for (std::size_t i = 0; i < n; ++i) g(i, i) += lambda;
    const Tensor alpha = cholesky_solve(g, yc);
    kernels::gemm_tn(xc.data().data(), alpha.data().data(), wc.data().data(), d, n, num_classes, false);
  }
  Probe p;
  p.lambda = lambda;
  p.weights = Tensor({d + 1, num_classes});
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < num_classes; ++k) p.weights(j, k) = wc(j, k);
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    double b = ym[k];
    for (std::size_t j = 0; j < d; ++j) b -= xm[j] * wc(j, k);
    p.weights(d, k) = b;
  }
  return p;
}

double probe_accuracy(const Probe& probe, const Tensor& features, std::span<const int> labels) {
  const auto pred = probe.predict(features);
  if (pred.size() != labels.size()) throw InvalidArgument("probe_accuracy: label count does not match features");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

Probe fit_probe_selected(const Tensor& features, std::span<const int> labels, std::span<const std::size_t> rows,
                         const ProbeSpec& spec, std::size_t num_classes) {
  spec.validate();
  auto subset = [&](std::span<const std::size_t> r) {
    const Tensor x = gather_rows(features, r);
    std::vector<int> y(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) y[i] = labels[r[i]];
    return std::pair{x, y};
  };
  double chosen = spec.ridge_grid.front();
  if (spec.ridge_grid.size() > 1) {
    // Hold out a fifth of each class's shots (at least one).
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t r : rows) by_class[labels[r]].push_back(r);
    std::vector<std::size_t> fit_rows, val_rows;
    for (auto& [c, rs] : by_class) {
      const std::size_t hold = std::max<std::size_t>(1, rs.size() / 5);
      if (hold >= rs.size()) throw InvalidArgument("probe: class " + std::to_string(c) + " has too few shots");
      fit_rows.insert(fit_rows.end(), rs.begin(), rs.end() - static_cast<std::ptrdiff_t>(hold));
      val_rows.insert(val_rows.end(), rs.end() - static_cast<std::ptrdiff_t>(hold), rs.end());
    }
    const auto [xf, yf] = subset(fit_rows);
    const auto [xv, yv] = subset(val_rows);
    double best = -1.0;
    for (double lambda : spec.ridge_grid) {
      const double acc = probe_accuracy(fit_probe(xf, yf, num_classes, lambda), xv, yv);
      // Ties go to the larger lambda.
      if (acc > best || (acc == best && lambda > chosen)) {
        best = acc;
        chosen = lambda;
      }
    }
  }
  const auto [x, y] = subset(rows);
  return fit_probe(x, y, num_classes, chosen);
}

Tensor space_to_depth(const Tensor& map, std::size_t factor) {
  if (map.rank() != 4) throw InvalidArgument("space_to_depth: expected [m, h, w, c]");
  const std::size_t m = map.dim(0), h = map.dim(1), w = map.dim(2), c = map.dim(3);
  if (factor == 0 || h % factor != 0 || w % factor != 0) {
    throw InvalidArgument("space_to_depth: factor " + std::to_string(factor) + " does not divide " +
                          std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t ho = h / factor, wo = w / factor, co = c * factor * factor;
  Tensor out({m, ho, wo, co});
  for (std::size_t e = 0; e < m; ++e) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t dst_base = ((e * ho + y / factor) * wo + x / factor) * co + ((y % factor) * factor + x % factor) * c;
        const std::size_t src = ((e * h + y) * w + x) * c;
        for (std::size_t k = 0; k < c; ++k) out[dst_base + k] = map[src + k];
      }
    }
  }
  return out;
}

Tensor average_pool(const Tensor& map, std::size_t pooled) {
  if (map.rank() != 4) throw InvalidArgument("average_pool: expected [m, h, w, c]");
  const std::size_t m = map.dim(0), h = map.dim(1), w = map.dim(2), c = map.dim(3);
  if (pooled == 0 || h % pooled != 0 || w % pooled != 0) {
    throw InvalidArgument("average_pool: " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible into " + std::to_string(pooled) + "x" + std::to_string(pooled));
  }
  const std::size_t fy = h / pooled, fx = w / pooled;
  Tensor out({m, pooled, pooled, c});
  for (std::size_t e = 0; e < m; ++e) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t dst = ((e * pooled + y / fy) * pooled + x / fx) * c;
        const std::size_t src = ((e * h + y) * w + x) * c;
        for (std::size_t k = 0; k < c; ++k) out[dst + k] += map[src + k];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(fy * fx);
  for (auto& v : out.data()) v *= inv;
  return out;
}

ActivationMatrix resnet_patch_flatten(const Tensor& map, std::size_t factor, std::size_t pooled_size) {
  const Tensor pooled = average_pool(space_to_depth(map, factor), pooled_size);
  return ActivationMatrix(flatten_examples(pooled), "patch-flatten");
}

std::size_t patch_flatten_factor(std::size_t channels, std::size_t target_channels) {
  std::size_t f = 1;
  while (channels * f * f < target_channels) f *= 2;
  return f;
}

Tensor aggregate_features(const Tensor& layer_in, const DumpManifest& manifest, const LayerEntry& entry,
                          const ProbeSpec& spec) {
  auto fail = [&](const std::string& why) {
    return DataError("aggregation " + std::string(to_string(spec.aggregation)) + " on layer '" + entry.name +
                     "': " + why);
  };
  if (entry.kind == LayerKind::attention_weights) throw fail("attention weights are not representations");
  if (spec.aggregation == Aggregation::resnet_patch_flatten_pool) {
    if (layer_in.rank() != 4) throw fail("needs a conv feature map [m, h, w, c]");
    std::size_t target = spec.target_channels;
    if (target == 0) {
      for (const auto& l : manifest.layers) {
        if (l.shape.size() == 4 && l.kind != LayerKind::attention_weights) target = l.shape[3];
      }
    }
    const std::size_t factor = patch_flatten_factor(layer_in.dim(3), target);
    try {
      return resnet_patch_flatten(layer_in, factor, manifest.grid).values;
    } catch (const InvalidArgument& e) {
      throw fail(e.what());
    }
  }
  if (layer_in.rank() != 3 && layer_in.rank() != 4) throw fail("needs a token layer");
  const Tensor layer = as_token_layer(layer_in);
  const std::size_t m = layer.dim(0), t = layer.dim(1), d = layer.dim(2);
  auto mean_tokens = [&](std::size_t from) {
    if (from >= t) throw fail("no tokens to average");
    Tensor out({m, d});
    for (std::size_t e = 0; e < m; ++e) {
      for (std::size_t k = from; k < t; ++k) {
        for (std::size_t j = 0; j < d; ++j) out(e, j) += layer[(e * t + k) * d + j];
      }
    }
    for (auto& v : out.data()) v /= static_cast<double>(t - from);
    return out;
  };
  switch (spec.aggregation) {
    case Aggregation::first_token:
      return tokens_as_matrix(layer, 0).values;
    case Aggregation::single_token:
      if (spec.token >= t) throw fail("token " + std::to_string(spec.token) + " out of range");
      return tokens_as_matrix(layer, spec.token).values;
    case Aggregation::mean_all:
      return mean_tokens(0);
    case Aggregation::mean_excluding_first:
      return mean_tokens(1);
    default:
      throw fail("not a single-matrix aggregation");
  }
}

ProbeResult probe_curve(const DumpReader& dump, const ProbeSpec& spec, const KindSet& kinds_in, std::size_t workers) {
  spec.validate();
  const auto& man = dump.manifest();
  const std::vector<int> labels = dump.labels();
  std::size_t num_classes = spec.num_classes;
  if (num_classes == 0) {
    for (int y : labels) num_classes = std::max(num_classes, static_cast<std::size_t>(y) + 1);
  }
  const KindSet kinds = kinds_in.empty() ? KindSet{LayerKind::block_output, LayerKind::conv_stage_output} : kinds_in;
  const auto layers = man.layers_of_kind(kinds);
  if (layers.empty()) throw DataError("dump '" + man.model_name + "' has no layers of the requested kinds");

  const auto train_rows = sample_per_class(labels, num_classes, spec.shots, spec.seed);
  std::vector<bool> used(labels.size(), false);
  for (std::size_t r : train_rows) used[r] = true;
  std::vector<std::size_t> eval_rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!used[i] && (spec.max_eval == 0 || eval_rows.size() < spec.max_eval)) eval_rows.push_back(i);
  }
  if (eval_rows.empty()) throw DataError("probe: no examples left for evaluation");
  std::vector<int> eval_labels(eval_rows.size());
  for (std::size_t i = 0; i < eval_rows.size(); ++i) eval_labels[i] = labels[eval_rows[i]];
  const std::size_t val_per_class = spec.ridge_grid.size() > 1 ? std::max<std::size_t>(1, spec.shots / 5) : 0;

  ProbeResult result;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& entry = *layers[li];
    const Tensor layer = dump.load(entry.name);
    ProbeLayerResult r;
    r.layer = entry.name;
    r.normalized_depth = layers.size() > 1 ? static_cast<double>(li) / static_cast<double>(layers.size() - 1) : 0.0;
    r.aggregation = spec.aggregation;
    r.val_examples = val_per_class * num_classes;
    r.train_examples = train_rows.size() - r.val_examples;
    r.test_examples = eval_rows.size();
    if (spec.aggregation == Aggregation::per_token) {
      const Tensor tokens = as_token_layer(layer);
      if (tokens.rank() != 3) throw DataError("per-token probes on layer '" + entry.name + "' need a token layer");
      const std::size_t first = man.has_cls_token && tokens.dim(1) > 1 ? 1 : 0;
      const std::size_t count = tokens.dim(1) - first;
      std::vector<double> acc(count), lam(count);
      parallel_for(count, workers, [&](std::size_t k) {
        const Tensor x = tokens_as_matrix(tokens, first + k).values;
        const Probe p = fit_probe_selected(x, labels, train_rows, spec, num_classes);
        acc[k] = probe_accuracy(p, gather_rows(x, eval_rows), eval_labels);
        lam[k] = p.lambda;
      });
      double s = 0.0;
      for (double a : acc) s += a;
      r.accuracy = s / static_cast<double>(count);
      std::map<double, std::size_t> votes;
      for (double l : lam) ++votes[l];
      r.lambda = std::max_element(votes.begin(), votes.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
    } else {
      const Tensor x = aggregate_features(layer, man, entry, spec);
      const Probe p = fit_probe_selected(x, labels, train_rows, spec, num_classes);
      r.accuracy = probe_accuracy(p, gather_rows(x, eval_rows), eval_labels);
      r.lambda = p.lambda;
    }
    result.layers.push_back(r);
  }
  return result;
}

}  // namespace repscope
