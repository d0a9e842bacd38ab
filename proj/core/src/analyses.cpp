#include "repscope/analyses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "repscope/error.hpp"
#include "repscope/parallel.hpp"
#include "repscope/rng.hpp"

namespace repscope {

namespace {

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

double mean_of(const std::vector<double>& v) { return v.empty() ? 0.0 : sorted_sum(v) / static_cast<double>(v.size()); }

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

// ---- attention distance ----

double attention_diameter(std::size_t grid, std::size_t patch_size) {
  return static_cast<double>(patch_size) * std::sqrt(2.0) * static_cast<double>(grid == 0 ? 0 : grid - 1);
}

std::vector<HeadDistance> attention_distance(const AttentionTensor& attn, std::size_t subsets, double row_tolerance) {
  // Re-validates normalisation; throws on rows off by more than the tolerance.
  make_attention_tensor(attn.values, attn.grid, attn.patch_size, attn.has_cls_token, row_tolerance);
  const std::size_t m = attn.examples(), heads = attn.heads(), t = attn.tokens();
  const std::size_t g = attn.grid;
  const std::size_t off = attn.has_cls_token ? 1 : 0;
  const double p = static_cast<double>(attn.patch_size);
  if (subsets == 0 || subsets > m) throw InvalidArgument("attention_distance: subsets must be in [1, examples]");
  const std::size_t s = g * g;
  std::vector<double> dist(s * s);
  for (std::size_t a = 0; a < s; ++a) {
    for (std::size_t b = 0; b < s; ++b) {
      const double dy = (static_cast<double>(a / g) - static_cast<double>(b / g)) * p;
      const double dx = (static_cast<double>(a % g) - static_cast<double>(b % g)) * p;
      dist[a * s + b] = std::sqrt(dx * dx + dy * dy);
    }
  }
  std::vector<HeadDistance> out(heads);
  const double* v = attn.values.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> per_example(m);
    for (std::size_t e = 0; e < m; ++e) {
      const double* a = v + (e * heads + h) * t * t;
      double total = 0.0;
      std::size_t queries = 0;
      for (std::size_t q = 0; q < s; ++q) {
        const double* row = a + (q + off) * t + off;
        double mass = 0.0, acc = 0.0;
        for (std::size_t k = 0; k < s; ++k) {
          mass += row[k];
          acc += row[k] * dist[q * s + k];
        }
        if (mass <= 0.0) continue;  // all attention on CLS: no spatial information
        total += acc / mass;
        ++queries;
      }
      if (queries == 0) throw DataError("attention_distance: every query attends only to CLS");
      per_example[e] = total / static_cast<double>(queries);
    }
    out[h].head = h;
    out[h].mean_distance = sorted_sum(per_example) / static_cast<double>(m);
    if (subsets > 1) {
      std::vector<double> means;
      for (std::size_t k = 0; k < subsets; ++k) {
        const std::size_t lo = k * m / subsets, hi = (k + 1) * m / subsets;
        means.push_back(sorted_sum({per_example.begin() + static_cast<std::ptrdiff_t>(lo),
                                    per_example.begin() + static_cast<std::ptrdiff_t>(hi)}) /
                        static_cast<double>(hi - lo));
      }
      const double mu = mean_of(means);
      double var = 0.0;
      for (double x : means) var += (x - mu) * (x - mu);
      out[h].spread = std::sqrt(var / static_cast<double>(subsets - 1));
    }
  }
  std::sort(out.begin(), out.end(), [](const HeadDistance& a, const HeadDistance& b) {
    return a.mean_distance != b.mean_distance ? a.mean_distance < b.mean_distance : a.head < b.head;
  });
  return out;
}

HeadDistanceProfile attention_distance_profile(const DumpReader& dump, std::size_t max_examples, std::size_t subsets,
                                               std::uint64_t seed) {
  const auto& man = dump.manifest();
  const auto layers = man.layers_of_kind({LayerKind::attention_weights});
  if (layers.empty()) throw DataError("dump '" + man.model_name + "' has no attention-weights layers");
  const std::size_t m = man.num_examples;
  std::vector<std::size_t> rows;
  if (max_examples == 0 || max_examples >= m) {
    rows.resize(m);
    for (std::size_t i = 0; i < m; ++i) rows[i] = i;
  } else {
    Rng rng(seed);
    rows = rng.permutation(m);
    rows.resize(max_examples);
  }
  HeadDistanceProfile profile;
  profile.num_examples_averaged = rows.size();
  profile.subsets = std::min(subsets == 0 ? 1 : subsets, rows.size());
  for (const auto* entry : layers) {
    Tensor full = dump.load(entry->name);
    Shape shape = full.shape();
    const std::size_t stride = full.size() / shape[0];
    shape[0] = rows.size();
    std::vector<double> picked(rows.size() * stride);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(full.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                  picked.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    const AttentionTensor attn =
        make_attention_tensor(Tensor(shape, std::move(picked)), man.grid, man.patch_size, man.has_cls_token);
    try {
      profile.layers.push_back({entry->name, attention_distance(attn, profile.subsets)});
    } catch (const DataError& e) {
      throw DataError("layer '" + entry->name + "': " + e.what());
    }
  }
  return profile;
}

// ---- effective receptive field ----

std::string_view to_string(ErfVariant v) { return v == ErfVariant::post_residual ? "post-residual" : "pre-residual"; }

ErfVariant parse_erf_variant(std::string_view text) {
  if (text == "post-residual" || text == "post") return ErfVariant::post_residual;
  if (text == "pre-residual" || text == "pre") return ErfVariant::pre_residual;
  throw InvalidArgument("unknown receptive-field variant '" + std::string(text) + "'");
}

std::string resolve_erf_layer(const ToyModel& model, std::string_view layer, ErfVariant variant) {
  if (variant == ErfVariant::post_residual) return std::string(layer);
  if (!ends_with(layer, ".out")) {
    throw InvalidArgument("pre-residual receptive fields need a block output layer, got '" + std::string(layer) + "'");
  }
  const std::string base(layer.substr(0, layer.size() - 4));
  return model.architecture() == "vit" ? base + ".attn.branch" : base + ".branch";
}

ReceptiveField effective_receptive_field(const ToyModel& model, std::span<const double> params, std::string_view layer,
                                         ErfVariant variant, const Tensor& images, std::size_t workers) {
  model.check_images(images);
  ReceptiveField rf;
  rf.layer = resolve_erf_layer(model, layer, variant);
  rf.location = model.center_location(rf.layer);
  const std::size_t n = images.dim(0), h = model.image_size(), c = model.channels();
  const std::size_t img = h * h * c;
  std::vector<std::vector<double>> per_image(n, std::vector<double>(h * h, 0.0));
  parallel_for(n, workers, [&](std::size_t i) {
    std::vector<double> one(images.data().begin() + static_cast<std::ptrdiff_t>(i * img),
                            images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * img));
    const Tensor jac = model.feature_input_jacobian(params, Tensor({1, h, h, c}, std::move(one)), rf.layer, rf.location);
    const std::size_t ch = jac.dim(0);
    auto& acc = per_image[i];
    for (std::size_t k = 0; k < ch; ++k) {
      for (std::size_t px = 0; px < h * h; ++px) {
        for (std::size_t cc = 0; cc < c; ++cc) acc[px] += std::abs(jac[(k * h * h + px) * c + cc]);
      }
    }
    for (double& v : acc) v /= static_cast<double>(ch * c);
  });
  rf.raw = Tensor({h, h});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t px = 0; px < h * h; ++px) rf.raw[px] += per_image[i][px];
  }
  double mx = 0.0;
  for (auto& v : rf.raw.data()) {
    v /= static_cast<double>(n);
    mx = std::max(mx, v);
  }
  rf.normalized = Tensor({h, h});
  if (mx > 0.0) {
    for (std::size_t px = 0; px < h * h; ++px) rf.normalized[px] = rf.raw[px] / mx;
  }
  return rf;
}

double window_mass_fraction(const Tensor& field, std::size_t top, std::size_t left, std::size_t size) {
  if (field.rank() != 2) throw InvalidArgument("window_mass_fraction: field must be 2-D");
  double total = 0.0, inside = 0.0;
  for (std::size_t y = 0; y < field.dim(0); ++y) {
    for (std::size_t x = 0; x < field.dim(1); ++x) {
      const double v = field(y, x);
      total += v;
      if (y >= top && y < top + size && x >= left && x < left + size) inside += v;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

// ---- skip / long-branch norms ----

BranchNorms compute_branch_norms(const Tensor& z_in, const Tensor& f_in, bool has_cls_token) {
  const Tensor z = as_token_layer(z_in);
  const Tensor f = as_token_layer(f_in);
  if (z.shape() != f.shape() || z.rank() != 3) {
    throw DataError("branch norms need equal [m, T, d] tensors, got " + shape_to_string(z_in.shape()) + " and " +
                    shape_to_string(f_in.shape()));
  }
  const std::size_t m = z.dim(0), t = z.dim(1), d = z.dim(2);
  if (has_cls_token && t < 2) throw DataError("branch norms: CLS model needs at least one spatial token");
  BranchNorms out;
  out.ratio.assign(t, 0.0);
  out.degenerate.assign(t, false);
  out.cosine.assign(t, 0.0);
  for (std::size_t k = 0; k < t; ++k) {
    double sum_z = 0.0, sum_f = 0.0, sum_cos = 0.0;
    for (std::size_t e = 0; e < m; ++e) {
      const double* zr = z.data().data() + (e * t + k) * d;
      const double* fr = f.data().data() + (e * t + k) * d;
      double zz = 0.0, ff = 0.0, zs = 0.0, ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double sum = zr[j] + fr[j];
        zz += zr[j] * zr[j];
        ff += fr[j] * fr[j];
        zs += zr[j] * sum;
        ss += sum * sum;
      }
      sum_z += std::sqrt(zz);
      sum_f += std::sqrt(ff);
      const double denom = std::sqrt(zz) * std::sqrt(ss);
      sum_cos += denom > 0.0 ? zs / denom : 0.0;
    }
    const double mz = sum_z / static_cast<double>(m);
    const double mf = sum_f / static_cast<double>(m);
    out.cosine[k] = sum_cos / static_cast<double>(m);
    if (mf < 1e-12) {
      out.degenerate[k] = true;
    } else {
      out.ratio[k] = mz / mf;
    }
  }
  const std::size_t first_spatial = has_cls_token ? 1 : 0;
  double rs = 0.0, cs = 0.0;
  std::size_t rn = 0;
  for (std::size_t k = first_spatial; k < t; ++k) {
    cs += out.cosine[k];
    if (!out.degenerate[k]) {
      rs += out.ratio[k];
      ++rn;
    }
  }
  out.spatial_ratio = rn ? rs / static_cast<double>(rn) : 0.0;
  out.spatial_cosine = cs / static_cast<double>(t - first_spatial);
  if (has_cls_token) {
    out.cls_ratio = out.ratio[0];
    out.cls_cosine = out.cosine[0];
  }
  return out;
}

BranchNormResult branch_norms(const DumpReader& dump) {
  const auto& man = dump.manifest();
  auto key = [](const std::string& name) {
    const auto dot = name.rfind('.');
    return dot == std::string::npos ? std::string() : name.substr(0, dot);
  };
  std::map<std::string, const LayerEntry*> branches;
  for (const auto* e : man.layers_of_kind({LayerKind::pre_residual_branch})) branches[key(e->name)] = e;
  BranchNormResult result;
  result.has_cls_token = man.has_cls_token;
  for (const auto* skip : man.layers_of_kind({LayerKind::skip_branch})) {
    const auto it = branches.find(key(skip->name));
    if (it == branches.end()) {
      throw DataError("skip-branch layer '" + skip->name + "' has no paired pre-residual-branch layer");
    }
    BranchNorms bn;
    try {
      bn = compute_branch_norms(dump.load(skip->name), dump.load(it->second->name), man.has_cls_token);
    } catch (const DataError& e) {
      throw DataError("pair '" + key(skip->name) + "': " + e.what());
    }
    bn.name = key(skip->name);
    bn.skip_layer = skip->name;
    bn.branch_layer = it->second->name;
    result.entries.push_back(std::move(bn));
  }
  if (result.entries.empty()) throw DataError("dump '" + man.model_name + "' has no skip/branch pairs");
  return result;
}

// ---- spatial localization ----

std::size_t LocalizationMap::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

double LocalizationMap::own_margin() const {
  const std::size_t g = scores.dim(1);
  const std::size_t own = row * g + col;
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != own) other = std::max(other, scores[i]);
  }
  return scores[own] - other;
}

std::vector<ActivationMatrix> image_patches(const Tensor& images, std::size_t grid, std::size_t patch_size) {
  if (images.rank() != 4 || images.dim(1) != grid * patch_size || images.dim(2) != grid * patch_size) {
    throw DataError("images " + shape_to_string(images.shape()) + " do not match a " + std::to_string(grid) + "x" +
                    std::to_string(grid) + " grid of " + std::to_string(patch_size) + "-pixel patches");
  }
  const std::size_t m = images.dim(0), h = images.dim(1), c = images.dim(3);
  const std::size_t pd = patch_size * patch_size * c;
  std::vector<ActivationMatrix> out;
  out.reserve(grid * grid);
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      Tensor t({m, pd});
      for (std::size_t e = 0; e < m; ++e) {
        std::size_t k = 0;
        for (std::size_t y = 0; y < patch_size; ++y) {
          for (std::size_t x = 0; x < patch_size; ++x) {
            const std::size_t src = ((e * h + gy * patch_size + y) * h + gx * patch_size + x) * c;
            for (std::size_t cc = 0; cc < c; ++cc) t(e, k++) = images[src + cc];
          }
        }
      }
      out.emplace_back(std::move(t), "patch" + std::to_string(gy * grid + gx));
    }
  }
  return out;
}

std::vector<LocalizationMap> localization_maps(const Tensor& token_layer_in, const Tensor& images,
                                               const PatchGeometry& geometry, std::span<const std::size_t> tokens,
                                               const CkaConfig& config, std::size_t workers) {
  const Tensor layer = as_token_layer(token_layer_in);
  const std::size_t off = geometry.has_cls_token ? 1 : 0;
  const std::size_t g = geometry.grid;
  if (layer.rank() != 3 || layer.dim(1) != g * g + off) {
    throw DataError("token layer " + shape_to_string(token_layer_in.shape()) + " does not match a " +
                    std::to_string(g) + "x" + std::to_string(g) + " grid" + (off ? " plus CLS" : ""));
  }
  if (images.rank() < 1 || images.dim(0) != layer.dim(0)) {
    throw DataError("localization: images and token layer cover different example counts");
  }
  const auto patches = image_patches(images, g, geometry.patch_size);
  std::vector<ActivationMatrix> reps;
  for (std::size_t t : tokens) {
    if (t < off || t >= layer.dim(1)) throw InvalidArgument("localization: token " + std::to_string(t) + " is not spatial");
    reps.push_back(tokens_as_matrix(layer, t, "token" + std::to_string(t)));
  }
  const BatchPlan plan = make_batch_plan(layer.dim(0), config);
  const CkaHeatmap h = cka_matrix(reps, patches, plan, false, workers);
  std::vector<LocalizationMap> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    LocalizationMap map;
    map.token = tokens[i];
    map.row = (tokens[i] - off) / g;
    map.col = (tokens[i] - off) % g;
    map.scores = Tensor({g, g});
    for (std::size_t k = 0; k < g * g; ++k) map.scores[k] = std::max(0.0, h.scores(i, k));
    out.push_back(std::move(map));
  }
  return out;
}

LocalizationMap localization_map(const Tensor& token_layer, const Tensor& images, const PatchGeometry& geometry,
                                 std::size_t token, const CkaConfig& config) {
  const std::size_t t[] = {token};
  return std::move(localization_maps(token_layer, images, geometry, t, config).front());
}

PatchGeometry layer_geometry(const DumpManifest& manifest, const LayerEntry& layer) {
  if (layer.shape.size() == 4 && layer.kind != LayerKind::attention_weights) {
    const std::size_t h = layer.shape[1];
    if (h == 0 || manifest.image_size % h != 0 || layer.shape[2] != h) {
      throw DataError("layer '" + layer.name + "' spatial size does not divide the image size");
    }
    return {h, manifest.image_size / h, false};
  }
  if (layer.shape.size() == 3) {
    const std::size_t off = manifest.has_cls_token ? 1 : 0;
    if (layer.shape[1] != manifest.grid * manifest.grid + off) {
      throw DataError("layer '" + layer.name + "' is not a token layer over the manifest grid");
    }
    return {manifest.grid, manifest.patch_size, manifest.has_cls_token};
  }
  throw DataError("layer '" + layer.name + "' has no token-grid structure");
}

std::vector<std::size_t> interior_tokens(const PatchGeometry& geometry) {
  const std::size_t g = geometry.grid, off = geometry.has_cls_token ? 1 : 0;
  std::vector<std::size_t> out;
  for (std::size_t r = 1; r + 1 < g; ++r) {
    for (std::size_t c = 1; c + 1 < g; ++c) out.push_back(off + r * g + c);
  }
  return out;
}

}  // namespace repscope
