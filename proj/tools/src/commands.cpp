#include "commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "repscope/cnn.hpp"
#include "repscope/error.hpp"
#include "repscope/npy.hpp"
#include "repscope/report.hpp"
#include "repscope/rng.hpp"
#include "repscope/vit.hpp"

namespace repscope::cli {

namespace fs = std::filesystem;

namespace {

std::string num(double v) { return format_number(v); }
void write_file_text(const fs::path& path, const std::string& text) { write_file_bytes(path, text); }
std::string num(std::size_t v) { return std::to_string(v); }

std::size_t parse_size(std::string_view text, std::string_view what) {
  std::size_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw UsageError("bad " + std::string(what) + " '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(sep, start);
    const auto piece = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    if (!piece.empty()) out.emplace_back(piece);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

// Opens a dump after checking that the path exists, so path problems are
// reported before any computation.
DumpReader open_dump(const fs::path& dir, std::string_view flag = "--dump") {
  if (dir.empty()) throw UsageError(std::string(flag) + " is required");
  if (!fs::is_directory(dir)) throw IoError("dump directory " + dir.string() + " does not exist");
  return DumpReader(dir);
}

Checkpoint open_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory " + dir.string() + " does not exist");
  return load_checkpoint(dir);
}

RenderStyle cka_style(std::string title) {
  RenderStyle s;
  s.unit_scale = true;
  s.title = std::move(title);
  return s;
}

RenderStyle data_style(std::string title) {
  RenderStyle s;
  s.unit_scale = false;
  s.title = std::move(title);
  return s;
}

KindSet default_heatmap_kinds(const DumpManifest& man) {
  KindSet k;
  for (const auto& l : man.layers) {
    if (l.kind == LayerKind::block_output || l.kind == LayerKind::conv_stage_output) k.insert(l.kind);
  }
  return k;
}

// Last block output of a dump: the block-output or conv-stage layer that
// comes last in manifest order, preferring names ending in ".out".
std::string last_output_layer(const DumpManifest& man) {
  std::string best;
  for (const auto& l : man.layers) {
    if (l.kind != LayerKind::block_output && l.kind != LayerKind::conv_stage_output) continue;
    if (l.name.size() >= 4 && l.name.ends_with(".out")) best = l.name;
  }
  if (best.empty()) throw DataError("dump '" + man.model_name + "' has no block output layer");
  return best;
}

std::string last_model_output(const ToyModel& model) {
  std::string best;
  for (const auto& p : model.capture_points()) {
    if ((p.kind == LayerKind::block_output || p.kind == LayerKind::conv_stage_output) && p.name.ends_with(".out")) {
      best = p.name;
    }
  }
  if (best.empty()) throw DataError("model has no block outputs");
  return best;
}

// Images used for receptive fields: `count` examples of the dump drawn with
// the seed, or the whole dump when it is smaller.
Tensor sample_images(const DumpReader& dump, std::size_t count, std::uint64_t seed) {
  if (!dump.has_images()) throw DataError("dump '" + dump.manifest().model_name + "' stores no input images");
  const Tensor images = dump.images();
  const std::size_t m = images.dim(0);
  Rng rng(seed);
  std::vector<std::size_t> rows = rng.permutation(m);
  rows.resize(std::min(count, m));
  std::sort(rows.begin(), rows.end());
  return gather_examples(images, rows);
}

void write_heatmap(const OutputDirs& out, const std::string& name, const HeatmapResult& h, const RenderStyle& style) {
  write_file_text(out.csv(name + ".csv"), heatmap_csv(h));
  render_heatmap(h, style, out.fig(name));
}

// ---- individual analyses; each writes its files and returns nothing ----

void heatmap_analysis(const OutputDirs& out, const DumpReader& dump, const KindSet& kinds, const CkaConfig& config,
                      std::size_t workers) {
  const KindSet k = kinds.empty() ? default_heatmap_kinds(dump.manifest()) : kinds;
  const CkaHeatmap h = layer_pair_heatmap(dump, k, config, workers);
  write_heatmap(out, "heatmap", h, cka_style("CKA " + dump.manifest().model_name));
}

void attention_analysis(const OutputDirs& out, const DumpReader& dump, std::size_t max_examples,
                        std::size_t subsets, std::uint64_t seed) {
  const HeadDistanceProfile p = attention_distance_profile(dump, max_examples, subsets, seed);
  CsvTable t({"layer", "rank", "head", "mean_distance", "spread", "examples"});
  HeatmapResult h;
  std::size_t heads = 0;
  for (const auto& l : p.layers) heads = std::max(heads, l.heads.size());
  h.scores = Tensor::filled({p.layers.size(), heads}, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t r = 0; r < heads; ++r) h.cols.push_back("rank" + std::to_string(r));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    h.rows.push_back(l.layer);
    for (std::size_t r = 0; r < l.heads.size(); ++r) {
      const auto& hd = l.heads[r];
      t.add_row({l.layer, num(r), num(hd.head), num(hd.mean_distance), num(hd.spread), num(p.num_examples_averaged)});
      h.scores(i, r) = hd.mean_distance;
    }
  }
  t.write(out.csv("attention_distance.csv"));
  const auto& man = dump.manifest();
  RenderStyle style = data_style("mean attention distance (px), diameter " +
                                 num(attention_diameter(man.grid, man.patch_size)));
  render_heatmap(h, style, out.fig("attention_distance"));
}

void branch_norm_analysis(const OutputDirs& out, const DumpReader& dump) {
  const BranchNormResult r = branch_norms(dump);
  CsvTable per_token({"pair", "token", "ratio", "degenerate", "cosine"});
  CsvTable summary({"pair", "cls_ratio", "spatial_ratio", "cls_cosine", "spatial_cosine"});
  HeatmapResult h;
  if (r.entries.empty()) throw DataError("dump has no skip/branch layer pairs");
  std::size_t tokens = 0;
  for (const auto& e : r.entries) tokens = std::max(tokens, e.ratio.size());
  h.scores = Tensor::filled({r.entries.size(), tokens}, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < tokens; ++k) h.cols.push_back("token" + std::to_string(k));
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    const auto& e = r.entries[i];
    h.rows.push_back(e.name);
    for (std::size_t k = 0; k < e.ratio.size(); ++k) {
      per_token.add_row({e.name, num(k), e.degenerate[k] ? "nan" : num(e.ratio[k]), e.degenerate[k] ? "1" : "0",
                         num(e.cosine[k])});
      h.scores(i, k) = e.degenerate[k] ? std::numeric_limits<double>::quiet_NaN() : e.ratio[k];
    }
    summary.add_row({e.name, r.has_cls_token ? num(e.cls_ratio) : "nan", num(e.spatial_ratio),
                     r.has_cls_token ? num(e.cls_cosine) : "nan", num(e.spatial_cosine)});
  }
  per_token.write(out.csv("branch_norms.csv"));
  summary.write(out.csv("branch_norms_summary.csv"));
  render_heatmap(h, data_style("||z|| / ||f(z)|| per token"), out.fig("branch_norms"));
}

std::vector<std::size_t> pick_tokens(const std::string& spec, const PatchGeometry& geo) {
  const std::size_t off = geo.has_cls_token ? 1 : 0;
  if (spec == "interior") {
    auto t = interior_tokens(geo);
    if (t.empty()) throw DataError("the " + num(geo.grid) + "x" + num(geo.grid) + " grid has no interior tokens");
    return t;
  }
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t k = 0; k < geo.grid * geo.grid; ++k) out.push_back(off + k);
    return out;
  }
  for (const auto& piece : split(spec, ',')) out.push_back(parse_size(piece, "token index"));
  if (out.empty()) throw UsageError("--tokens needs 'interior', 'all' or a comma-separated list");
  return out;
}

void localization_analysis(const OutputDirs& out, const DumpReader& dump, std::string layer,
                           const std::string& token_spec, const CkaConfig& config, std::size_t workers) {
  const auto& man = dump.manifest();
  if (layer.empty()) layer = last_output_layer(man);
  if (!dump.has_images()) throw DataError("dump '" + man.model_name + "' stores no input images");
  const PatchGeometry geo = layer_geometry(man, man.layer(layer));
  const auto tokens = pick_tokens(token_spec, geo);
  const auto maps = localization_maps(dump.load(layer), dump.images(), geo, tokens, config, workers);
  CsvTable cells({"layer", "token", "row", "col", "patch_row", "patch_col", "score"});
  CsvTable summary({"layer", "token", "row", "col", "argmax_row", "argmax_col", "own_score", "own_margin", "at_own"});
  std::size_t at_own = 0;
  for (const auto& m : maps) {
    const std::size_t g = m.scores.dim(1);
    for (std::size_t k = 0; k < m.scores.size(); ++k) {
      cells.add_row({layer, num(m.token), num(m.row), num(m.col), num(k / g), num(k % g), num(m.scores[k])});
    }
    const std::size_t a = m.argmax();
    const bool own = a == m.row * g + m.col;
    at_own += own ? 1 : 0;
    summary.add_row({layer, num(m.token), num(m.row), num(m.col), num(a / g), num(a % g),
                     num(m.scores[m.row * g + m.col]), num(m.own_margin()), own ? "1" : "0"});
    render_heatmap(grid_heatmap(m.scores), cka_style(layer + " token " + num(m.token)),
                   out.fig("localization_token" + num(m.token)));
  }
  cells.write(out.csv("localization.csv"));
  summary.write(out.csv("localization_summary.csv"));
  CsvTable frac({"layer", "tokens", "own_location_fraction"});
  frac.add_row({layer, num(maps.size()), num(static_cast<double>(at_own) / static_cast<double>(maps.size()))});
  frac.write(out.csv("localization_fraction.csv"));
}

void probe_analysis(const OutputDirs& out, const DumpReader& dump, const std::vector<Aggregation>& aggregations,
                    const KindSet& kinds, ProbeSpec spec, std::size_t workers) {
  if (!dump.has_labels()) throw DataError("dump '" + dump.manifest().model_name + "' stores no labels");
  CsvTable t({"layer_name", "normalized_depth", "aggregation", "accuracy", "lambda", "train_examples",
              "val_examples", "test_examples"});
  for (Aggregation a : aggregations) {
    spec.aggregation = a;
    const ProbeResult r = probe_curve(dump, spec, kinds, workers);
    for (const auto& l : r.layers) {
      t.add_row({l.layer, num(l.normalized_depth), std::string(to_string(l.aggregation)), num(l.accuracy),
                 num(l.lambda), num(l.train_examples), num(l.val_examples), num(l.test_examples)});
    }
  }
  t.write(out.csv("probe.csv"));
}

struct ErfGeometry {
  std::size_t grid = 0, cell = 0, offset = 0;
};

ErfGeometry erf_geometry(const ToyModel& model, const std::string& layer) {
  for (const auto& p : model.capture_points()) {
    if (p.name != layer) continue;
    ErfGeometry g;
    if (p.per_example.size() == 3) {
      g.grid = p.per_example[0];
    } else {
      g.offset = model.manifest_template().has_cls_token ? 1 : 0;
      g.grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(p.per_example[0] - g.offset))));
    }
    g.cell = model.image_size() / g.grid;
    return g;
  }
  throw UsageError("model has no layer '" + layer + "'");
}

void erf_analysis(const OutputDirs& out, const Checkpoint& ck, const DumpReader& dump, std::string layer,
                  const std::string& variant, std::size_t samples, std::uint64_t seed, std::size_t workers) {
  if (layer.empty()) layer = last_model_output(*ck.model);
  std::vector<ErfVariant> variants;
  if (variant == "both") {
    variants = {ErfVariant::post_residual, ErfVariant::pre_residual};
  } else {
    variants = {parse_erf_variant(variant)};
  }
  const Tensor images = sample_images(dump, samples, seed);
  CsvTable summary({"variant", "layer", "gradient_layer", "location", "center_cell_mass", "images"});
  for (ErfVariant v : variants) {
    const ReceptiveField rf = effective_receptive_field(*ck.model, ck.params, layer, v, images, workers);
    const ErfGeometry g = erf_geometry(*ck.model, rf.layer);
    const std::size_t loc = rf.location - g.offset;
    const double mass = window_mass_fraction(rf.raw, (loc / g.grid) * g.cell, (loc % g.grid) * g.cell, g.cell);
    const std::string tag(to_string(v));
    summary.add_row({tag, layer, rf.layer, num(rf.location), num(mass), num(images.dim(0))});
    const HeatmapResult raw = grid_heatmap(rf.raw);
    write_file_text(out.csv("erf_" + tag + ".csv"), heatmap_csv(raw));
    render_heatmap(grid_heatmap(rf.normalized), cka_style("receptive field " + rf.layer + " (" + tag + ")"),
                   out.fig("erf_" + tag));
  }
  summary.write(out.csv("erf_summary.csv"));
}

std::vector<Aggregation> parse_aggregations(const std::vector<std::string>& names) {
  std::vector<Aggregation> out;
  for (const auto& n : names) out.push_back(parse_aggregation(n));
  if (out.empty()) throw UsageError("at least one --aggregation is required");
  return out;
}

std::vector<CnnStage> parse_stages(const std::string& text) {
  std::vector<CnnStage> out;
  for (const auto& s : split(text, ',')) {
    const auto parts = split(s, 'x');
    if (parts.size() != 3) throw UsageError("stage '" + s + "' must be BLOCKSxCHANNELSxSTRIDE");
    out.push_back({parse_size(parts[0], "stage blocks"), parse_size(parts[1], "stage channels"),
                   parse_size(parts[2], "stage stride")});
  }
  return out;
}

}  // namespace

OutputDirs::OutputDirs(const fs::path& out) : root(out) {
  if (out.empty()) throw UsageError("--out is required");
  std::error_code ec;
  fs::create_directories(out / "csv", ec);
  if (!ec) fs::create_directories(out / "fig", ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
}

fs::path OutputDirs::csv(const std::string& name) const { return root / "csv" / name; }
fs::path OutputDirs::fig(const std::string& stem) const { return root / "fig" / stem; }

KindSet parse_kinds(const std::vector<std::string>& names) {
  KindSet k;
  for (const auto& n : names) {
    for (const auto& piece : split(n, ',')) {
      try {
        k.insert(parse_layer_kind(piece));
      } catch (const DataError& e) {
        throw UsageError(e.what());
      }
    }
  }
  return k;
}

int run_train_toy(const GlobalOptions& g, TrainToyOptions o) {
  const OutputDirs out(g.out);
  Dataset train_set, eval_set;
  if (o.dataset == "shapes") {
    ShapesSpec spec = o.shapes;
    spec.examples = o.train_examples + o.eval_examples;
    const Dataset all = make_shapes_dataset(spec);
    train_set = all.slice(0, o.train_examples);
    eval_set = all.slice(o.train_examples, spec.examples);
  } else if (o.dataset == "cifar") {
    if (o.cifar_train.empty() || o.cifar_eval.empty()) throw UsageError("--cifar-train and --cifar-eval are required");
    for (const auto& f : o.cifar_train) {
      if (!fs::exists(f)) throw IoError("missing CIFAR batch " + f.string());
    }
    for (const auto& f : o.cifar_eval) {
      if (!fs::exists(f)) throw IoError("missing CIFAR batch " + f.string());
    }
    train_set = load_cifar_binary(o.cifar_train, "cifar-train");
    eval_set = load_cifar_binary(o.cifar_eval, "cifar-eval");
    train_set = train_set.slice(0, std::min(o.train_examples, train_set.size()));
    eval_set = eval_set.slice(0, std::min(o.eval_examples, eval_set.size()));
  } else if (o.dataset == "npy") {
    if (!fs::exists(o.npy_images) || !fs::exists(o.npy_labels)) {
      throw IoError("--npy-images and --npy-labels must name existing files");
    }
    const Dataset all = load_npy_dataset(o.npy_images, o.npy_labels, o.npy_images.stem().string());
    if (o.train_examples + o.eval_examples > all.size()) {
      throw DataError("npy dataset holds " + num(all.size()) + " examples, fewer than train + eval");
    }
    train_set = all.slice(0, o.train_examples);
    eval_set = all.slice(o.train_examples, o.train_examples + o.eval_examples);
  } else {
    throw UsageError("unknown dataset '" + o.dataset + "' (expected shapes, cifar or npy)");
  }

  std::unique_ptr<ToyModel> model;
  const std::uint64_t model_seed = o.model_seed.value_or(g.seed);
  if (o.arch == "vit") {
    o.vit.image_size = train_set.image_size();
    o.vit.channels = train_set.channels();
    o.vit.num_classes = train_set.num_classes;
    o.vit.seed = model_seed;
    model = std::make_unique<ViT>(o.vit);
  } else if (o.arch == "cnn") {
    o.cnn.image_size = train_set.image_size();
    o.cnn.channels = train_set.channels();
    o.cnn.num_classes = train_set.num_classes;
    o.cnn.stages = parse_stages(o.stages);
    o.cnn.seed = model_seed;
    model = std::make_unique<Cnn>(o.cnn);
  } else {
    throw UsageError("unknown architecture '" + o.arch + "' (expected vit or cnn)");
  }
  TrainConfig tc = o.train;
  tc.learning_rate = o.learning_rate.value_or(default_learning_rate(*model));
  tc.seed = g.seed;
  tc.workers = g.workers;
  KindSet capture;
  for (const auto& c : o.capture) {
    if (c == "all") {
      capture = all_capture_kinds();
      break;
    }
  }
  if (capture.empty()) capture = parse_kinds(o.capture);

  const TrainResult r = train(*model, train_set, &eval_set, tc);
  save_checkpoint(out.root / "checkpoint", *model, r.params, &r.report);
  const std::string name = o.name.empty() ? model->architecture() +
                                                (o.arch == "vit" ? "-" + std::string(to_string(o.vit.head_type)) : "")
                                          : o.name;
  const Dataset dump_set = eval_set.slice(0, std::min(o.dump_examples, eval_set.size()));
  dump_activations(*model, r.params, dump_set, capture, out.root / "dump", name);

  CsvTable loss({"epoch", "mean_loss"});
  for (std::size_t e = 0; e < r.report.loss_curve.size(); ++e) loss.add_row({num(e + 1), num(r.report.loss_curve[e])});
  loss.write(out.csv("train_loss.csv"));
  CsvTable summary({"model", "train_accuracy", "eval_accuracy", "steps", "train_dataset", "eval_dataset"});
  summary.add_row({name, num(r.report.final_train_accuracy), num(r.report.final_eval_accuracy), num(r.report.steps),
                   train_set.id, eval_set.id});
  summary.write(out.csv("train_summary.csv"));
  std::printf("%s: train accuracy %.4f, eval accuracy %.4f (%zu steps, %.1f s)\n", name.c_str(),
              r.report.final_train_accuracy, r.report.final_eval_accuracy, r.report.steps, r.report.wall_time);
  return 0;
}

int run_cka_heatmap(const GlobalOptions& g, const HeatmapOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  const KindSet kinds = parse_kinds(o.kinds);
  const OutputDirs out(g.out);
  heatmap_analysis(out, dump, kinds, o.cka.config(g.seed), g.workers);
  return 0;
}

int run_cross_cka(const GlobalOptions& g, const HeatmapOptions& o) {
  const DumpReader a = open_dump(o.dump, "--dump-a");
  const DumpReader b = open_dump(o.dump_b, "--dump-b");
  const KindSet ka = parse_kinds(o.kinds), kb = parse_kinds(o.kinds_b.empty() ? o.kinds : o.kinds_b);
  const OutputDirs out(g.out);
  const CkaHeatmap h = cross_model_heatmap(a, b, o.cka.config(g.seed), ka.empty() ? default_heatmap_kinds(a.manifest()) : ka,
                                           kb.empty() ? default_heatmap_kinds(b.manifest()) : kb, g.workers);
  write_heatmap(out, "cross_heatmap", h,
                cka_style("CKA " + a.manifest().model_name + " vs " + b.manifest().model_name));
  return 0;
}

int run_head_subset_cka(const GlobalOptions& g, const HeadSubsetOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  const DumpReader peer_dump = open_dump(o.peer_dump.empty() ? o.dump : o.peer_dump, "--peer-dump");
  if (o.layer.empty() || o.peer.empty()) throw UsageError("--layer and --peer are required");
  require_same_examples(dump.manifest(), peer_dump.manifest());
  const auto& man = dump.manifest();
  const std::size_t heads = man.attention_heads;
  if (heads == 0) throw DataError("dump '" + man.model_name + "' does not record attention_heads");
  const Tensor split = split_heads(dump.load(o.layer), heads);
  const Tensor peer_layer = peer_dump.load(o.peer);
  const ActivationMatrix peer = o.token ? tokens_as_matrix(peer_layer, *o.token, o.peer)
                                        : whole_layer_matrix(peer_layer, o.peer);
  const CkaConfig config = o.cka.config(g.seed);
  std::vector<std::vector<std::size_t>> subsets;
  if (o.heads.empty()) {
    for (std::size_t h = 0; h < heads; ++h) subsets.push_back({h});
    std::vector<std::size_t> all(heads);
    for (std::size_t h = 0; h < heads; ++h) all[h] = h;
    subsets.push_back(all);
  } else {
    subsets.push_back(o.heads);
  }
  const OutputDirs out(g.out);
  CsvTable t({"layer", "heads", "peer", "cka"});
  for (const auto& s : subsets) {
    std::string label;
    for (std::size_t h : s) label += (label.empty() ? "" : " ") + num(h);
    t.add_row({o.layer, label, o.peer, num(head_subset_cka(split, s, peer, config))});
  }
  t.write(out.csv("head_subset_cka.csv"));
  return 0;
}

int run_attn_distance(const GlobalOptions& g, const AttnDistanceOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  const OutputDirs out(g.out);
  attention_analysis(out, dump, o.max_examples, o.subsets, g.seed);
  return 0;
}

int run_erf(const GlobalOptions& g, const ErfOptions& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const DumpReader dump = open_dump(o.dump);
  const Checkpoint ck = open_checkpoint(o.checkpoint);
  const OutputDirs out(g.out);
  erf_analysis(out, ck, dump, o.layer, o.variant, o.samples, g.seed, g.workers);
  return 0;
}

int run_branch_norms(const GlobalOptions& g, const BranchNormOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  const OutputDirs out(g.out);
  branch_norm_analysis(out, dump);
  return 0;
}

int run_localize(const GlobalOptions& g, const LocalizeOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  const OutputDirs out(g.out);
  localization_analysis(out, dump, o.layer, o.tokens, o.cka.config(g.seed), g.workers);
  return 0;
}

int run_probe(const GlobalOptions& g, const ProbeOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  const auto aggregations = parse_aggregations(o.aggregations);
  const KindSet kinds = parse_kinds(o.kinds);
  ProbeSpec spec = o.spec;
  spec.seed = g.seed;
  spec.validate();
  const OutputDirs out(g.out);
  probe_analysis(out, dump, aggregations, kinds, spec, g.workers);
  return 0;
}

int run_report(const GlobalOptions& g, const ReportOptions& o) {
  const DumpReader dump = open_dump(o.dump);
  std::optional<Checkpoint> ck;
  if (!o.checkpoint.empty()) ck = open_checkpoint(o.checkpoint);
  const OutputDirs out(g.out);
  const auto& man = dump.manifest();
  const CkaConfig config = o.cka.config(g.seed);
  CsvTable index({"analysis", "status"});

  heatmap_analysis(out, dump, {}, config, g.workers);
  index.add_row({"cka-heatmap", "ok"});
  if (!man.layers_of_kind({LayerKind::attention_weights}).empty()) {
    attention_analysis(out, dump, o.attention_examples, 4, g.seed);
    index.add_row({"attn-distance", "ok"});
  } else {
    index.add_row({"attn-distance", "skipped: no attention weights"});
  }
  if (!man.layers_of_kind({LayerKind::skip_branch}).empty()) {
    branch_norm_analysis(out, dump);
    index.add_row({"branch-norms", "ok"});
  } else {
    index.add_row({"branch-norms", "skipped: no skip/branch pairs"});
  }
  if (dump.has_images()) {
    localization_analysis(out, dump, "", "interior", config, g.workers);
    index.add_row({"localize", "ok"});
  } else {
    index.add_row({"localize", "skipped: no images"});
  }
  if (dump.has_labels()) {
    ProbeSpec spec;
    spec.shots = o.shots;
    spec.seed = g.seed;
    std::vector<Aggregation> aggs{Aggregation::mean_all, Aggregation::first_token};
    if (man.architecture == "vit") aggs.push_back(Aggregation::per_token);
    probe_analysis(out, dump, aggs, {}, spec, g.workers);
    index.add_row({"probe", "ok"});
  } else {
    index.add_row({"probe", "skipped: no labels"});
  }
  if (ck) {
    erf_analysis(out, *ck, dump, "", "both", o.erf_samples, g.seed, g.workers);
    index.add_row({"erf", "ok"});
  } else {
    index.add_row({"erf", "skipped: no checkpoint"});
  }
  index.write(out.csv("report_index.csv"));
  return 0;
}

int run_validate(const ValidateOptions& o) {
  if (o.dump.empty()) throw UsageError("--dump is required");
  if (!fs::is_directory(o.dump)) throw IoError("dump directory " + o.dump.string() + " does not exist");
  const auto warnings = validate_dump(o.dump);
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  const DumpReader dump(o.dump);
  std::printf("%s: valid dump of '%s' (%zu layers, %zu examples)\n", o.dump.string().c_str(),
              dump.manifest().model_name.c_str(), dump.manifest().layers.size(), dump.manifest().num_examples);
  return 0;
}

}  // namespace repscope::cli
