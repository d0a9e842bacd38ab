// Acceptance suite: one PASS/FAIL line per primary criterion. Exits 0 only
// when every criterion passes.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "repscope/analyses.hpp"
#include "repscope/cka.hpp"
#include "repscope/cnn.hpp"
#include "repscope/npy.hpp"
#include "repscope/probes.hpp"
#include "repscope/rng.hpp"
#include "repscope/vit.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/toy_suite.hpp"

using namespace repscope;
using namespace repscope::testing;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- exact and oracle criteria ----

Outcome cka_axioms() {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    Rng rng(1000 + i);
    const std::size_t m = 8 + rng.index(57);
    const std::size_t p = 2 + rng.index(31);
    const Tensor x = random_matrix(m, p, 2000 + i);
    const ActivationMatrix ax(x, "x");
    const CkaConfig full = CkaConfig::full_batch(m);
    worst = std::max(worst, std::abs(minibatch_cka(ax, ax, full) - 1.0));
    const Tensor q = random_orthogonal(p, 3000 + i);
    worst = std::max(worst, std::abs(minibatch_cka(ax, ActivationMatrix(matmul(x, q), "xq"), full) - 1.0));
    for (double c : {1e-3, 1.0, 1e3}) {
      Tensor scaled = x;
      for (auto& v : scaled.data()) v *= c;
      worst = std::max(worst, std::abs(minibatch_cka(ax, ActivationMatrix(scaled, "cx"), full) - 1.0));
    }
  }
  return {worst <= 1e-6, fmt("50 instances, max |CKA - 1| = %.3g (tol 1e-6)", worst)};
}

Tensor random_symmetric(std::size_t n, std::uint64_t seed) {
  const Tensor a = random_matrix(n, n, seed);
  Tensor s({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s(i, j) = a(i, j) + a(j, i);
  }
  return s;
}

Outcome hsic_oracle() {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Tensor k = random_symmetric(8, 4000 + 2 * i), l = random_symmetric(8, 4001 + 2 * i);
    worst = std::max(worst, std::abs(hsic_unbiased(k, l) - hsic_unbiased_oracle(to_eigen(k), to_eigen(l))));
  }
  return {worst <= 1e-10, fmt("100 random 8x8 pairs, max abs error %.3g (tol 1e-10)", worst)};
}

Outcome minibatch_consistency() {
  double worst = 0.0;
  bool order_exact = true;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const std::size_t m = 16 + 8 * i;
    const Tensor x = random_matrix(m, 3 + i, 5000 + i), y = random_matrix(m, 9 - i % 5, 6000 + i);
    const ActivationMatrix ax(x, "x"), ay(y, "y");
    const double batch = minibatch_cka(ax, ay, CkaConfig::full_batch(m));
    worst = std::max(worst, std::abs(batch - cka_unbiased(ax, ay)));
    worst = std::max(worst, std::abs(batch - cka_oracle(to_eigen(x), to_eigen(y))));

    BatchPlan plan = make_batch_plan(m, CkaConfig{8, m, 3, i});
    const double forward = minibatch_cka(ax, ay, plan);
    std::reverse(plan.batches.begin(), plan.batches.end());
    order_exact = order_exact && minibatch_cka(ax, ay, plan) == forward;
    Rng rng(7000 + i);
    rng.shuffle(std::span(plan.batches));
    order_exact = order_exact && minibatch_cka(ax, ay, plan) == forward;
  }
  return {worst <= 1e-12 && order_exact,
          fmt("full batch vs direct: max error %.3g (tol 1e-12); batch order %s", worst,
              order_exact ? "bit-identical" : "CHANGES the result")};
}

ViTConfig tiny_vit(HeadType head, std::set<std::size_t> ablate) {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  c.head_type = head;
  c.ablate_skip_at = std::move(ablate);
  c.seed = 5;
  return c;
}

Outcome gradient_checks() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t groups = 0;
  auto track = [&](const std::string& model, const std::vector<GroupError>& errors) {
    for (const auto& e : errors) {
      ++groups;
      if (e.rel_error > worst) {
        worst = e.rel_error;
        worst_name = model + ":" + e.name;
      }
    }
  };
  struct Variant {
    const char* name;
    HeadType head;
    std::set<std::size_t> ablate;
  };
  for (const Variant& v : {Variant{"vit-cls", HeadType::cls, {}}, Variant{"vit-gap", HeadType::gap, {}},
                          Variant{"vit-cls-ablated", HeadType::cls, {1}}, Variant{"vit-gap-ablated", HeadType::gap, {0}}}) {
    const ViT model(tiny_vit(v.head, v.ablate));
    const auto params = jitter(model.init_params(11), 0.3, 12);
    track(v.name, finite_difference_check(model, params, random_images(3, 8, 3, 13), {0, 2, 1}));
  }
  bool margins_ok = true;
  for (Activation act : {Activation::relu, Activation::gelu}) {
    CnnConfig c;
    c.image_size = 6;
    c.stem_channels = 4;
    c.stages = {{1, 4, 1}, {1, 6, 2}};
    c.num_classes = 3;
    c.activation = act;
    c.seed = 2;
    const Cnn model(c);
    const auto params = jitter(model.init_params(5), 0.05, 9);
    const Tensor images = random_images(2, 6, 3, 3);
    // Central differences are only meaningful away from ReLU kinks.
    if (act == Activation::relu && model.activation_margin(params, images) <= 1e-4) margins_ok = false;
    track(act == Activation::relu ? "cnn-relu" : "cnn-gelu", finite_difference_check(model, params, images, {0, 2}));
  }
  return {worst <= 1e-4 && margins_ok,
          fmt("%zu parameter/input groups over 6 models, worst relative error %.3g at %s (tol 1e-4, h=1e-5)%s", groups,
              worst, worst_name.c_str(), margins_ok ? "" : "; ReLU kink within 1e-4")};
}

std::size_t support_size(const Tensor& field) {
  return static_cast<std::size_t>(std::count_if(field.data().begin(), field.data().end(), [](double v) { return v != 0.0; }));
}

Outcome erf_locality() {
  CnnConfig c;
  c.image_size = 9;
  c.stem_channels = 3;
  c.stages = {};
  c.num_classes = 2;
  c.activation = Activation::identity;
  const Cnn conv(c);
  const ReceptiveField rf = effective_receptive_field(conv, conv.init_params(4), "stem", ErfVariant::post_residual,
                                                      random_images(4, 9, 3, 5));
  bool conv_ok = support_size(rf.raw) == 9;
  for (std::size_t y = 3; y <= 5; ++y) {
    for (std::size_t x = 3; x <= 5; ++x) conv_ok = conv_ok && rf.raw(y, x) > 0.0;
  }

  bool vit_ok = true;
  for (HeadType head : {HeadType::cls, HeadType::gap}) {
    ViTConfig v;
    v.image_size = 12;
    v.patch_size = 3;
    v.depth = 0;
    v.width = 8;
    v.heads = 2;
    v.num_classes = 2;
    v.head_type = head;
    const ViT model(v);
    const ReceptiveField f = effective_receptive_field(model, model.init_params(2), "embed", ErfVariant::post_residual,
                                                       random_images(2, 12, 3, 4));
    const std::size_t loc = f.location - v.cls_offset();
    vit_ok = vit_ok && support_size(f.raw) == 9 && window_mass_fraction(f.raw, (loc / 4) * 3, (loc % 4) * 3, 3) == 1.0;
  }
  return {conv_ok && vit_ok, fmt("3x3 conv support %zu pixels (a 3x3 window: %s); patch-embedding ViT support one patch: %s",
                                 support_size(rf.raw), conv_ok ? "yes" : "no", vit_ok ? "yes" : "no")};
}

// Brute force over all query/key pairs of a CLS-free [T, T] slice.
double brute_force_distance(const Tensor& a, std::size_t grid, double p) {
  const std::size_t s = grid * grid;
  double total = 0.0;
  for (std::size_t q = 0; q < s; ++q) {
    for (std::size_t k = 0; k < s; ++k) {
      const double qy = (static_cast<double>(q / grid) + 0.5) * p, qx = (static_cast<double>(q % grid) + 0.5) * p;
      const double ky = (static_cast<double>(k / grid) + 0.5) * p, kx = (static_cast<double>(k % grid) + 0.5) * p;
      total += a[q * s + k] * std::hypot(qy - ky, qx - kx);
    }
  }
  return total / static_cast<double>(s);
}

Outcome attention_distance_analytic() {
  double worst = 0.0;
  bool identity_zero = true;
  for (std::size_t p : {1, 2, 4, 7, 16}) {
    const double pd = static_cast<double>(p);
    const Tensor uniform = Tensor::filled({2, 3, 4, 4}, 0.25);
    const double oracle = brute_force_distance(Tensor::filled({4, 4}, 0.25), 2, pd);
    const double closed = pd * (2.0 + std::sqrt(2.0)) / 4.0;
    for (const auto& h : attention_distance(make_attention_tensor(uniform, 2, p, false))) {
      worst = std::max({worst, std::abs(h.mean_distance - closed), std::abs(h.mean_distance - oracle)});
    }
    Tensor identity({2, 3, 4, 4});
    for (std::size_t r = 0; r < 2 * 3; ++r) {
      for (std::size_t q = 0; q < 4; ++q) identity[r * 16 + q * 4 + q] = 1.0;
    }
    for (const auto& h : attention_distance(make_attention_tensor(identity, 2, p, false))) {
      identity_zero = identity_zero && h.mean_distance == 0.0;
    }
  }
  return {worst <= 1e-9 && identity_zero,
          fmt("uniform 2x2, p in {1,2,4,7,16}: max error vs p(2+sqrt2)/4 and brute force %.3g (tol 1e-9); "
              "identity attention %s",
              worst, identity_zero ? "exactly 0" : "NONZERO")};
}

Outcome probe_oracle() {
  double worst = 0.0;
  std::size_t instances = 0;
  struct Shape {
    std::size_t n, d, classes;
  };
  for (const Shape s : {Shape{40, 6, 3}, Shape{25, 12, 4}, Shape{12, 30, 3}, Shape{60, 3, 2}, Shape{20, 20, 5}}) {
    for (double lambda : {1e-4, 0.1, 3.0}) {
      const std::uint64_t seed = 8000 + instances;
      const Tensor x = random_matrix(s.n, s.d, seed);
      Rng rng(seed + 1);
      std::vector<int> labels(s.n);
      for (std::size_t i = 0; i < s.n; ++i) labels[i] = static_cast<int>(i < s.classes ? i : rng.index(s.classes));
      const Probe probe = fit_probe(x, labels, s.classes, lambda);
      const Eigen::MatrixXd w = ridge_oracle(to_eigen(x), labels, static_cast<int>(s.classes), lambda);
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
          worst = std::max(worst, std::abs(probe.weights(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) -
                                           w(i, j)));
        }
      }
      ++instances;
    }
  }

  // Balanced evaluation sets: an infinitely regularised probe has only its
  // bias, which is equal for every class, so it scores chance.
  bool chance = true;
  std::string chance_text;
  for (std::size_t classes : {2, 5, 10}) {
    const std::size_t per = 6;
    const Tensor xtr = random_matrix(classes * per, 8, 9000 + classes);
    const Tensor xev = random_matrix(classes * per, 8, 9100 + classes);
    std::vector<int> labels(classes * per);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % classes);
    const Probe probe = fit_probe(xtr, labels, classes, 1e12);
    const double acc = probe_accuracy(probe, xev, labels);
    chance = chance && std::abs(acc - 1.0 / static_cast<double>(classes)) <= 1e-12;
    chance_text += fmt("%s%zu-way %.4f", chance_text.empty() ? "" : ", ", classes, acc);
  }
  return {worst <= 1e-8 && chance, fmt("%zu instances (primal and dual), max weight error %.3g (tol 1e-8); "
                                       "lambda=1e12 accuracy %s (chance 1/N)",
                                       instances, worst, chance_text.c_str())};
}

std::string quote(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

Outcome determinism(const std::filesystem::path& repscope, const std::filesystem::path& fixture, std::size_t workers) {
  if (repscope.empty() || !std::filesystem::exists(repscope)) return {false, "repscope binary not found"};
  if (!std::filesystem::is_directory(fixture / "dump")) return {false, "fixture not found at " + fixture.string()};
  TempDir work("determinism");
  for (const char* run : {"a", "b"}) {
    const std::string cmd = quote(repscope) + " --seed 5 --workers " + std::to_string(workers) +
                            " report --dump " + quote(fixture / "dump") + " --checkpoint " +
                            quote(fixture / "checkpoint") + " --shots 5 --out " + quote(work / run) + " > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, std::string("report run ") + run + " failed"};
  }
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(work / "a/csv")) {
    const auto other = work / "b/csv" / entry.path().filename();
    if (!std::filesystem::exists(other) || read_file_bytes(entry.path()) != read_file_bytes(other)) {
      return {false, entry.path().filename().string() + " differs between runs"};
    }
    ++files;
  }
  return {files >= 10, fmt("%zu CSV files byte-identical across two runs (seed 5, %zu workers)", files, workers)};
}

// ---- qualitative reproductions on the trained toy models ----

struct Suite {
  SuiteConfig config;
  TrainedModel cls, gap, ablated, cnn;
  std::size_t depth = 0, ablated_block = 0;
};

Suite train_suite(const std::filesystem::path& cache, std::size_t workers) {
  Suite s;
  s.config = SuiteConfig::standard(cache);
  s.config.workers = workers;
  const SuiteData data = make_suite_data(s.config);
  auto obtain = [&](const std::string& name, std::unique_ptr<ToyModel> model) {
    const TrainConfig tc = suite_train_config(*model, s.config);
    TrainedModel t = obtain_model(name, std::move(model), tc, data, s.config);
    std::printf("  trained %-12s train %.3f eval %.3f (%s, %.0f s)\n", name.c_str(), t.report.final_train_accuracy,
                t.report.final_eval_accuracy, t.from_cache ? "cached" : "fresh", t.report.wall_time);
    std::fflush(stdout);
    return t;
  };
  const ViTConfig base = suite_vit_config(HeadType::cls);
  s.depth = base.depth;
  s.ablated_block = suite_ablated_block();
  ViTConfig ablated = base;
  ablated.ablate_skip_at = {s.ablated_block};
  s.cls = obtain("vit-cls", std::make_unique<ViT>(base));
  s.gap = obtain("vit-gap", std::make_unique<ViT>(suite_vit_config(HeadType::gap)));
  s.ablated = obtain("vit-ablated", std::make_unique<ViT>(ablated));
  s.cnn = obtain("cnn", std::make_unique<Cnn>(suite_cnn_config()));
  return s;
}

const CkaConfig kSuiteCka = CkaConfig::desk_scale(0);

Outcome skip_ablation(const Suite& s) {
  const CkaHeatmap base = layer_pair_heatmap(DumpReader(s.cls.dump_dir), {LayerKind::block_output}, kSuiteCka);
  const CkaHeatmap abl = layer_pair_heatmap(DumpReader(s.ablated.dump_dir), {LayerKind::block_output}, kSuiteCka);
  const double b = straddling_cka(base, s.ablated_block, s.depth);
  const double a = straddling_cka(abl, s.ablated_block, s.depth);
  const double acc_b = s.cls.report.final_eval_accuracy, acc_a = s.ablated.report.final_eval_accuracy;
  return {b - a >= 0.2 && acc_a < acc_b,
          fmt("straddling block %zu: baseline CKA %.3f, ablated %.3f (drop %.3f, need >= 0.2); eval accuracy "
              "%.3f -> %.3f (need strictly lower)",
              s.ablated_block, b, a, b - a, acc_b, acc_a)};
}

Outcome quartile_cka_gap(const Suite& s) {
  const double vit = quartile_cka(layer_pair_heatmap(DumpReader(s.cls.dump_dir), {LayerKind::block_output}, kSuiteCka));
  const double cnn =
      quartile_cka(layer_pair_heatmap(DumpReader(s.cnn.dump_dir), {LayerKind::conv_stage_output}, kSuiteCka));
  return {vit > cnn, fmt("first-vs-last-quartile CKA: ViT %.3f, CNN %.3f (need ViT > CNN)", vit, cnn)};
}

Outcome branch_norm_halves(const Suite& s) {
  const HalfRatios r = half_ratios(branch_norms(DumpReader(s.cls.dump_dir)), s.depth);
  return {r.first_cls > r.first_spatial && r.second_cls < r.second_spatial,
          fmt("norm ratio first half CLS %.3f vs spatial %.3f (need >); second half CLS %.3f vs spatial %.3f "
              "(need <)",
              r.first_cls, r.first_spatial, r.second_cls, r.second_spatial)};
}

double final_block_localization(const TrainedModel& t) {
  const DumpReader dump(t.dump_dir);
  const auto& man = dump.manifest();
  const std::string top = last_block_output(man);
  const PatchGeometry geo = layer_geometry(man, man.layer(top));
  const auto tokens = interior_tokens(geo);
  return own_location_fraction(localization_maps(dump.load(top), dump.images(), geo, tokens, kSuiteCka));
}

Outcome localization(const Suite& s) {
  const double cls = final_block_localization(s.cls), gap = final_block_localization(s.gap);
  return {cls >= 0.7 && gap < cls,
          fmt("final-block interior tokens localized at their own cell: CLS %.3f (need >= 0.70), GAP %.3f (need < CLS)",
              cls, gap)};
}

double top_layer_probe(const TrainedModel& t, Aggregation a) {
  ProbeSpec spec;
  spec.aggregation = a;
  const ProbeResult r = probe_curve(DumpReader(t.dump_dir), spec);
  return r.layers.back().accuracy;
}

Outcome probe_gaps(const Suite& s) {
  const double cls_token = top_layer_probe(s.cls, Aggregation::per_token);
  const double cls_pooled = top_layer_probe(s.cls, Aggregation::mean_all);
  const double gap_first = top_layer_probe(s.gap, Aggregation::first_token);
  const double gap_pooled = top_layer_probe(s.gap, Aggregation::mean_all);
  const bool a = cls_pooled - cls_token >= 0.05;
  const bool b = std::abs(gap_first - gap_pooled) <= 0.05;
  return {a && b, fmt("CLS top layer per-token %.3f vs mean-all %.3f (need >= 5 points below); GAP first-token %.3f "
                      "vs mean-all %.3f (need within 5 points)",
                      cls_token, cls_pooled, gap_first, gap_pooled)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"repscope acceptance suite"};
  std::filesystem::path cache = "acceptance-cache";
  std::filesystem::path repscope, fixture;
  std::size_t workers = 1;
  bool skip_trained = false;
  app.add_option("--cache", cache, "Directory for trained toy models (reused across runs)")->capture_default_str();
  app.add_option("--repscope", repscope, "Path to the repscope CLI for the determinism check");
  app.add_option("--fixture", fixture, "Committed fixture directory (dump/ and checkpoint/)");
  app.add_option("--workers", workers, "Worker threads")->capture_default_str();
  app.add_flag("--skip-trained", skip_trained, "Skip the criteria that need trained toy models");
  CLI11_PARSE(app, argc, argv);

  const auto t0 = Clock::now();
  std::size_t failed = 0, total = 0;
  auto report = [&](const char* name, const std::function<Outcome()>& check) {
    const auto start = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    ++total;
    if (!o.pass) ++failed;
    std::printf("%s  %-30s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), seconds_since(start));
    std::fflush(stdout);
  };

  report("cka-axioms", cka_axioms);
  report("hsic-oracle", hsic_oracle);
  report("minibatch-consistency", minibatch_consistency);
  report("gradient-checks", gradient_checks);
  report("erf-locality", erf_locality);
  report("attention-distance-analytic", attention_distance_analytic);
  report("probe-oracle", probe_oracle);
  report("determinism", [&] { return determinism(repscope, fixture, workers); });

  if (!skip_trained) {
    std::optional<Suite> suite;
    std::string train_error;
    try {
      suite = train_suite(cache, workers);
    } catch (const std::exception& e) {
      train_error = e.what();
    }
    auto trained = [&](const std::function<Outcome(const Suite&)>& f) {
      return [&, f]() -> Outcome {
        if (!suite) return {false, "toy model training failed: " + train_error};
        return f(*suite);
      };
    };
    report("skip-ablation", trained(skip_ablation));
    report("quartile-cka", trained(quartile_cka_gap));
    report("branch-norms", trained(branch_norm_halves));
    report("localization", trained(localization));
    report("probes", trained(probe_gaps));
  }

  const double elapsed = seconds_since(t0);
  report("runtime", [&] {
    return Outcome{elapsed < 30 * 60, fmt("whole suite %.1f s (need < 1800 s)", elapsed)};
  });
  std::printf("%zu/%zu criteria passed\n", total - failed, total);
  return failed == 0 ? 0 : 1;
}
