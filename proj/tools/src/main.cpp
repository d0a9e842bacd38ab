#include <CLI11.hpp>
#include <json.hpp>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>

#include "commands.hpp"
#include "json_config.hpp"
#include "repscope/error.hpp"

using namespace repscope;
using namespace repscope::cli;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

void add_out(CLI::App* sub, GlobalOptions& g) {
  sub->add_option("-o,--out", g.out, "Output directory (csv/ and fig/ are created inside)");
}

void add_cka(CLI::App* sub, CkaOptions& c) {
  sub->add_option("--batch-size", c.batch_size, "CKA minibatch size")->capture_default_str();
  sub->add_option("--cka-examples", c.examples, "Examples sampled per CKA pass")->capture_default_str();
  sub->add_option("--passes", c.passes, "CKA passes over the sampled examples")->capture_default_str();
}

CLI::App* add_dump(CLI::App* sub, std::filesystem::path& dump) {
  sub->add_option("-d,--dump", dump, "Activation dump directory");
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"repscope: representation analysis for vision models"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file; command-line flags override it");
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--seed", g.seed, "Seed for sampling and training")->envname("REPSCOPE_SEED")->capture_default_str();
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  std::function<int()> run;

  TrainToyOptions train;
  auto* t = app.add_subcommand("train-toy", "Train a toy ViT or CNN, then write a checkpoint and an activation dump");
  add_out(t, g);
  t->add_option("--arch", train.arch, "vit or cnn")->check(CLI::IsMember({"vit", "cnn"}))->capture_default_str();
  t->add_option("--dataset", train.dataset, "shapes, cifar or npy")
      ->check(CLI::IsMember({"shapes", "cifar", "npy"}))
      ->capture_default_str();
  t->add_option("--model-seed", train.model_seed, "Parameter initialisation seed (default: --seed)");
  t->add_option("--patch-size", train.vit.patch_size, "ViT patch size")->capture_default_str();
  t->add_option("--depth", train.vit.depth, "ViT blocks")->capture_default_str();
  t->add_option("--width", train.vit.width, "ViT token width")->capture_default_str();
  t->add_option("--heads", train.vit.heads, "ViT attention heads")->capture_default_str();
  t->add_option("--mlp-ratio", train.vit.mlp_ratio, "ViT MLP expansion")->capture_default_str();
  std::string head = "cls";
  t->add_option("--head", head, "ViT readout: cls or gap")->check(CLI::IsMember({"cls", "gap"}))->capture_default_str();
  std::vector<std::size_t> ablate;
  t->add_option("--ablate-skip", ablate, "ViT block indices whose residual adds are removed");
  t->add_option("--stem-channels", train.cnn.stem_channels, "CNN stem channels")->capture_default_str();
  t->add_option("--stages", train.stages, "CNN stages as BLOCKSxCHANNELSxSTRIDE,...")->capture_default_str();
  std::string activation = "relu";
  t->add_option("--activation", activation, "CNN activation: relu, gelu or identity")->capture_default_str();
  t->add_option("--image-size", train.shapes.image_size, "Synthetic image size")->capture_default_str();
  std::string task = "colour";
  t->add_option("--task", task, "Synthetic label: colour or shape")
      ->check(CLI::IsMember({"colour", "shape"}))
      ->capture_default_str();
  t->add_option("--pixel-noise", train.shapes.pixel_noise, "Synthetic pixel noise")->capture_default_str();
  t->add_option("--background", train.shapes.background_amplitude, "Synthetic background amplitude")
      ->capture_default_str();
  std::optional<std::uint64_t> data_seed;
  t->add_option("--data-seed", data_seed, "Synthetic dataset seed (default: --seed)");
  t->add_option("--cifar-train", train.cifar_train, "CIFAR binary training batches");
  t->add_option("--cifar-eval", train.cifar_eval, "CIFAR binary evaluation batches");
  t->add_option("--npy-images", train.npy_images, "Images [m,H,W,C] as NPY");
  t->add_option("--npy-labels", train.npy_labels, "Labels [m] as NPY");
  t->add_option("--train-examples", train.train_examples, "Training examples")->capture_default_str();
  t->add_option("--eval-examples", train.eval_examples, "Evaluation examples")->capture_default_str();
  t->add_option("--dump-examples", train.dump_examples, "Evaluation examples written to the dump")
      ->capture_default_str();
  t->add_option("--epochs", train.train.epochs, "Training epochs")->capture_default_str();
  t->add_option("--train-batch", train.train.batch_size, "Training minibatch size")->capture_default_str();
  t->add_option("--lr", train.learning_rate, "Peak learning rate (default: tuned per architecture)");
  t->add_option("--weight-decay", train.train.weight_decay, "Decoupled weight decay")->capture_default_str();
  t->add_option("--capture", train.capture, "Layer kinds to dump, or 'all'")->capture_default_str();
  t->add_option("--name", train.name, "Model name recorded in the dump");
  t->callback([&] {
    train.vit.head_type = parse_head_type(head);
    train.vit.ablate_skip_at = {ablate.begin(), ablate.end()};
    train.cnn.activation = parse_activation(activation);
    train.shapes.task = task == "shape" ? ShapesTask::shape : ShapesTask::colour;
    train.shapes.seed = data_seed.value_or(g.seed);
    run = [&] { return run_train_toy(g, train); };
  });

  HeatmapOptions heat;
  auto* h = app.add_subcommand("cka-heatmap", "CKA between every pair of layers of one dump");
  add_out(add_dump(h, heat.dump), g);
  h->add_option("--kinds", heat.kinds, "Layer kinds to include (default: block outputs)");
  add_cka(h, heat.cka);
  h->callback([&] { run = [&] { return run_cka_heatmap(g, heat); }; });

  HeatmapOptions cross;
  auto* x = app.add_subcommand("cross-cka", "CKA between the layers of two dumps over the same examples");
  add_out(x, g);
  x->add_option("--dump-a", cross.dump, "Row model dump");
  x->add_option("--dump-b", cross.dump_b, "Column model dump");
  x->add_option("--kinds", cross.kinds, "Layer kinds of the row model");
  x->add_option("--kinds-b", cross.kinds_b, "Layer kinds of the column model (default: --kinds)");
  add_cka(x, cross.cka);
  x->callback([&] { run = [&] { return run_cross_cka(g, cross); }; });

  HeadSubsetOptions hs;
  auto* s = app.add_subcommand("head-subset-cka", "CKA of attention-head subsets against a peer layer");
  add_out(add_dump(s, hs.dump), g);
  s->add_option("--peer-dump", hs.peer_dump, "Dump holding the peer layer (default: --dump)");
  s->add_option("--layer", hs.layer, "Attention-output layer to split into heads");
  s->add_option("--peer", hs.peer, "Peer layer name");
  s->add_option("--heads", hs.heads, "Head subset (default: each head alone, then all)");
  s->add_option("--token", hs.token, "Use one token of the peer layer instead of the whole layer");
  add_cka(s, hs.cka);
  s->callback([&] { run = [&] { return run_head_subset_cka(g, hs); }; });

  AttnDistanceOptions ad;
  auto* a = app.add_subcommand("attn-distance", "Mean attention distance per head and layer");
  add_out(add_dump(a, ad.dump), g);
  a->add_option("--max-examples", ad.max_examples, "Examples averaged")->capture_default_str();
  a->add_option("--subsets", ad.subsets, "Example groups for the spread")->capture_default_str();
  a->callback([&] { run = [&] { return run_attn_distance(g, ad); }; });

  ErfOptions erf;
  auto* e = app.add_subcommand("erf", "Effective receptive field of a layer's centre location");
  add_out(add_dump(e, erf.dump), g);
  e->add_option("--checkpoint", erf.checkpoint, "Checkpoint directory written by train-toy");
  e->add_option("--layer", erf.layer, "Block output layer (default: the last one)");
  e->add_option("--variant", erf.variant, "post-residual, pre-residual or both")
      ->check(CLI::IsMember({"post-residual", "pre-residual", "both"}))
      ->capture_default_str();
  e->add_option("--samples", erf.samples, "Images averaged")->capture_default_str();
  e->callback([&] { run = [&] { return run_erf(g, erf); }; });

  BranchNormOptions bn;
  auto* b = app.add_subcommand("branch-norms", "Per-token norm ratio of skip and long branches");
  add_out(add_dump(b, bn.dump), g);
  b->callback([&] { run = [&] { return run_branch_norms(g, bn); }; });

  LocalizeOptions loc;
  auto* l = app.add_subcommand("localize", "CKA of individual tokens with the input patches");
  add_out(add_dump(l, loc.dump), g);
  l->add_option("--layer", loc.layer, "Token layer (default: the last block output)");
  l->add_option("--tokens", loc.tokens, "interior, all, or comma-separated token indices")->capture_default_str();
  add_cka(l, loc.cka);
  l->callback([&] { run = [&] { return run_localize(g, loc); }; });

  ProbeOptions pr;
  auto* p = app.add_subcommand("probe", "Few-shot linear probes on every block output");
  add_out(add_dump(p, pr.dump), g);
  p->add_option("--aggregation", pr.aggregations,
                "first-token, mean-all, mean-excluding-first, single-token, per-token, resnet-patch-flatten-pool")
      ->capture_default_str();
  p->add_option("--kinds", pr.kinds, "Layer kinds to probe (default: block outputs)");
  p->add_option("--shots", pr.spec.shots, "Training examples per class")->capture_default_str();
  p->add_option("--token", pr.spec.token, "Token for single-token")->capture_default_str();
  p->add_option("--target-channels", pr.spec.target_channels, "Channel target for resnet-patch-flatten-pool");
  p->add_option("--max-eval", pr.spec.max_eval, "Evaluation examples (0 = all remaining)");
  p->add_option("--lambdas", pr.spec.ridge_grid, "Ridge grid")->capture_default_str();
  p->callback([&] { run = [&] { return run_probe(g, pr); }; });

  ReportOptions rep;
  auto* r = app.add_subcommand("report", "Run every analysis the dump supports");
  add_out(add_dump(r, rep.dump), g);
  r->add_option("--checkpoint", rep.checkpoint, "Checkpoint for receptive fields (skipped when absent)");
  r->add_option("--attention-examples", rep.attention_examples, "Examples for attention distance")
      ->capture_default_str();
  r->add_option("--erf-samples", rep.erf_samples, "Images for receptive fields")->capture_default_str();
  r->add_option("--shots", rep.shots, "Probe examples per class")->capture_default_str();
  add_cka(r, rep.cka);
  r->callback([&] { run = [&] { return run_report(g, rep); }; });

  ValidateOptions val;
  auto* v = app.add_subcommand("validate", "Check a dump directory against its manifest");
  add_dump(v, val.dump);
  v->callback([&] { run = [&] { return run_validate(val); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitUsage;
  }

  try {
    return run ? run() : kExitUsage;
  } catch (const UsageError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitUsage;
  } catch (const InvalidArgument& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitUsage;
  } catch (const DataError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitData;
  } catch (const std::filesystem::filesystem_error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitData;
  } catch (const nlohmann::json::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitData;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitData;
  }
  return kExitOk;
}
