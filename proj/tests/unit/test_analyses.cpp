#include <doctest.h>

#include <cmath>
#include <numeric>

#include "repscope/analyses.hpp"
#include "repscope/cnn.hpp"
#include "repscope/error.hpp"
#include "repscope/rng.hpp"
#include "repscope/vit.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace repscope;
using namespace repscope::testing;

namespace {

// [m, heads, T, T] with every row a random distribution.
Tensor random_attention(std::size_t m, std::size_t heads, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  Tensor a({m, heads, t, t});
  for (std::size_t r = 0; r < m * heads * t; ++r) {
    double* row = a.data().data() + r * t;
    double s = 0.0;
    for (std::size_t k = 0; k < t; ++k) s += (row[k] = std::exp(2.0 * rng.normal()));
    for (std::size_t k = 0; k < t; ++k) row[k] /= s;
  }
  return a;
}

// Brute-force mean over queries of sum_k A[q,k] |c(q) - c(k)| for one
// [T, T] slice of a CLS-free grid.
double brute_force_distance(const double* a, std::size_t grid, double p) {
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

std::size_t support_size(const Tensor& field) {
  return static_cast<std::size_t>(std::count_if(field.data().begin(), field.data().end(), [](double v) { return v != 0.0; }));
}

}  // namespace

TEST_CASE("attention distance: uniform attention on a 2x2 grid") {
  const double p = 4.0;
  for (bool cls : {false, true}) {
    const std::size_t t = cls ? 5 : 4;
    Tensor a = Tensor::filled({3, 2, t, t}, 1.0 / static_cast<double>(t));
    const auto d = attention_distance(make_attention_tensor(a, 2, 4, cls));
    REQUIRE(d.size() == 2);
    Tensor spatial = Tensor::filled({4, 4}, 0.25);
    const double oracle = brute_force_distance(spatial.data().data(), 2, p);
    CHECK(std::abs(oracle - p * (2.0 + std::sqrt(2.0)) / 4.0) < 1e-12);
    for (const auto& h : d) CHECK(std::abs(h.mean_distance - oracle) < 1e-9);
  }
}

TEST_CASE("attention distance: identity and single-pair attention") {
  Tensor eye({2, 3, 9, 9});
  for (std::size_t r = 0; r < 2 * 3; ++r) {
    for (std::size_t k = 0; k < 9; ++k) eye[(r * 9 + k) * 9 + k] = 1.0;
  }
  for (const auto& h : attention_distance(make_attention_tensor(eye, 3, 2, false))) CHECK(h.mean_distance == 0.0);

  // Every query attends to the corner opposite token 0 except token 0 itself,
  // which attends to token 3; only the corner pair contributes.
  Tensor one({1, 1, 4, 4});
  for (std::size_t q = 0; q < 4; ++q) one[q * 4 + q] = 1.0;
  one[0 * 4 + 0] = 0.0;
  one[0 * 4 + 3] = 1.0;
  const double p = 3.0;
  const auto d = attention_distance(make_attention_tensor(one, 2, 3, false));
  CHECK(std::abs(d[0].mean_distance * 4.0 - p * std::sqrt(2.0)) < 1e-12);
}

TEST_CASE("attention distance: CLS key mass is dropped and the row renormalised") {
  Tensor a({1, 1, 5, 5});
  for (std::size_t q = 0; q < 5; ++q) {
    a[q * 5 + 0] = 0.5;  // half of every row on CLS
    a[q * 5 + 1 + (q == 1 ? 3 : q == 0 ? 0 : 3)] += 0.5;
  }
  // Spatial query q (token q+1) sends its spatial mass to spatial token 3.
  const auto d = attention_distance(make_attention_tensor(a, 2, 1, true));
  const double expected = (std::sqrt(2.0) + 1.0 + 1.0 + 0.0) / 4.0;
  CHECK(std::abs(d[0].mean_distance - expected) < 1e-12);
}

TEST_CASE("attention distance matches brute force and lies within the diameter") {
  const std::size_t g = 3, m = 5, heads = 3;
  const Tensor a = random_attention(m, heads, g * g, 9);
  const auto d = attention_distance(make_attention_tensor(a, g, 2, false));
  for (std::size_t i = 1; i < d.size(); ++i) CHECK(d[i - 1].mean_distance <= d[i].mean_distance);
  for (const auto& h : d) {
    double oracle = 0.0;
    for (std::size_t e = 0; e < m; ++e) {
      oracle += brute_force_distance(a.data().data() + (e * heads + h.head) * g * g * g * g, g, 2.0);
    }
    oracle /= static_cast<double>(m);
    CHECK(std::abs(h.mean_distance - oracle) < 1e-12);
    CHECK(h.mean_distance >= 0.0);
    CHECK(h.mean_distance <= attention_diameter(g, 2));
  }
  CHECK(attention_diameter(3, 2) == doctest::Approx(2.0 * std::sqrt(2.0) * 2.0));
}

TEST_CASE("attention distance is exactly invariant to example and head order") {
  const std::size_t m = 7, heads = 4, t = 17;
  const Tensor a = random_attention(m, heads, t, 21);
  const std::vector<std::size_t> ex = {3, 6, 0, 5, 1, 4, 2};
  const std::vector<std::size_t> hd = {2, 0, 3, 1};
  Tensor b({m, heads, t, t});
  for (std::size_t e = 0; e < m; ++e) {
    for (std::size_t h = 0; h < heads; ++h) {
      std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>((ex[e] * heads + hd[h]) * t * t), t * t,
                  b.data().begin() + static_cast<std::ptrdiff_t>((e * heads + h) * t * t));
    }
  }
  const auto da = attention_distance(make_attention_tensor(a, 4, 2, true));
  const auto db = attention_distance(make_attention_tensor(b, 4, 2, true));
  REQUIRE(da.size() == db.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    CHECK(da[i].mean_distance == db[i].mean_distance);
    CHECK(hd[db[i].head] == da[i].head);
  }
}

TEST_CASE("attention distance rejects unnormalised rows and reports spread") {
  Tensor a = random_attention(4, 1, 4, 2);
  a[0] += 0.01;
  CHECK_THROWS_AS(make_attention_tensor(a, 2, 2, false), DataError);
  const Tensor ok = random_attention(8, 2, 4, 3);
  const auto d = attention_distance(make_attention_tensor(ok, 2, 2, false), 4);
  for (const auto& h : d) CHECK(h.spread > 0.0);
  CHECK_THROWS_AS(attention_distance(make_attention_tensor(ok, 2, 2, false), 9), InvalidArgument);
}

TEST_CASE("receptive field of one 3x3 convolution is exactly its window") {
  CnnConfig c;
  c.image_size = 9;
  c.stem_channels = 3;
  c.stages = {};
  c.num_classes = 2;
  c.activation = Activation::identity;
  const Cnn model(c);
  const auto params = model.init_params(4);
  const ReceptiveField rf =
      effective_receptive_field(model, params, "stem", ErfVariant::post_residual, random_images(4, 9, 3, 5));
  CHECK(rf.location == 4 * 9 + 4);
  CHECK(support_size(rf.raw) == 9);
  for (std::size_t y = 0; y < 9; ++y) {
    for (std::size_t x = 0; x < 9; ++x) {
      const bool inside = y >= 3 && y <= 5 && x >= 3 && x <= 5;
      CHECK((rf.raw(y, x) > 0.0) == inside);
    }
  }
  CHECK(*std::max_element(rf.normalized.data().begin(), rf.normalized.data().end()) == 1.0);
  CHECK(window_mass_fraction(rf.raw, 3, 3, 3) == doctest::Approx(1.0));
}

TEST_CASE("receptive field radius of stacked stride-1 convolutions") {
  CnnConfig c;
  c.image_size = 11;
  c.stem_channels = 4;
  c.stages = {{1, 4, 1}};
  c.num_classes = 2;
  const Cnn model(c);
  const ReceptiveField rf = effective_receptive_field(model, model.init_params(6), "stage0.block0.out",
                                                      ErfVariant::post_residual, random_images(3, 11, 3, 8));
  // Three 3x3 convolutions: support within radius 3 of the centre.
  for (std::size_t y = 0; y < 11; ++y) {
    for (std::size_t x = 0; x < 11; ++x) {
      CHECK(rf.raw(y, x) >= 0.0);
      const bool far = std::abs(static_cast<int>(y) - 5) > 3 || std::abs(static_cast<int>(x) - 5) > 3;
      if (far) CHECK(rf.raw(y, x) == 0.0);
    }
  }
  CHECK(rf.raw(5, 5) > 0.0);
  CHECK(resolve_erf_layer(model, "stage0.block0.out", ErfVariant::pre_residual) == "stage0.block0.branch");
  CHECK_THROWS_AS(resolve_erf_layer(model, "stem", ErfVariant::pre_residual), InvalidArgument);
}

TEST_CASE("receptive field of a patch-embedding-only ViT is exactly one patch") {
  for (HeadType head : {HeadType::cls, HeadType::gap}) {
    ViTConfig c;
    c.image_size = 12;
    c.patch_size = 3;
    c.depth = 0;
    c.width = 8;
    c.heads = 2;
    c.num_classes = 2;
    c.head_type = head;
    const ViT model(c);
    const ReceptiveField rf = effective_receptive_field(model, model.init_params(2), "embed",
                                                        ErfVariant::post_residual, random_images(2, 12, 3, 4));
    const std::size_t loc = rf.location - c.cls_offset();
    const std::size_t top = (loc / 4) * 3, left = (loc % 4) * 3;
    CHECK(support_size(rf.raw) == 9);
    CHECK(window_mass_fraction(rf.raw, top, left, 3) == 1.0);
  }
  ViTConfig c;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  const ViT model(c);
  CHECK(resolve_erf_layer(model, "block1.out", ErfVariant::pre_residual) == "block1.attn.branch");
  CHECK_THROWS_AS(effective_receptive_field(model, model.init_params(1), "final_norm.cls", ErfVariant::post_residual,
                                            random_images(1, 16, 3, 1)),
                  InvalidArgument);
}

TEST_CASE("branch norms on constructed tensors") {
  const Tensor z = random_matrix(6 * 5, 4, 3).reshaped({6, 5, 4});
  SUBCASE("f(z) = z gives ratio 1 and cosine 1") {
    const BranchNorms bn = compute_branch_norms(z, z, true);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(std::abs(bn.ratio[k] - 1.0) < 1e-12);
      CHECK(std::abs(bn.cosine[k] - 1.0) < 1e-12);
    }
    CHECK(std::abs(bn.cls_ratio - 1.0) < 1e-12);
    CHECK(std::abs(bn.spatial_ratio - 1.0) < 1e-12);
  }
  SUBCASE("norms 2 and 1 give ratio 2") {
    Tensor zz({3, 2, 2}), ff({3, 2, 2});
    for (std::size_t r = 0; r < 6; ++r) {
      zz[r * 2] = 2.0;
      ff[r * 2 + 1] = -1.0;
    }
    const BranchNorms bn = compute_branch_norms(zz, ff, false);
    CHECK(bn.ratio[0] == 2.0);
    CHECK(bn.ratio[1] == 2.0);
    CHECK(bn.spatial_ratio == 2.0);
    CHECK(std::abs(bn.cosine[0] - 2.0 / std::sqrt(5.0)) < 1e-12);
  }
  SUBCASE("ratio is exactly invariant to a shared rescaling") {
    const Tensor f = random_matrix(6 * 5, 4, 4).reshaped({6, 5, 4});
    Tensor z4 = z, f4 = f;
    for (auto& v : z4.data()) v *= 4.0;
    for (auto& v : f4.data()) v *= 4.0;
    const BranchNorms a = compute_branch_norms(z, f, true);
    const BranchNorms b = compute_branch_norms(z4, f4, true);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(a.ratio[k] == b.ratio[k]);
      CHECK(std::abs(a.cosine[k] - b.cosine[k]) < 1e-12);
    }
  }
  SUBCASE("zero branch is flagged degenerate") {
    Tensor f = z;
    for (std::size_t e = 0; e < 6; ++e) {
      for (std::size_t j = 0; j < 4; ++j) f[(e * 5 + 2) * 4 + j] = 0.0;
    }
    const BranchNorms bn = compute_branch_norms(z, f, true);
    CHECK(bn.degenerate[2]);
    CHECK(bn.ratio[2] == 0.0);
    CHECK(std::isfinite(bn.spatial_ratio));
    CHECK_FALSE(bn.degenerate[1]);
  }
  CHECK_THROWS_AS(compute_branch_norms(z, random_matrix(6 * 5, 3, 1).reshaped({6, 5, 3}), true), DataError);
}

TEST_CASE("branch norms pair layers of a dump") {
  TempDir dir("branch");
  DumpBuilder b("toy", "set", 4);
  b.manifest.has_cls_token = true;
  const Tensor z = random_matrix(4 * 3, 2, 1).reshaped({4, 3, 2});
  const Tensor f = random_matrix(4 * 3, 2, 2).reshaped({4, 3, 2});
  b.layer("block0.attn.skip", LayerKind::skip_branch, z);
  b.layer("block0.attn.branch", LayerKind::pre_residual_branch, f);
  b.write(dir.path());
  const DumpReader reader(dir.path());
  const BranchNormResult r = branch_norms(reader);
  REQUIRE(r.entries.size() == 1);
  CHECK(r.entries[0].name == "block0.attn");
  CHECK(r.entries[0].ratio ==
        compute_branch_norms(reader.load("block0.attn.skip"), reader.load("block0.attn.branch"), true).ratio);

  TempDir lonely("branch-lonely");
  DumpBuilder c("toy", "set", 4);
  c.layer("block0.attn.skip", LayerKind::skip_branch, z);
  c.layer("block1.attn.branch", LayerKind::pre_residual_branch, f);
  c.write(lonely.path());
  CHECK_THROWS_AS(branch_norms(DumpReader(lonely.path())), DataError);
}

TEST_CASE("localization: tokens that are their own pixels") {
  const std::size_t m = 64, g = 3, p = 2;
  const Tensor images = random_images(m, g * p, 3, 12);
  const auto patches = image_patches(images, g, p);
  // Token layer [m, 1 + 9, 12]: CLS noise then each patch's pixels.
  Tensor layer({m, 1 + g * g, p * p * 3});
  const Tensor noise = random_matrix(m, p * p * 3, 77);
  for (std::size_t e = 0; e < m; ++e) {
    for (std::size_t j = 0; j < p * p * 3; ++j) layer.at({e, 0, j}) = noise(e, j);
    for (std::size_t loc = 0; loc < g * g; ++loc) {
      for (std::size_t j = 0; j < p * p * 3; ++j) layer.at({e, 1 + loc, j}) = patches[loc].values(e, j);
    }
  }
  const PatchGeometry geo{g, p, true};
  const std::vector<std::size_t> tokens = {1, 5, 9};
  const auto maps = localization_maps(layer, images, geo, tokens, CkaConfig::full_batch(m));
  for (const auto& map : maps) {
    const std::size_t own = map.row * g + map.col;
    CHECK(map.argmax() == own);
    CHECK(std::abs(map.scores[own] - 1.0) < 1e-6);
    CHECK(map.own_margin() > 0.0);
    for (double s : map.scores.data()) CHECK((s >= 0.0 && s <= 1.0 + 1e-6));
  }
  CHECK(maps[1].row == 1);
  CHECK(maps[1].col == 1);

  // Orthogonal transform and rescaling of the token representation.
  const Tensor q = random_orthogonal(p * p * 3, 5);
  Tensor rotated = layer;
  for (std::size_t e = 0; e < m; ++e) {
    for (std::size_t t = 1; t < 1 + g * g; ++t) {
      for (std::size_t j = 0; j < p * p * 3; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < p * p * 3; ++k) s += layer.at({e, t, k}) * q(k, j);
        rotated.at({e, t, j}) = 1e3 * s;
      }
    }
  }
  const auto maps_r = localization_maps(rotated, images, geo, tokens, CkaConfig::full_batch(m));
  for (std::size_t i = 0; i < maps.size(); ++i) {
    for (std::size_t k = 0; k < g * g; ++k) CHECK(std::abs(maps[i].scores[k] - maps_r[i].scores[k]) < 1e-9);
  }
  CHECK_THROWS_AS(localization_map(layer, images, geo, 0, CkaConfig::full_batch(m)), InvalidArgument);
}

TEST_CASE("localization: independent noise scores below the random baseline") {
  const std::size_t m = 512, g = 2, p = 2;
  const Tensor images = random_images(m, g * p, 3, 3);
  const Tensor layer = random_matrix(m * g * g, 16, 4).reshaped({m, g * g, 16});
  const std::vector<std::size_t> tokens = {0, 1, 2, 3};
  const auto maps = localization_maps(layer, images, {g, p, false}, tokens, CkaConfig::desk_scale(1));
  for (const auto& map : maps) {
    for (double s : map.scores.data()) CHECK(s < 0.2);
  }
}

TEST_CASE("localization geometry") {
  const Tensor images = random_images(8, 8, 3, 1);
  const Tensor layer = random_matrix(8 * 5, 4, 1).reshaped({8, 5, 4});
  CHECK_THROWS_AS(localization_map(layer, images, {3, 2, true}, 1, CkaConfig::full_batch(8)), DataError);
  CHECK_THROWS_AS(localization_map(layer, random_images(8, 6, 3, 1), {2, 4, true}, 1, CkaConfig::full_batch(8)),
                  DataError);
  CHECK(interior_tokens({4, 4, true}) == std::vector<std::size_t>{6, 7, 10, 11});
  CHECK(interior_tokens({3, 4, false}) == std::vector<std::size_t>{4});
  CHECK(interior_tokens({2, 4, false}).empty());

  DumpManifest man;
  man.image_size = 16;
  man.patch_size = 4;
  man.grid = 4;
  man.has_cls_token = true;
  LayerEntry tok{"block0.out", LayerKind::block_output, {8, 17, 32}, "x.npy"};
  LayerEntry conv{"stage1.block0.out", LayerKind::conv_stage_output, {8, 8, 8, 16}, "y.npy"};
  LayerEntry odd{"stage2.block0.out", LayerKind::conv_stage_output, {8, 3, 3, 16}, "z.npy"};
  const PatchGeometry a = layer_geometry(man, tok);
  CHECK((a.grid == 4 && a.patch_size == 4 && a.has_cls_token));
  const PatchGeometry b = layer_geometry(man, conv);
  CHECK((b.grid == 8 && b.patch_size == 2 && !b.has_cls_token));
  CHECK_THROWS_AS(layer_geometry(man, odd), DataError);
}
