#include <doctest.h>

#include <algorithm>
#include <set>

#include "repscope/datasets.hpp"
#include "repscope/error.hpp"
#include "repscope/npy.hpp"
#include "support/fixtures.hpp"

using namespace repscope;
using namespace repscope::testing;

TEST_CASE("cifar binary records") {
  TempDir dir("cifar");
  std::string bytes;
  for (int rec = 0; rec < 2; ++rec) {
    bytes.push_back(static_cast<char>(rec == 0 ? 7 : 2));
    for (int plane = 0; plane < 3; ++plane) {
      for (int i = 0; i < 1024; ++i) bytes.push_back(static_cast<char>((plane * 80 + i + rec) % 256));
    }
  }
  write_file_bytes(dir / "data_batch_1.bin", bytes);
  const Dataset d = load_cifar_binary({dir / "data_batch_1.bin"}, "cifar-test");
  CHECK(d.size() == 2);
  CHECK(d.labels == std::vector<int>{7, 2});
  CHECK(d.images.shape() == Shape{2, 32, 32, 3});
  // pixel (y=1, x=2) of record 1, channel G: byte index 1024 + 34 in the G plane
  CHECK(d.images.at({1, 1, 2, 1}) == doctest::Approx(((80 + 34 + 1) % 256) / 255.0));
  CHECK(d.images.at({0, 0, 0, 2}) == doctest::Approx(160 / 255.0));
  write_file_bytes(dir / "bad.bin", bytes.substr(0, 100));
  CHECK_THROWS_AS(load_cifar_binary({dir / "bad.bin"}, "x"), DataError);
  std::string bad_label = bytes;
  bad_label[0] = 12;
  write_file_bytes(dir / "label.bin", bad_label);
  CHECK_THROWS_AS(load_cifar_binary({dir / "label.bin"}, "x"), DataError);
}

TEST_CASE("npy image and label pair") {
  TempDir dir("npyds");
  write_npy(dir / "x.npy", Tensor::filled({4, 8, 8, 3}, 0.5));
  write_npy(dir / "y.npy", Tensor({4}, {0, 1, 2, 1}));
  const Dataset d = load_npy_dataset(dir / "x.npy", dir / "y.npy", "ds");
  CHECK(d.num_classes == 3);
  CHECK(d.image_size() == 8);
  write_npy(dir / "yb.npy", Tensor({4}, {0, 1.5, 2, 1}));
  CHECK_THROWS_AS(load_npy_dataset(dir / "x.npy", dir / "yb.npy", "ds"), DataError);
  write_npy(dir / "yc.npy", Tensor({3}, {0, 1, 2}));
  CHECK_THROWS_AS(load_npy_dataset(dir / "x.npy", dir / "yc.npy", "ds"), DataError);
}

TEST_CASE("shapes dataset is deterministic and balanced") {
  ShapesSpec spec;
  spec.examples = 200;
  const Dataset a = make_shapes_dataset(spec);
  const Dataset b = make_shapes_dataset(spec);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.id == b.id);
  std::vector<int> counts(10, 0);
  for (int y : a.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) CHECK(c == 20);
  CHECK(!std::is_sorted(a.labels.begin(), a.labels.end()));

  ShapesSpec noisier = spec;
  noisier.pixel_noise = 0.2;
  CHECK(make_shapes_dataset(noisier).id != a.id);
  ShapesSpec other_seed = spec;
  other_seed.seed = 1;
  CHECK(make_shapes_dataset(other_seed).id != a.id);
  ShapesSpec shape_task = spec;
  shape_task.task = ShapesTask::shape;
  CHECK(make_shapes_dataset(shape_task).id != a.id);

  ShapesSpec bad = spec;
  bad.min_scale = 0.9;
  CHECK_THROWS_AS(make_shapes_dataset(bad), InvalidArgument);
  bad = spec;
  bad.num_classes = 11;
  CHECK_THROWS_AS(make_shapes_dataset(bad), InvalidArgument);
}

TEST_CASE("slices and selections carry ids") {
  ShapesSpec spec;
  spec.examples = 30;
  const Dataset d = make_shapes_dataset(spec);
  const Dataset s = d.slice(10, 20);
  CHECK(s.size() == 10);
  CHECK(s.id == d.id + "[10:20]");
  CHECK(s.labels[0] == d.labels[10]);
  const std::vector<std::size_t> rows{3, 1};
  const Dataset sel = d.select(rows, "picked");
  CHECK(sel.labels == std::vector<int>{d.labels[3], d.labels[1]});
  CHECK(sel.images.at({1, 0, 0, 0}) == d.images.at({1, 0, 0, 0}));
  CHECK_THROWS_AS(d.slice(5, 5), InvalidArgument);
}

TEST_CASE("per-class sampler") {
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 3);
  const auto idx = sample_per_class(labels, 3, 4, 9);
  REQUIRE(idx.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) CHECK(labels[idx[i]] == static_cast<int>(i / 4));
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 12);
  CHECK(sample_per_class(labels, 3, 4, 9) == idx);
  CHECK(sample_per_class(labels, 3, 4, 10) != idx);
  std::vector<std::size_t> cand;
  for (std::size_t i = 30; i < 60; ++i) cand.push_back(i);
  for (auto i : sample_per_class(labels, 3, 4, 9, cand)) CHECK(i >= 30);
  CHECK_THROWS_AS(sample_per_class(labels, 3, 25, 1), DataError);
}

TEST_CASE("separable dataset") {
  const Dataset d = make_separable_dataset(50, 8, 3);
  for (std::size_t i = 0; i < d.size(); ++i) {
    double left = 0.0, right = 0.0;
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) (x < 4 ? left : right) += d.images.at({i, y, x, 0});
    }
    CHECK((right > left) == (d.labels[i] == 1));
  }
}
