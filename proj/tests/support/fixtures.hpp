#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "repscope/dump.hpp"

namespace repscope::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("repscope-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

 private:
  std::filesystem::path path_;
};

// Accumulates layers for a hand-built dump.
struct DumpBuilder {
  DumpManifest manifest;
  DumpPayload payload;

  DumpBuilder(std::string model, std::string dataset, std::size_t examples) {
    manifest.model_name = std::move(model);
    manifest.dataset_id = std::move(dataset);
    manifest.num_examples = examples;
  }

  DumpBuilder& layer(const std::string& name, LayerKind kind, Tensor values) {
    manifest.layers.push_back({name, kind, values.shape(), default_layer_file(name)});
    payload.layers.emplace(name, std::move(values));
    return *this;
  }

  DumpBuilder& inputs(Tensor images, Tensor labels) {
    manifest.images_file = "inputs/images.npy";
    manifest.labels_file = "inputs/labels.npy";
    payload.images = std::move(images);
    payload.labels = std::move(labels);
    return *this;
  }

  void write(const std::filesystem::path& dir) const { write_dump(manifest, payload, dir); }
};

}  // namespace repscope::testing
