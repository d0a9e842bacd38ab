#include "repscope/dump.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <json.hpp>
#include <set>

#include "repscope/error.hpp"
#include "repscope/npy.hpp"

namespace repscope {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 8> kKindNames{{
    {LayerKind::block_output, "block-output"},
    {LayerKind::attention_output, "attention-output"},
    {LayerKind::mlp_hidden, "mlp-hidden"},
    {LayerKind::norm_output, "norm-output"},
    {LayerKind::pre_residual_branch, "pre-residual-branch"},
    {LayerKind::skip_branch, "skip-branch"},
    {LayerKind::attention_weights, "attention-weights"},
    {LayerKind::conv_stage_output, "conv-stage-output"},
}};

bool valid_layer_name(std::string_view name) {
  if (name.empty() || name.front() == '.') return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

bool valid_relative_path(const std::string& p) {
  const fs::path path(p);
  if (path.empty() || path.is_absolute()) return false;
  for (const auto& part : path) {
    if (part == "..") return false;
  }
  return true;
}

// "block3.attn.skip" -> "block3.attn"
std::string pair_key(std::string_view name) {
  const auto dot = name.rfind('.');
  return std::string(dot == std::string_view::npos ? name : name.substr(0, dot));
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, n] : kKindNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view text) {
  for (const auto& [k, n] : kKindNames) {
    if (n == text) return k;
  }
  throw DataError("unknown layer kind '" + std::string(text) + "'");
}

const LayerEntry* DumpManifest::find_layer(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

const LayerEntry& DumpManifest::layer(std::string_view name) const {
  if (const auto* l = find_layer(name)) return *l;
  throw DataError("dump '" + model_name + "' has no layer named '" + std::string(name) + "'");
}

std::vector<const LayerEntry*> DumpManifest::layers_of_kind(const KindSet& kinds) const {
  std::vector<const LayerEntry*> out;
  for (const auto& l : layers) {
    if (kinds.empty() || kinds.count(l.kind)) out.push_back(&l);
  }
  return out;
}

std::string manifest_to_json(const DumpManifest& m) {
  json j;
  j["model_name"] = m.model_name;
  j["dataset_id"] = m.dataset_id;
  j["num_examples"] = m.num_examples;
  j["image_size"] = m.image_size;
  j["patch_size"] = m.patch_size;
  j["grid"] = m.grid;
  j["has_cls_token"] = m.has_cls_token;
  j["seed"] = m.seed;
  json layers = json::array();
  for (const auto& l : m.layers) {
    layers.push_back({{"name", l.name}, {"kind", std::string(to_string(l.kind))}, {"shape", l.shape}, {"file", l.file}});
  }
  j["layers"] = std::move(layers);
  if (!m.architecture.empty()) j["architecture"] = m.architecture;
  if (!m.block_order.empty()) j["block_order"] = m.block_order;
  j["whole_layer_includes_cls"] = m.whole_layer_includes_cls;
  if (m.attention_heads) j["attention_heads"] = m.attention_heads;
  if (m.images_file) j["images_file"] = *m.images_file;
  if (m.labels_file) j["labels_file"] = *m.labels_file;
  return j.dump(2) + "\n";
}

DumpManifest manifest_from_json(std::string_view text) {
  DumpManifest m;
  try {
    const json j = json::parse(text);
    m.model_name = j.at("model_name").get<std::string>();
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.num_examples = j.at("num_examples").get<std::size_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.patch_size = j.at("patch_size").get<std::size_t>();
    m.grid = j.at("grid").get<std::size_t>();
    m.has_cls_token = j.at("has_cls_token").get<bool>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers")) {
      LayerEntry e;
      e.name = l.at("name").get<std::string>();
      e.kind = parse_layer_kind(l.at("kind").get<std::string>());
      e.shape = l.at("shape").get<Shape>();
      e.file = l.at("file").get<std::string>();
      m.layers.push_back(std::move(e));
    }
    m.architecture = j.value("architecture", std::string{});
    m.block_order = j.value("block_order", std::string{});
    m.whole_layer_includes_cls = j.value("whole_layer_includes_cls", true);
    m.attention_heads = j.value("attention_heads", std::size_t{0});
    if (j.contains("images_file")) m.images_file = j.at("images_file").get<std::string>();
    if (j.contains("labels_file")) m.labels_file = j.at("labels_file").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
  return m;
}

void validate_manifest(const DumpManifest& m) {
  if (m.num_examples == 0) throw DataError("manifest: num_examples must be positive");
  if (m.architecture == "vit") {
    if (m.patch_size == 0 || m.image_size % m.patch_size != 0 || m.grid != m.image_size / m.patch_size) {
      throw DataError("manifest: grid (" + std::to_string(m.grid) + ") must equal image_size / patch_size (" +
                      std::to_string(m.image_size) + " / " + std::to_string(m.patch_size) + ") exactly");
    }
  }
  std::set<std::string> names;
  std::set<std::string> files;
  for (const auto& l : m.layers) {
    if (!valid_layer_name(l.name)) throw DataError("manifest: invalid layer name '" + l.name + "'");
    if (!names.insert(l.name).second) throw DataError("manifest: duplicate layer name '" + l.name + "'");
    if (!valid_relative_path(l.file)) throw DataError("manifest: layer '" + l.name + "' has invalid file path");
    if (!files.insert(l.file).second) throw DataError("manifest: layer '" + l.name + "' reuses file " + l.file);
    if (l.shape.empty() || l.shape[0] != m.num_examples) {
      throw DataError("manifest: layer '" + l.name + "' shape " + shape_to_string(l.shape) +
                      " does not lead with num_examples=" + std::to_string(m.num_examples));
    }
    if (l.kind == LayerKind::attention_weights) {
      if (l.shape.size() != 4 || l.shape[2] != l.shape[3]) {
        throw DataError("manifest: attention-weights layer '" + l.name + "' must have shape [m, heads, T, T]");
      }
      if (m.grid) {
        const std::size_t t = m.grid * m.grid + (m.has_cls_token ? 1 : 0);
        if (l.shape[2] != t) {
          throw DataError("manifest: attention-weights layer '" + l.name + "' has " + std::to_string(l.shape[2]) +
                          " tokens, geometry implies " + std::to_string(t));
        }
      }
    }
  }
}

void write_dump(const DumpManifest& manifest, const DumpPayload& payload, const fs::path& dir) {
  validate_manifest(manifest);
  for (const auto& l : manifest.layers) {
    auto it = payload.layers.find(l.name);
    if (it == payload.layers.end()) throw DataError("write_dump: no tensor supplied for layer '" + l.name + "'");
    if (it->second.shape() != l.shape) {
      throw DataError("write_dump: layer '" + l.name + "' tensor shape " + shape_to_string(it->second.shape()) +
                      " differs from manifest shape " + shape_to_string(l.shape));
    }
  }
  if (payload.layers.size() != manifest.layers.size()) {
    throw DataError("write_dump: payload has tensors that the manifest does not list");
  }
  if (manifest.images_file.has_value() != payload.images.has_value() ||
      manifest.labels_file.has_value() != payload.labels.has_value()) {
    throw DataError("write_dump: images/labels presence differs between manifest and payload");
  }
  std::error_code ec;
  fs::create_directories(dir / "layers", ec);
  if (ec) throw IoError("cannot create dump directory '" + dir.string() + "': " + ec.message());
  for (const auto& l : manifest.layers) {
    const fs::path target = dir / l.file;
    fs::create_directories(target.parent_path(), ec);
    write_npy(target, payload.layers.find(l.name)->second);
  }
  if (payload.images) {
    fs::create_directories((dir / *manifest.images_file).parent_path(), ec);
    if (payload.images->dim(0) != manifest.num_examples) throw DataError("write_dump: images count mismatch");
    write_npy(dir / *manifest.images_file, *payload.images);
  }
  if (payload.labels) {
    fs::create_directories((dir / *manifest.labels_file).parent_path(), ec);
    if (payload.labels->dim(0) != manifest.num_examples) throw DataError("write_dump: labels count mismatch");
    write_npy(dir / *manifest.labels_file, *payload.labels);
  }
  write_file_bytes(dir / "manifest.json", manifest_to_json(manifest));
}

DumpReader::DumpReader(fs::path dir) : dir_(std::move(dir)) {
  const fs::path mpath = dir_ / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("no manifest.json in '" + dir_.string() + "'");
  manifest_ = manifest_from_json(read_file_bytes(mpath));
  validate_manifest(manifest_);
  for (const auto& l : manifest_.layers) {
    if (!fs::exists(dir_ / l.file)) {
      throw IoError("layer '" + l.name + "': missing file '" + (dir_ / l.file).string() + "'");
    }
  }
}

Tensor DumpReader::load(std::string_view layer_name) const {
  const LayerEntry& l = manifest_.layer(layer_name);
  Tensor t;
  try {
    t = read_npy(dir_ / l.file);
  } catch (const DataError& e) {
    throw DataError("layer '" + l.name + "': " + e.what());
  }
  if (t.shape() != l.shape) {
    throw DataError("layer '" + l.name + "': file shape " + shape_to_string(t.shape()) +
                    " does not match manifest shape " + shape_to_string(l.shape));
  }
  return t;
}

Tensor DumpReader::images() const {
  if (!manifest_.images_file) throw DataError("dump '" + manifest_.model_name + "' carries no raw images");
  Tensor t = read_npy(dir_ / *manifest_.images_file);
  if (t.rank() != 4 || t.dim(0) != manifest_.num_examples) {
    throw DataError("images file shape " + shape_to_string(t.shape()) + " is not [m, H, W, C] with m=" +
                    std::to_string(manifest_.num_examples));
  }
  return t;
}

std::vector<int> DumpReader::labels() const {
  if (!manifest_.labels_file) throw DataError("dump '" + manifest_.model_name + "' carries no labels");
  const Tensor t = read_npy(dir_ / *manifest_.labels_file);
  if (t.rank() != 1 || t.dim(0) != manifest_.num_examples) throw DataError("labels file must have shape [m]");
  std::vector<int> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (v < 0 || v != std::floor(v)) throw DataError("labels must be non-negative integers");
    out[i] = static_cast<int>(v);
  }
  return out;
}

DumpReader read_dump(const fs::path& dir) { return DumpReader(dir); }

std::vector<std::string> validate_dump(const fs::path& dir) {
  std::vector<std::string> warnings;
  const DumpReader reader(dir);
  const DumpManifest& m = reader.manifest();
  std::map<std::string, std::pair<bool, bool>> pairs;
  for (const auto& l : m.layers) {
    const Tensor t = reader.load(l.name);
    if (!t.all_finite()) throw DataError("layer '" + l.name + "' contains non-finite values");
    if (l.kind == LayerKind::attention_weights) {
      try {
        make_attention_tensor(t, m.grid, m.patch_size, m.has_cls_token);
      } catch (const DataError& e) {
        throw DataError("layer '" + l.name + "': " + e.what());
      }
    }
    if (l.kind == LayerKind::skip_branch) pairs[pair_key(l.name)].first = true;
    if (l.kind == LayerKind::pre_residual_branch) pairs[pair_key(l.name)].second = true;
  }
  for (const auto& [key, p] : pairs) {
    if (p.first != p.second) {
      warnings.push_back("branch pair '" + key + "' is missing its " +
                         std::string(p.first ? "pre-residual-branch" : "skip-branch") + " half");
    }
  }
  if (reader.has_images()) reader.images();
  if (reader.has_labels()) reader.labels();
  return warnings;
}

AttentionTensor make_attention_tensor(Tensor values, std::size_t grid, std::size_t patch_size, bool has_cls_token,
                                      double row_tolerance) {
  if (values.rank() != 4 || values.dim(2) != values.dim(3)) {
    throw DataError("attention tensor must be [m, heads, T, T], got " + shape_to_string(values.shape()));
  }
  const std::size_t t = grid * grid + (has_cls_token ? 1 : 0);
  if (values.dim(2) != t) {
    throw DataError("attention tensor has " + std::to_string(values.dim(2)) + " tokens, grid " +
                    std::to_string(grid) + (has_cls_token ? " with CLS" : "") + " implies " + std::to_string(t));
  }
  const std::size_t rows = values.size() / t;
  auto d = values.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < t; ++k) {
      const double v = d[r * t + k];
      if (!(v >= 0.0)) throw DataError("attention weight negative or NaN");
      s += v;
    }
    if (std::abs(s - 1.0) > row_tolerance) {
      throw DataError("attention row " + std::to_string(r) + " sums to " + std::to_string(s) +
                      ", not 1 within tolerance");
    }
  }
  return AttentionTensor{std::move(values), grid, patch_size, has_cls_token};
}

Tensor as_token_layer(const Tensor& layer) {
  if (layer.rank() == 3) return layer;
  if (layer.rank() == 4) return layer.reshaped({layer.dim(0), layer.dim(1) * layer.dim(2), layer.dim(3)});
  throw InvalidArgument("token layer must be [m, T, d] or [m, h, w, c], got " + shape_to_string(layer.shape()));
}

ActivationMatrix tokens_as_matrix(const Tensor& layer_in, std::optional<std::size_t> token, std::string name) {
  const Tensor layer = as_token_layer(layer_in);
  const std::size_t m = layer.dim(0);
  const std::size_t t = layer.dim(1);
  const std::size_t d = layer.dim(2);
  if (!token) return ActivationMatrix(layer.reshaped({m, t * d}), std::move(name));
  if (*token >= t) {
    throw InvalidArgument("token index " + std::to_string(*token) + " out of range for " + std::to_string(t) +
                          " tokens");
  }
  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) out(i, j) = layer[(i * t + *token) * d + j];
  }
  return ActivationMatrix(std::move(out), std::move(name), token);
}

ActivationMatrix whole_layer_matrix(const Tensor& layer, std::string name, bool drop_cls) {
  if (!drop_cls || layer.rank() != 3) return ActivationMatrix(flatten_examples(layer), std::move(name));
  const std::size_t m = layer.dim(0);
  const std::size_t t = layer.dim(1);
  const std::size_t d = layer.dim(2);
  if (t < 2) throw InvalidArgument("cannot drop CLS from a single-token layer");
  Tensor out({m, (t - 1) * d});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(layer.data().begin() + static_cast<std::ptrdiff_t>((i * t + 1) * d), (t - 1) * d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * (t - 1) * d));
  }
  return ActivationMatrix(std::move(out), std::move(name));
}

}  // namespace repscope
