#include "repscope/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "repscope/error.hpp"
#include "repscope/npy.hpp"
#include "repscope/rng.hpp"

namespace repscope {

namespace {

// Short digest of the continuous generator settings so that datasets that
// differ only in noise or scale never share an id.
std::string appearance_tag(const ShapesSpec& spec) {
  char text[160];
  std::snprintf(text, sizeof(text), "%.17g/%.17g/%.17g/%.17g/%.17g", spec.pixel_noise, spec.background_amplitude,
                spec.min_scale, spec.max_scale, spec.colour_jitter);
  std::uint32_t h = 2166136261u;
  for (const char* c = text; *c; ++c) {
    h ^= static_cast<unsigned char>(*c);
    h *= 16777619u;
  }
  char out[9];
  std::snprintf(out, sizeof(out), "%08x", h);
  return out;
}

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

constexpr double kPalette[10][3] = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 1.0, 0.0},
                                    {1.0, 0.0, 1.0}, {0.0, 1.0, 1.0}, {1.0, 0.5, 0.0}, {0.5, 0.0, 1.0},
                                    {1.0, 1.0, 1.0}, {0.5, 1.0, 0.5}};

// Shape membership on box coordinates u, v in [-1, 1].
bool in_shape(int cls, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0:
      return std::max(au, av) < 0.75;
    case 1:
      return r < 0.85;
    case 2:
      return r > 0.5 && r < 0.95;
    case 3:
      return au < 0.3 || av < 0.3;
    case 4:
      return std::abs(au - av) < 0.35;
    case 5:
      return av > 0.35 && av < 0.85;
    case 6:
      return au > 0.35 && au < 0.85;
    case 7:
      return v > -0.8 && au < (v + 0.8) * 0.55;
    case 8:
      return u < -0.35 || v > 0.35;
    case 9: {
      const double du = au - 0.55, dv = av - 0.55;
      return du * du + dv * dv < 0.13;
    }
    default:
      return false;
  }
}

Dataset finish(std::string id, Tensor images, std::vector<int> labels, std::size_t num_classes) {
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  return Dataset{std::move(id), std::move(images), std::move(labels), num_classes};
}

}  // namespace

Tensor gather_examples(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw InvalidArgument("gather_examples: empty tensor");
  Shape shape = x.shape();
  const std::size_t stride = x.size() / shape[0];
  shape[0] = rows.size();
  if (rows.empty()) throw InvalidArgument("gather_examples: no rows selected");
  std::vector<double> out(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw InvalidArgument("gather_examples: row out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return Tensor(std::move(shape), std::move(out));
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > size()) throw InvalidArgument("Dataset::slice: bad range");
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
  return select(rows, id + "[" + std::to_string(begin) + ":" + std::to_string(end) + "]");
}

Dataset Dataset::select(std::span<const std::size_t> rows, std::string new_id) const {
  Dataset d;
  d.id = std::move(new_id);
  d.images = gather_examples(images, rows);
  d.labels.reserve(rows.size());
  for (std::size_t r : rows) d.labels.push_back(labels[r]);
  d.num_classes = num_classes;
  return d;
}

Dataset load_cifar_binary(const std::vector<std::filesystem::path>& files, std::string id, std::size_t num_classes) {
  if (files.empty()) throw InvalidArgument("no CIFAR batch files given");
  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& f : files) {
    const std::string bytes = read_file_bytes(f);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
      throw DataError(f.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(kCifarRecord) + "-byte record");
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    const std::size_t plane = kCifarSide * kCifarSide;
    for (std::size_t r = 0; r < n; ++r) {
      const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kCifarRecord);
      labels.push_back(rec[0]);
      for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < 3; ++c) pixels.push_back(rec[1 + c * plane + p] / 255.0);
      }
    }
  }
  const std::size_t m = labels.size();
  return finish(std::move(id), Tensor({m, kCifarSide, kCifarSide, 3}, std::move(pixels)), std::move(labels),
                num_classes);
}

Dataset load_npy_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, std::string id) {
  Tensor x = read_npy(images);
  const Tensor y = read_npy(labels);
  if (x.rank() != 4 || x.dim(1) != x.dim(2)) {
    throw DataError(images.string() + ": expected square images [m, H, W, C], got " + shape_to_string(x.shape()));
  }
  if (y.rank() != 1 || y.dim(0) != x.dim(0)) {
    throw DataError(labels.string() + ": expected labels [" + std::to_string(x.dim(0)) + "], got " +
                    shape_to_string(y.shape()));
  }
  std::vector<int> lab(y.size());
  int max_label = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = y[i];
    if (v < 0.0 || v != std::floor(v) || v > 1e6) throw DataError(labels.string() + ": labels must be non-negative integers");
    lab[i] = static_cast<int>(v);
    max_label = std::max(max_label, lab[i]);
  }
  return finish(std::move(id), std::move(x), std::move(lab), static_cast<std::size_t>(max_label) + 1);
}

Dataset make_shapes_dataset(const ShapesSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > 10) throw InvalidArgument("shapes dataset supports 2..10 classes");
  if (spec.image_size < 8) throw InvalidArgument("shapes dataset needs images of at least 8 pixels");
  if (spec.examples == 0) throw InvalidArgument("shapes dataset needs at least one example");
  const std::size_t s = spec.image_size;
  const double sd = static_cast<double>(s);
  Tensor images({spec.examples, s, s, 3});
  std::vector<int> labels(spec.examples);
  const auto min_box = static_cast<std::size_t>(std::lround(spec.min_scale * sd));
  const auto max_box = static_cast<std::size_t>(std::lround(spec.max_scale * sd));
  if (min_box < 2 || min_box > max_box || max_box > s) throw InvalidArgument("shapes dataset: bad shape scale range");
  for (std::size_t i = 0; i < spec.examples; ++i) {
    Rng rng(derive_seed(spec.seed, i));
    const int cls = static_cast<int>(i % spec.num_classes);
    labels[i] = cls;
    double* img = images.data().data() + i * s * s * 3;
    // Smooth background: a few low-frequency waves per channel.
    for (std::size_t c = 0; c < 3; ++c) {
      double fx[3], fy[3], ph[3];
      for (int w = 0; w < 3; ++w) {
        fx[w] = rng.uniform(-1.5, 1.5);
        fy[w] = rng.uniform(-1.5, 1.5);
        ph[w] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          double b = 0.5;
          for (int w = 0; w < 3; ++w) {
            b += spec.background_amplitude * std::sin(2.0 * std::numbers::pi * (fx[w] * x + fy[w] * y) / sd + ph[w]);
          }
          img[(y * s + x) * 3 + c] = b;
        }
      }
    }
    double colour[3];
    int shape = cls;
    if (spec.task == ShapesTask::colour) {
      shape = static_cast<int>(rng.index(10));
      for (std::size_t c = 0; c < 3; ++c) {
        colour[c] = std::clamp(kPalette[cls][c] + rng.uniform(-spec.colour_jitter, spec.colour_jitter), 0.0, 1.0);
      }
    } else {
      for (double& c : colour) {
        c = rng.uniform();
        if (std::abs(c - 0.5) < 0.3) c = c < 0.5 ? c - 0.3 : c + 0.3;
        c = std::clamp(c, 0.0, 1.0);
      }
    }
    const std::size_t box = min_box + rng.index(max_box - min_box + 1);
    const std::size_t top = rng.index(s - box + 1);
    const std::size_t left = rng.index(s - box + 1);
    for (std::size_t y = 0; y < box; ++y) {
      for (std::size_t x = 0; x < box; ++x) {
        const double u = (2.0 * x + 1.0) / static_cast<double>(box) - 1.0;
        const double v = (2.0 * y + 1.0) / static_cast<double>(box) - 1.0;
        if (!in_shape(shape, u, v)) continue;
        for (std::size_t c = 0; c < 3; ++c) img[((top + y) * s + left + x) * 3 + c] = colour[c];
      }
    }
    for (std::size_t k = 0; k < s * s * 3; ++k) img[k] += spec.pixel_noise * rng.normal() - 0.5;
  }
  // Shuffle so consecutive examples do not cycle through classes.
  Rng order(derive_seed(spec.seed, 0xd1ce));
  const auto perm = order.permutation(spec.examples);
  std::vector<int> shuffled(spec.examples);
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = labels[perm[i]];
  const std::string id = std::string(spec.task == ShapesTask::colour ? "colour" : "shape") + "shapes-s" +
                         std::to_string(s) + "-c" + std::to_string(spec.num_classes) + "-n" +
                         std::to_string(spec.examples) + "-seed" + std::to_string(spec.seed) + "-" +
                         appearance_tag(spec);
  return finish(id, gather_examples(images, perm), std::move(shuffled), spec.num_classes);
}

Dataset make_separable_dataset(std::size_t examples, std::size_t image_size, std::uint64_t seed) {
  if (examples == 0 || image_size < 2) throw InvalidArgument("separable dataset needs examples and size >= 2");
  const std::size_t s = image_size;
  Tensor images({examples, s, s, 3});
  std::vector<int> labels(examples);
  Rng rng(seed);
  for (std::size_t i = 0; i < examples; ++i) {
    const int cls = static_cast<int>(rng.index(2));
    labels[i] = cls;
    double* img = images.data().data() + i * s * s * 3;
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        // Channel 0 carries a left/right split, channel 1 a global tint, so
        // both local and pooled features separate the classes.
        const bool bright = (x < s / 2) == (cls == 0);
        double* px = img + (y * s + x) * 3;
        px[0] = (bright ? 0.5 : -0.5) + 0.1 * rng.normal();
        px[1] = (cls == 1 ? 0.5 : -0.5) + 0.1 * rng.normal();
        px[2] = 0.1 * rng.normal();
      }
    }
  }
  return finish("separable-s" + std::to_string(s) + "-n" + std::to_string(examples) + "-seed" + std::to_string(seed),
                std::move(images), std::move(labels), 2);
}

std::vector<std::size_t> sample_per_class(const std::vector<int>& labels, std::size_t num_classes,
                                          std::size_t per_class, std::uint64_t seed,
                                          std::span<const std::size_t> candidates) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  auto consider = [&](std::size_t i) {
    const int y = labels.at(i);
    if (y >= 0 && static_cast<std::size_t>(y) < num_classes) by_class[static_cast<std::size_t>(y)].push_back(i);
  };
  if (candidates.empty()) {
    for (std::size_t i = 0; i < labels.size(); ++i) consider(i);
  } else {
    for (std::size_t i : candidates) consider(i);
  }
  std::vector<std::size_t> out;
  out.reserve(per_class * num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < per_class) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) + " examples, need " +
                      std::to_string(per_class));
    }
    Rng rng(derive_seed(seed, c));
    rng.shuffle(std::span<std::size_t>(pool));
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  return out;
}

}  // namespace repscope
