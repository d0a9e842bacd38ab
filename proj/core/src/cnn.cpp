#include "repscope/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numbers>

#include "repscope/error.hpp"
#include "repscope/parallel.hpp"
#include "repscope/rng.hpp"

namespace repscope {

using kernels::gemm_nn;
using kernels::gemm_nt;
using kernels::gemm_tn;

namespace {

struct ConvGeom {
  std::size_t h, w, cin, cout, k, stride, pad;
  std::size_t ho() const { return (h + 2 * pad - k) / stride + 1; }
  std::size_t wo() const { return (w + 2 * pad - k) / stride + 1; }
  std::size_t patch() const { return k * k * cin; }
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t ho = g.ho(), wo = g.wo(), kp = g.patch();
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      double* row = cols + (oy * wo + ox) * kp;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + (ky * g.k + kx) * g.cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w)) {
            std::fill_n(dst, g.cin, 0.0);
          } else {
            std::copy_n(x + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin, g.cin, dst);
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t ho = g.ho(), wo = g.wo(), kp = g.patch();
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const double* row = cols + (oy * wo + ox) * kp;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const double* src = row + (ky * g.k + kx) * g.cin;
          double* dst = dx + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

double act(Activation a, double x) {
  switch (a) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::gelu:
      return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    case Activation::identity:
      return x;
  }
  return x;
}

double act_grad(Activation a, double x) {
  switch (a) {
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      return cdf + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    }
    case Activation::identity:
      return 1.0;
  }
  return 1.0;
}

struct BlockCache {
  std::vector<double> x, cols1, pre1, a1, cols2, f, s, cols_s, pre_out, out;
};

enum class SeedPoint { stem, out, branch, skip };

struct Seed {
  SeedPoint point;
  std::size_t block;
  std::size_t index;
};

class CnnPass {
 public:
  CnnPass(const Cnn& model, std::span<const double> params) : m_(model), cfg_(model.config()), p_(params.data()) {}

  void forward(const double* image) {
    const std::size_t n = cfg_.image_size;
    const ConvGeom sg{n, n, cfg_.channels, cfg_.stem_channels, 3, 1, 1};
    stem_cols_.resize(n * n * sg.patch());
    im2col(image, sg, stem_cols_.data());
    stem_pre_.resize(n * n * cfg_.stem_channels);
    conv(stem_cols_.data(), m_.stem_w(), m_.stem_b(), n * n, sg.patch(), cfg_.stem_channels, stem_pre_.data());
    stem_.resize(stem_pre_.size());
    for (std::size_t i = 0; i < stem_.size(); ++i) stem_[i] = act(cfg_.activation, stem_pre_[i]);

    const auto& specs = m_.blocks();
    blocks_.resize(specs.size());
    const std::vector<double>* x = &stem_;
    for (std::size_t b = 0; b < specs.size(); ++b) {
      block_forward(specs[b], blocks_[b], *x);
      x = &blocks_[b].out;
    }
    const std::size_t hw = m_.final_size() * m_.final_size();
    const std::size_t c = m_.final_channels();
    pooled_.assign(c, 0.0);
    for (std::size_t i = 0; i < hw; ++i) {
      for (std::size_t j = 0; j < c; ++j) pooled_[j] += (*x)[i * c + j];
    }
    for (auto& v : pooled_) v /= static_cast<double>(hw);
    logits_.resize(cfg_.num_classes);
    gemm_nn(pooled_.data(), p(m_.head_w()), logits_.data(), 1, c, cfg_.num_classes, false);
    const double* hb = p(m_.head_b());
    for (std::size_t j = 0; j < cfg_.num_classes; ++j) logits_[j] += hb[j];
  }

  void backward(const double* dlogits, std::span<const Seed> seeds, double* grad, double* dimage) {
    grad_ = grad;
    const auto& specs = m_.blocks();
    const std::size_t hw = m_.final_size() * m_.final_size();
    const std::size_t c = m_.final_channels();
    std::vector<double> dx(hw * c, 0.0);
    if (dlogits) {
      std::vector<double> dpooled(c, 0.0);
      gemm_nt(dlogits, p(m_.head_w()), dpooled.data(), 1, cfg_.num_classes, c, false);
      if (grad) {
        gemm_tn(pooled_.data(), dlogits, gp(m_.head_w()), c, 1, cfg_.num_classes, true);
        double* hb = gp(m_.head_b());
        for (std::size_t j = 0; j < cfg_.num_classes; ++j) hb[j] += dlogits[j];
      }
      for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] = dpooled[j] / static_cast<double>(hw);
      }
    }
    for (std::size_t b = specs.size(); b-- > 0;) {
      for (const auto& sd : seeds) {
        if (sd.point == SeedPoint::out && sd.block == b) dx[sd.index] += 1.0;
      }
      dx = block_backward(specs[b], blocks_[b], dx, seeds, b);
    }
    for (const auto& sd : seeds) {
      if (sd.point == SeedPoint::stem) dx[sd.index] += 1.0;
    }
    const std::size_t n = cfg_.image_size;
    const ConvGeom sg{n, n, cfg_.channels, cfg_.stem_channels, 3, 1, 1};
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= act_grad(cfg_.activation, stem_pre_[i]);
    if (grad) conv_param_grad(stem_cols_.data(), dx.data(), m_.stem_w(), m_.stem_b(), n * n, sg.patch(), cfg_.stem_channels);
    if (dimage) {
      std::vector<double> dcols(n * n * sg.patch());
      gemm_nt(dx.data(), p(m_.stem_w()), dcols.data(), n * n, cfg_.stem_channels, sg.patch(), false);
      col2im_add(dcols.data(), sg, dimage);
    }
  }

  double margin() const {
    double mn = std::numeric_limits<double>::infinity();
    auto scan = [&](const std::vector<double>& v) {
      for (double x : v) mn = std::min(mn, std::abs(x));
    };
    scan(stem_pre_);
    for (const auto& b : blocks_) {
      scan(b.pre1);
      scan(b.pre_out);
    }
    return mn;
  }

  const std::vector<double>& stem() const { return stem_; }
  const BlockCache& block(std::size_t b) const { return blocks_[b]; }
  const std::vector<double>& logits() const { return logits_; }

 private:
  const double* p(std::size_t slot) const { return p_ + m_.layout().slot(slot).offset; }
  double* gp(std::size_t slot) const { return grad_ + m_.layout().slot(slot).offset; }

  void conv(const double* cols, std::size_t w, std::size_t b, std::size_t rows, std::size_t k, std::size_t cout,
            double* y) const {
    gemm_nn(cols, p(w), y, rows, k, cout, false);
    const double* bias = p(b);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cout; ++j) y[r * cout + j] += bias[j];
    }
  }

  void conv_param_grad(const double* cols, const double* dy, std::size_t w, std::size_t b, std::size_t rows,
                       std::size_t k, std::size_t cout) const {
    gemm_tn(cols, dy, gp(w), k, rows, cout, true);
    double* db = gp(b);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cout; ++j) db[j] += dy[r * cout + j];
    }
  }

  void block_forward(const Cnn::BlockSpec& s, BlockCache& c, const std::vector<double>& x) {
    c.x = x;
    const ConvGeom g1{s.h_in, s.w_in, s.c_in, s.c_out, 3, s.stride, 1};
    const ConvGeom g2{s.h_out, s.w_out, s.c_out, s.c_out, 3, 1, 1};
    const std::size_t rows = s.h_out * s.w_out;
    c.cols1.resize(rows * g1.patch());
    im2col(x.data(), g1, c.cols1.data());
    c.pre1.resize(rows * s.c_out);
    conv(c.cols1.data(), s.conv1_w, s.conv1_b, rows, g1.patch(), s.c_out, c.pre1.data());
    c.a1.resize(c.pre1.size());
    for (std::size_t i = 0; i < c.a1.size(); ++i) c.a1[i] = act(cfg_.activation, c.pre1[i]);
    c.cols2.resize(rows * g2.patch());
    im2col(c.a1.data(), g2, c.cols2.data());
    c.f.resize(rows * s.c_out);
    conv(c.cols2.data(), s.conv2_w, s.conv2_b, rows, g2.patch(), s.c_out, c.f.data());
    if (s.projection) {
      const ConvGeom gs{s.h_in, s.w_in, s.c_in, s.c_out, 1, s.stride, 0};
      c.cols_s.resize(rows * gs.patch());
      im2col(x.data(), gs, c.cols_s.data());
      c.s.resize(rows * s.c_out);
      conv(c.cols_s.data(), s.proj_w, s.proj_b, rows, gs.patch(), s.c_out, c.s.data());
    } else {
      c.s = x;
    }
    c.pre_out.resize(rows * s.c_out);
    c.out.resize(rows * s.c_out);
    for (std::size_t i = 0; i < c.out.size(); ++i) {
      c.pre_out[i] = c.f[i] + c.s[i];
      c.out[i] = act(cfg_.activation, c.pre_out[i]);
    }
  }

  std::vector<double> block_backward(const Cnn::BlockSpec& s, const BlockCache& c, const std::vector<double>& dout,
                                     std::span<const Seed> seeds, std::size_t b) {
    const ConvGeom g1{s.h_in, s.w_in, s.c_in, s.c_out, 3, s.stride, 1};
    const ConvGeom g2{s.h_out, s.w_out, s.c_out, s.c_out, 3, 1, 1};
    const std::size_t rows = s.h_out * s.w_out;
    std::vector<double> dpre(rows * s.c_out);
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dout[i] * act_grad(cfg_.activation, c.pre_out[i]);
    std::vector<double> df = dpre;
    std::vector<double> ds = dpre;
    for (const auto& sd : seeds) {
      if (sd.block != b) continue;
      if (sd.point == SeedPoint::branch) df[sd.index] += 1.0;
      if (sd.point == SeedPoint::skip) ds[sd.index] += 1.0;
    }
    std::vector<double> dx(s.h_in * s.w_in * s.c_in, 0.0);
    // branch
    if (grad_) conv_param_grad(c.cols2.data(), df.data(), s.conv2_w, s.conv2_b, rows, g2.patch(), s.c_out);
    std::vector<double> dcols2(rows * g2.patch());
    gemm_nt(df.data(), p(s.conv2_w), dcols2.data(), rows, s.c_out, g2.patch(), false);
    std::vector<double> da1(rows * s.c_out, 0.0);
    col2im_add(dcols2.data(), g2, da1.data());
    for (std::size_t i = 0; i < da1.size(); ++i) da1[i] *= act_grad(cfg_.activation, c.pre1[i]);
    if (grad_) conv_param_grad(c.cols1.data(), da1.data(), s.conv1_w, s.conv1_b, rows, g1.patch(), s.c_out);
    std::vector<double> dcols1(rows * g1.patch());
    gemm_nt(da1.data(), p(s.conv1_w), dcols1.data(), rows, s.c_out, g1.patch(), false);
    col2im_add(dcols1.data(), g1, dx.data());
    // shortcut
    if (s.projection) {
      const ConvGeom gs{s.h_in, s.w_in, s.c_in, s.c_out, 1, s.stride, 0};
      if (grad_) conv_param_grad(c.cols_s.data(), ds.data(), s.proj_w, s.proj_b, rows, gs.patch(), s.c_out);
      std::vector<double> dcs(rows * gs.patch());
      gemm_nt(ds.data(), p(s.proj_w), dcs.data(), rows, s.c_out, gs.patch(), false);
      col2im_add(dcs.data(), gs, dx.data());
    } else {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
    }
    return dx;
  }

  const Cnn& m_;
  const CnnConfig& cfg_;
  const double* p_;
  double* grad_ = nullptr;
  std::vector<double> stem_cols_, stem_pre_, stem_;
  std::vector<BlockCache> blocks_;
  std::vector<double> pooled_, logits_;
};

struct ParsedLayer {
  SeedPoint point;
  std::size_t block;
};

ParsedLayer parse_cnn_layer(const Cnn& cnn, std::string_view layer) {
  if (layer == "stem") return {SeedPoint::stem, 0};
  const auto& specs = cnn.blocks();
  for (std::size_t b = 0; b < specs.size(); ++b) {
    const std::string pre = "stage" + std::to_string(specs[b].stage) + ".block" + std::to_string(specs[b].index) + ".";
    if (layer == pre + "out") return {SeedPoint::out, b};
    if (layer == pre + "branch") return {SeedPoint::branch, b};
    if (layer == pre + "skip") return {SeedPoint::skip, b};
  }
  throw InvalidArgument("layer '" + std::string(layer) + "' has no spatial structure usable for input gradients");
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::gelu:
      return "gelu";
    case Activation::identity:
      return "identity";
  }
  return "relu";
}

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::relu;
  if (text == "gelu") return Activation::gelu;
  if (text == "identity") return Activation::identity;
  throw InvalidArgument("unknown activation '" + std::string(text) + "'");
}

void CnnConfig::validate() const {
  if (image_size == 0 || channels == 0 || stem_channels == 0) throw InvalidArgument("CNN sizes must be >= 1");
  if (num_classes < 2) throw InvalidArgument("CNN needs at least 2 classes");
  for (const auto& s : stages) {
    if (s.stride != 1 && s.stride != 2) throw InvalidArgument("CNN stage strides must be 1 or 2");
    if (s.channels == 0 || s.blocks == 0) throw InvalidArgument("CNN stage channels and blocks must be >= 1");
  }
}

Cnn::Cnn(CnnConfig config) : config_(std::move(config)) {
  config_.validate();
  stem_w_ = layout_.add("stem.w", {9 * config_.channels, config_.stem_channels});
  stem_b_ = layout_.add("stem.b", {config_.stem_channels});
  std::size_t h = config_.image_size;
  std::size_t c = config_.stem_channels;
  for (std::size_t si = 0; si < config_.stages.size(); ++si) {
    const auto& st = config_.stages[si];
    for (std::size_t bi = 0; bi < st.blocks; ++bi) {
      BlockSpec b{};
      b.stage = si;
      b.index = bi;
      b.stride = bi == 0 ? st.stride : 1;
      b.h_in = b.w_in = h;
      b.c_in = c;
      b.c_out = st.channels;
      b.h_out = b.w_out = (h - 1) / b.stride + 1;
      b.projection = b.stride != 1 || b.c_in != b.c_out;
      const std::string pre = "stage" + std::to_string(si) + ".block" + std::to_string(bi) + ".";
      b.conv1_w = layout_.add(pre + "conv1.w", {9 * b.c_in, b.c_out});
      b.conv1_b = layout_.add(pre + "conv1.b", {b.c_out});
      b.conv2_w = layout_.add(pre + "conv2.w", {9 * b.c_out, b.c_out});
      b.conv2_b = layout_.add(pre + "conv2.b", {b.c_out});
      if (b.projection) {
        b.proj_w = layout_.add(pre + "proj.w", {b.c_in, b.c_out});
        b.proj_b = layout_.add(pre + "proj.b", {b.c_out});
      }
      blocks_.push_back(b);
      h = b.h_out;
      c = b.c_out;
    }
  }
  head_w_ = layout_.add("head.w", {c, config_.num_classes});
  head_b_ = layout_.add("head.b", {config_.num_classes});
}

std::size_t Cnn::final_size() const { return blocks_.empty() ? config_.image_size : blocks_.back().h_out; }
std::size_t Cnn::final_channels() const { return blocks_.empty() ? config_.stem_channels : blocks_.back().c_out; }

std::vector<double> Cnn::init_params(std::uint64_t seed) const {
  std::vector<double> params(layout_.total(), 0.0);
  Rng rng(seed);
  for (const auto& s : layout_.slots()) {
    if (s.name.ends_with(".b")) continue;
    const double fan_in = static_cast<double>(s.shape[0]);
    const double std = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < s.size; ++i) params[s.offset + i] = rng.normal() * std;
  }
  return params;
}

std::string Cnn::config_json() const {
  nlohmann::json j;
  j["architecture"] = "cnn";
  j["image_size"] = config_.image_size;
  j["channels"] = config_.channels;
  j["stem_channels"] = config_.stem_channels;
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : config_.stages) stages.push_back({{"blocks", s.blocks}, {"channels", s.channels}, {"stride", s.stride}});
  j["stages"] = stages;
  j["num_classes"] = config_.num_classes;
  j["activation"] = std::string(to_string(config_.activation));
  j["seed"] = config_.seed;
  return j.dump();
}

CnnConfig cnn_config_from_json(std::string_view text) {
  CnnConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.image_size = j.value("image_size", c.image_size);
    c.channels = j.value("channels", c.channels);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    if (j.contains("stages")) {
      c.stages.clear();
      for (const auto& s : j.at("stages")) {
        c.stages.push_back({s.at("blocks").get<std::size_t>(), s.at("channels").get<std::size_t>(),
                            s.at("stride").get<std::size_t>()});
      }
    }
    c.num_classes = j.value("num_classes", c.num_classes);
    c.activation = parse_activation(j.value("activation", std::string("relu")));
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("CNN config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<CapturePoint> Cnn::capture_points() const {
  std::vector<CapturePoint> out;
  out.push_back({"stem", LayerKind::conv_stage_output, {config_.image_size, config_.image_size, config_.stem_channels}});
  for (const auto& b : blocks_) {
    const std::string pre = "stage" + std::to_string(b.stage) + ".block" + std::to_string(b.index) + ".";
    const Shape shp{b.h_out, b.w_out, b.c_out};
    out.push_back({pre + "skip", LayerKind::skip_branch, shp});
    out.push_back({pre + "branch", LayerKind::pre_residual_branch, shp});
    out.push_back({pre + "out", LayerKind::conv_stage_output, shp});
  }
  return out;
}

ForwardResult Cnn::forward(std::span<const double> params, const Tensor& images, const KindSet& capture) const {
  check_params(params);
  check_images(images);
  const std::size_t m = images.dim(0);
  const std::size_t img = config_.image_size * config_.image_size * config_.channels;
  ForwardResult r;
  r.logits = Tensor({m, config_.num_classes});
  struct Sink {
    ParsedLayer where;
    double* dst;
    std::size_t n;
  };
  std::vector<Sink> sinks;
  if (!capture.empty()) {
    for (const auto& cp : capture_points()) {
      if (!capture.count(cp.kind)) continue;
      Shape full{m};
      full.insert(full.end(), cp.per_example.begin(), cp.per_example.end());
      auto [it, _] = r.captured.emplace(cp.name, Tensor(full));
      sinks.push_back({parse_cnn_layer(*this, cp.name), it->second.data().data(), shape_volume(cp.per_example)});
    }
  }
  CnnPass pass(*this, params);
  for (std::size_t i = 0; i < m; ++i) {
    pass.forward(images.data().data() + i * img);
    std::copy(pass.logits().begin(), pass.logits().end(),
              r.logits.data().begin() + static_cast<std::ptrdiff_t>(i * config_.num_classes));
    for (const auto& s : sinks) {
      const std::vector<double>* src = nullptr;
      switch (s.where.point) {
        case SeedPoint::stem:
          src = &pass.stem();
          break;
        case SeedPoint::out:
          src = &pass.block(s.where.block).out;
          break;
        case SeedPoint::branch:
          src = &pass.block(s.where.block).f;
          break;
        case SeedPoint::skip:
          src = &pass.block(s.where.block).s;
          break;
      }
      std::copy_n(src->data(), s.n, s.dst + i * s.n);
    }
  }
  return r;
}

Gradients Cnn::backward(std::span<const double> params, const Tensor& images, std::span<const int> labels,
                        std::size_t workers) const {
  check_params(params);
  check_images(images);
  const std::size_t m = images.dim(0);
  if (labels.size() != m) throw InvalidArgument("label count does not match batch size");
  const std::size_t img = config_.image_size * config_.image_size * config_.channels;
  const std::size_t nc = config_.num_classes;
  Gradients g;
  g.logits = Tensor({m, nc});
  g.input = Tensor(images.shape());
  const std::size_t chunks = std::max<std::size_t>(1, std::min(workers, m));
  std::vector<std::vector<double>> partial(chunks, std::vector<double>(layout_.total(), 0.0));
  std::vector<double> losses(m);
  parallel_for(chunks, chunks, [&](std::size_t ch) {
    CnnPass pass(*this, params);
    const std::size_t lo = ch * m / chunks;
    const std::size_t hi = (ch + 1) * m / chunks;
    Tensor one({1, nc});
    Tensor dl;
    for (std::size_t i = lo; i < hi; ++i) {
      pass.forward(images.data().data() + i * img);
      std::copy(pass.logits().begin(), pass.logits().end(), one.data().begin());
      const int label = labels[i];
      losses[i] = softmax_cross_entropy(one, std::span<const int>(&label, 1), &dl);
      for (auto& v : dl.data()) v /= static_cast<double>(m);
      std::copy(pass.logits().begin(), pass.logits().end(), g.logits.data().begin() + static_cast<std::ptrdiff_t>(i * nc));
      pass.backward(dl.data().data(), {}, partial[ch].data(), g.input.data().data() + i * img);
    }
  });
  g.params = std::move(partial[0]);
  for (std::size_t ch = 1; ch < chunks; ++ch) {
    for (std::size_t k = 0; k < g.params.size(); ++k) g.params[k] += partial[ch][k];
  }
  for (double l : losses) g.loss += l;
  g.loss /= static_cast<double>(m);
  return g;
}

std::size_t Cnn::center_location(std::string_view layer) const {
  const ParsedLayer pl = parse_cnn_layer(*this, layer);
  const std::size_t side = pl.point == SeedPoint::stem ? config_.image_size : blocks_[pl.block].h_out;
  return (side / 2) * side + side / 2;
}

Tensor Cnn::feature_input_jacobian(std::span<const double> params, const Tensor& image, std::string_view layer,
                                   std::size_t location) const {
  check_params(params);
  check_images(image);
  if (image.dim(0) != 1) throw InvalidArgument("feature_input_jacobian takes a single image");
  const ParsedLayer pl = parse_cnn_layer(*this, layer);
  const std::size_t side = pl.point == SeedPoint::stem ? config_.image_size : blocks_[pl.block].h_out;
  const std::size_t ch = pl.point == SeedPoint::stem ? config_.stem_channels : blocks_[pl.block].c_out;
  if (location >= side * side) throw InvalidArgument("spatial location out of range");
  CnnPass pass(*this, params);
  pass.forward(image.data().data());
  const std::size_t img = image.size();
  Tensor out({ch, config_.image_size, config_.image_size, config_.channels});
  for (std::size_t c = 0; c < ch; ++c) {
    const Seed seed{pl.point, pl.block, location * ch + c};
    pass.backward(nullptr, std::span<const Seed>(&seed, 1), nullptr, out.data().data() + c * img);
  }
  return out;
}

double Cnn::activation_margin(std::span<const double> params, const Tensor& images) const {
  check_params(params);
  check_images(images);
  const std::size_t img = config_.image_size * config_.image_size * config_.channels;
  CnnPass pass(*this, params);
  double mn = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    pass.forward(images.data().data() + i * img);
    mn = std::min(mn, pass.margin());
  }
  return mn;
}

DumpManifest Cnn::manifest_template() const {
  DumpManifest m;
  m.architecture = "cnn";
  m.block_order = "post-activation";
  m.image_size = config_.image_size;
  m.patch_size = config_.image_size / final_size();
  m.grid = final_size();
  m.has_cls_token = false;
  m.seed = config_.seed;
  return m;
}

}  // namespace repscope
