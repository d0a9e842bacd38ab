#include "repscope/vit.hpp"

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

constexpr double kLnEps = 1e-10;
constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// Row-wise LayerNorm over `rows` vectors of width d.
void layer_norm(const double* x, const double* g, const double* b, std::size_t rows, std::size_t d, double* xhat,
                double* rstd, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      y[r * d + j] = g[j] * h + b[j];
    }
  }
}

// Accumulates into dx, dg, db (dg/db may be null).
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, const double* g, std::size_t rows,
                         std::size_t d, double* dx, double* dg, double* db) {
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dyr = dy + r * d;
    const double* hr = xhat + r * d;
    double mean_dh = 0.0;
    double mean_dh_h = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dyr[j] * g[j];
      mean_dh += dxhat[j];
      mean_dh_h += dxhat[j] * hr[j];
      if (dg) dg[j] += dyr[j] * hr[j];
      if (db) db[j] += dyr[j];
    }
    mean_dh /= static_cast<double>(d);
    mean_dh_h /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
  }
}

void add_bias(double* y, const double* b, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += b[j];
  }
}

void bias_grad(const double* dy, std::size_t rows, std::size_t n, double* db) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) db[j] += dy[r * n + j];
  }
}

struct BlockCache {
  std::vector<double> z_in, xhat1, rstd1, n1, qkv, attn, o, f_attn, z_mid, xhat2, rstd2, n2, hpre, hact, f_mlp,
      z_out;
};

enum class SeedPoint { embed, out, attn_branch, mlp_skip, mlp_branch, final_norm };

struct Seed {
  SeedPoint point = SeedPoint::out;
  std::size_t block = 0;
  std::size_t index = 0;  // flat index into the [T, d] tensor
};

// Single-example forward/backward with all intermediates retained.
class ViTPass {
 public:
  ViTPass(const ViT& model, std::span<const double> params) : m_(model), cfg_(model.config()), p_(params.data()) {
    const std::size_t t = cfg_.tokens();
    masked_.assign(t, false);
    for (auto k : cfg_.masked_keys) {
      if (k >= t) throw InvalidArgument("masked key token out of range");
      masked_[k] = true;
    }
    if (std::count(masked_.begin(), masked_.end(), true) == static_cast<std::ptrdiff_t>(t)) {
      throw InvalidArgument("every attention key is masked");
    }
  }

  void forward(const double* image) {
    const std::size_t d = cfg_.width;
    const std::size_t t = cfg_.tokens();
    const std::size_t tp = cfg_.spatial_tokens();
    const std::size_t pd = cfg_.patch_dim();
    const std::size_t g = cfg_.grid();
    const std::size_t ps = cfg_.patch_size;
    const std::size_t c = cfg_.channels;
    const std::size_t w = cfg_.image_size;
    const std::size_t off = cfg_.cls_offset();
    const auto& s = m_.slots();

    patches_.assign(tp * pd, 0.0);
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        double* dst = patches_.data() + (gy * g + gx) * pd;
        for (std::size_t py = 0; py < ps; ++py) {
          const double* src = image + ((gy * ps + py) * w + gx * ps) * c;
          std::copy_n(src, ps * c, dst + py * ps * c);
        }
      }
    }
    z0_.assign(t * d, 0.0);
    gemm_nn(patches_.data(), p(s.patch_w), z0_.data() + off * d, tp, pd, d, false);
    add_bias(z0_.data() + off * d, p(s.patch_b), tp, d);
    if (off) std::copy_n(p(s.cls), d, z0_.data());
    const double* pos = p(s.pos);
    for (std::size_t i = 0; i < t * d; ++i) z0_[i] += pos[i];

    blocks_.resize(cfg_.depth);
    const std::vector<double>* z = &z0_;
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
      block_forward(b, *z);
      z = &blocks_[b].z_out;
    }
    xhatf_.resize(t * d);
    rstdf_.resize(t);
    nf_.resize(t * d);
    layer_norm(z->data(), p(s.lnf_g), p(s.lnf_b), t, d, xhatf_.data(), rstdf_.data(), nf_.data());
    pooled_.assign(d, 0.0);
    if (cfg_.head_type == HeadType::cls) {
      std::copy_n(nf_.data(), d, pooled_.data());
    } else {
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < d; ++j) pooled_[j] += nf_[i * d + j];
      }
      for (auto& v : pooled_) v /= static_cast<double>(t);
    }
    logits_.resize(cfg_.num_classes);
    gemm_nn(pooled_.data(), p(s.head_w), logits_.data(), 1, d, cfg_.num_classes, false);
    add_bias(logits_.data(), p(s.head_b), 1, cfg_.num_classes);
  }

  // dlogits may be null when only seeds drive the pass. grad may be null
  // to skip parameter gradients; dimage may be null to skip input gradients.
  void backward(const double* dlogits, std::span<const Seed> seeds, double* grad, double* dimage) {
    const std::size_t d = cfg_.width;
    const std::size_t t = cfg_.tokens();
    const auto& s = m_.slots();
    grad_ = grad;

    std::vector<double> dz(t * d, 0.0);
    std::vector<double> dnf(t * d, 0.0);
    if (dlogits) {
      std::vector<double> dpooled(d, 0.0);
      gemm_nt(dlogits, p(s.head_w), dpooled.data(), 1, cfg_.num_classes, d, false);
      if (grad) {
        gemm_tn(pooled_.data(), dlogits, gp(s.head_w), d, 1, cfg_.num_classes, true);
        bias_grad(dlogits, 1, cfg_.num_classes, gp(s.head_b));
      }
      if (cfg_.head_type == HeadType::cls) {
        std::copy_n(dpooled.data(), d, dnf.data());
      } else {
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t j = 0; j < d; ++j) dnf[i * d + j] = dpooled[j] / static_cast<double>(t);
        }
      }
    }
    for (const auto& sd : seeds) {
      if (sd.point == SeedPoint::final_norm) dnf[sd.index] += 1.0;
    }
    layer_norm_backward(dnf.data(), xhatf_.data(), rstdf_.data(), p(s.lnf_g), t, d, dz.data(), gp(s.lnf_g),
                        gp(s.lnf_b));

    for (std::size_t b = cfg_.depth; b-- > 0;) {
      for (const auto& sd : seeds) {
        if (sd.point == SeedPoint::out && sd.block == b) dz[sd.index] += 1.0;
      }
      block_backward(b, dz, seeds);
    }
    for (const auto& sd : seeds) {
      if (sd.point == SeedPoint::embed) dz[sd.index] += 1.0;
    }
    embed_backward(dz, grad != nullptr, dimage);
  }

  const std::vector<double>& logits() const { return logits_; }
  const std::vector<double>& embed() const { return z0_; }
  const BlockCache& block(std::size_t b) const { return blocks_[b]; }
  const std::vector<double>& final_norm() const { return nf_; }

 private:
  const double* p(std::size_t off) const { return p_ + m_.layout().slot(off).offset; }
  double* gp(std::size_t off) const { return grad_ ? grad_ + m_.layout().slot(off).offset : nullptr; }

  void block_forward(std::size_t b, const std::vector<double>& z) {
    const std::size_t d = cfg_.width;
    const std::size_t t = cfg_.tokens();
    const std::size_t hd = cfg_.hidden();
    const std::size_t nh = cfg_.heads;
    const std::size_t dh = cfg_.head_dim();
    const auto& s = m_.slots().blocks[b];
    BlockCache& c = blocks_[b];

    c.z_in = z;
    c.xhat1.resize(t * d);
    c.rstd1.resize(t);
    c.n1.resize(t * d);
    layer_norm(z.data(), p(s.ln1_g), p(s.ln1_b), t, d, c.xhat1.data(), c.rstd1.data(), c.n1.data());
    c.qkv.resize(t * 3 * d);
    gemm_nn(c.n1.data(), p(s.qkv_w), c.qkv.data(), t, d, 3 * d, false);
    add_bias(c.qkv.data(), p(s.qkv_b), t, 3 * d);

    c.attn.assign(nh * t * t, 0.0);
    c.o.assign(t * d, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < nh; ++h) {
      double* a = c.attn.data() + h * t * t;
      for (std::size_t q = 0; q < t; ++q) {
        const double* qv = c.qkv.data() + q * 3 * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < t; ++k) {
          if (masked_[k]) continue;
          const double* kv = c.qkv.data() + k * 3 * d + d + h * dh;
          double sc = 0.0;
          for (std::size_t j = 0; j < dh; ++j) sc += qv[j] * kv[j];
          sc *= scale;
          a[q * t + k] = sc;
          mx = std::max(mx, sc);
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < t; ++k) {
          if (masked_[k]) {
            a[q * t + k] = 0.0;
            continue;
          }
          a[q * t + k] = std::exp(a[q * t + k] - mx);
          sum += a[q * t + k];
        }
        for (std::size_t k = 0; k < t; ++k) a[q * t + k] /= sum;
        double* ov = c.o.data() + q * d + h * dh;
        for (std::size_t k = 0; k < t; ++k) {
          const double w = a[q * t + k];
          if (w == 0.0) continue;
          const double* vv = c.qkv.data() + k * 3 * d + 2 * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) ov[j] += w * vv[j];
        }
      }
    }
    c.f_attn.resize(t * d);
    gemm_nn(c.o.data(), p(s.proj_w), c.f_attn.data(), t, d, d, false);
    add_bias(c.f_attn.data(), p(s.proj_b), t, d);
    c.z_mid = c.f_attn;
    if (m_.attn_skip(b)) {
      for (std::size_t i = 0; i < t * d; ++i) c.z_mid[i] += z[i];
    }

    c.xhat2.resize(t * d);
    c.rstd2.resize(t);
    c.n2.resize(t * d);
    layer_norm(c.z_mid.data(), p(s.ln2_g), p(s.ln2_b), t, d, c.xhat2.data(), c.rstd2.data(), c.n2.data());
    c.hpre.resize(t * hd);
    gemm_nn(c.n2.data(), p(s.fc1_w), c.hpre.data(), t, d, hd, false);
    add_bias(c.hpre.data(), p(s.fc1_b), t, hd);
    c.hact.resize(t * hd);
    for (std::size_t i = 0; i < t * hd; ++i) c.hact[i] = gelu(c.hpre[i]);
    c.f_mlp.resize(t * d);
    gemm_nn(c.hact.data(), p(s.fc2_w), c.f_mlp.data(), t, hd, d, false);
    add_bias(c.f_mlp.data(), p(s.fc2_b), t, d);
    c.z_out = c.f_mlp;
    if (m_.mlp_skip(b)) {
      for (std::size_t i = 0; i < t * d; ++i) c.z_out[i] += c.z_mid[i];
    }
  }

  // dz enters as d/dz_out and leaves as d/dz_in.
  void block_backward(std::size_t b, std::vector<double>& dz, std::span<const Seed> seeds) {
    const std::size_t d = cfg_.width;
    const std::size_t t = cfg_.tokens();
    const std::size_t hd = cfg_.hidden();
    const std::size_t nh = cfg_.heads;
    const std::size_t dh = cfg_.head_dim();
    const auto& s = m_.slots().blocks[b];
    const BlockCache& c = blocks_[b];

    // MLP sublayer
    std::vector<double> df = dz;
    for (const auto& sd : seeds) {
      if (sd.point == SeedPoint::mlp_branch && sd.block == b) df[sd.index] += 1.0;
    }
    std::vector<double> dmid(t * d, 0.0);
    if (m_.mlp_skip(b)) dmid = dz;
    for (const auto& sd : seeds) {
      if (sd.point == SeedPoint::mlp_skip && sd.block == b) dmid[sd.index] += 1.0;
    }
    if (grad_) {
      gemm_tn(c.hact.data(), df.data(), gp(s.fc2_w), hd, t, d, true);
      bias_grad(df.data(), t, d, gp(s.fc2_b));
    }
    std::vector<double> dh_(t * hd);
    gemm_nt(df.data(), p(s.fc2_w), dh_.data(), t, d, hd, false);
    for (std::size_t i = 0; i < t * hd; ++i) dh_[i] *= gelu_grad(c.hpre[i]);
    if (grad_) {
      gemm_tn(c.n2.data(), dh_.data(), gp(s.fc1_w), d, t, hd, true);
      bias_grad(dh_.data(), t, hd, gp(s.fc1_b));
    }
    std::vector<double> dn(t * d);
    gemm_nt(dh_.data(), p(s.fc1_w), dn.data(), t, hd, d, false);
    layer_norm_backward(dn.data(), c.xhat2.data(), c.rstd2.data(), p(s.ln2_g), t, d, dmid.data(), gp(s.ln2_g),
                        gp(s.ln2_b));

    // Attention sublayer
    std::vector<double> dfa = dmid;
    for (const auto& sd : seeds) {
      if (sd.point == SeedPoint::attn_branch && sd.block == b) dfa[sd.index] += 1.0;
    }
    std::vector<double> din(t * d, 0.0);
    if (m_.attn_skip(b)) din = dmid;
    if (grad_) {
      gemm_tn(c.o.data(), dfa.data(), gp(s.proj_w), d, t, d, true);
      bias_grad(dfa.data(), t, d, gp(s.proj_b));
    }
    std::vector<double> dout(t * d);
    gemm_nt(dfa.data(), p(s.proj_w), dout.data(), t, d, d, false);

    std::vector<double> dqkv(t * 3 * d, 0.0);
    std::vector<double> da(t);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < nh; ++h) {
      const double* a = c.attn.data() + h * t * t;
      for (std::size_t q = 0; q < t; ++q) {
        const double* dov = dout.data() + q * d + h * dh;
        double dot = 0.0;
        for (std::size_t k = 0; k < t; ++k) {
          const double w = a[q * t + k];
          const double* vv = c.qkv.data() + k * 3 * d + 2 * d + h * dh;
          double* dvv = dqkv.data() + k * 3 * d + 2 * d + h * dh;
          double s_ = 0.0;
          for (std::size_t j = 0; j < dh; ++j) {
            s_ += dov[j] * vv[j];
            dvv[j] += w * dov[j];
          }
          da[k] = s_;
          dot += w * s_;
        }
        const double* qv = c.qkv.data() + q * 3 * d + h * dh;
        double* dqv = dqkv.data() + q * 3 * d + h * dh;
        for (std::size_t k = 0; k < t; ++k) {
          const double ds = a[q * t + k] * (da[k] - dot) * scale;
          if (ds == 0.0) continue;
          const double* kv = c.qkv.data() + k * 3 * d + d + h * dh;
          double* dkv = dqkv.data() + k * 3 * d + d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) {
            dqv[j] += ds * kv[j];
            dkv[j] += ds * qv[j];
          }
        }
      }
    }
    if (grad_) {
      gemm_tn(c.n1.data(), dqkv.data(), gp(s.qkv_w), d, t, 3 * d, true);
      bias_grad(dqkv.data(), t, 3 * d, gp(s.qkv_b));
    }
    std::vector<double> dn1(t * d);
    gemm_nt(dqkv.data(), p(s.qkv_w), dn1.data(), t, 3 * d, d, false);
    layer_norm_backward(dn1.data(), c.xhat1.data(), c.rstd1.data(), p(s.ln1_g), t, d, din.data(), gp(s.ln1_g),
                        gp(s.ln1_b));
    dz = std::move(din);
  }

  void embed_backward(const std::vector<double>& dz, bool grad, double* dimage) {
    const std::size_t d = cfg_.width;
    const std::size_t t = cfg_.tokens();
    const std::size_t tp = cfg_.spatial_tokens();
    const std::size_t pd = cfg_.patch_dim();
    const std::size_t off = cfg_.cls_offset();
    const auto& s = m_.slots();
    const double* demb = dz.data() + off * d;
    if (grad) {
      double* gpos = gp(s.pos);
      for (std::size_t i = 0; i < t * d; ++i) gpos[i] += dz[i];
      if (off) {
        double* gcls = gp(s.cls);
        for (std::size_t j = 0; j < d; ++j) gcls[j] += dz[j];
      }
      gemm_tn(patches_.data(), demb, gp(s.patch_w), pd, tp, d, true);
      bias_grad(demb, tp, d, gp(s.patch_b));
    }
    if (dimage) {
      std::vector<double> dpatch(tp * pd);
      gemm_nt(demb, p(s.patch_w), dpatch.data(), tp, d, pd, false);
      const std::size_t g = cfg_.grid();
      const std::size_t ps = cfg_.patch_size;
      const std::size_t c = cfg_.channels;
      const std::size_t w = cfg_.image_size;
      for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
          const double* src = dpatch.data() + (gy * g + gx) * pd;
          for (std::size_t py = 0; py < ps; ++py) {
            double* dst = dimage + ((gy * ps + py) * w + gx * ps) * c;
            for (std::size_t j = 0; j < ps * c; ++j) dst[j] += src[py * ps * c + j];
          }
        }
      }
    }
  }

  const ViT& m_;
  const ViTConfig& cfg_;
  const double* p_;
  double* grad_ = nullptr;
  std::vector<bool> masked_;
  std::vector<double> patches_, z0_;
  std::vector<BlockCache> blocks_;
  std::vector<double> xhatf_, rstdf_, nf_, pooled_, logits_;
};

struct ParsedLayer {
  SeedPoint point;
  std::size_t block = 0;
  bool wide = false;  // mlp.hidden width
};

}  // namespace

std::string_view to_string(HeadType h) { return h == HeadType::cls ? "cls" : "gap"; }

HeadType parse_head_type(std::string_view text) {
  if (text == "cls" || text == "CLS") return HeadType::cls;
  if (text == "gap" || text == "GAP") return HeadType::gap;
  throw InvalidArgument("unknown head type '" + std::string(text) + "' (expected cls or gap)");
}

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw InvalidArgument("ViT image_size must be a positive multiple of patch_size");
  }
  if (heads == 0 || width == 0 || width % heads != 0) throw InvalidArgument("ViT width must be divisible by heads");
  if (channels == 0 || mlp_ratio == 0) throw InvalidArgument("ViT channels and mlp_ratio must be >= 1");
  if (num_classes < 2) throw InvalidArgument("ViT needs at least 2 classes");
  for (auto b : ablate_skip_at) {
    if (b >= depth) throw InvalidArgument("ablate_skip_at index " + std::to_string(b) + " >= depth");
  }
}

ViT::ViT(ViTConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.width;
  const std::size_t hd = config_.hidden();
  slots_.patch_w = layout_.add("patch.w", {config_.patch_dim(), d});
  slots_.patch_b = layout_.add("patch.b", {d});
  slots_.cls = config_.head_type == HeadType::cls ? layout_.add("cls", {d}) : kNone;
  slots_.pos = layout_.add("pos", {config_.tokens(), d});
  for (std::size_t b = 0; b < config_.depth; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    Slots::Block s{};
    s.ln1_g = layout_.add(pre + "ln1.g", {d});
    s.ln1_b = layout_.add(pre + "ln1.b", {d});
    s.qkv_w = layout_.add(pre + "qkv.w", {d, 3 * d});
    s.qkv_b = layout_.add(pre + "qkv.b", {3 * d});
    s.proj_w = layout_.add(pre + "proj.w", {d, d});
    s.proj_b = layout_.add(pre + "proj.b", {d});
    s.ln2_g = layout_.add(pre + "ln2.g", {d});
    s.ln2_b = layout_.add(pre + "ln2.b", {d});
    s.fc1_w = layout_.add(pre + "fc1.w", {d, hd});
    s.fc1_b = layout_.add(pre + "fc1.b", {hd});
    s.fc2_w = layout_.add(pre + "fc2.w", {hd, d});
    s.fc2_b = layout_.add(pre + "fc2.b", {d});
    slots_.blocks.push_back(s);
  }
  slots_.lnf_g = layout_.add("final_norm.g", {d});
  slots_.lnf_b = layout_.add("final_norm.b", {d});
  slots_.head_w = layout_.add("head.w", {d, config_.num_classes});
  slots_.head_b = layout_.add("head.b", {config_.num_classes});
}

bool ViT::attn_skip(std::size_t block) const {
  return !config_.ablate_skip_at.count(block) || config_.ablation == SkipAblation::mlp_only;
}

bool ViT::mlp_skip(std::size_t block) const {
  return !config_.ablate_skip_at.count(block) || config_.ablation == SkipAblation::attention_only;
}

std::vector<double> ViT::init_params(std::uint64_t seed) const {
  std::vector<double> params(layout_.total(), 0.0);
  Rng rng(seed);
  for (const auto& s : layout_.slots()) {
    const bool is_gain = s.name.ends_with(".g");
    const bool is_bias = s.name.ends_with(".b");
    for (std::size_t i = 0; i < s.size; ++i) {
      double& v = params[s.offset + i];
      if (is_gain) {
        v = 1.0;
      } else if (is_bias) {
        v = 0.0;
      } else {
        v = rng.truncated_normal(0.02);
      }
    }
  }
  return params;
}

std::string ViT::config_json() const {
  nlohmann::json j;
  j["architecture"] = "vit";
  j["image_size"] = config_.image_size;
  j["patch_size"] = config_.patch_size;
  j["channels"] = config_.channels;
  j["depth"] = config_.depth;
  j["width"] = config_.width;
  j["heads"] = config_.heads;
  j["mlp_ratio"] = config_.mlp_ratio;
  j["num_classes"] = config_.num_classes;
  j["head_type"] = std::string(to_string(config_.head_type));
  j["ablate_skip_at"] = std::vector<std::size_t>(config_.ablate_skip_at.begin(), config_.ablate_skip_at.end());
  j["ablation"] = config_.ablation == SkipAblation::both             ? "both"
                  : config_.ablation == SkipAblation::attention_only ? "attention"
                                                                     : "mlp";
  j["seed"] = config_.seed;
  j["block_order"] = "pre-norm";
  return j.dump();
}

ViTConfig vit_config_from_json(std::string_view text) {
  ViTConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.channels = j.value("channels", c.channels);
    c.depth = j.value("depth", c.depth);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.head_type = parse_head_type(j.value("head_type", std::string("cls")));
    for (auto b : j.value("ablate_skip_at", std::vector<std::size_t>{})) c.ablate_skip_at.insert(b);
    const auto ab = j.value("ablation", std::string("both"));
    c.ablation = ab == "attention" ? SkipAblation::attention_only
                 : ab == "mlp"     ? SkipAblation::mlp_only
                                   : SkipAblation::both;
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ViT config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<CapturePoint> ViT::capture_points() const {
  const std::size_t t = config_.tokens();
  const std::size_t d = config_.width;
  std::vector<CapturePoint> out;
  out.push_back({"embed", LayerKind::block_output, {t, d}});
  for (std::size_t b = 0; b < config_.depth; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    out.push_back({pre + "attn.skip", LayerKind::skip_branch, {t, d}});
    out.push_back({pre + "norm1", LayerKind::norm_output, {t, d}});
    out.push_back({pre + "attn.weights", LayerKind::attention_weights, {config_.heads, t, t}});
    out.push_back({pre + "attn.heads", LayerKind::attention_output, {t, d}});
    out.push_back({pre + "attn.branch", LayerKind::pre_residual_branch, {t, d}});
    out.push_back({pre + "mlp.skip", LayerKind::skip_branch, {t, d}});
    out.push_back({pre + "norm2", LayerKind::norm_output, {t, d}});
    out.push_back({pre + "mlp.hidden", LayerKind::mlp_hidden, {t, config_.hidden()}});
    out.push_back({pre + "mlp.branch", LayerKind::pre_residual_branch, {t, d}});
    out.push_back({pre + "out", LayerKind::block_output, {t, d}});
  }
  out.push_back({"final_norm", LayerKind::norm_output, {t, d}});
  return out;
}

ForwardResult ViT::forward(std::span<const double> params, const Tensor& images, const KindSet& capture) const {
  check_params(params);
  check_images(images);
  const std::size_t m = images.dim(0);
  const std::size_t img = config_.image_size * config_.image_size * config_.channels;
  const std::size_t t = config_.tokens();
  const std::size_t d = config_.width;

  ForwardResult r;
  r.logits = Tensor({m, config_.num_classes});
  std::vector<std::pair<CapturePoint, double*>> sinks;
  if (!capture.empty()) {
    for (auto& cp : capture_points()) {
      if (!capture.count(cp.kind)) continue;
      Shape full{m};
      full.insert(full.end(), cp.per_example.begin(), cp.per_example.end());
      auto [it, _] = r.captured.emplace(cp.name, Tensor(full));
      sinks.emplace_back(cp, it->second.data().data());
    }
  }
  ViTPass pass(*this, params);
  for (std::size_t i = 0; i < m; ++i) {
    pass.forward(images.data().data() + i * img);
    std::copy(pass.logits().begin(), pass.logits().end(), r.logits.data().begin() + static_cast<std::ptrdiff_t>(i * config_.num_classes));
    for (auto& [cp, dst] : sinks) {
      const std::size_t n = shape_volume(cp.per_example);
      const std::vector<double>* src = nullptr;
      if (cp.name == "embed") {
        src = &pass.embed();
      } else if (cp.name == "final_norm") {
        src = &pass.final_norm();
      } else {
        const auto dot = cp.name.find('.');
        const std::size_t b = std::stoul(cp.name.substr(5, dot - 5));
        const std::string rest = cp.name.substr(dot + 1);
        const BlockCache& c = pass.block(b);
        if (rest == "attn.skip") src = &c.z_in;
        else if (rest == "norm1") src = &c.n1;
        else if (rest == "attn.weights") src = &c.attn;
        else if (rest == "attn.heads") src = &c.o;
        else if (rest == "attn.branch") src = &c.f_attn;
        else if (rest == "mlp.skip") src = &c.z_mid;
        else if (rest == "norm2") src = &c.n2;
        else if (rest == "mlp.hidden") src = &c.hact;
        else if (rest == "mlp.branch") src = &c.f_mlp;
        else src = &c.z_out;
      }
      std::copy_n(src->data(), n, dst + i * n);
    }
  }
  (void)t;
  (void)d;
  return r;
}

Gradients ViT::backward(std::span<const double> params, const Tensor& images, std::span<const int> labels,
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
    ViTPass pass(*this, params);
    const std::size_t lo = ch * m / chunks;
    const std::size_t hi = (ch + 1) * m / chunks;
    Tensor one_logit({1, nc});
    Tensor dlogit;
    for (std::size_t i = lo; i < hi; ++i) {
      pass.forward(images.data().data() + i * img);
      std::copy(pass.logits().begin(), pass.logits().end(), one_logit.data().begin());
      const int label = labels[i];
      losses[i] = softmax_cross_entropy(one_logit, std::span<const int>(&label, 1), &dlogit);
      for (auto& v : dlogit.data()) v /= static_cast<double>(m);
      std::copy(pass.logits().begin(), pass.logits().end(), g.logits.data().begin() + static_cast<std::ptrdiff_t>(i * nc));
      pass.backward(dlogit.data().data(), {}, partial[ch].data(), g.input.data().data() + i * img);
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

namespace {

ParsedLayer parse_vit_layer(const ViTConfig& cfg, std::string_view layer) {
  if (layer == "embed") return {SeedPoint::embed, 0};
  if (layer == "final_norm") return {SeedPoint::final_norm, 0};
  if (layer.starts_with("block")) {
    const auto dot = layer.find('.');
    if (dot != std::string_view::npos && dot > 5) {
      std::size_t b = 0;
      for (char ch : layer.substr(5, dot - 5)) {
        if (ch < '0' || ch > '9') throw InvalidArgument("bad layer name '" + std::string(layer) + "'");
        b = b * 10 + static_cast<std::size_t>(ch - '0');
      }
      if (b >= cfg.depth) throw InvalidArgument("layer '" + std::string(layer) + "' beyond model depth");
      const auto rest = layer.substr(dot + 1);
      if (rest == "out") return {SeedPoint::out, b};
      if (rest == "attn.branch") return {SeedPoint::attn_branch, b};
      if (rest == "mlp.branch") return {SeedPoint::mlp_branch, b};
      if (rest == "mlp.skip") return {SeedPoint::mlp_skip, b};
      if (rest == "attn.skip") return b == 0 ? ParsedLayer{SeedPoint::embed, 0} : ParsedLayer{SeedPoint::out, b - 1};
    }
  }
  throw InvalidArgument("layer '" + std::string(layer) +
                        "' has no spatial token structure usable for input gradients");
}

}  // namespace

std::size_t ViT::center_location(std::string_view layer) const {
  parse_vit_layer(config_, layer);
  const std::size_t g = config_.grid();
  return config_.cls_offset() + (g / 2) * g + g / 2;
}

Tensor ViT::feature_input_jacobian(std::span<const double> params, const Tensor& image, std::string_view layer,
                                   std::size_t location) const {
  check_params(params);
  check_images(image);
  if (image.dim(0) != 1) throw InvalidArgument("feature_input_jacobian takes a single image");
  const ParsedLayer pl = parse_vit_layer(config_, layer);
  if (location >= config_.tokens()) throw InvalidArgument("token location out of range");
  const std::size_t d = config_.width;
  const std::size_t img = image.size();
  ViTPass pass(*this, params);
  pass.forward(image.data().data());
  Tensor out({d, config_.image_size, config_.image_size, config_.channels});
  for (std::size_t ch = 0; ch < d; ++ch) {
    const Seed seed{pl.point, pl.block, location * d + ch};
    pass.backward(nullptr, std::span<const Seed>(&seed, 1), nullptr, out.data().data() + ch * img);
  }
  return out;
}

DumpManifest ViT::manifest_template() const {
  DumpManifest m;
  m.architecture = "vit";
  m.block_order = "pre-norm";
  m.image_size = config_.image_size;
  m.patch_size = config_.patch_size;
  m.grid = config_.grid();
  m.has_cls_token = config_.head_type == HeadType::cls;
  m.attention_heads = config_.heads;
  m.seed = config_.seed;
  m.whole_layer_includes_cls = true;
  return m;
}

}  // namespace repscope
