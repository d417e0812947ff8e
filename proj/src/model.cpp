#include "partformer/model.hpp"

#include <cmath>

namespace pf {

// ---- patchify ---------------------------------------------------------------

PatchGrid patch_count(const PatchifyConfig& cfg) {
  if (cfg.patch == 0 || cfg.patch > cfg.height || cfg.patch > cfg.width) {
    throw ConfigError("patch size " + std::to_string(cfg.patch) +
                      " does not fit a " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width) + " image");
  }
  if (cfg.stride < 1 || cfg.stride > cfg.patch) {
    throw ConfigError("stride " + std::to_string(cfg.stride) +
                      " must be in [1, patch=" + std::to_string(cfg.patch) +
                      "]");
  }
  PatchGrid g;
  g.h = (cfg.height - cfg.patch) / cfg.stride + 1;
  g.w = (cfg.width - cfg.patch) / cfg.stride + 1;
  g.m = g.h * g.w;
  return g;
}

std::vector<Scalar> extract_patches(const std::vector<Scalar>& image,
                                    const PatchifyConfig& cfg) {
  const PatchGrid g = patch_count(cfg);
  const std::size_t H = cfg.height, W = cfg.width, P = cfg.patch,
                    C = cfg.channels;
  if (image.size() != C * H * W) {
    throw ShapeError("extract_patches: image has " +
                     std::to_string(image.size()) + " values, expected " +
                     std::to_string(C * H * W));
  }
  std::vector<Scalar> out(g.m * P * P * C);
  std::size_t w_idx = 0;
  for (std::size_t gy = 0; gy < g.h; ++gy) {
    for (std::size_t gx = 0; gx < g.w; ++gx, ++w_idx) {
      const std::size_t y0 = gy * cfg.stride;
      const std::size_t x0 = gx * cfg.stride;
      Scalar* dst = out.data() + w_idx * P * P * C;
      for (std::size_t ch = 0; ch < C; ++ch) {
        const Scalar* plane = image.data() + ch * H * W;
        for (std::size_t py = 0; py < P; ++py) {
          const Scalar* row = plane + (y0 + py) * W + x0;
          for (std::size_t px = 0; px < P; ++px) *dst++ = row[px];
        }
      }
    }
  }
  return out;
}

// ---- configuration -------------------------------------------------------------

void ModelConfig::validate() const {
  if (dim < 2) throw ConfigError("model.dim must be >= 2");
  if (blocks < 1) throw ConfigError("model.blocks must be >= 1");
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("model.dim " + std::to_string(dim) +
                      " must be divisible by model.heads " +
                      std::to_string(heads));
  }
  if (hdb_heads < 1 || dim % hdb_heads != 0) {
    throw ConfigError("model.dim " + std::to_string(dim) +
                      " must be divisible by model.hdb_heads " +
                      std::to_string(hdb_heads));
  }
  if (num_cameras < 1) throw ConfigError("model.num_cameras must be >= 1");
  if (sie_weight < 0) throw ConfigError("model.sie_weight must be >= 0");
  patch_count(patchify());
}

// ---- parameter store -------------------------------------------------------------

Tensor& ParamStore::create(const std::string& name, Shape shape, InitKind init,
                           bool trainable) {
  if (map_.count(name)) throw ContractError("duplicate parameter " + name);
  Entry e{Tensor::zeros(std::move(shape), trainable), init, trainable};
  auto [it, ok] = map_.emplace(name, std::move(e));
  order_.push_back(name);
  return it->second.tensor;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = map_.find(name);
  if (it == map_.end()) throw ContractError("unknown parameter " + name);
  return it->second.tensor;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw ContractError("unknown parameter " + name);
  return it->second.tensor;
}

bool ParamStore::has(const std::string& name) const { return map_.count(name); }

bool ParamStore::trainable(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw ContractError("unknown parameter " + name);
  return it->second.trainable;
}

std::size_t ParamStore::total_params(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& name : order_) {
    if (name.rfind(prefix, 0) == 0) n += map_.at(name).tensor.numel();
  }
  return n;
}

void ParamStore::init(Rng& rng) {
  for (const auto& name : order_) {
    Entry& e = map_.at(name);
    switch (e.init) {
      case InitKind::kZero:
        std::fill(e.tensor.data().begin(), e.tensor.data().end(), 0.0);
        break;
      case InitKind::kOne:
        std::fill(e.tensor.data().begin(), e.tensor.data().end(), 1.0);
        break;
      case InitKind::kTruncNormal:
        for (Scalar& v : e.tensor.data()) v = rng.trunc_normal(0.02);
        break;
    }
  }
}

void ParamStore::zero_grads() {
  for (const auto& name : order_) map_.at(name).tensor.zero_grad();
}

// ---- attention -------------------------------------------------------------------

namespace {

struct HeadStreams {
  std::vector<Tensor> av;      // per head, [.., T, d]
  std::vector<Tensor> scores;  // per head, [.., T, T] pre-softmax
};

HeadStreams msa_core(const Tensor& x, const BlockParamsView& p,
                     bool keep_scores) {
  const std::size_t heads = p.wq.size();
  const std::size_t c = x.shape().back();
  const std::size_t d = c / heads;
  const Scalar inv_sqrt_d = 1.0 / std::sqrt(static_cast<Scalar>(d));
  HeadStreams hs;
  for (std::size_t i = 0; i < heads; ++i) {
    Tensor q = matmul_collapsed(x, p.wq[i]);
    Tensor k = matmul_collapsed(x, p.wk[i]);
    Tensor v = matmul_collapsed(x, p.wv[i]);
    Tensor scores = mul_scalar(bmm(q, k, false, true), inv_sqrt_d);
    Tensor a = softmax_lastdim(scores);
    hs.av.push_back(bmm(a, v));
    if (keep_scores) hs.scores.push_back(scores);
  }
  return hs;
}

Tensor ffn_apply(const Tensor& x, const Tensor& w1, const Tensor& b1,
                 const Tensor& w2, const Tensor& b2) {
  Tensor h = gelu(add_rowvec(matmul_collapsed(x, w1), b1));
  return add_rowvec(matmul_collapsed(h, w2), b2);
}

}  // namespace

Tensor msa_concat(const Tensor& x, const BlockParamsView& p) {
  HeadStreams hs = msa_core(x, p, false);
  Tensor cat = concat(hs.av, x.ndim() - 1);
  return matmul_collapsed(cat, p.wl);
}

Tensor msa_headsum(const Tensor& x, const BlockParamsView& p) {
  HeadStreams hs = msa_core(x, p, false);
  const std::size_t c = x.shape().back();
  const std::size_t d = c / p.wq.size();
  Tensor out;
  for (std::size_t i = 0; i < hs.av.size(); ++i) {
    Tensor wi = slice(p.wl, 0, i * d, d);  // [d, c] row block
    Tensor term = matmul_collapsed(hs.av[i], wi);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

Tensor transformer_block(const Tensor& z, const BlockParamsView& p) {
  return transformer_block_with_attn(z, p, nullptr);
}

Tensor transformer_block_with_attn(const Tensor& z, const BlockParamsView& p,
                                   Tensor* cls_attn) {
  Tensor x = layernorm(z, p.ln1_g, p.ln1_b);
  HeadStreams hs = msa_core(x, p, cls_attn != nullptr);
  Tensor cat = concat(hs.av, x.ndim() - 1);
  Tensor u = add(z, matmul_collapsed(cat, p.wl));
  Tensor y = layernorm(u, p.ln2_g, p.ln2_b);
  Tensor out = add(u, ffn_apply(y, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2));
  if (cls_attn) {
    // Per head: the class token's scores against image tokens only,
    // softmaxed, so every row is a distribution over the M image tokens.
    const std::size_t nd = z.ndim();
    const std::size_t t = z.shape()[nd - 2];
    std::vector<Tensor> rows;
    for (Tensor& s : hs.scores) {
      Tensor cls_row = slice(s, nd - 2, 0, 1);
      Tensor img_cols = slice(cls_row, nd - 1, 1, t - 1);
      rows.push_back(softmax_lastdim(img_cols));
    }
    *cls_attn = concat(rows, nd - 2);
  }
  return out;
}

FeatureSetBatch hdb_forward(const Tensor& z, const HdbParamsView& p) {
  if (z.ndim() != 3) {
    throw ShapeError("hdb_forward: expects [B, T, c], got " +
                     shape_str(z.shape()));
  }
  const std::size_t b = z.dim(0);
  const std::size_t t = z.dim(1);
  const std::size_t c = z.dim(2);
  const std::size_t m = t - 1;
  const std::size_t heads = p.wq.size();
  const std::size_t d = c / heads;
  const Scalar inv_sqrt_d = 1.0 / std::sqrt(static_cast<Scalar>(d));

  Tensor x = layernorm(z, p.ln_g, p.ln_b);
  Tensor z_cls = reshape(slice(z, 1, 0, 1), {b, c});

  auto post = [&](Tensor f) {
    if (p.residual) f = add(f, z_cls);
    if (p.use_ffn) {
      Tensor h = layernorm(f, p.ffn_ln_g, p.ffn_ln_b);
      f = add(f, ffn_apply(h, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2));
    }
    return f;
  };

  FeatureSetBatch fs;
  std::vector<Tensor> attn_rows;
  Tensor global_sum;
  for (std::size_t i = 0; i < heads; ++i) {
    Tensor q_full = matmul_collapsed(x, p.wq[i]);
    Tensor k_full = matmul_collapsed(x, p.wk[i]);
    Tensor v_full = matmul_collapsed(x, p.wv[i]);

    Tensor q;
    if (p.use_cls) {
      q = slice(q_full, 1, 0, 1);  // [B, 1, d]
    } else {
      Tensor q_img = slice(q_full, 1, 1, m);
      Tensor ones = Tensor::full({b, 1, m}, 1.0 / static_cast<Scalar>(m));
      q = bmm(ones, q_img);  // mean image-token query
    }
    Tensor k_img = slice(k_full, 1, 1, m);
    Tensor v_img = slice(v_full, 1, 1, m);

    Tensor scores = mul_scalar(bmm(q, k_img, false, true), inv_sqrt_d);
    Tensor a_img = softmax_lastdim(scores);  // [B, 1, M]
    attn_rows.push_back(a_img);
    Tensor part_raw = reshape(bmm(a_img, v_img), {b, d});
    fs.parts.push_back(post(matmul_collapsed(part_raw, p.proj[i])));

    if (p.use_cls) {
      Tensor scores_full = mul_scalar(bmm(q, k_full, false, true), inv_sqrt_d);
      Tensor a_full = softmax_lastdim(scores_full);  // [B, 1, T]
      Tensor h = reshape(bmm(a_full, v_full), {b, d});
      Tensor g_term = matmul_collapsed(h, p.proj[i]);
      global_sum = global_sum.defined() ? add(global_sum, g_term) : g_term;
    }
  }
  if (p.use_cls) fs.global = post(global_sum);
  fs.attn = concat(attn_rows, 1);  // [B, N, M]
  return fs;
}

// ---- model ---------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  grid_ = patch_count(cfg_.patchify());
  const std::size_t c = cfg_.dim;
  const std::size_t ppc = cfg_.patch * cfg_.patch * 3;

  params_.create("embed.proj.w", {ppc, c});
  params_.create("embed.proj.b", {c}, InitKind::kZero);
  params_.create("embed.cls", {c}, InitKind::kZero);
  params_.create("embed.pos", {grid_.m + 1, c}, InitKind::kZero);
  params_.create("embed.sie", {cfg_.num_cameras, c}, InitKind::kZero);

  const std::size_t std_blocks = cfg_.enable_hdb ? cfg_.blocks - 1 : cfg_.blocks;
  const std::size_t d = c / cfg_.heads;
  for (std::size_t l = 0; l < std_blocks; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    params_.create(pre + "ln1.g", {c}, InitKind::kOne);
    params_.create(pre + "ln1.b", {c}, InitKind::kZero);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const std::string hp = pre + "h" + std::to_string(h) + ".";
      params_.create(hp + "wq", {c, d});
      params_.create(hp + "wk", {c, d});
      params_.create(hp + "wv", {c, d});
    }
    params_.create(pre + "proj.w", {c, c});
    params_.create(pre + "ln2.g", {c}, InitKind::kOne);
    params_.create(pre + "ln2.b", {c}, InitKind::kZero);
    params_.create(pre + "ffn.w1", {c, 4 * c});
    params_.create(pre + "ffn.b1", {4 * c}, InitKind::kZero);
    params_.create(pre + "ffn.w2", {4 * c, c});
    params_.create(pre + "ffn.b2", {c}, InitKind::kZero);
  }

  if (cfg_.enable_hdb) {
    const std::size_t dh = c / cfg_.hdb_heads;
    params_.create("hdb.ln.g", {c}, InitKind::kOne);
    params_.create("hdb.ln.b", {c}, InitKind::kZero);
    for (std::size_t h = 0; h < cfg_.hdb_heads; ++h) {
      const std::string hp = "hdb.h" + std::to_string(h) + ".";
      params_.create(hp + "wq", {c, dh});
      params_.create(hp + "wk", {c, dh});
      params_.create(hp + "wv", {c, dh});
      params_.create(hp + "proj", {dh, c});
    }
    if (cfg_.hdb_ffn) {
      params_.create("hdb.ffn.ln.g", {c}, InitKind::kOne);
      params_.create("hdb.ffn.ln.b", {c}, InitKind::kZero);
      params_.create("hdb.ffn.w1", {c, 4 * c});
      params_.create("hdb.ffn.b1", {4 * c}, InitKind::kZero);
      params_.create("hdb.ffn.w2", {4 * c, c});
      params_.create("hdb.ffn.b2", {c}, InitKind::kZero);
    }
  }
}

BlockParamsView Model::block_view(std::size_t layer) const {
  const std::string pre = "block" + std::to_string(layer) + ".";
  BlockParamsView v;
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    const std::string hp = pre + "h" + std::to_string(h) + ".";
    v.wq.push_back(params_.at(hp + "wq"));
    v.wk.push_back(params_.at(hp + "wk"));
    v.wv.push_back(params_.at(hp + "wv"));
  }
  v.wl = params_.at(pre + "proj.w");
  v.ln1_g = params_.at(pre + "ln1.g");
  v.ln1_b = params_.at(pre + "ln1.b");
  v.ln2_g = params_.at(pre + "ln2.g");
  v.ln2_b = params_.at(pre + "ln2.b");
  v.ffn_w1 = params_.at(pre + "ffn.w1");
  v.ffn_b1 = params_.at(pre + "ffn.b1");
  v.ffn_w2 = params_.at(pre + "ffn.w2");
  v.ffn_b2 = params_.at(pre + "ffn.b2");
  return v;
}

HdbParamsView Model::hdb_view() const {
  HdbParamsView v;
  for (std::size_t h = 0; h < cfg_.hdb_heads; ++h) {
    const std::string hp = "hdb.h" + std::to_string(h) + ".";
    v.wq.push_back(params_.at(hp + "wq"));
    v.wk.push_back(params_.at(hp + "wk"));
    v.wv.push_back(params_.at(hp + "wv"));
    v.proj.push_back(params_.at(hp + "proj"));
  }
  v.ln_g = params_.at("hdb.ln.g");
  v.ln_b = params_.at("hdb.ln.b");
  v.residual = cfg_.hdb_residual;
  v.use_ffn = cfg_.hdb_ffn;
  v.use_cls = cfg_.hdb_use_cls;
  if (cfg_.hdb_ffn) {
    v.ffn_ln_g = params_.at("hdb.ffn.ln.g");
    v.ffn_ln_b = params_.at("hdb.ffn.ln.b");
    v.ffn_w1 = params_.at("hdb.ffn.w1");
    v.ffn_b1 = params_.at("hdb.ffn.b1");
    v.ffn_w2 = params_.at("hdb.ffn.w2");
    v.ffn_b2 = params_.at("hdb.ffn.b2");
  }
  return v;
}

Tensor Model::embed(const Tensor& patches, const std::vector<int>& cams) const {
  if (patches.ndim() != 3 || patches.dim(1) != grid_.m ||
      patches.dim(2) != cfg_.patch * cfg_.patch * 3) {
    throw ShapeError("embed: patches " + shape_str(patches.shape()) +
                     ", expected [B," + std::to_string(grid_.m) + "," +
                     std::to_string(cfg_.patch * cfg_.patch * 3) + "]");
  }
  const std::size_t b = patches.dim(0);
  if (cams.size() != b) {
    throw ContractError("embed: " + std::to_string(cams.size()) +
                        " camera ids for batch of " + std::to_string(b));
  }
  const std::size_t t = grid_.m + 1;
  Tensor tokens = add_rowvec(matmul_collapsed(patches, params_.at("embed.proj.w")),
                             params_.at("embed.proj.b"));
  Tensor cls_rows = reshape(tile0(params_.at("embed.cls"), b), {b, 1, cfg_.dim});
  Tensor z = concat({cls_rows, tokens}, 1);
  z = add(z, tile0(params_.at("embed.pos"), b));
  Tensor sie_rows =
      mul_scalar(rows_lookup(params_.at("embed.sie"), cams), cfg_.sie_weight);
  z = add(z, expand_mid(sie_rows, t));
  return z;
}

FeatureSetBatch Model::forward(const Tensor& patches,
                               const std::vector<int>& cams) const {
  Tensor z = embed(patches, cams);
  if (cfg_.enable_hdb) {
    for (std::size_t l = 0; l + 1 < cfg_.blocks; ++l) {
      z = transformer_block(z, block_view(l));
    }
    return hdb_forward(z, hdb_view());
  }
  FeatureSetBatch fs;
  for (std::size_t l = 0; l < cfg_.blocks; ++l) {
    if (l + 1 < cfg_.blocks) {
      z = transformer_block(z, block_view(l));
    } else {
      z = transformer_block_with_attn(z, block_view(l), &fs.attn);
    }
  }
  const std::size_t b = z.dim(0);
  fs.global = reshape(slice(z, 1, 0, 1), {b, cfg_.dim});
  return fs;
}

}  // namespace pf
