#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "partformer/tensor.hpp"

namespace pf {

// ---- patchify ---------------------------------------------------------------

struct PatchifyConfig {
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t patch = 8;
  std::size_t stride = 8;
  std::size_t channels = 3;
};

struct PatchGrid {
  std::size_t h = 0;  // window count down the height
  std::size_t w = 0;  // window count across the width
  std::size_t m = 0;  // h * w image tokens
};

// Sliding-window patch count. Throws ConfigError when the patch does not fit
// or the stride is outside [1, patch].
PatchGrid patch_count(const PatchifyConfig& cfg);

// image: channel-major normalized pixels [channels * H * W]. Returns the
// [M, patch*patch*channels] patch matrix, windows in row-major grid order,
// each window flattened channel-major.
std::vector<Scalar> extract_patches(const std::vector<Scalar>& image,
                                    const PatchifyConfig& cfg);

// ---- configuration ----------------------------------------------------------

struct ModelConfig {
  std::size_t dim = 96;        // token width c
  std::size_t blocks = 4;      // total depth L (last block is the HDB)
  std::size_t heads = 6;       // backbone attention heads
  std::size_t hdb_heads = 6;   // part heads N
  std::size_t patch = 8;
  std::size_t stride = 8;
  std::size_t height = 64;
  std::size_t width = 32;
  Scalar sie_weight = 3.0;     // lambda on the camera embedding
  std::size_t num_cameras = 1;

  bool enable_hdb = true;
  bool hdb_residual = false;  // add the shared class-token input to outputs
  bool hdb_ffn = false;       // run outputs through an extra FFN sublayer
  bool hdb_use_cls = true;    // false: mean image-token query, no global token

  void validate() const;  // throws ConfigError
  PatchifyConfig patchify() const {
    return {height, width, patch, stride, 3};
  }
};

// ---- parameter store ----------------------------------------------------------

enum class InitKind { kZero, kOne, kTruncNormal };

// Named parameter registry with deterministic ordering (creation order
// defines both the init draw order and the checkpoint manifest order).
class ParamStore {
 public:
  Tensor& create(const std::string& name, Shape shape,
                 InitKind init = InitKind::kTruncNormal,
                 bool trainable = true);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  bool trainable(const std::string& name) const;

  std::size_t total_params(const std::string& prefix = "") const;
  // Draws initial values in creation order.
  void init(Rng& rng);
  void zero_grads();

 private:
  struct Entry {
    Tensor tensor;
    InitKind init;
    bool trainable;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> map_;
};

// ---- block parameter views ----------------------------------------------------

struct BlockParamsView {
  std::vector<Tensor> wq, wk, wv;  // per head, [c, c/heads]
  Tensor wl;                       // [c, c]
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct HdbParamsView {
  std::vector<Tensor> wq, wk, wv;  // per head, [c, c/N]
  std::vector<Tensor> proj;        // per head, unshared [c/N, c]
  Tensor ln_g, ln_b;
  bool residual = false;
  bool use_ffn = false;
  bool use_cls = true;
  Tensor ffn_ln_g, ffn_ln_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// ---- forward passes -------------------------------------------------------------

// Multi-head self-attention on x [B, T, c] (or [T, c]): per-head
// softmax(Q K^T / sqrt(d)) V, concatenated across heads, projected by wl.
Tensor msa_concat(const Tensor& x, const BlockParamsView& p);
// The same map written as a sum over heads of (a_i V_i) W_i with W_i the
// row-blocks of wl. Agrees with msa_concat up to float reassociation.
Tensor msa_headsum(const Tensor& x, const BlockParamsView& p);

// Pre-norm block: u = z + MSA(LN1(z)); out = u + FFN(LN2(u)).
Tensor transformer_block(const Tensor& z, const BlockParamsView& p);
// Same, additionally returning each head's class-token attention restricted
// to image tokens and renormalized: [B, heads, M]. Used for the attention
// diversity loss on the plain-ViT configuration.
Tensor transformer_block_with_attn(const Tensor& z, const BlockParamsView& p,
                                   Tensor* cls_attn);

struct FeatureSetBatch {
  Tensor global;              // [B, c]; undefined when the HDB drops the cls token
  std::vector<Tensor> parts;  // N tensors [B, c]
  Tensor attn;                // [B, N, M] class-token attention rows
};

// Head disentangling block on z [B, T, c]. Per head the class token queries
// the image tokens only; each head's aggregation is projected by its own
// unshared matrix. No residual, no FFN (unless the ablation flags say so).
// The global token runs the standard concat-projection over all T tokens
// using the stacked per-head projections.
FeatureSetBatch hdb_forward(const Tensor& z, const HdbParamsView& p);

// ---- the model ------------------------------------------------------------------

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const PatchGrid& grid() const { return grid_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  void init_params(Rng& rng) { params_.init(rng); }

  // patches: [B, M, patch*patch*3] normalized pixels; cams: B camera ids.
  FeatureSetBatch forward(const Tensor& patches,
                          const std::vector<int>& cams) const;
  // Embedding only: [B, M+1, c] token matrix (Eq. z0).
  Tensor embed(const Tensor& patches, const std::vector<int>& cams) const;

  BlockParamsView block_view(std::size_t layer) const;
  HdbParamsView hdb_view() const;

 private:
  ModelConfig cfg_;
  PatchGrid grid_;
  ParamStore params_;
};

}  // namespace pf
