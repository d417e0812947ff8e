#pragma once

#include <vector>

#include "partformer/model.hpp"
#include "partformer/tensor.hpp"

namespace pf {

// One classifier per feature branch: a global head plus N independent part
// heads. Weights are plain [c, num_classes] matrices without bias, so each
// column acts as a class prototype.
struct ClassifierBank {
  Tensor global_w;             // undefined when the model has no global branch
  std::vector<Tensor> part_w;  // one per part head
  std::size_t num_classes = 0;
};

ClassifierBank make_classifier_bank(ParamStore& store, std::size_t dim,
                                    std::size_t num_classes, std::size_t parts,
                                    bool with_global);

// BatchNorm feature neck (optional, off by default). Classifier logits are
// computed on the normalized features while the triplet loss stays on the
// raw ones. Running stats live in the store as non-trainable tensors.
struct NeckParams {
  Tensor gain, bias;
  Tensor running_mean, running_var;  // not trainable, updated in train mode
};

NeckParams make_neck(ParamStore& store, const std::string& prefix,
                     std::size_t dim);
Tensor neck_apply(const NeckParams& neck, const Tensor& x, bool training);

struct LossWeights {
  Scalar alpha = 0.1;  // attention diversity
  Scalar beta = 3.0;   // correlation diversity
};

// Mean over the batch of -log softmax(logits)[label].
Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels);

// Batch-hard soft-margin triplet on Euclidean distances: per anchor the
// farthest same-id sample (the anchor itself counts as a positive) and the
// nearest different-id sample, combined by softplus(d_ap - d_an).
Tensor triplet_soft(const Tensor& features, const std::vector<int>& labels);

// Attention diversity: per image ||a a^T - I||_1 over the head Gram matrix,
// averaged across the batch. attn is [B, N, M] with simplex rows.
Tensor adc_loss(const Tensor& attn);

// Correlation diversity: per image, mask the ground-truth logit out of each
// head's score vector, softmax the rest, and average the pairwise dot
// products across head pairs. part_logits holds N tensors [B, C].
Tensor cdc_loss(const std::vector<Tensor>& part_logits,
                const std::vector<int>& labels);

struct LossBreakdown {
  Tensor total;
  Scalar global_term = 0;  // ce + triplet on the global token
  Scalar part_term = 0;    // head-averaged ce + triplet on parts
  Scalar adc = 0;          // unweighted constraint values
  Scalar cdc = 0;
};

// Full objective: L_g + L_p + alpha*adc + beta*cdc. Missing branches
// (no global token, fewer than two heads) contribute exact zeros.
LossBreakdown total_loss(const FeatureSetBatch& fs,
                         const std::vector<int>& labels,
                         const ClassifierBank& bank, const LossWeights& w,
                         const NeckParams* neck = nullptr,
                         bool training = true);

}  // namespace pf
