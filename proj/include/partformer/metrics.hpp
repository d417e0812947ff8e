#pragma once

#include <cstddef>
#include <vector>

#include "partformer/model.hpp"
#include "partformer/tensor.hpp"

namespace pf {

// Per-image inference output, extracted from a FeatureSetBatch.
struct FeatureSet {
  std::vector<Scalar> global;
  std::vector<std::vector<Scalar>> parts;
  std::vector<std::vector<Scalar>> attn_rows;  // N rows over M image tokens
};

std::vector<FeatureSet> split_batch(const FeatureSetBatch& batch);

// (f_g + sum_i f_i) / (N + 1); when the global token is absent, the plain
// mean of the parts. Not normalized.
std::vector<Scalar> fuse(const FeatureSet& fs);
// In-place scaling to unit L2 norm (no-op on the zero vector).
void l2_normalize(std::vector<Scalar>& v);

// Row-major dense matrix of retrieval features.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Scalar> data;

  Scalar* row(std::size_t r) { return data.data() + r * cols; }
  const Scalar* row(std::size_t r) const { return data.data() + r * cols; }
};

struct GalleryIndex {
  FeatureMatrix features;  // L2-normalized rows
  std::vector<int> ids;
  std::vector<int> cams;
};

// Squared Euclidean distances between L2-normalized rows: 2 - 2 cos.
FeatureMatrix distance_matrix(const FeatureMatrix& q, const FeatureMatrix& g);

struct EvalReport {
  std::vector<Scalar> cmc;  // cmc[k-1] = top-k match rate
  Scalar map = 0;
  std::vector<Scalar> per_query_ap;  // -1 marks skipped queries
  std::size_t skipped_queries = 0;   // queries without any valid match

  Scalar rank(std::size_t k) const { return k <= cmc.size() ? cmc[k - 1] : 1.0; }
};

// Single-gallery-shot CMC / mAP with Market-style filtering: gallery entries
// sharing both id and camera with the query are removed, junk ids (-1) are
// always removed, ranking ties break on gallery index.
EvalReport cmc_map(const FeatureMatrix& dist, const std::vector<int>& q_ids,
                   const std::vector<int>& q_cams, const std::vector<int>& g_ids,
                   const std::vector<int>& g_cams);

// Mean off-diagonal entry of the per-image attention Gram matrix a a^T,
// averaged over images: the head-diversity signal reported by evaluate.
Scalar mean_offdiag_attention_gram(const std::vector<FeatureSet>& sets);

}  // namespace pf
