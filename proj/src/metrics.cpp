#include "partformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pf {

std::vector<FeatureSet> split_batch(const FeatureSetBatch& batch) {
  std::size_t b = 0;
  if (batch.global.defined()) {
    b = batch.global.dim(0);
  } else if (!batch.parts.empty()) {
    b = batch.parts[0].dim(0);
  } else {
    throw ContractError("split_batch: empty feature set");
  }
  std::vector<FeatureSet> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (batch.global.defined()) {
      const std::size_t c = batch.global.dim(1);
      const auto& gv = batch.global.data();
      out[i].global.assign(gv.begin() + i * c, gv.begin() + (i + 1) * c);
    }
    for (const Tensor& p : batch.parts) {
      const std::size_t c = p.dim(1);
      const auto& pv = p.data();
      out[i].parts.emplace_back(pv.begin() + i * c, pv.begin() + (i + 1) * c);
    }
    if (batch.attn.defined()) {
      const std::size_t n = batch.attn.dim(1);
      const std::size_t m = batch.attn.dim(2);
      const auto& av = batch.attn.data();
      for (std::size_t h = 0; h < n; ++h) {
        const Scalar* r = av.data() + (i * n + h) * m;
        out[i].attn_rows.emplace_back(r, r + m);
      }
    }
  }
  return out;
}

std::vector<Scalar> fuse(const FeatureSet& fs) {
  if (fs.global.empty() && fs.parts.empty()) {
    throw ContractError("fuse: feature set has no vectors");
  }
  const std::size_t c = fs.global.empty() ? fs.parts[0].size() : fs.global.size();
  std::vector<Scalar> out(c, 0.0);
  std::size_t count = 0;
  if (!fs.global.empty()) {
    for (std::size_t j = 0; j < c; ++j) out[j] += fs.global[j];
    ++count;
  }
  for (const auto& p : fs.parts) {
    if (p.size() != c) throw ShapeError("fuse: inconsistent feature widths");
    for (std::size_t j = 0; j < c; ++j) out[j] += p[j];
    ++count;
  }
  const Scalar inv = 1.0 / static_cast<Scalar>(count);
  for (Scalar& v : out) v *= inv;
  return out;
}

void l2_normalize(std::vector<Scalar>& v) {
  Scalar n2 = 0;
  for (Scalar x : v) n2 += x * x;
  if (n2 <= 0) return;
  const Scalar inv = 1.0 / std::sqrt(n2);
  for (Scalar& x : v) x *= inv;
}

FeatureMatrix distance_matrix(const FeatureMatrix& q, const FeatureMatrix& g) {
  if (q.cols != g.cols) {
    throw ShapeError("distance_matrix: feature widths disagree, " +
                     std::to_string(q.cols) + " vs " + std::to_string(g.cols));
  }
  FeatureMatrix d;
  d.rows = q.rows;
  d.cols = g.rows;
  d.data.assign(d.rows * d.cols, 0.0);
  for (std::size_t i = 0; i < q.rows; ++i) {
    const Scalar* qr = q.row(i);
    for (std::size_t j = 0; j < g.rows; ++j) {
      const Scalar* gr = g.row(j);
      Scalar dot = 0;
      for (std::size_t k = 0; k < q.cols; ++k) dot += qr[k] * gr[k];
      d.data[i * d.cols + j] = std::max(0.0, 2.0 - 2.0 * dot);
    }
  }
  return d;
}

EvalReport cmc_map(const FeatureMatrix& dist, const std::vector<int>& q_ids,
                   const std::vector<int>& q_cams, const std::vector<int>& g_ids,
                   const std::vector<int>& g_cams) {
  const std::size_t nq = dist.rows;
  const std::size_t ng = dist.cols;
  if (q_ids.size() != nq || q_cams.size() != nq || g_ids.size() != ng ||
      g_cams.size() != ng) {
    throw ContractError("cmc_map: id/camera arrays do not match the matrix");
  }
  EvalReport rep;
  rep.cmc.assign(ng, 0.0);
  rep.per_query_ap.assign(nq, -1.0);
  std::size_t counted = 0;
  Scalar ap_sum = 0;

  std::vector<std::pair<Scalar, std::size_t>> order;
  for (std::size_t qi = 0; qi < nq; ++qi) {
    order.clear();
    std::size_t relevant = 0;
    for (std::size_t gi = 0; gi < ng; ++gi) {
      if (g_ids[gi] == -1) continue;  // junk
      if (g_ids[gi] == q_ids[qi] && g_cams[gi] == q_cams[qi]) continue;
      order.emplace_back(dist.data[qi * ng + gi], gi);
      if (g_ids[gi] == q_ids[qi]) ++relevant;
    }
    if (relevant == 0) {
      ++rep.skipped_queries;
      continue;
    }
    std::sort(order.begin(), order.end());  // distance, then gallery index
    Scalar ap = 0;
    std::size_t hits = 0;
    std::size_t first_hit = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (g_ids[order[r].second] == q_ids[qi]) {
        ++hits;
        ap += static_cast<Scalar>(hits) / static_cast<Scalar>(r + 1);
        if (hits == 1) first_hit = r;
      }
    }
    ap /= static_cast<Scalar>(relevant);
    rep.per_query_ap[qi] = ap;
    ap_sum += ap;
    for (std::size_t k = first_hit; k < ng; ++k) rep.cmc[k] += 1.0;
    ++counted;
  }
  if (counted == 0) {
    throw DataError("cmc_map: every query was filtered out");
  }
  for (Scalar& v : rep.cmc) v /= static_cast<Scalar>(counted);
  rep.map = ap_sum / static_cast<Scalar>(counted);
  return rep;
}

Scalar mean_offdiag_attention_gram(const std::vector<FeatureSet>& sets) {
  Scalar total = 0;
  std::size_t images = 0;
  for (const FeatureSet& fs : sets) {
    const std::size_t n = fs.attn_rows.size();
    if (n < 2) continue;
    Scalar acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        Scalar dot = 0;
        for (std::size_t t = 0; t < fs.attn_rows[i].size(); ++t) {
          dot += fs.attn_rows[i][t] * fs.attn_rows[j][t];
        }
        acc += dot;
      }
    }
    total += acc / (0.5 * static_cast<Scalar>(n) * static_cast<Scalar>(n - 1));
    ++images;
  }
  return images ? total / static_cast<Scalar>(images) : 0.0;
}

}  // namespace pf
