#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "partformer/metrics.hpp"

using namespace pf;

namespace {

// Brute-force reference: explicit argsort plus linear-scan average precision.
struct OracleReport {
  std::vector<Scalar> cmc;
  Scalar map = 0;
  std::size_t skipped = 0;
};

OracleReport brute_force_cmc_map(const FeatureMatrix& dist,
                                 const std::vector<int>& q_ids,
                                 const std::vector<int>& q_cams,
                                 const std::vector<int>& g_ids,
                                 const std::vector<int>& g_cams) {
  const std::size_t nq = dist.rows, ng = dist.cols;
  OracleReport rep;
  rep.cmc.assign(ng, 0.0);
  Scalar ap_sum = 0;
  std::size_t counted = 0;
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<std::size_t> keep;
    for (std::size_t g = 0; g < ng; ++g) {
      const bool junk = g_ids[g] == -1;
      const bool same_cam_same_id = g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q];
      if (!junk && !same_cam_same_id) keep.push_back(g);
    }
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
      return dist.data[q * ng + a] < dist.data[q * ng + b];
    });
    std::size_t relevant = 0;
    for (std::size_t g : keep) relevant += g_ids[g] == q_ids[q];
    if (relevant == 0) {
      ++rep.skipped;
      continue;
    }
    ++counted;
    std::size_t hits = 0;
    Scalar ap = 0;
    bool found = false;
    for (std::size_t r = 0; r < keep.size(); ++r) {
      if (g_ids[keep[r]] == q_ids[q]) {
        ++hits;
        ap += static_cast<Scalar>(hits) / static_cast<Scalar>(r + 1);
        if (!found) {
          found = true;
          for (std::size_t k = r; k < ng; ++k) rep.cmc[k] += 1.0;
        }
      }
    }
    ap_sum += ap / static_cast<Scalar>(relevant);
  }
  for (Scalar& v : rep.cmc) v /= static_cast<Scalar>(counted);
  rep.map = ap_sum / static_cast<Scalar>(counted);
  return rep;
}

FeatureMatrix matrix_from(const std::vector<std::vector<Scalar>>& rows) {
  FeatureMatrix m;
  m.rows = rows.size();
  m.cols = rows.empty() ? 0 : rows[0].size();
  for (const auto& r : rows) m.data.insert(m.data.end(), r.begin(), r.end());
  return m;
}

}  // namespace

TEST_CASE("fuse closed forms") {
  FeatureSet fs;
  fs.global = {1.0, 2.0};
  fs.parts = {{1.0, 2.0}, {1.0, 2.0}};
  auto f = fuse(fs);
  CHECK(f == std::vector<Scalar>{1.0, 2.0});

  FeatureSet one;
  one.global = {2.0};
  one.parts = {{0.0}};
  CHECK(fuse(one) == std::vector<Scalar>{1.0});
}

TEST_CASE("fuse matches a scalar recomputation") {
  Rng rng(11);
  FeatureSet fs;
  const std::size_t c = 9, n = 6;
  fs.global.resize(c);
  for (Scalar& v : fs.global) v = rng.uniform(-1, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Scalar> p(c);
    for (Scalar& v : p) v = rng.uniform(-1, 1);
    fs.parts.push_back(p);
  }
  auto f = fuse(fs);
  for (std::size_t j = 0; j < c; ++j) {
    Scalar s = fs.global[j];
    for (const auto& p : fs.parts) s += p[j];
    CHECK(std::abs(f[j] - s / 7.0) < 1e-12);
  }
}

TEST_CASE("l2_normalize produces unit rows") {
  std::vector<Scalar> v{3.0, 4.0};
  l2_normalize(v);
  CHECK(v[0] == doctest::Approx(0.6));
  CHECK(v[1] == doctest::Approx(0.8));
  std::vector<Scalar> z{0.0, 0.0};
  l2_normalize(z);  // zero vector left alone
  CHECK(z == std::vector<Scalar>{0.0, 0.0});
}

TEST_CASE("distance_matrix closed forms") {
  FeatureMatrix q = matrix_from({{1, 0}, {0, 1}});
  FeatureMatrix g = matrix_from({{1, 0}, {0, 1}});
  FeatureMatrix d = distance_matrix(q, g);
  CHECK(d.data[0] == doctest::Approx(0.0));
  CHECK(d.data[1] == doctest::Approx(2.0));  // orthogonal unit vectors
  CHECK(d.data[2] == doctest::Approx(2.0));
  CHECK(d.data[3] == doctest::Approx(0.0));

  CHECK_THROWS_AS(distance_matrix(matrix_from({{1, 0}}), matrix_from({{1, 0, 0}})),
                  ShapeError);
}

TEST_CASE("distance_matrix matches the pairwise-loop oracle") {
  Rng rng(13);
  std::vector<std::vector<Scalar>> qs(3, std::vector<Scalar>(8));
  std::vector<std::vector<Scalar>> gs(5, std::vector<Scalar>(8));
  for (auto& r : qs) {
    for (Scalar& v : r) v = rng.uniform(-1, 1);
    l2_normalize(r);
  }
  for (auto& r : gs) {
    for (Scalar& v : r) v = rng.uniform(-1, 1);
    l2_normalize(r);
  }
  FeatureMatrix d = distance_matrix(matrix_from(qs), matrix_from(gs));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      Scalar s = 0;
      for (std::size_t k = 0; k < 8; ++k) {
        const Scalar diff = qs[i][k] - gs[j][k];
        s += diff * diff;
      }
      CHECK(std::abs(d.data[i * 5 + j] - s) < 1e-10);
    }
  }
}

TEST_CASE("cmc_map single-query closed cases") {
  // One query, nearest valid gallery item is the only match.
  FeatureMatrix dist;
  dist.rows = 1;
  dist.cols = 3;
  dist.data = {0.1, 0.5, 0.9};
  EvalReport rep = cmc_map(dist, {7}, {0}, {7, 1, 2}, {1, 0, 0});
  CHECK(rep.cmc[0] == 1.0);
  CHECK(rep.map == 1.0);

  // Matches at ranks 1 and 3 out of three valid items: AP = (1 + 2/3) / 2.
  dist.data = {0.1, 0.5, 0.9};
  rep = cmc_map(dist, {7}, {0}, {7, 1, 7}, {1, 0, 2});
  CHECK(rep.map == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(rep.cmc[0] == 1.0);
}

TEST_CASE("cmc_map is invariant to gallery permutation at unique distances") {
  Rng rng(17);
  const std::size_t nq = 4, ng = 12;
  FeatureMatrix dist;
  dist.rows = nq;
  dist.cols = ng;
  dist.data.resize(nq * ng);
  for (Scalar& v : dist.data) v = rng.uniform(0, 2);
  std::vector<int> q_ids{1, 2, 3, 4}, q_cams{0, 0, 1, 1};
  std::vector<int> g_ids(ng), g_cams(ng);
  for (std::size_t g = 0; g < ng; ++g) {
    g_ids[g] = 1 + static_cast<int>(g % 4);
    g_cams[g] = static_cast<int>(g / 4 + 2);  // all cross-camera
  }
  EvalReport base = cmc_map(dist, q_ids, q_cams, g_ids, g_cams);

  std::vector<std::size_t> perm(ng);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = ng; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  FeatureMatrix pd;
  pd.rows = nq;
  pd.cols = ng;
  pd.data.resize(nq * ng);
  std::vector<int> p_ids(ng), p_cams(ng);
  for (std::size_t g = 0; g < ng; ++g) {
    p_ids[g] = g_ids[perm[g]];
    p_cams[g] = g_cams[perm[g]];
    for (std::size_t q = 0; q < nq; ++q) {
      pd.data[q * ng + g] = dist.data[q * ng + perm[g]];
    }
  }
  EvalReport shuffled = cmc_map(pd, q_ids, q_cams, p_ids, p_cams);
  CHECK(shuffled.map == doctest::Approx(base.map).epsilon(1e-12));
  for (std::size_t k = 0; k < ng; ++k) {
    CHECK(shuffled.cmc[k] == doctest::Approx(base.cmc[k]).epsilon(1e-12));
  }
}

TEST_CASE("cmc_map equals the brute-force oracle on random instances") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nq = 1 + rng.index(20);
    const std::size_t ng = 5 + rng.index(46);
    const int ids = 2 + static_cast<int>(rng.index(6));
    const int cams = 2 + static_cast<int>(rng.index(3));
    FeatureMatrix dist;
    dist.rows = nq;
    dist.cols = ng;
    dist.data.resize(nq * ng);
    for (Scalar& v : dist.data) v = rng.uniform(0, 2);
    std::vector<int> q_ids(nq), q_cams(nq), g_ids(ng), g_cams(ng);
    for (std::size_t q = 0; q < nq; ++q) {
      q_ids[q] = 1 + static_cast<int>(rng.index(ids));
      q_cams[q] = static_cast<int>(rng.index(cams));
    }
    for (std::size_t g = 0; g < ng; ++g) {
      // ~8% junk entries to exercise the -1 filter.
      g_ids[g] = rng.index(12) == 0 ? -1 : 1 + static_cast<int>(rng.index(ids));
      g_cams[g] = static_cast<int>(rng.index(cams));
    }
    // Ensure at least one query keeps a valid match.
    g_ids[0] = q_ids[0];
    g_cams[0] = (q_cams[0] + 1) % cams;

    EvalReport got = cmc_map(dist, q_ids, q_cams, g_ids, g_cams);
    OracleReport want = brute_force_cmc_map(dist, q_ids, q_cams, g_ids, g_cams);
    CHECK(got.map == want.map);
    CHECK(got.skipped_queries == want.skipped);
    REQUIRE(got.cmc.size() == want.cmc.size());
    for (std::size_t k = 0; k < got.cmc.size(); ++k) {
      CHECK(got.cmc[k] == want.cmc[k]);
    }
  }
}

TEST_CASE("cmc curve is monotone and saturates at one") {
  Rng rng(23);
  const std::size_t nq = 6, ng = 20;
  FeatureMatrix dist;
  dist.rows = nq;
  dist.cols = ng;
  dist.data.resize(nq * ng);
  for (Scalar& v : dist.data) v = rng.uniform(0, 2);
  std::vector<int> q_ids(nq), q_cams(nq, 0), g_ids(ng), g_cams(ng, 1);
  for (std::size_t q = 0; q < nq; ++q) q_ids[q] = static_cast<int>(q);
  for (std::size_t g = 0; g < ng; ++g) g_ids[g] = static_cast<int>(g % nq);
  EvalReport rep = cmc_map(dist, q_ids, q_cams, g_ids, g_cams);
  for (std::size_t k = 1; k < rep.cmc.size(); ++k) {
    CHECK(rep.cmc[k] >= rep.cmc[k - 1]);
  }
  CHECK(rep.cmc.back() == 1.0);
  CHECK(rep.skipped_queries == 0);
}

TEST_CASE("mAP is invariant under strictly increasing distance transforms") {
  Rng rng(29);
  const std::size_t nq = 5, ng = 15;
  FeatureMatrix dist;
  dist.rows = nq;
  dist.cols = ng;
  dist.data.resize(nq * ng);
  for (Scalar& v : dist.data) v = rng.uniform(0.1, 2);
  std::vector<int> q_ids(nq), q_cams(nq, 0), g_ids(ng), g_cams(ng, 1);
  for (std::size_t q = 0; q < nq; ++q) q_ids[q] = static_cast<int>(q);
  for (std::size_t g = 0; g < ng; ++g) g_ids[g] = static_cast<int>(g % nq);
  EvalReport base = cmc_map(dist, q_ids, q_cams, g_ids, g_cams);
  FeatureMatrix warped = dist;
  for (Scalar& v : warped.data) v = std::exp(3.0 * v) - 0.5;
  EvalReport after = cmc_map(warped, q_ids, q_cams, g_ids, g_cams);
  CHECK(after.map == base.map);
  CHECK(after.cmc == base.cmc);
}

TEST_CASE("planting a same-camera duplicate of the query changes nothing") {
  Rng rng(31);
  const std::size_t nq = 4, ng = 10;
  FeatureMatrix dist;
  dist.rows = nq;
  dist.cols = ng;
  dist.data.resize(nq * ng);
  for (Scalar& v : dist.data) v = rng.uniform(0.2, 2);
  std::vector<int> q_ids{1, 2, 3, 4}, q_cams{0, 1, 0, 1};
  std::vector<int> g_ids(ng), g_cams(ng);
  for (std::size_t g = 0; g < ng; ++g) {
    g_ids[g] = 1 + static_cast<int>(g % 4);
    g_cams[g] = 2 + static_cast<int>(g % 2);
  }
  EvalReport base = cmc_map(dist, q_ids, q_cams, g_ids, g_cams);

  // Append a zero-distance duplicate of query 0 with the query's camera. The
  // filter drops it for query 0; for the others it ranks dead last, which
  // leaves every precision-at-hit untouched.
  FeatureMatrix planted;
  planted.rows = nq;
  planted.cols = ng + 1;
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < ng; ++g) {
      planted.data.push_back(dist.data[q * ng + g]);
    }
    planted.data.push_back(q == 0 ? 0.0 : 99.0);
  }
  std::vector<int> p_ids = g_ids, p_cams = g_cams;
  p_ids.push_back(q_ids[0]);
  p_cams.push_back(q_cams[0]);
  EvalReport after = cmc_map(planted, q_ids, q_cams, p_ids, p_cams);
  CHECK(after.map == base.map);
  for (std::size_t k = 0; k < base.cmc.size(); ++k) {
    CHECK(after.cmc[k] == base.cmc[k]);
  }
}

TEST_CASE("every query filtered out raises a data error") {
  FeatureMatrix dist;
  dist.rows = 1;
  dist.cols = 1;
  dist.data = {0.3};
  CHECK_THROWS_AS(cmc_map(dist, {5}, {0}, {9}, {1}), DataError);
}

TEST_CASE("mean off-diagonal attention gram") {
  FeatureSet a;
  a.attn_rows = {{1, 0, 0, 0}, {0, 1, 0, 0}};  // disjoint -> 0
  FeatureSet b;
  b.attn_rows = {{1, 0, 0, 0}, {1, 0, 0, 0}};  // identical -> 1
  CHECK(mean_offdiag_attention_gram({a}) == 0.0);
  CHECK(mean_offdiag_attention_gram({b}) == 1.0);
  CHECK(mean_offdiag_attention_gram({a, b}) == doctest::Approx(0.5));
}
