#include "partformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pf {

namespace {

constexpr Scalar kBnEps = 1e-5;
constexpr Scalar kBnMomentum = 0.1;

void check_labels(const std::vector<int>& labels, std::size_t batch,
                  std::size_t num_classes, const char* op) {
  if (labels.size() != batch) {
    throw ContractError(std::string(op) + ": " + std::to_string(labels.size()) +
                        " labels for batch of " + std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError(std::string(op) + ": label " + std::to_string(y) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace

ClassifierBank make_classifier_bank(ParamStore& store, std::size_t dim,
                                    std::size_t num_classes, std::size_t parts,
                                    bool with_global) {
  ClassifierBank bank;
  bank.num_classes = num_classes;
  if (with_global) {
    bank.global_w = store.create("cls.global.w", {dim, num_classes});
  }
  for (std::size_t i = 0; i < parts; ++i) {
    bank.part_w.push_back(
        store.create("cls.part" + std::to_string(i) + ".w", {dim, num_classes}));
  }
  return bank;
}

NeckParams make_neck(ParamStore& store, const std::string& prefix,
                     std::size_t dim) {
  NeckParams n;
  n.gain = store.create(prefix + ".g", {dim}, InitKind::kOne);
  n.bias = store.create(prefix + ".b", {dim}, InitKind::kZero);
  n.running_mean =
      store.create(prefix + ".rm", {dim}, InitKind::kZero, /*trainable=*/false);
  n.running_var =
      store.create(prefix + ".rv", {dim}, InitKind::kOne, /*trainable=*/false);
  return n;
}

Tensor neck_apply(const NeckParams& neck, const Tensor& x, bool training) {
  if (x.ndim() != 2 || x.dim(1) != neck.gain.dim(0)) {
    throw ShapeError("neck_apply: input " + shape_str(x.shape()) +
                     " vs width " + shape_str(neck.gain.shape()));
  }
  const std::size_t b = x.dim(0);
  const std::size_t c = x.dim(1);
  if (!training) {
    if (grad_enabled() && (x.requires_grad() || neck.gain.requires_grad())) {
      throw ContractError("neck_apply: eval mode inside a gradient context");
    }
    // Inference path: normalize with the stored running statistics.
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& rm = neck.running_mean.data();
    const auto& rv = neck.running_var.data();
    const auto& g = neck.gain.data();
    const auto& bb = neck.bias.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const Scalar xh = (xv[i * c + j] - rm[j]) / std::sqrt(rv[j] + kBnEps);
        ov[i * c + j] = xh * g[j] + bb[j];
      }
    }
    return out;
  }
  if (b < 2) throw ContractError("neck_apply: batch stats need batch >= 2");

  auto inv_std = std::make_shared<std::vector<Scalar>>(c);
  auto xhat = std::make_shared<std::vector<Scalar>>(b * c);
  Tensor out = make_tape_op(
      x.shape(), {x, neck.gain, neck.bias},
      [xn = x.node(), gn = neck.gain.node(), bn = neck.bias.node(), inv_std,
       xhat, b, c](TensorData& o) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) {
          Scalar s1 = 0, s2 = 0;
          for (std::size_t i = 0; i < b; ++i) {
            const Scalar gy = o.grad[i * c + j];
            if (gn->requires_grad) gn->grad[j] += gy * (*xhat)[i * c + j];
            if (bn->requires_grad) bn->grad[j] += gy;
            const Scalar dxh = gy * gn->value[j];
            s1 += dxh;
            s2 += dxh * (*xhat)[i * c + j];
          }
          if (xn->requires_grad) {
            const Scalar inv = (*inv_std)[j];
            const Scalar nb = static_cast<Scalar>(b);
            for (std::size_t i = 0; i < b; ++i) {
              const Scalar dxh = o.grad[i * c + j] * gn->value[j];
              xn->grad[i * c + j] +=
                  inv * (dxh - s1 / nb - (*xhat)[i * c + j] * s2 / nb);
            }
          }
        }
      });
  const auto& xv = x.data();
  const auto& g = neck.gain.data();
  const auto& bb = neck.bias.data();
  auto& ov = out.data();
  auto& rm = const_cast<Tensor&>(neck.running_mean).data();
  auto& rv = const_cast<Tensor&>(neck.running_var).data();
  for (std::size_t j = 0; j < c; ++j) {
    Scalar mu = 0;
    for (std::size_t i = 0; i < b; ++i) mu += xv[i * c + j];
    mu /= static_cast<Scalar>(b);
    Scalar var = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const Scalar d = xv[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<Scalar>(b);
    const Scalar inv = 1.0 / std::sqrt(var + kBnEps);
    (*inv_std)[j] = inv;
    for (std::size_t i = 0; i < b; ++i) {
      const Scalar xh = (xv[i * c + j] - mu) * inv;
      (*xhat)[i * c + j] = xh;
      ov[i * c + j] = xh * g[j] + bb[j];
    }
    rm[j] = (1.0 - kBnMomentum) * rm[j] + kBnMomentum * mu;
    rv[j] = (1.0 - kBnMomentum) * rv[j] + kBnMomentum * var;
  }
  return out;
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("ce_loss: logits must be [B, C], got " +
                     shape_str(logits.shape()));
  }
  check_labels(labels, logits.dim(0), logits.dim(1), "ce_loss");
  Tensor lp = log_softmax_lastdim(logits);
  Tensor picked = gather_lastdim(lp, labels, 1);
  return mul_scalar(mean_all(picked), -1.0);
}

Tensor triplet_soft(const Tensor& features, const std::vector<int>& labels) {
  if (features.ndim() != 2) {
    throw ShapeError("triplet_soft: features must be [B, c], got " +
                     shape_str(features.shape()));
  }
  const std::size_t b = features.dim(0);
  if (labels.size() != b) {
    throw ContractError("triplet_soft: label count mismatch");
  }
  bool two_ids = false;
  for (std::size_t i = 1; i < b && !two_ids; ++i) {
    two_ids = labels[i] != labels[0];
  }
  if (!two_ids) {
    throw ContractError(
        "triplet_soft: batch contains a single identity, no negatives to mine");
  }

  Tensor gram = matmul(features, features, false, true);        // [B, B]
  Tensor sq = sum_lastdim(square(features));                    // [B]
  Tensor row_sq = reshape(expand_mid(reshape(sq, {b, 1}), b), {b, b});
  Tensor col_sq = tile0(sq, b);
  Tensor d2 = relu0(add(add(row_sq, col_sq), mul_scalar(gram, -2.0)));
  Tensor dist = sqrt_safe(d2);  // [B, B] Euclidean

  // Batch-hard mining on the forward values.
  const auto& dv = dist.data();
  std::vector<int> pos_idx(b), neg_idx(b);
  for (std::size_t i = 0; i < b; ++i) {
    Scalar best_p = -1.0;
    int pi = -1;
    Scalar best_n = std::numeric_limits<Scalar>::infinity();
    int ni = -1;
    for (std::size_t j = 0; j < b; ++j) {
      const Scalar d = dv[i * b + j];
      if (labels[j] == labels[i]) {
        if (d > best_p) {
          best_p = d;
          pi = static_cast<int>(j);
        }
      } else if (d < best_n) {
        best_n = d;
        ni = static_cast<int>(j);
      }
    }
    pos_idx[i] = pi;
    neg_idx[i] = ni;
  }
  Tensor d_ap = gather_lastdim(dist, pos_idx, 1);  // [B, 1]
  Tensor d_an = gather_lastdim(dist, neg_idx, 1);
  return mean_all(softplus(sub(d_ap, d_an)));
}

Tensor adc_loss(const Tensor& attn) {
  if (attn.ndim() != 3) {
    throw ShapeError("adc_loss: attention must be [B, N, M], got " +
                     shape_str(attn.shape()));
  }
  const std::size_t b = attn.dim(0);
  const std::size_t n = attn.dim(1);
  const std::size_t m = attn.dim(2);
  const auto& av = attn.data();
  for (std::size_t r = 0; r < b * n; ++r) {
    Scalar s = 0;
    for (std::size_t j = 0; j < m; ++j) s += av[r * m + j];
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractError("adc_loss: attention row " + std::to_string(r) +
                          " sums to " + std::to_string(s));
    }
  }
  Tensor gram = bmm(attn, attn, false, true);  // [B, N, N]
  Tensor eye = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) eye.data()[i * n + i] = 1.0;
  Tensor diff = sub(gram, tile0(eye, b));
  return mul_scalar(sum_all(abs_val(diff)), 1.0 / static_cast<Scalar>(b));
}

Tensor cdc_loss(const std::vector<Tensor>& part_logits,
                const std::vector<int>& labels) {
  const std::size_t n = part_logits.size();
  if (n < 2) return Tensor::scalar(0.0);  // no head pairs
  const std::size_t b = part_logits[0].dim(0);
  const std::size_t c = part_logits[0].dim(1);
  if (c < 2) {
    throw ContractError("cdc_loss: needs at least 2 classes to mask one out");
  }
  check_labels(labels, b, c, "cdc_loss");
  for (const Tensor& t : part_logits) {
    if (t.shape() != part_logits[0].shape()) {
      throw ShapeError("cdc_loss: inconsistent logit shapes " +
                       shape_str(t.shape()) + " vs " +
                       shape_str(part_logits[0].shape()));
    }
  }
  // Indices of every class except the ground truth, per row.
  std::vector<int> keep;
  keep.reserve(b * (c - 1));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      if (static_cast<int>(j) != labels[i]) keep.push_back(static_cast<int>(j));
    }
  }
  std::vector<Tensor> masked;
  masked.reserve(n);
  for (const Tensor& t : part_logits) {
    masked.push_back(softmax_lastdim(gather_lastdim(t, keep, c - 1)));
  }
  Tensor pair_sum;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      Tensor dot = sum_lastdim(mul(masked[i], masked[j]));  // [B]
      pair_sum = pair_sum.defined() ? add(pair_sum, dot) : dot;
    }
  }
  const Scalar coef = 2.0 / (static_cast<Scalar>(n) * static_cast<Scalar>(n - 1));
  return mul_scalar(mean_all(pair_sum), coef);
}

LossBreakdown total_loss(const FeatureSetBatch& fs,
                         const std::vector<int>& labels,
                         const ClassifierBank& bank, const LossWeights& w,
                         const NeckParams* neck, bool training) {
  if (w.alpha < 0 || w.beta < 0) {
    throw ContractError("total_loss: loss weights must be >= 0");
  }
  auto branch_loss = [&](const Tensor& feat, const Tensor& cls_w,
                         Tensor* logits_out) {
    Tensor cls_in = neck ? neck_apply(*neck, feat, training) : feat;
    Tensor logits = matmul(cls_in, cls_w);
    if (logits_out) *logits_out = logits;
    return add(ce_loss(logits, labels), triplet_soft(feat, labels));
  };

  LossBreakdown out;
  Tensor lg = fs.global.defined() && bank.global_w.defined()
                  ? branch_loss(fs.global, bank.global_w, nullptr)
                  : Tensor::scalar(0.0);

  Tensor lp;
  std::vector<Tensor> part_logits;
  if (!fs.parts.empty()) {
    if (fs.parts.size() != bank.part_w.size()) {
      throw ContractError("total_loss: " + std::to_string(fs.parts.size()) +
                          " parts vs " + std::to_string(bank.part_w.size()) +
                          " part classifiers");
    }
    for (std::size_t i = 0; i < fs.parts.size(); ++i) {
      Tensor logits;
      Tensor term = branch_loss(fs.parts[i], bank.part_w[i], &logits);
      part_logits.push_back(logits);
      lp = lp.defined() ? add(lp, term) : term;
    }
    lp = mul_scalar(lp, 1.0 / static_cast<Scalar>(fs.parts.size()));
  } else {
    lp = Tensor::scalar(0.0);
  }

  Tensor adc = fs.attn.defined() ? adc_loss(fs.attn) : Tensor::scalar(0.0);
  Tensor cdc = cdc_loss(part_logits, labels);

  out.global_term = lg.item();
  out.part_term = lp.item();
  out.adc = adc.item();
  out.cdc = cdc.item();
  out.total = add(add(add(lg, lp), mul_scalar(adc, w.alpha)),
                  mul_scalar(cdc, w.beta));
  return out;
}

}  // namespace pf
