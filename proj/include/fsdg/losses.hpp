#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fsdg/ops.hpp"

namespace fsdg {

inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) == 0) throw DimensionError("cross_entropy: expected non-empty [B, C] logits");
  return neg(mean(pick(log_softmax(logits), labels)));
}

/// Cross-entropy of the student `styl` against the detached, temperature
/// sharpened teacher distribution of `orig`.
inline Tensor consistency_loss(const Tensor& orig, const Tensor& styl, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw ParameterError("consistency_loss: temperature must lie in (0, 1], got " + std::to_string(tau));
  }
  if (orig.shape() != styl.shape()) throw DimensionError("consistency_loss: prediction shapes differ");
  const Tensor teacher = stop_gradient(softmax(orig, tau));
  const Tensor per_row = sum(mul(teacher, log_softmax(styl)), {1});
  return neg(mean(per_row));
}

/// L2-normalized embeddings with one class and one domain label per row.
struct EmbeddingBatch {
  Tensor features;
  std::vector<int> class_labels;
  std::vector<int> domain_labels;

  void validate(double tol = 1e-6) const {
    if (features.rank() != 2) throw DimensionError("embedding batch: expected [N, D] features");
    const std::size_t n = features.dim(0), d = features.dim(1);
    if (class_labels.size() != n || domain_labels.size() != n) {
      throw DimensionError("embedding batch: need one class and one domain label per row");
    }
    for (std::size_t i = 0; i < n; ++i) {
      double norm2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm2 += features[i * d + j] * features[i * d + j];
      if (std::abs(std::sqrt(norm2) - 1.0) > tol) {
        throw ContractError("embedding batch: row " + std::to_string(i) + " is not unit length");
      }
    }
  }
};

/// Per anchor: all other rows (A), same-class rows (P), same-domain rows (D).
struct ContrastSets {
  std::vector<std::vector<std::size_t>> all;
  std::vector<std::vector<std::size_t>> positives;
  std::vector<std::vector<std::size_t>> same_domain;

  std::size_t size() const { return all.size(); }

  /// Sorted union of P(i) and D(i).
  std::vector<std::size_t> positives_or_same_domain(std::size_t i) const {
    std::vector<std::size_t> out;
    std::set_union(positives[i].begin(), positives[i].end(), same_domain[i].begin(), same_domain[i].end(),
                   std::back_inserter(out));
    return out;
  }
};

inline ContrastSets build_contrast_sets(std::span<const int> class_labels, std::span<const int> domain_labels) {
  if (class_labels.size() != domain_labels.size()) {
    throw DimensionError("build_contrast_sets: class and domain label counts differ");
  }
  const std::size_t n = class_labels.size();
  ContrastSets s;
  s.all.resize(n);
  s.positives.resize(n);
  s.same_domain.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < n; ++a) {
      if (a == i) continue;
      s.all[i].push_back(a);
      if (class_labels[a] == class_labels[i]) s.positives[i].push_back(a);
      if (domain_labels[a] == domain_labels[i]) s.same_domain[i].push_back(a);
    }
  }
  return s;
}

/// Rows of `orig` followed by rows of `styl`; stylized rows repeat the labels
/// of their originals.
inline EmbeddingBatch pair_views(const Tensor& orig, const Tensor& styl, std::span<const int> class_labels,
                                 std::span<const int> domain_labels) {
  EmbeddingBatch e;
  e.features = concat0(orig, styl);
  for (int rep = 0; rep < 2; ++rep) {
    e.class_labels.insert(e.class_labels.end(), class_labels.begin(), class_labels.end());
    e.domain_labels.insert(e.domain_labels.end(), domain_labels.begin(), domain_labels.end());
  }
  return e;
}

namespace detail {

inline Tensor mask_tensor(std::size_t n, const std::vector<std::vector<std::size_t>>& rows) {
  Tensor m({n, n});
  auto v = m.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : rows[i]) v[i * n + j] = 1.0;
  return m;
}

/// Max over masked entries of each row, as a constant [N, 1].
inline Tensor masked_row_max(const Tensor& x, const Tensor& mask) {
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j] != 0.0) best = std::max(best, x[i * m + j]);
    if (std::isfinite(best)) y[i] = best;
  }
  return Tensor({n, 1}, std::move(y));
}

/// -sum_i 1/|P(i)| sum_{p in P(i)} log(exp(s_ip) / sum_{a in denom(i)} exp(s_ia))
inline Tensor contrastive(const EmbeddingBatch& emb, const ContrastSets& sets, double tau,
                          const std::vector<std::vector<std::size_t>>& denominators, const char* op) {
  if (!(tau > 0.0)) throw ParameterError(std::string(op) + ": temperature must be positive");
  const std::size_t n = emb.features.rank() == 2 ? emb.features.dim(0) : 0;
  if (n == 0 || sets.size() != n) throw DimensionError(std::string(op) + ": sets do not match the batch");
  std::vector<double> inv_pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (sets.positives[i].empty()) {
      throw ContractError(std::string(op) + ": anchor " + std::to_string(i) + " has no positive");
    }
    inv_pos[i] = 1.0 / static_cast<double>(sets.positives[i].size());
  }
  const Tensor sim = mul(matmul(emb.features, transpose(emb.features)), 1.0 / tau);
  const Tensor pos = mask_tensor(n, sets.positives);
  const Tensor den = mask_tensor(n, denominators);
  const Tensor shift = masked_row_max(sim, den);
  const Tensor log_den = add(log(sum(mul(exp(sub(sim, shift)), den), {1}, true)), shift);
  const Tensor pos_sum = sum(mul(sim, pos), {1}, true);
  std::vector<double> counts(n);
  for (std::size_t i = 0; i < n; ++i) counts[i] = static_cast<double>(sets.positives[i].size());
  const Tensor term = mul(sub(pos_sum, mul(log_den, Tensor({n, 1}, counts))), Tensor({n, 1}, inv_pos));
  return neg(sum(term));
}

}  // namespace detail

inline Tensor supcon_loss(const EmbeddingBatch& emb, const ContrastSets& sets, double tau) {
  return detail::contrastive(emb, sets, tau, sets.all, "supcon_loss");
}

inline Tensor dsupcon_loss(const EmbeddingBatch& emb, const ContrastSets& sets, double tau) {
  std::vector<std::vector<std::size_t>> den(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) den[i] = sets.positives_or_same_domain(i);
  return detail::contrastive(emb, sets, tau, den, "dsupcon_loss");
}

struct LossWeights {
  double lambda_cons = 0.3;
  double lambda_dsup = 12.0;
  double tau_cons = 0.5;
  double tau_dsup = 0.15;

  void validate() const {
    if (!(lambda_cons >= 0.0) || !(lambda_dsup >= 0.0)) throw ParameterError("loss weights must be non-negative");
    if (!(tau_cons > 0.0 && tau_cons <= 1.0)) throw ParameterError("tau_cons must lie in (0, 1]");
    if (!(tau_dsup > 0.0)) throw ParameterError("tau_dsup must be positive");
  }
};

struct LossBundle {
  Tensor total;
  Tensor ce;
  Tensor cons;
  Tensor dsup;
};

/// total = ce + lambda_cons * cons + lambda_dsup * dsup. Undefined components
/// are treated as absent.
inline LossBundle total_loss(const Tensor& ce, const Tensor& cons, const Tensor& dsup, const LossWeights& w) {
  if (!(w.lambda_cons >= 0.0) || !(w.lambda_dsup >= 0.0)) throw ParameterError("loss weights must be non-negative");
  Tensor total = ce;
  if (cons.defined()) total = add(total, mul(cons, w.lambda_cons));
  if (dsup.defined()) total = add(total, mul(dsup, w.lambda_dsup));
  return {total, ce, cons, dsup};
}

}  // namespace fsdg
