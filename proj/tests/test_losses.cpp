#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsdg/gradcheck.hpp"
#include "fsdg/losses.hpp"
#include "support.hpp"

using namespace fsdg;
using fsdg::testing::random_tensor;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, Rng& rng, bool trainable = false) {
  Tensor raw({n, d});
  for (auto& v : raw.mutable_data()) v = rng.normal();
  const Tensor unit = l2_normalize_rows(raw);
  Tensor out(raw.shape(), fsdg::testing::values(unit));
  if (trainable) out.set_requires_grad();
  return out;
}

std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> v(n);
  for (auto& x : v) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  return v;
}

// A batch of B originals with their B stylized views appended.
EmbeddingBatch random_batch(std::size_t b, std::size_t d, int classes, int domains, Rng& rng,
                            bool trainable = false) {
  const auto cls = random_labels(b, classes, rng);
  const auto dom = random_labels(b, domains, rng);
  return pair_views(unit_rows(b, d, rng, trainable), unit_rows(b, d, rng, trainable), cls, dom);
}

// Direct transcription of the contrastive sum, with sets rebuilt from labels.
double brute_force(const EmbeddingBatch& e, double tau, bool domain_aware) {
  const std::size_t n = e.features.dim(0), d = e.features.dim(1);
  auto s = [&](std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d; ++k) acc += e.features[i * d + k] * e.features[j * d + k];
    return acc / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double den = 0.0;
    std::size_t npos = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (a == i) continue;
      const bool pos = e.class_labels[a] == e.class_labels[i];
      const bool dom = e.domain_labels[a] == e.domain_labels[i];
      if (!domain_aware || pos || dom) den += std::exp(s(i, a));
      npos += pos;
    }
    double acc = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      if (p != i && e.class_labels[p] == e.class_labels[i]) acc += std::log(std::exp(s(i, p)) / den);
    total += -acc / static_cast<double>(npos);
  }
  return total;
}

EmbeddingBatch permuted(const EmbeddingBatch& e, const std::vector<std::size_t>& perm) {
  const std::size_t d = e.features.dim(1);
  EmbeddingBatch out;
  std::vector<double> f;
  for (std::size_t i : perm) {
    for (std::size_t k = 0; k < d; ++k) f.push_back(e.features[i * d + k]);
    out.class_labels.push_back(e.class_labels[i]);
    out.domain_labels.push_back(e.domain_labels[i]);
  }
  out.features = Tensor(e.features.shape(), std::move(f));
  return out;
}

}  // namespace

// --- cross entropy ----------------------------------------------------------

TEST(CrossEntropy, HandExample) {
  const int label[] = {0};
  EXPECT_NEAR(cross_entropy(Tensor({1, 2}, {std::log(2.0), 0.0}), label).item(), -std::log(2.0 / 3.0), 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const int labels[] = {0, 3, 4};
  EXPECT_NEAR(cross_entropy(Tensor({3, 5}, 0.7), labels).item(), std::log(5.0), 1e-12);
}

TEST(CrossEntropy, ConfidentIsNearZero) {
  const int label[] = {0};
  EXPECT_LT(cross_entropy(Tensor({1, 2}, {20, -20}), label).item(), 1e-15);
}

TEST(CrossEntropy, OutOfRangeLabelIsIndexError) {
  const int label[] = {2};
  EXPECT_THROW(cross_entropy(Tensor({1, 2}), label), IndexError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({5, 4}, rng, -3, 3);
    const auto labels = random_labels(5, 4, rng);
    EXPECT_LT(check_gradients([&] { return cross_entropy(logits, labels); }, {logits}).max_rel_error, 1e-6);
  }
}

// --- consistency ------------------------------------------------------------

TEST(Consistency, UniformTwoClassIsLog2) {
  const Tensor u({1, 2}, 0.0);
  EXPECT_NEAR(consistency_loss(u, u, 1.0).item(), std::log(2.0), 1e-12);
}

TEST(Consistency, MinimizedWhenStudentMatchesTeacher) {
  Rng rng(2);
  const Tensor orig = random_tensor({1, 4}, rng, -2, 2, false);
  const double tau = 0.5;
  const Tensor p = softmax(orig, tau);
  double entropy = 0.0;
  for (double v : p.data()) entropy -= v * std::log(v);
  // a student whose logits are orig / tau reproduces the teacher
  const double at_match = consistency_loss(orig, mul(orig, 1.0 / tau), tau).item();
  EXPECT_NEAR(at_match, entropy, 1e-12);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor other = random_tensor({1, 4}, rng, -4, 4, false);
    EXPECT_GE(consistency_loss(orig, other, tau).item(), at_match - 1e-12);
  }
}

TEST(Consistency, SharpTeacherApproachesCrossEntropy) {
  Rng rng(3);
  const Tensor orig({1, 2}, {3, 0});
  const Tensor styl = random_tensor({1, 2}, rng, -1, 1, false);
  const int argmax[] = {0};
  EXPECT_NEAR(consistency_loss(orig, styl, 0.01).item(), cross_entropy(styl, argmax).item(), 1e-3);
}

TEST(Consistency, TemperatureOutsideUnitIntervalRejected) {
  const Tensor u({1, 2});
  EXPECT_THROW(consistency_loss(u, u, 0.0), ParameterError);
  EXPECT_THROW(consistency_loss(u, u, 1.5), ParameterError);
}

TEST(Consistency, TeacherReceivesNoGradient) {
  Rng rng(4);
  Tensor orig = random_tensor({3, 5}, rng);
  Tensor styl = random_tensor({3, 5}, rng);
  consistency_loss(orig, styl, 0.5).backward();
  for (double g : orig.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : styl.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(Consistency, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor orig = random_tensor({4, 3}, rng, -2, 2, false);
    Tensor styl = random_tensor({4, 3}, rng, -2, 2);
    EXPECT_LT(check_gradients([&] { return consistency_loss(orig, styl, 0.5); }, {styl}).max_rel_error, 1e-6);
  }
}

// --- contrast sets ----------------------------------------------------------

TEST(ContrastSets, StylizedViewAndCrossDomainSameClassArePositives) {
  // rows: photo dog, cartoon dog, sketch dog, photo cat, then stylized views
  const auto e = pair_views(Tensor({4, 1}, 1.0), Tensor({4, 1}, 1.0), std::vector<int>{0, 0, 0, 1},
                            std::vector<int>{0, 1, 2, 0});
  const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
  EXPECT_EQ(s.positives[0], (std::vector<std::size_t>{1, 2, 4, 5, 6}));
  EXPECT_EQ(s.same_domain[0], (std::vector<std::size_t>{3, 4, 7}));
  EXPECT_EQ(s.positives_or_same_domain(0), (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(s.positives_or_same_domain(1), (std::vector<std::size_t>{0, 2, 4, 5, 6}));
}

TEST(ContrastSets, SetLawsHoldOnRandomLabels) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(12);
    const auto cls = random_labels(n, 3, rng), dom = random_labels(n, 3, rng);
    const auto s = build_contrast_sets(cls, dom);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(std::count(s.all[i].begin(), s.all[i].end(), i), 0);
      EXPECT_EQ(s.all[i].size(), n - 1);
      EXPECT_TRUE(std::includes(s.all[i].begin(), s.all[i].end(), s.positives[i].begin(), s.positives[i].end()));
      EXPECT_TRUE(
          std::includes(s.all[i].begin(), s.all[i].end(), s.same_domain[i].begin(), s.same_domain[i].end()));
      for (std::size_t a : s.all[i]) {
        const bool in_p = std::binary_search(s.positives[i].begin(), s.positives[i].end(), a);
        const bool in_d = std::binary_search(s.same_domain[i].begin(), s.same_domain[i].end(), a);
        EXPECT_EQ(in_p, cls[a] == cls[i]);
        EXPECT_EQ(in_d, dom[a] == dom[i]);
      }
    }
  }
}

TEST(ContrastSets, SingleDomainUnionIsEverything) {
  const std::vector<int> cls{0, 1, 2, 0}, dom(4, 3);
  const auto s = build_contrast_sets(cls, dom);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.positives_or_same_domain(i), s.all[i]);
}

// --- contrastive losses -----------------------------------------------------

TEST(SupCon, IdenticalPairIsZero) {
  EmbeddingBatch e{Tensor({2, 2}, {1, 0, 1, 0}), {0, 0}, {0, 1}};
  EXPECT_NEAR(supcon_loss(e, build_contrast_sets(e.class_labels, e.domain_labels), 0.5).item(), 0.0, 1e-15);
}

TEST(SupCon, OrthogonalEmbeddingsGiveLogOfDenominatorSize) {
  // four mutually orthogonal rows: every per-positive term is log|A(i)| = log 3
  EmbeddingBatch e{Tensor({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}), {0, 1, 0, 1}, {0, 0, 1, 1}};
  const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
  EXPECT_NEAR(supcon_loss(e, s, 0.3).item(), 4 * std::log(3.0), 1e-12);
  // with domains: union for each anchor has two members
  EXPECT_NEAR(dsupcon_loss(e, s, 0.3).item(), 4 * std::log(2.0), 1e-12);
}

TEST(SupCon, EmptyPositiveSetIsContractError) {
  EmbeddingBatch e{Tensor({2, 1}, 1.0), {0, 1}, {0, 0}};
  EXPECT_THROW(supcon_loss(e, build_contrast_sets(e.class_labels, e.domain_labels), 0.5), ContractError);
}

TEST(SupCon, MatchesBruteForceOnSmallBatches) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto e = random_batch(1 + rng.below(4), 3, 2, 2, rng);
    const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
    EXPECT_NEAR(supcon_loss(e, s, 0.2).item(), brute_force(e, 0.2, false), 1e-10);
    EXPECT_NEAR(dsupcon_loss(e, s, 0.2).item(), brute_force(e, 0.2, true), 1e-10);
  }
}

TEST(SupCon, HandEnumeratedTwoDomainBatch) {
  // 2B = 4: original rows 0,1 from domains 0,1 with classes 0,1
  const double r = std::sqrt(0.5);
  const auto e = pair_views(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2, 2}, {r, r, -r, r}), std::vector<int>{0, 1},
                            std::vector<int>{0, 1});
  const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
  const double tau = 0.5;
  // anchor 0 sims with 1,2,3: 0, r, -r; P = {2}; D = {2}
  const double a0_sup = -std::log(std::exp(r / tau) / (1 + std::exp(r / tau) + std::exp(-r / tau)));
  const double a0_dsup = 0.0;
  // anchor 1 sims with 0,2,3: 0, r, r; P = {3}; D = {3}
  const double a1_sup = -std::log(std::exp(r / tau) / (1 + 2 * std::exp(r / tau)));
  // anchor 2 sims with 0,1,3: r, r, 0; P = {0}; D = {0}
  const double a2_sup = -std::log(std::exp(r / tau) / (2 * std::exp(r / tau) + 1));
  // anchor 3 sims with 0,1,2: -r, r, 0; P = {1}; D = {1}
  const double a3_sup = -std::log(std::exp(r / tau) / (std::exp(-r / tau) + std::exp(r / tau) + 1));
  EXPECT_NEAR(supcon_loss(e, s, tau).item(), a0_sup + a1_sup + a2_sup + a3_sup, 1e-12);
  EXPECT_NEAR(dsupcon_loss(e, s, tau).item(), 4 * a0_dsup, 1e-12);
}

TEST(SupCon, DomainAwareNeverExceedsPlain) {
  Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto e = random_batch(2 + rng.below(6), 4, 3, 3, rng);
    const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
    const double tau = 0.05 + rng.uniform();
    const double plain = supcon_loss(e, s, tau).item(), aware = dsupcon_loss(e, s, tau).item();
    EXPECT_LE(aware, plain + 1e-12);
    EXPECT_GE(aware, 0.0);
  }
}

TEST(SupCon, SingleDomainEqualsPlainExactly) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto e = random_batch(5, 4, 3, 1, rng);
    const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
    EXPECT_EQ(supcon_loss(e, s, 0.15).item(), dsupcon_loss(e, s, 0.15).item());
  }
}

TEST(SupCon, PermutationInvariant) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto e = random_batch(4, 3, 2, 2, rng);
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    const auto p = permuted(e, perm);
    const auto se = build_contrast_sets(e.class_labels, e.domain_labels);
    const auto sp = build_contrast_sets(p.class_labels, p.domain_labels);
    EXPECT_NEAR(supcon_loss(e, se, 0.2).item(), supcon_loss(p, sp, 0.2).item(), 1e-10);
    EXPECT_NEAR(dsupcon_loss(e, se, 0.2).item(), dsupcon_loss(p, sp, 0.2).item(), 1e-10);
  }
}

TEST(SupCon, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 3, d = 4;
    Tensor raw = random_tensor({2 * b, d}, rng);
    const auto cls = random_labels(b, 2, rng), dom = random_labels(b, 2, rng);
    auto loss = [&](bool aware) {
      const Tensor f = l2_normalize_rows(raw);
      const auto e = pair_views(slice0(f, 0, b), slice0(f, b, 2 * b), cls, dom);
      const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
      return aware ? dsupcon_loss(e, s, 0.3) : supcon_loss(e, s, 0.3);
    };
    EXPECT_LT(check_gradients([&] { return loss(false); }, {raw}).max_rel_error, 1e-4);
    EXPECT_LT(check_gradients([&] { return loss(true); }, {raw}).max_rel_error, 1e-4);
  }
}

TEST(SupCon, EmbeddingBatchValidation) {
  Rng rng(12);
  EXPECT_NO_THROW(random_batch(3, 4, 2, 2, rng).validate());
  EmbeddingBatch bad{Tensor({2, 2}, 1.0), {0, 0}, {0, 0}};
  EXPECT_THROW(bad.validate(), ContractError);
}

// --- total ------------------------------------------------------------------

TEST(TotalLoss, WeightedSums) {
  const auto s = [](double v) { return Tensor::scalar(v); };
  LossWeights w;
  w.lambda_cons = 0.3;
  w.lambda_dsup = 12;
  EXPECT_NEAR(total_loss(s(1), s(2), s(3), w).total.item(), 37.6, 1e-12);
  w.lambda_cons = 0.9;
  w.lambda_dsup = 6;
  EXPECT_NEAR(total_loss(s(1), s(2), s(3), w).total.item(), 20.8, 1e-12);
  w.lambda_cons = w.lambda_dsup = 0;
  EXPECT_EQ(total_loss(s(1.25), s(2), s(3), w).total.item(), 1.25);
  w.lambda_cons = -1;
  EXPECT_THROW(total_loss(s(1), s(2), s(3), w), ParameterError);
}

TEST(TotalLoss, ComponentsAreRetained) {
  const auto b = total_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor{}, LossWeights{});
  EXPECT_EQ(b.cons.item(), 2.0);
  EXPECT_FALSE(b.dsup.defined());
  EXPECT_NEAR(b.total.item(), 1.6, 1e-15);
}
