#pragma once

#include <cmath>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include "fsdg/ops.hpp"
#include "fsdg/random.hpp"

namespace fsdg {

inline constexpr double kStyleEps = 1e-5;

struct FrequencyPair {
  Tensor low;
  Tensor high;
};

/// Batch-wise per-channel statistics of a [B, C, H, W] map; both are [C].
struct StyleStats {
  Tensor mu;
  Tensor sigma;
};

struct StyleDistribution {
  double mu_hat = 0.0;
  double sigma_hat2 = 0.0;
  double mu_tilde = 0.0;
  double sigma_tilde2 = 0.0;
};

/// Gradient constants, [C] each.
struct SampledStyle {
  Tensor mu_new;
  Tensor sigma_new;
};

struct StyleScale {
  double s_mu = 1.0;
  double s_sigma = 1.0;

  void validate() const {
    if (!(s_mu >= 0.0) || !(s_sigma >= 0.0)) throw ParameterError("style scale must be non-negative");
  }
};

enum class StylizeTarget { low, high, whole };

inline const char* to_string(StylizeTarget t) {
  switch (t) {
    case StylizeTarget::low: return "low";
    case StylizeTarget::high: return "high";
    case StylizeTarget::whole: return "whole";
  }
  return "?";
}

inline StylizeTarget parse_stylize_target(const std::string& s) {
  if (s == "low") return StylizeTarget::low;
  if (s == "high") return StylizeTarget::high;
  if (s == "whole") return StylizeTarget::whole;
  throw ParameterError("stylize target must be one of low|high|whole, got '" + s + "'");
}

inline FrequencyPair decompose(const Tensor& z) {
  Tensor low = upsample_nearest2(avg_pool2(z));
  Tensor high = sub(z, low);
  return {std::move(low), std::move(high)};
}

inline StyleStats batch_style_stats(const Tensor& z, double eps = kStyleEps) {
  if (z.rank() != 4) throw DimensionError("batch_style_stats: expected [B, C, H, W], got " + to_string(z.shape()));
  if (z.dim(0) * z.dim(2) * z.dim(3) < 2) {
    throw DomainError("batch_style_stats: need at least two positions per channel, got shape " +
                      to_string(z.shape()));
  }
  auto [mu, var] = reduce_stats(z, {0, 2, 3});
  return {std::move(mu), clamp_min(sqrt(var), eps)};
}

namespace detail {

inline std::pair<double, double> mean_and_variance(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, var / static_cast<double>(v.size())};
}

}  // namespace detail

inline StyleDistribution style_distribution(const StyleStats& stats) {
  if (stats.mu.numel() == 0 || stats.mu.numel() != stats.sigma.numel()) {
    throw DimensionError("style_distribution: need matching non-empty channel vectors");
  }
  StyleDistribution d;
  std::tie(d.mu_hat, d.sigma_hat2) = detail::mean_and_variance(stats.mu.data());
  std::tie(d.mu_tilde, d.sigma_tilde2) = detail::mean_and_variance(stats.sigma.data());
  return d;
}

/// Draws all C means first, then all C standard deviations.
inline SampledStyle sample_style(const StyleDistribution& dist, const StyleScale& scale, std::size_t channels,
                                 Rng& rng, double eps = kStyleEps) {
  if (channels == 0) throw DimensionError("sample_style: zero channels");
  scale.validate();
  const double sd_mu = std::sqrt(scale.s_mu * dist.sigma_hat2);
  const double sd_sigma = std::sqrt(scale.s_sigma * dist.sigma_tilde2);
  std::vector<double> mu(channels), sigma(channels);
  for (auto& m : mu) m = rng.normal(dist.mu_hat, sd_mu);
  for (auto& s : sigma) s = std::max(rng.normal(dist.mu_tilde, sd_sigma), eps);
  return {Tensor::vector(std::move(mu)), Tensor::vector(std::move(sigma))};
}

inline Tensor apply_style(const Tensor& z, const StyleStats& stats, const SampledStyle& style) {
  const std::size_t c = z.rank() == 4 ? z.dim(1) : 0;
  if (c == 0 || stats.mu.numel() != c || stats.sigma.numel() != c || style.mu_new.numel() != c ||
      style.sigma_new.numel() != c) {
    throw DimensionError("apply_style: channel extents disagree for map " + to_string(z.shape()));
  }
  const Tensor normalized = div(sub(z, stats.mu), stats.sigma);
  return add(mul(normalized, style.sigma_new), style.mu_new);
}

/// Everything one stylization call produced; `output` is what the network sees.
struct Stylized {
  Tensor output;
  FrequencyPair parts;
  StyleStats stats;
  SampledStyle style;
};

namespace detail {

inline const Tensor& stylize_source(const Tensor& z, Stylized& r, StylizeTarget target) {
  if (target == StylizeTarget::whole) {
    require_even_map(z, "stylize");
    return z;
  }
  r.parts = decompose(z);
  return target == StylizeTarget::low ? r.parts.low : r.parts.high;
}

inline void recombine(Stylized& r, const Tensor& restyled, StylizeTarget target) {
  switch (target) {
    case StylizeTarget::low: r.output = add(r.parts.high, restyled); break;
    case StylizeTarget::high: r.output = add(r.parts.low, restyled); break;
    case StylizeTarget::whole: r.output = restyled; break;
  }
}

}  // namespace detail

/// Stylization with a caller-supplied style; the differentiable part of stylize.
inline Stylized restyle(const Tensor& z, const SampledStyle& style, StylizeTarget target = StylizeTarget::low) {
  Stylized r;
  const Tensor& source = detail::stylize_source(z, r, target);
  r.stats = batch_style_stats(source);
  r.style = style;
  detail::recombine(r, apply_style(source, r.stats, r.style), target);
  return r;
}

inline Stylized stylize_detailed(const Tensor& z, const StyleScale& scale, Rng& rng,
                                 StylizeTarget target = StylizeTarget::low) {
  Stylized r;
  const Tensor& source = detail::stylize_source(z, r, target);
  r.stats = batch_style_stats(source);
  r.style = sample_style(style_distribution(r.stats), scale, source.dim(1), rng);
  detail::recombine(r, apply_style(source, r.stats, r.style), target);
  return r;
}

inline Tensor stylize(const Tensor& z, const StyleScale& scale, Rng& rng, StylizeTarget target = StylizeTarget::low) {
  return stylize_detailed(z, scale, rng, target).output;
}

}  // namespace fsdg
