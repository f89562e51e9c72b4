#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsdg/binary_io.hpp"
#include "fsdg/random.hpp"
#include "fsdg/tensor.hpp"

namespace fsdg {

/// Colour and texture statistics of one domain. A pixel of channel c is
/// bias[c] + contrast[c] * mask + texture * field_c + noise * N(0, 1), clipped
/// to [0, 1], where field_c is a random low-frequency sinusoid product.
struct DomainSpec {
  int domain_id = 0;
  std::array<double, 3> bias{0.5, 0.5, 0.5};
  std::array<double, 3> contrast{0.5, 0.5, 0.5};
  double texture = 0.0;
  double noise = 0.0;
  double min_frequency = 0.5;
  double max_frequency = 2.0;
};

inline void to_json(nlohmann::json& j, const DomainSpec& d) {
  j = {{"domain_id", d.domain_id}, {"bias", d.bias},   {"contrast", d.contrast},           {"texture", d.texture},
       {"noise", d.noise},         {"min_frequency", d.min_frequency}, {"max_frequency", d.max_frequency}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& d) {
  j.at("domain_id").get_to(d.domain_id);
  j.at("bias").get_to(d.bias);
  j.at("contrast").get_to(d.contrast);
  j.at("texture").get_to(d.texture);
  j.at("noise").get_to(d.noise);
  j.at("min_frequency").get_to(d.min_frequency);
  j.at("max_frequency").get_to(d.max_frequency);
}

/// The four built-in domains: dark high-contrast, warm textured, flat cool,
/// and bright washed-out with slow blotches. Domains differ in colour,
/// contrast and low-frequency texture; pixel noise stays small everywhere.
inline std::vector<DomainSpec> default_domains() {
  return {
      {0, {0.2, 0.2, 0.2}, {0.7, 0.6, 0.5}, 0.1, 0.02, 0.5, 2.0},
      {1, {0.45, 0.35, 0.25}, {0.3, 0.4, 0.25}, 0.2, 0.01, 0.25, 1.0},
      {2, {0.1, 0.4, 0.6}, {0.8, 0.2, 0.3}, 0.0, 0.0, 0.5, 2.0},
      {3, {0.5, 0.5, 0.5}, {0.35, 0.35, 0.35}, 0.12, 0.015, 0.25, 1.0},
  };
}

inline constexpr int kShapeVocabulary = 7;

inline const char* shape_name(int cls) {
  static const char* names[] = {"hbar", "vbar", "diagonal", "plus", "cross", "disk", "ring"};
  return cls >= 0 && cls < kShapeVocabulary ? names[cls] : "?";
}

struct TaskConfig {
  int num_domains = 4;
  int num_classes = 7;
  int per_domain = 500;
  int image_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_domains < 2) throw ParameterError("task: need at least two domains");
    if (num_classes < 2 || num_classes > kShapeVocabulary) {
      throw ParameterError("task: num_classes must lie in [2, " + std::to_string(kShapeVocabulary) + "]");
    }
    if (per_domain < 1) throw ParameterError("task: per_domain must be positive");
    if (image_size < 8 || image_size % 2) throw ParameterError("task: image_size must be even and at least 8");
  }
};

/// Random placement of a glyph.
struct Pose {
  double cx = 0, cy = 0;
  double length = 0;
  double thickness = 0;
};

inline Pose random_pose(int size, Rng& rng) {
  const double s = size;
  Pose p;
  p.cx = s / 2 + rng.uniform(-0.15 * s, 0.15 * s);
  p.cy = s / 2 + rng.uniform(-0.15 * s, 0.15 * s);
  p.length = rng.uniform(0.7, 1.0) * s * 0.35;
  p.thickness = rng.uniform(0.12, 0.18) * s;
  return p;
}

/// Anti-aliased coverage in [0, 1] of glyph `cls` at `pose`, row-major.
inline std::vector<double> shape_mask(int cls, const Pose& pose, int size) {
  std::vector<double> m(static_cast<std::size_t>(size * size));
  auto clip01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - pose.cx, dy = y + 0.5 - pose.cy;
      auto bar = [&](double angle) {
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = dx * c + dy * s, v = -dx * s + dy * c;
        return clip01(pose.thickness / 2 - std::abs(v) + 0.5) * clip01(pose.length - std::abs(u) + 0.5);
      };
      const double r = std::hypot(dx, dy);
      constexpr double pi = std::numbers::pi;
      double v = 0.0;
      switch (cls) {
        case 0: v = bar(0); break;
        case 1: v = bar(pi / 2); break;
        case 2: v = bar(pi / 4); break;
        case 3: v = std::max(bar(0), bar(pi / 2)); break;
        case 4: v = std::max(bar(pi / 4), bar(-pi / 4)); break;
        case 5: v = clip01(pose.length * 0.8 - r + 0.5); break;
        case 6: v = clip01(pose.thickness / 2 - std::abs(r - pose.length * 0.75) + 0.5); break;
        default: throw ParameterError("shape_mask: unknown class " + std::to_string(cls));
      }
      m[static_cast<std::size_t>(y * size + x)] = v;
    }
  }
  return m;
}

/// Paints a mask with a domain's colours, texture and noise; [3, size, size].
inline std::vector<float> render(const std::vector<double>& mask, const DomainSpec& d, int size, Rng& rng) {
  const std::size_t plane = static_cast<std::size_t>(size * size);
  std::vector<float> img(3 * plane);
  for (int c = 0; c < 3; ++c) {
    const double fx = rng.uniform(d.min_frequency, d.max_frequency);
    const double fy = rng.uniform(d.min_frequency, d.max_frequency);
    const double px = rng.uniform(0.0, 2 * std::numbers::pi), py = rng.uniform(0.0, 2 * std::numbers::pi);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double field = std::sin(2 * std::numbers::pi * fx * x / size + px) *
                             std::sin(2 * std::numbers::pi * fy * y / size + py);
        const std::size_t k = static_cast<std::size_t>(y * size + x);
        const double v = d.bias[c] + d.contrast[c] * mask[k] + d.texture * field + d.noise * rng.normal();
        img[c * plane + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

struct Dataset {
  TaskConfig config;
  std::vector<DomainSpec> domains;
  std::vector<float> images;  // [N, 3, S, S]
  std::vector<int> labels;
  std::vector<int> domain_labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return 3u * config.image_size * config.image_size; }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * image_numel(), image_numel());
  }

  /// Stacks the given samples into a [B, 3, S, S] tensor.
  Tensor batch(std::span<const std::size_t> index) const {
    const std::size_t n = image_numel();
    std::vector<double> v(index.size() * n);
    for (std::size_t b = 0; b < index.size(); ++b) {
      const auto img = image(index[b]);
      std::copy(img.begin(), img.end(), v.begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    const auto s = static_cast<std::size_t>(config.image_size);
    return Tensor({index.size(), 3, s, s}, std::move(v));
  }

  std::vector<int> gather_labels(std::span<const std::size_t> index) const {
    std::vector<int> out;
    for (std::size_t i : index) out.push_back(labels[i]);
    return out;
  }

  std::vector<int> gather_domains(std::span<const std::size_t> index) const {
    std::vector<int> out;
    for (std::size_t i : index) out.push_back(domain_labels[i]);
    return out;
  }
};

/// Extra domains beyond the built-in four get random colours and textures.
inline std::vector<DomainSpec> domains_for(const TaskConfig& cfg) {
  auto d = default_domains();
  d.resize(std::min<std::size_t>(d.size(), static_cast<std::size_t>(cfg.num_domains)));
  Rng rng(derive_seed(cfg.seed, 0xD0D0));
  while (d.size() < static_cast<std::size_t>(cfg.num_domains)) {
    DomainSpec s;
    s.domain_id = static_cast<int>(d.size());
    for (int c = 0; c < 3; ++c) {
      s.bias[c] = rng.uniform(0.05, 0.6);
      s.contrast[c] = rng.uniform(0.2, 0.8);
    }
    s.texture = rng.uniform(0.0, 0.3);
    s.noise = rng.uniform(0.0, 0.1);
    d.push_back(s);
  }
  return d;
}

/// Samples of domain k are produced by their own stream derived from
/// (seed, k); sample j of every domain has class j mod num_classes.
inline Dataset generate_task(const TaskConfig& cfg, std::vector<DomainSpec> domains = {}) {
  cfg.validate();
  if (domains.empty()) domains = domains_for(cfg);
  if (domains.size() != static_cast<std::size_t>(cfg.num_domains)) {
    throw ParameterError("generate_task: need one DomainSpec per domain");
  }
  for (std::size_t k = 0; k < domains.size(); ++k) {
    if (domains[k].domain_id != static_cast<int>(k)) throw ParameterError("generate_task: domain ids must be 0..K-1");
  }
  Dataset ds;
  ds.config = cfg;
  ds.domains = std::move(domains);
  const std::size_t total = static_cast<std::size_t>(cfg.num_domains) * cfg.per_domain;
  ds.images.reserve(total * ds.image_numel());
  for (int k = 0; k < cfg.num_domains; ++k) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(k)));
    for (int j = 0; j < cfg.per_domain; ++j) {
      const int cls = j % cfg.num_classes;
      const Pose pose = random_pose(cfg.image_size, rng);
      const auto img = render(shape_mask(cls, pose, cfg.image_size), ds.domains[k], cfg.image_size, rng);
      ds.images.insert(ds.images.end(), img.begin(), img.end());
      ds.labels.push_back(cls);
      ds.domain_labels.push_back(k);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Protocol

struct EpisodeSplit {
  std::vector<int> source_domains;
  int target_domain = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Target samples form the test set; every source domain is shuffled with a
/// stream derived from (seed, domain) and split 90/10 into train/val.
inline EpisodeSplit leave_one_domain_out(const Dataset& ds, int target, std::uint64_t seed,
                                         double train_fraction = 0.9) {
  if (target < 0 || target >= ds.config.num_domains) {
    throw ParameterError("leave_one_domain_out: unknown target domain " + std::to_string(target));
  }
  EpisodeSplit s;
  s.target_domain = target;
  for (int k = 0; k < ds.config.num_domains; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.domain_labels[i] == k) members.push_back(i);
    if (k == target) {
      s.test = std::move(members);
      continue;
    }
    s.source_domains.push_back(k);
    Rng rng(derive_seed(seed, 0x5EED0000u + static_cast<std::uint64_t>(k)));
    rng.shuffle(members);
    const auto cut = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(members.size())));
    s.train.insert(s.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cut));
    s.val.insert(s.val.end(), members.begin() + static_cast<std::ptrdiff_t>(cut), members.end());
  }
  return s;
}

/// One epoch of batches, each holding exactly `per_domain` training samples
/// from every source domain, in source-domain order. Incomplete batches are
/// dropped.
inline std::vector<std::vector<std::size_t>> balanced_batches(const Dataset& ds, const EpisodeSplit& split,
                                                              int per_domain, Rng& rng) {
  if (per_domain < 1) throw ParameterError("balanced_batches: per_domain must be positive");
  std::vector<std::vector<std::size_t>> pools;
  for (int k : split.source_domains) {
    std::vector<std::size_t> pool;
    for (std::size_t i : split.train)
      if (ds.domain_labels[i] == k) pool.push_back(i);
    pools.push_back(std::move(pool));
  }
  std::size_t smallest = pools.empty() ? 0 : pools[0].size();
  for (const auto& p : pools) smallest = std::min(smallest, p.size());
  const auto pd = static_cast<std::size_t>(per_domain);
  if (pd > smallest) {
    throw ParameterError("balanced_batches: per_domain " + std::to_string(per_domain) +
                         " exceeds the smallest source domain (" + std::to_string(smallest) + " samples)");
  }
  for (auto& p : pools) rng.shuffle(p);
  std::vector<std::vector<std::size_t>> batches(smallest / pd);
  for (std::size_t b = 0; b < batches.size(); ++b)
    for (const auto& p : pools) batches[b].insert(batches[b].end(), p.begin() + b * pd, p.begin() + (b + 1) * pd);
  return batches;
}

// ---------------------------------------------------------------------------
// Serialization
//
// "FSDGDATA" | u32 version | u32 K | u32 classes | u32 channels | u32 height |
// u32 width | u64 counts[K] | f32 images[N*C*H*W] | i32 labels[N] |
// i32 domains[N], little-endian. Samples are stored grouped by domain.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string encode_dataset(const Dataset& ds) {
  std::string buf = "FSDGDATA";
  const auto put32 = [&](std::uint32_t v) { detail::put_le(buf, v); };
  put32(kDatasetVersion);
  put32(static_cast<std::uint32_t>(ds.config.num_domains));
  put32(static_cast<std::uint32_t>(ds.config.num_classes));
  put32(3);
  put32(static_cast<std::uint32_t>(ds.config.image_size));
  put32(static_cast<std::uint32_t>(ds.config.image_size));
  for (int k = 0; k < ds.config.num_domains; ++k) {
    const auto n = std::count(ds.domain_labels.begin(), ds.domain_labels.end(), k);
    detail::put_le(buf, static_cast<std::uint64_t>(n));
  }
  for (float v : ds.images) detail::put_le(buf, std::bit_cast<std::uint32_t>(v));
  for (int v : ds.labels) put32(static_cast<std::uint32_t>(v));
  for (int v : ds.domain_labels) put32(static_cast<std::uint32_t>(v));
  return buf;
}

/// Restores images and labels; `config.seed` and domain specs are not part of
/// the container (see the JSON sidecar).
inline Dataset decode_dataset(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(8) != "FSDGDATA") throw ParameterError("dataset: bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kDatasetVersion) {
    throw ParameterError("dataset: unsupported format version " + std::to_string(v));
  }
  Dataset ds;
  ds.config.num_domains = static_cast<int>(r.get<std::uint32_t>());
  ds.config.num_classes = static_cast<int>(r.get<std::uint32_t>());
  const auto channels = r.get<std::uint32_t>();
  const auto h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>();
  if (channels != 3 || h != w) throw ParameterError("dataset: expected square 3-channel images");
  ds.config.image_size = static_cast<int>(h);
  std::uint64_t total = 0;
  std::vector<std::uint64_t> counts;
  for (int k = 0; k < ds.config.num_domains; ++k) {
    counts.push_back(r.get<std::uint64_t>());
    total += counts.back();
  }
  ds.config.per_domain = counts.empty() ? 0 : static_cast<int>(counts[0]);
  ds.images.resize(total * 3 * h * w);
  for (auto& v : ds.images) v = std::bit_cast<float>(r.get<std::uint32_t>());
  ds.labels.resize(total);
  ds.domain_labels.resize(total);
  for (auto& v : ds.labels) v = static_cast<int>(r.get<std::uint32_t>());
  for (auto& v : ds.domain_labels) v = static_cast<int>(r.get<std::uint32_t>());
  if (!r.done()) throw ParameterError("dataset: trailing bytes");
  for (std::size_t i = 0; i < total; ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] >= ds.config.num_classes || ds.domain_labels[i] < 0 ||
        ds.domain_labels[i] >= ds.config.num_domains) {
      throw ParameterError("dataset: label out of range at sample " + std::to_string(i));
    }
  }
  return ds;
}

inline nlohmann::json dataset_sidecar(const Dataset& ds) {
  return {{"format_version", kDatasetVersion},
          {"generator",
           {{"num_domains", ds.config.num_domains},
            {"num_classes", ds.config.num_classes},
            {"per_domain", ds.config.per_domain},
            {"image_size", ds.config.image_size},
            {"seed", ds.config.seed}}},
          {"classes", [&] {
             std::vector<std::string> n;
             for (int c = 0; c < ds.config.num_classes; ++c) n.emplace_back(shape_name(c));
             return n;
           }()},
          {"domains", ds.domains}};
}

/// index,domain,class,shape,mean_r,mean_g,mean_b
inline std::string dataset_manifest_csv(const Dataset& ds) {
  std::ostringstream out;
  out << "index,domain,class,shape,mean_r,mean_g,mean_b\n";
  out.precision(6);
  const std::size_t plane = ds.image_numel() / 3;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << i << ',' << ds.domain_labels[i] << ',' << ds.labels[i] << ',' << shape_name(ds.labels[i]);
    const auto img = ds.image(i);
    for (int c = 0; c < 3; ++c) {
      double m = 0;
      for (std::size_t k = 0; k < plane; ++k) m += img[c * plane + k];
      out << ',' << std::fixed << m / static_cast<double>(plane);
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Probes

/// Per-image channel means, [N, 3].
inline std::vector<std::array<double, 3>> channel_means(const Dataset& ds, std::span<const std::size_t> index) {
  std::vector<std::array<double, 3>> out;
  const std::size_t plane = ds.image_numel() / 3;
  for (std::size_t i : index) {
    std::array<double, 3> m{};
    const auto img = ds.image(i);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t k = 0; k < plane; ++k) m[c] += img[c * plane + k];
      m[c] /= static_cast<double>(plane);
    }
    out.push_back(m);
  }
  return out;
}

/// Held-out accuracy of a multinomial logistic regression from channel means
/// to domain label (full-batch gradient descent, fixed budget).
inline double domain_probe_accuracy(const Dataset& ds, std::uint64_t seed = 0, int iterations = 2000) {
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t cut = order.size() * 4 / 5;
  const std::span<const std::size_t> train(order.data(), cut), test(order.data() + cut, order.size() - cut);
  const auto xtr = channel_means(ds, train), xte = channel_means(ds, test);
  const std::size_t k = static_cast<std::size_t>(ds.config.num_domains);
  std::vector<double> w(k * 4, 0.0);  // 3 weights + bias per domain
  auto scores = [&](const std::array<double, 3>& x, std::vector<double>& s) {
    for (std::size_t d = 0; d < k; ++d) s[d] = w[d * 4] * x[0] + w[d * 4 + 1] * x[1] + w[d * 4 + 2] * x[2] + w[d * 4 + 3];
  };
  std::vector<double> s(k), g(w.size());
  for (int it = 0; it < iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t n = 0; n < xtr.size(); ++n) {
      scores(xtr[n], s);
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (std::size_t d = 0; d < k; ++d) {
        const double err = s[d] / z - (ds.domain_labels[train[n]] == static_cast<int>(d) ? 1.0 : 0.0);
        for (int c = 0; c < 3; ++c) g[d * 4 + c] += err * xtr[n][c];
        g[d * 4 + 3] += err;
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 5.0 * g[i] / static_cast<double>(xtr.size());
  }
  std::size_t correct = 0;
  for (std::size_t n = 0; n < xte.size(); ++n) {
    scores(xte[n], s);
    correct += static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin()) == ds.domain_labels[test[n]];
  }
  return static_cast<double>(correct) / static_cast<double>(xte.size());
}

}  // namespace fsdg
