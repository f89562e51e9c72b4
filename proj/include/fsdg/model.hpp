#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fsdg/binary_io.hpp"
#include "fsdg/losses.hpp"
#include "fsdg/ops.hpp"
#include "fsdg/random.hpp"
#include "fsdg/stylization.hpp"

namespace fsdg {

/// Small CNN: every stage is conv3x3 -> relu, followed by a 2x2 max pool for
/// the first `pooled_stages` stages; then global average pooling and one linear
/// classifier. The first conv may be strided.
struct BackboneConfig {
  std::vector<std::size_t> stage_channels{8, 16, 32, 32};
  std::size_t insertion_index = 1;
  std::size_t num_classes = 7;
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t first_stride = 2;
  std::size_t pooled_stages = 3;

  std::size_t num_stages() const { return stage_channels.size(); }
  std::size_t embed_dim() const { return stage_channels.back(); }

  /// Spatial extent of the output of stage k.
  std::size_t extent_after(std::size_t k) const {
    std::size_t s = image_size;
    for (std::size_t i = 0; i <= k; ++i) {
      if (i == 0) s = (s - 1) / first_stride + 1;
      if (i < pooled_stages) s /= 2;
    }
    return s;
  }

  void validate() const {
    if (stage_channels.empty()) throw ParameterError("backbone: need at least one stage");
    for (std::size_t c : stage_channels)
      if (c == 0) throw ParameterError("backbone: stage channel counts must be positive");
    if (num_classes < 2) throw ParameterError("backbone: need at least two classes");
    if (first_stride == 0 || in_channels == 0) throw ParameterError("backbone: invalid input geometry");
    if (insertion_index >= num_stages()) {
      throw DimensionError("backbone: insertion index " + std::to_string(insertion_index) + " must be below " +
                           std::to_string(num_stages()) + " stages");
    }
    std::size_t s = image_size;
    for (std::size_t i = 0; i < num_stages(); ++i) {
      if (i == 0) s = (s - 1) / first_stride + 1;
      if (i < pooled_stages) {
        if (s < 2 || s % 2) throw DimensionError("backbone: stage " + std::to_string(i) + " pools an odd extent");
        s /= 2;
      }
    }
    const std::size_t at = extent_after(insertion_index);
    if (at == 0 || at % 2) {
      throw DimensionError("backbone: extent " + std::to_string(at) + " after stage " +
                           std::to_string(insertion_index) +
                           " is odd; the stylization insertion point requires even height and width");
    }
  }
};

struct NamedParam {
  std::string name;
  Tensor value;
};

struct DualForwardOutput {
  Tensor logits_orig;
  Tensor logits_styl;
  Tensor embed_orig;
  Tensor embed_styl;

  bool stylized() const { return logits_styl.defined(); }
};

/// Maps the feature at the insertion point to its stylized counterpart.
using Stylizer = std::function<Tensor(const Tensor&)>;

class Model {
 public:
  explicit Model(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    std::size_t in = config_.in_channels;
    for (std::size_t k = 0; k < config_.num_stages(); ++k) {
      const std::size_t out = config_.stage_channels[k];
      add_param("stage" + std::to_string(k) + ".weight", {out, in, 3, 3});
      add_param("stage" + std::to_string(k) + ".bias", {out});
      in = out;
    }
    add_param("classifier.weight", {config_.embed_dim(), config_.num_classes});
    add_param("classifier.bias", {config_.num_classes});
  }

  const BackboneConfig& config() const { return config_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  Tensor& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.value;
    throw IndexError("model: no parameter named '" + name + "'");
  }

  /// He-normal conv weights, zero biases, uniform(+-1/sqrt(fan_in)) classifier.
  void initialize(Rng& rng) {
    for (auto& p : params_) {
      auto v = p.value.mutable_data();
      const Shape& s = p.value.shape();
      if (p.name == "classifier.weight") {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s[0]));
        for (auto& x : v) x = rng.uniform(-bound, bound);
      } else if (p.name == "classifier.bias") {
        const double bound = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim()));
        for (auto& x : v) x = rng.uniform(-bound, bound);
      } else if (s.size() == 4) {
        const double sd = std::sqrt(2.0 / static_cast<double>(s[1] * s[2] * s[3]));
        for (auto& x : v) x = rng.normal(0.0, sd);
      } else {
        std::fill(v.begin(), v.end(), 0.0);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  Tensor stage(std::size_t k, Tensor z) const {
    if (k == 0) z = mul(add(z, -0.5), 2.0);
    z = relu(conv2d(z, params_[2 * k].value, params_[2 * k + 1].value, k == 0 ? config_.first_stride : 1, 1));
    if (k < config_.pooled_stages) z = max_pool2(z);
    return z;
  }

  /// Stages [0, insertion_index].
  Tensor trunk(const Tensor& x) const {
    check_input(x);
    Tensor z = x;
    for (std::size_t k = 0; k <= config_.insertion_index; ++k) z = stage(k, z);
    return z;
  }

  /// Remaining stages and pooling; returns the raw pooled feature.
  Tensor tail(Tensor z) const {
    for (std::size_t k = config_.insertion_index + 1; k < config_.num_stages(); ++k) z = stage(k, z);
    return global_avg_pool(z);
  }

  Tensor classify(const Tensor& pooled) const {
    return add(matmul(pooled, params_[params_.size() - 2].value), params_.back().value);
  }

  /// Original branch, and when `stylizer` is set a stylized branch through the
  /// same remaining weights.
  DualForwardOutput forward_dual(const Tensor& x, const Stylizer& stylizer) const {
    const Tensor z = trunk(x);
    DualForwardOutput out;
    if (!stylizer) {
      const Tensor pooled = tail(z);
      out.logits_orig = classify(pooled);
      out.embed_orig = l2_normalize_rows(pooled);
      return out;
    }
    const std::size_t b = x.dim(0);
    const Tensor pooled = tail(concat0(z, stylizer(z)));
    const Tensor logits = classify(pooled);
    const Tensor embed = l2_normalize_rows(pooled);
    out.logits_orig = slice0(logits, 0, b);
    out.logits_styl = slice0(logits, b, 2 * b);
    out.embed_orig = slice0(embed, 0, b);
    out.embed_styl = slice0(embed, b, 2 * b);
    return out;
  }

  DualForwardOutput forward_train(const Tensor& x, const StyleScale& scale, Rng& rng,
                                  StylizeTarget target = StylizeTarget::low) const {
    return forward_dual(x, [&](const Tensor& z) { return stylize(z, scale, rng, target); });
  }

  /// Single branch, no stylization, no tape.
  Tensor forward_eval(const Tensor& x) const {
    NoGradGuard guard;
    return classify(tail(trunk(x)));
  }

 private:
  void add_param(std::string name, Shape shape) {
    Tensor t(std::move(shape));
    t.set_requires_grad();
    params_.push_back({std::move(name), std::move(t)});
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != config_.image_size ||
        x.dim(3) != config_.image_size) {
      throw DimensionError("model: expected input [B, " + std::to_string(config_.in_channels) + ", " +
                           std::to_string(config_.image_size) + ", " + std::to_string(config_.image_size) +
                           "], got " + to_string(x.shape()));
    }
  }

  BackboneConfig config_;
  std::vector<NamedParam> params_;
};

// ---------------------------------------------------------------------------
// Optimization

class Sgd {
 public:
  Sgd(double lr, double momentum = 0.9, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  /// v <- momentum * v + (g + wd * p); p <- p - lr * v
  void step(std::vector<NamedParam>& params) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.value.numel(), 0.0);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].value.mutable_data();
      const auto g = params[k].value.grad();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i] + weight_decay_ * w[i];
        w[i] -= lr_ * v[i];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct StepOptions {
  bool ce_on_stylized = false;
};

/// Builds the weighted objective for one dual forward. Terms whose weight is
/// zero (or that need a stylized branch that is absent) are left undefined.
inline LossBundle training_loss(const DualForwardOutput& out, std::span<const int> labels,
                                std::span<const int> domains, const LossWeights& w, const StepOptions& opt = {}) {
  Tensor ce;
  if (opt.ce_on_stylized && out.stylized()) {
    std::vector<int> both(labels.begin(), labels.end());
    both.insert(both.end(), labels.begin(), labels.end());
    ce = cross_entropy(concat0(out.logits_orig, out.logits_styl), both);
  } else {
    ce = cross_entropy(out.logits_orig, labels);
  }
  Tensor cons, dsup;
  if (out.stylized() && w.lambda_cons > 0.0) cons = consistency_loss(out.logits_orig, out.logits_styl, w.tau_cons);
  if (out.stylized() && w.lambda_dsup > 0.0) {
    const auto emb = pair_views(out.embed_orig, out.embed_styl, labels, domains);
    dsup = dsupcon_loss(emb, build_contrast_sets(emb.class_labels, emb.domain_labels), w.tau_dsup);
  }
  return total_loss(ce, cons, dsup, w);
}

/// One optimization step; throws NumericalError (leaving weights untouched)
/// if the loss or any gradient is not finite.
inline LossBundle backward_step(Model& model, const DualForwardOutput& out, std::span<const int> labels,
                                std::span<const int> domains, const LossWeights& w, Sgd& optimizer,
                                const StepOptions& opt = {}) {
  for (const Tensor* t : {&out.logits_orig, &out.logits_styl, &out.embed_orig, &out.embed_styl}) {
    if (t->defined() && !all_finite(*t)) throw NumericalError("forward pass produced non-finite values");
  }
  LossBundle loss = training_loss(out, labels, domains, w, opt);
  if (!std::isfinite(loss.total.item())) {
    throw NumericalError("training loss is not finite (ce=" + std::to_string(loss.ce.item()) + ")");
  }
  model.zero_grad();
  loss.total.backward();
  for (const auto& p : model.params()) {
    for (double g : p.value.grad())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + p.name);
  }
  optimizer.step(model.params());
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "FSDGCKPT" | u32 version | str config | str rng_state | u32 count |
// count x (str name | u32 rank | u64 dims[rank] | f64 values[numel])
// where str = u32 byte length + bytes; all integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  std::string config;
  std::string rng_state;
};

inline std::string encode_checkpoint(const Model& model, const CheckpointHeader& header) {
  std::string buf = "FSDGCKPT";
  detail::put_le(buf, header.version);
  detail::put_str(buf, header.config);
  detail::put_str(buf, header.rng_state);
  detail::put_le(buf, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    detail::put_str(buf, p.name);
    detail::put_le(buf, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) detail::put_le(buf, static_cast<std::uint64_t>(d));
    for (double v : p.value.data()) detail::put_le(buf, v);
  }
  return buf;
}

/// Loads parameters into `model`, whose architecture must match the file.
inline CheckpointHeader decode_checkpoint(const std::string& bytes, Model& model) {
  detail::Reader r(bytes);
  if (r.bytes(8) != "FSDGCKPT") throw ParameterError("checkpoint: bad magic");
  CheckpointHeader h;
  h.version = r.get<std::uint32_t>();
  if (h.version != kCheckpointVersion) {
    throw ParameterError("checkpoint: unsupported format version " + std::to_string(h.version));
  }
  h.config = r.str();
  h.rng_state = r.str();
  const auto count = r.get<std::uint32_t>();
  if (count != model.params().size()) throw ParameterError("checkpoint: parameter count mismatch");
  for (auto& p : model.params()) {
    const std::string name = r.str();
    if (name != p.name) throw ParameterError("checkpoint: expected '" + p.name + "', found '" + name + "'");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != p.value.shape()) throw ParameterError("checkpoint: shape mismatch for " + name);
    for (auto& v : p.value.mutable_data()) v = r.get<double>();
  }
  if (!r.done()) throw ParameterError("checkpoint: trailing bytes");
  return h;
}

inline void save_checkpoint(const std::string& path, const Model& model, const CheckpointHeader& header) {
  detail::write_file(path, encode_checkpoint(model, header));
}

inline CheckpointHeader load_checkpoint(const std::string& path, Model& model) {
  return decode_checkpoint(detail::read_file(path), model);
}

}  // namespace fsdg
