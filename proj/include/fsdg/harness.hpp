#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fsdg/data.hpp"
#include "fsdg/gradcheck.hpp"
#include "fsdg/losses.hpp"
#include "fsdg/model.hpp"
#include "fsdg/stylization.hpp"

namespace fsdg {

// ---------------------------------------------------------------------------
// Configuration

enum class Selection { last, best_val };

struct RunConfig {
  TaskConfig task;
  BackboneConfig backbone;
  LossWeights weights{0.3, 0.01, 0.5, 0.15};
  StyleScale scale{3.0, 3.0};
  std::optional<StylizeTarget> stylize_target = StylizeTarget::low;  // nullopt = off
  bool ce_on_stylized = false;
  int epochs = 30;
  double lr = 0.01;
  int lr_decay_epoch = 20;
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int per_domain = 16;
  Selection selection = Selection::last;
  std::uint64_t seed = 0;
  int target = 0;
  int seeds = 1;
  int threads = 0;  // 0 = hardware concurrency
  std::string out = "out";

  double lr_at(int epoch) const { return epoch >= lr_decay_epoch ? lr * lr_decay : lr; }

  void validate() const {
    task.validate();
    BackboneConfig b = backbone;
    b.image_size = static_cast<std::size_t>(task.image_size);
    b.num_classes = static_cast<std::size_t>(task.num_classes);
    b.validate();
    weights.validate();
    scale.validate();
    if (epochs < 1) throw ParameterError("train.epochs must be positive");
    if (!(lr > 0.0) || !(lr_decay > 0.0)) throw ParameterError("learning rate and decay must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("train.momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ParameterError("train.weight_decay must be non-negative");
    if (per_domain < 1) throw ParameterError("train.per_domain must be positive");
    const int train_per_domain = static_cast<int>(std::floor(0.9 * task.per_domain));
    if (per_domain > train_per_domain) {
      throw ParameterError("train.per_domain " + std::to_string(per_domain) + " exceeds the " +
                           std::to_string(train_per_domain) + " training samples per source domain");
    }
    if (target < 0 || target >= task.num_domains) throw ParameterError("run.target is not a valid domain");
    if (seeds < 1) throw ParameterError("run.seeds must be positive");
    if (threads < 0) throw ParameterError("run.threads must be non-negative");
  }

  /// Backbone with the task's geometry filled in.
  BackboneConfig model_config() const {
    BackboneConfig b = backbone;
    b.image_size = static_cast<std::size_t>(task.image_size);
    b.num_classes = static_cast<std::size_t>(task.num_classes);
    return b;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ParameterError("config: '" + key + "' expects a number, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ParameterError("config: '" + key + "' expects true/false, got '" + text + "'");
}

struct ConfigKey {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
ConfigKey number_key(const char* name, T RunConfig::*field) {
  return {name, [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*field);
            else return std::to_string(c.*field);
          },
          [field, name](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(name, v); }};
}

template <typename S, typename T>
ConfigKey nested_key(const char* name, S RunConfig::*outer, T S::*field) {
  return {name, [outer, field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*outer.*field);
            else return std::to_string(c.*outer.*field);
          },
          [outer, field, name](RunConfig& c, const std::string& v) { c.*outer.*field = parse_number<T>(name, v); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      nested_key("task.domains", &RunConfig::task, &TaskConfig::num_domains),
      nested_key("task.classes", &RunConfig::task, &TaskConfig::num_classes),
      nested_key("task.per_domain", &RunConfig::task, &TaskConfig::per_domain),
      nested_key("task.image_size", &RunConfig::task, &TaskConfig::image_size),
      nested_key("task.seed", &RunConfig::task, &TaskConfig::seed),
      {"model.channels",
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.backbone.stage_channels.size(); ++i)
           s += (i ? "," : "") + std::to_string(c.backbone.stage_channels[i]);
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         std::vector<std::size_t> ch;
         std::stringstream in(v);
         std::string item;
         while (std::getline(in, item, ',')) ch.push_back(parse_number<std::size_t>("model.channels", trim(item)));
         c.backbone.stage_channels = ch;
       }},
      nested_key("model.insertion", &RunConfig::backbone, &BackboneConfig::insertion_index),
      nested_key("model.first_stride", &RunConfig::backbone, &BackboneConfig::first_stride),
      nested_key("model.pooled_stages", &RunConfig::backbone, &BackboneConfig::pooled_stages),
      {"style.target",
       [](const RunConfig& c) { return std::string(c.stylize_target ? to_string(*c.stylize_target) : "off"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "off") c.stylize_target.reset();
         else c.stylize_target = parse_stylize_target(v);
       }},
      nested_key("style.s_mu", &RunConfig::scale, &StyleScale::s_mu),
      nested_key("style.s_sigma", &RunConfig::scale, &StyleScale::s_sigma),
      nested_key("loss.lambda_cons", &RunConfig::weights, &LossWeights::lambda_cons),
      nested_key("loss.lambda_dsup", &RunConfig::weights, &LossWeights::lambda_dsup),
      nested_key("loss.tau_cons", &RunConfig::weights, &LossWeights::tau_cons),
      nested_key("loss.tau_dsup", &RunConfig::weights, &LossWeights::tau_dsup),
      {"loss.ce_on_stylized", [](const RunConfig& c) { return std::string(c.ce_on_stylized ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.ce_on_stylized = parse_bool("loss.ce_on_stylized", v); }},
      number_key("train.epochs", &RunConfig::epochs),
      number_key("train.lr", &RunConfig::lr),
      number_key("train.lr_decay_epoch", &RunConfig::lr_decay_epoch),
      number_key("train.lr_decay", &RunConfig::lr_decay),
      number_key("train.momentum", &RunConfig::momentum),
      number_key("train.weight_decay", &RunConfig::weight_decay),
      number_key("train.per_domain", &RunConfig::per_domain),
      {"train.selection",
       [](const RunConfig& c) { return std::string(c.selection == Selection::last ? "last" : "best_val"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "last") c.selection = Selection::last;
         else if (v == "best_val") c.selection = Selection::best_val;
         else throw ParameterError("config: train.selection must be last or best_val");
       }},
      number_key("run.seed", &RunConfig::seed),
      number_key("run.target", &RunConfig::target),
      number_key("run.seeds", &RunConfig::seeds),
      number_key("run.threads", &RunConfig::threads),
      {"run.out", [](const RunConfig& c) { return c.out; }, [](RunConfig& c, const std::string& v) { c.out = v; }},
  };
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (key == k.name) {
      k.set(c, detail::trim(value));
      return;
    }
  }
  throw ParameterError("config: unknown key '" + key + "'");
}

/// Hyperparameters reported for ResNet-18 on PACS, for use with a real
/// backbone. The desk-scale defaults differ; see the README.
inline void apply_preset(RunConfig& c, const std::string& name) {
  if (name == "resnet18-pacs") {
    c.weights = {0.3, 12.0, 0.5, 0.15};
    c.scale = {10.0, 10.0};
    c.per_domain = 42;
    c.lr = 0.004;
    c.epochs = 40;
    c.lr_decay_epoch = 20;
    c.lr_decay = 0.1;
    c.weight_decay = 5e-4;
    c.stylize_target = StylizeTarget::low;
  } else if (name == "desk") {
    c = RunConfig{};
  } else {
    throw ParameterError("unknown preset '" + name + "' (known: desk, resnet18-pacs)");
  }
}

/// Applies "key = value" lines; '#' starts a comment. A line "preset = NAME"
/// resets to that preset before later lines apply.
inline void apply_config_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key == "preset") apply_preset(c, value);
    else set_config_value(c, key, value);
  }
}

/// Every key with its resolved value, one "key = value" line each.
inline std::string config_to_text(const RunConfig& c) {
  std::string s;
  for (const auto& k : detail::config_keys()) s += std::string(k.name) + " = " + k.get(c) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  std::optional<double> loss_cons;
  std::optional<double> loss_dsup;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::uint64_t seed = 0;
  int target = 0;
  std::vector<EpochRecord> epochs;
  double test_accuracy = 0.0;      // of the selected model
  double test_accuracy_last = 0.0;
  double test_accuracy_best_val = 0.0;
  double best_val_accuracy = 0.0;
  int best_epoch = 0;
  double wall_seconds = 0.0;
  std::unique_ptr<Model> last_model;
  std::unique_ptr<Model> best_model;  // highest validation accuracy, earliest on ties
};

enum class AccessPhase { train, validate, test };

/// Observer of every dataset read made by the trainer.
using AccessHook = std::function<void(AccessPhase, std::span<const std::size_t>)>;

inline double accuracy(const Model& model, const Dataset& ds, std::span<const std::size_t> index,
                       std::size_t chunk = 256) {
  if (index.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < index.size(); start += chunk) {
    const auto part = index.subspan(start, std::min(chunk, index.size() - start));
    const Tensor logits = model.forward_eval(ds.batch(part));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto row = logits.data().subspan(i * k, k);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == ds.labels[part[i]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(index.size());
}

/// Trains one leave-one-domain-out split. Target-domain samples are read only
/// after the last epoch. Throws NumericalError on a non-finite loss.
inline TrainResult train_split(const RunConfig& cfg, const Dataset& ds, int target, std::uint64_t seed,
                               const AccessHook& hook = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  const EpisodeSplit split = leave_one_domain_out(ds, target, seed);
  auto model = std::make_unique<Model>(cfg.model_config());
  Rng init_rng(derive_seed(seed, 1));
  model->initialize(init_rng);
  Rng batch_rng(derive_seed(seed, 2));
  Rng style_rng(derive_seed(seed, 3));
  Sgd opt(cfg.lr, cfg.momentum, cfg.weight_decay);
  const StepOptions step_opt{cfg.ce_on_stylized};

  TrainResult r;
  r.seed = seed;
  r.target = target;
  std::unique_ptr<Model> best;
  r.best_val_accuracy = -1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cfg.lr_at(epoch));
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = opt.lr();
    double cons = 0.0, dsup = 0.0;
    bool has_cons = false, has_dsup = false;
    const auto batches = balanced_batches(ds, split, cfg.per_domain, batch_rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      if (hook) hook(AccessPhase::train, idx);
      const Tensor x = ds.batch(idx);
      const auto y = ds.gather_labels(idx), d = ds.gather_domains(idx);
      const auto out = cfg.stylize_target ? model->forward_train(x, cfg.scale, style_rng, *cfg.stylize_target)
                                          : model->forward_dual(x, nullptr);
      LossBundle loss;
      try {
        loss = backward_step(*model, out, y, d, cfg.weights, opt, step_opt);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(b + 1) + " (target " + std::to_string(target) + ", seed " +
                             std::to_string(seed) + ")");
      }
      rec.loss_total += loss.total.item();
      rec.loss_ce += loss.ce.item();
      if (loss.cons.defined()) cons += loss.cons.item(), has_cons = true;
      if (loss.dsup.defined()) dsup += loss.dsup.item(), has_dsup = true;
    }
    const double n = static_cast<double>(std::max<std::size_t>(batches.size(), 1));
    rec.loss_total /= n;
    rec.loss_ce /= n;
    if (has_cons) rec.loss_cons = cons / n;
    if (has_dsup) rec.loss_dsup = dsup / n;
    if (hook) hook(AccessPhase::validate, split.val);
    rec.val_accuracy = accuracy(*model, ds, split.val);
    if (rec.val_accuracy > r.best_val_accuracy) {
      r.best_val_accuracy = rec.val_accuracy;
      r.best_epoch = rec.epoch;
      best = std::make_unique<Model>(*model);
      for (auto& p : best->params()) {  // Model copies share tensor storage
        p.value = Tensor(p.value.shape(), std::vector<double>(p.value.data().begin(), p.value.data().end()));
      }
    }
    r.epochs.push_back(rec);
  }
  if (hook) hook(AccessPhase::test, split.test);
  r.test_accuracy_last = accuracy(*model, ds, split.test);
  r.test_accuracy_best_val = accuracy(*best, ds, split.test);
  r.test_accuracy = cfg.selection == Selection::last ? r.test_accuracy_last : r.test_accuracy_best_val;
  r.last_model = std::move(model);
  r.best_model = std::move(best);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---------------------------------------------------------------------------
// Protocol

struct ProtocolResult {
  std::vector<TrainResult> runs;  // ordered by (seed, target)
  int num_domains = 0;
  int seeds = 0;

  const TrainResult& at(int seed_index, int target) const {
    return runs[static_cast<std::size_t>(seed_index * num_domains + target)];
  }

  double seed_average(int seed_index) const {
    double s = 0.0;
    for (int t = 0; t < num_domains; ++t) s += at(seed_index, t).test_accuracy;
    return s / num_domains;
  }

  double target_mean(int target) const {
    double s = 0.0;
    for (int i = 0; i < seeds; ++i) s += at(i, target).test_accuracy;
    return s / seeds;
  }

  double average() const {
    double s = 0.0;
    for (int i = 0; i < seeds; ++i) s += seed_average(i);
    return s / seeds;
  }

  /// Population std of the per-seed averages.
  double average_std() const {
    const double m = average();
    double v = 0.0;
    for (int i = 0; i < seeds; ++i) v += (seed_average(i) - m) * (seed_average(i) - m);
    return std::sqrt(v / seeds);
  }
};

inline int worker_count(int requested, std::size_t jobs) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return std::max(1, std::min<int>(n, static_cast<int>(jobs)));
}

/// Runs `jobs` independent tasks on a pool; the first exception is rethrown
/// after all workers stop.
inline void parallel_for(std::size_t jobs, int threads, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = jobs;
      }
    }
  };
  const int n = worker_count(threads, jobs);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

/// All leave-one-domain-out splits for seeds cfg.seed .. cfg.seed + seeds - 1.
inline ProtocolResult run_protocol(const RunConfig& cfg, const Dataset& ds) {
  ProtocolResult p;
  p.num_domains = ds.config.num_domains;
  p.seeds = cfg.seeds;
  p.runs.resize(static_cast<std::size_t>(p.num_domains * p.seeds));
  parallel_for(p.runs.size(), cfg.threads, [&](std::size_t job) {
    const int seed_index = static_cast<int>(job) / p.num_domains, target = static_cast<int>(job) % p.num_domains;
    p.runs[job] = train_split(cfg, ds, target, cfg.seed + static_cast<std::uint64_t>(seed_index));
  });
  return p;
}

// ---------------------------------------------------------------------------
// CSV output. Wall-clock times are kept out of these files so that repeated
// runs produce identical bytes; they go to timing.csv instead.

namespace detail {

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string optional_fixed(const std::optional<double>& v) { return v ? fixed(*v) : ""; }

}  // namespace detail

/// seed,target,epoch,lr,loss_total,loss_ce,loss_cons,loss_dsup,val_accuracy
inline std::string epochs_csv(const std::vector<const TrainResult*>& runs) {
  std::string s = "seed,target,epoch,lr,loss_total,loss_ce,loss_cons,loss_dsup,val_accuracy\n";
  for (const auto* r : runs) {
    for (const auto& e : r->epochs) {
      s += std::to_string(r->seed) + "," + std::to_string(r->target) + "," + std::to_string(e.epoch) + "," +
           detail::format_double(e.lr) + "," + detail::fixed(e.loss_total) + "," + detail::fixed(e.loss_ce) + "," +
           detail::optional_fixed(e.loss_cons) + "," + detail::optional_fixed(e.loss_dsup) + "," +
           detail::fixed(e.val_accuracy) + "\n";
    }
  }
  return s;
}

/// seed,target,accuracy,accuracy_last,accuracy_best_val,best_val_accuracy,best_epoch
/// with target "avg" rows holding the mean over targets for each seed.
inline std::string protocol_csv(const ProtocolResult& p) {
  std::string s = "seed,target,accuracy,accuracy_last,accuracy_best_val,best_val_accuracy,best_epoch\n";
  for (int i = 0; i < p.seeds; ++i) {
    double last = 0, best = 0;
    for (int t = 0; t < p.num_domains; ++t) {
      const auto& r = p.at(i, t);
      s += std::to_string(r.seed) + "," + std::to_string(t) + "," + detail::fixed(r.test_accuracy) + "," +
           detail::fixed(r.test_accuracy_last) + "," + detail::fixed(r.test_accuracy_best_val) + "," +
           detail::fixed(r.best_val_accuracy) + "," + std::to_string(r.best_epoch) + "\n";
      last += r.test_accuracy_last;
      best += r.test_accuracy_best_val;
    }
    s += std::to_string(p.at(i, 0).seed) + ",avg," + detail::fixed(p.seed_average(i)) + "," +
         detail::fixed(last / p.num_domains) + "," + detail::fixed(best / p.num_domains) + ",,\n";
  }
  return s;
}

/// target,mean_accuracy,std_accuracy,seeds over seeds, then an "avg" row.
inline std::string summary_csv(const ProtocolResult& p) {
  std::string s = "target,mean_accuracy,std_accuracy,seeds\n";
  for (int t = 0; t < p.num_domains; ++t) {
    const double m = p.target_mean(t);
    double v = 0;
    for (int i = 0; i < p.seeds; ++i) v += std::pow(p.at(i, t).test_accuracy - m, 2);
    s += std::to_string(t) + "," + detail::fixed(m) + "," + detail::fixed(std::sqrt(v / p.seeds)) + "," +
         std::to_string(p.seeds) + "\n";
  }
  s += "avg," + detail::fixed(p.average()) + "," + detail::fixed(p.average_std()) + "," + std::to_string(p.seeds) +
       "\n";
  return s;
}

inline std::string timing_csv(const ProtocolResult& p) {
  std::string s = "seed,target,wall_seconds\n";
  for (const auto& r : p.runs)
    s += std::to_string(r.seed) + "," + std::to_string(r.target) + "," + detail::fixed(r.wall_seconds, 3) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationVariant {
  std::string name;
  RunConfig config;
};

inline std::vector<std::string> ablation_axes() { return {"components", "scale", "frequency", "location"}; }

/// components: baseline, FS with CE on both branches, FS+cons, FS+dsup, full.
inline std::vector<AblationVariant> ablation_grid(const RunConfig& base, const std::string& axis) {
  std::vector<AblationVariant> v;
  if (axis == "components") {
    RunConfig erm = base;
    erm.stylize_target.reset();
    erm.weights.lambda_cons = erm.weights.lambda_dsup = 0.0;
    erm.ce_on_stylized = false;
    RunConfig fs = base;
    fs.stylize_target = fs.stylize_target.value_or(StylizeTarget::low);
    fs.weights.lambda_cons = fs.weights.lambda_dsup = 0.0;
    fs.ce_on_stylized = true;
    RunConfig cons = fs, dsup = fs, full = fs;
    cons.ce_on_stylized = dsup.ce_on_stylized = full.ce_on_stylized = false;
    cons.weights.lambda_cons = base.weights.lambda_cons;
    dsup.weights.lambda_dsup = base.weights.lambda_dsup;
    full.weights.lambda_cons = base.weights.lambda_cons;
    full.weights.lambda_dsup = base.weights.lambda_dsup;
    v = {{"baseline", erm}, {"fs_ce_both", fs}, {"fs_cons", cons}, {"fs_dsup", dsup}, {"full", full}};
  } else if (axis == "scale") {
    for (double s : {1.0, 5.0, 10.0, 15.0, 20.0}) {
      RunConfig c = base;
      c.scale = {s, s};
      v.push_back({"s=" + detail::format_double(s), c});
    }
  } else if (axis == "frequency") {
    for (StylizeTarget t : {StylizeTarget::whole, StylizeTarget::high, StylizeTarget::low}) {
      RunConfig c = base;
      c.stylize_target = t;
      v.push_back({to_string(t), c});
    }
  } else if (axis == "location") {
    for (std::size_t k = 0; k < base.backbone.num_stages(); ++k) {
      RunConfig c = base;
      c.backbone.insertion_index = k;
      try {
        c.validate();
      } catch (const DimensionError&) {
        continue;
      }
      v.push_back({"after_stage" + std::to_string(k + 1), c});
    }
  } else {
    throw ParameterError("unknown ablation axis '" + axis + "' (components, scale, frequency, location)");
  }
  return v;
}

struct AblationRow {
  std::string name;
  ProtocolResult result;
};

/// variant,target_0..target_{K-1},avg,std,seeds (means over seeds)
inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  if (rows.empty()) return "";
  std::string s = "variant";
  for (int t = 0; t < rows[0].result.num_domains; ++t) s += ",target_" + std::to_string(t);
  s += ",avg,std,seeds\n";
  for (const auto& row : rows) {
    s += row.name;
    for (int t = 0; t < row.result.num_domains; ++t) s += "," + detail::fixed(row.result.target_mean(t));
    s += "," + detail::fixed(row.result.average()) + "," + detail::fixed(row.result.average_std()) + "," +
         std::to_string(row.result.seeds) + "\n";
  }
  return s;
}

struct ScaleVerdict {
  std::string shape;  // inverted-u, monotone-increasing, monotone-decreasing, endpoint-max
  std::string best_variant;
  double best_average = 0.0;
};

inline ScaleVerdict scale_verdict(const std::vector<AblationRow>& rows) {
  ScaleVerdict v;
  if (rows.empty()) return v;
  std::vector<double> a;
  for (const auto& r : rows) a.push_back(r.result.average());
  const auto best = static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
  v.best_variant = rows[best].name;
  v.best_average = a[best];
  bool up = true, down = true;
  for (std::size_t i = 1; i < a.size(); ++i) {
    up = up && a[i] >= a[i - 1];
    down = down && a[i] <= a[i - 1];
  }
  if (best != 0 && best + 1 != a.size()) v.shape = "inverted-u";
  else if (up) v.shape = "monotone-increasing";
  else if (down) v.shape = "monotone-decreasing";
  else v.shape = "endpoint-max";
  return v;
}

// ---------------------------------------------------------------------------
// Gradient checks

struct ComponentCheck {
  std::string name;
  double max_rel_error = 0.0;
  int instances = 0;
};

/// One differentiable component: given an RNG, builds fresh inputs and a loss
/// closure and returns its gradient check.
using GradCheckCase = std::function<GradCheckResult(Rng&)>;

inline std::vector<std::pair<std::string, GradCheckCase>> gradcheck_cases() {
  auto logits = [](Rng& rng, std::size_t b, std::size_t c) {
    Tensor t({b, c});
    for (auto& v : t.mutable_data()) v = rng.uniform(-3, 3);
    return t.set_requires_grad();
  };
  auto labels = [](Rng& rng, std::size_t n, std::size_t k) {
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.below(k));
    return y;
  };
  auto contrastive = [labels](bool aware) {
    return [labels, aware](Rng& rng) {
      const std::size_t b = 2 + rng.below(3), d = 4;
      Tensor raw({2 * b, d});
      for (auto& v : raw.mutable_data()) v = rng.normal();
      raw.set_requires_grad();
      const auto cls = labels(rng, b, 3), dom = labels(rng, b, 2);
      const double tau = 0.1 + rng.uniform();
      return check_gradients(
          [&, b] {
            const Tensor f = l2_normalize_rows(raw);
            const auto e = pair_views(slice0(f, 0, b), slice0(f, b, 2 * b), cls, dom);
            const auto s = build_contrast_sets(e.class_labels, e.domain_labels);
            return aware ? dsupcon_loss(e, s, tau) : supcon_loss(e, s, tau);
          },
          {raw});
    };
  };
  return {
      {"cross_entropy",
       [=](Rng& rng) {
         Tensor x = logits(rng, 6, 5);
         const auto y = labels(rng, 6, 5);
         return check_gradients([&] { return cross_entropy(x, y); }, {x});
       }},
      {"consistency",
       [=](Rng& rng) {
         const Tensor orig = logits(rng, 6, 5);
         Tensor styl = logits(rng, 6, 5);
         const double tau = 0.1 + 0.9 * rng.uniform();
         return check_gradients([&] { return consistency_loss(orig, styl, tau); }, {styl});
       }},
      {"supcon", contrastive(false)},
      {"dsupcon", contrastive(true)},
      {"stylization",
       [](Rng& rng) {
         Tensor z({3, 4, 4, 4});
         for (auto& v : z.mutable_data()) v = rng.normal();
         z.set_requires_grad();
         Tensor w(z.shape());
         for (auto& v : w.mutable_data()) v = rng.uniform(-1, 1);
         const SampledStyle style = stylize_detailed(z, {5, 5}, rng).style;
         return check_gradients([&] { return sum(mul(restyle(z, style).output, w)); }, {z});
       }},
      {"stylized_forward",
       [=](Rng& rng) {
         // Whole network, both branches, with the sampled style held fixed.
         BackboneConfig cfg;
         cfg.stage_channels = {3, 4};
         cfg.num_classes = 3;
         cfg.image_size = 8;
         cfg.pooled_stages = 1;
         cfg.insertion_index = 0;
         Model model(cfg);
         model.initialize(rng);
         for (auto& p : model.params()) {
           for (auto& v : p.value.mutable_data()) v += rng.uniform(-0.1, 0.1);
           p.value.set_requires_grad();
         }
         Tensor x({4, 3, 8, 8});
         for (auto& v : x.mutable_data()) v = rng.uniform();
         const std::vector<int> y = {0, 1, 0, 1}, d = {0, 0, 1, 1};
         SampledStyle style;
         {
           NoGradGuard guard;
           style = stylize_detailed(model.trunk(x), {3, 3}, rng).style;
         }
         std::vector<Tensor> inputs;
         for (auto& p : model.params()) inputs.push_back(p.value);
         const LossWeights w{0.0, 0.5, 0.5, 0.3};
         return check_gradients(
             [&] {
               const auto out = model.forward_dual(x, [&](const Tensor& z) { return restyle(z, style).output; });
               return training_loss(out, y, d, w, StepOptions{true}).total;
             },
             inputs);
       }},
  };
}

inline std::vector<ComponentCheck> run_gradcheck(std::uint64_t seed, int instances = 20,
                                                 const std::vector<std::pair<std::string, GradCheckCase>>& cases =
                                                     gradcheck_cases()) {
  std::vector<ComponentCheck> out;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    Rng rng(derive_seed(seed, k));
    ComponentCheck c{cases[k].first, 0.0, 0};
    for (int i = 0; i < instances; ++i) {
      c.max_rel_error = std::max(c.max_rel_error, cases[k].second(rng).max_rel_error);
      ++c.instances;
    }
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filesystem helpers

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParameterError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace fsdg
