#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "fsdg/harness.hpp"

namespace fs = std::filesystem;
using namespace fsdg;

namespace {

struct CommonOptions {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> target;
  std::optional<int> seeds;
  std::optional<int> threads;
  std::string out;
  std::string data_path;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "key = value config file");
  cmd->add_option("--preset", o.preset, "start from a named preset (desk, resnet18-pacs)");
  cmd->add_option("--set", o.overrides, "override one key, KEY=VALUE (repeatable)");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--data", o.data_path, "dataset container to use instead of generating one");
  cmd->add_option("--threads", o.threads, "worker threads (0 = all cores)");
}

struct Resolved {
  RunConfig config;
  std::string input_text;  // verbatim contents of --config, if any
};

Resolved resolve(const CommonOptions& o, bool task_only = false) {
  Resolved r;
  if (!o.preset.empty()) apply_preset(r.config, o.preset);
  if (!o.config_path.empty()) {
    r.input_text = detail::read_file(o.config_path);
    apply_config_text(r.config, r.input_text);
  }
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParameterError("--set expects KEY=VALUE, got '" + kv + "'");
    set_config_value(r.config, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  if (o.seed) r.config.seed = *o.seed;
  if (o.target) r.config.target = *o.target;
  if (o.seeds) r.config.seeds = *o.seeds;
  if (o.threads) r.config.threads = *o.threads;
  if (!o.out.empty()) r.config.out = o.out;
  if (task_only) r.config.task.validate();
  else r.config.validate();
  return r;
}

void echo_config(const Resolved& r) {
  const fs::path out = r.config.out;
  if (!r.input_text.empty()) write_text(out / "config.input.txt", r.input_text);
  write_text(out / "config.resolved.txt", config_to_text(r.config));
}

Dataset load_data(const CommonOptions& o, const RunConfig& cfg) {
  if (o.data_path.empty()) return generate_task(cfg.task);
  Dataset ds = decode_dataset(detail::read_file(o.data_path));
  if (ds.config.num_classes != cfg.task.num_classes || ds.config.image_size != cfg.task.image_size) {
    throw ParameterError("dataset classes or image size disagree with the config");
  }
  return ds;
}

std::string fmt_pct(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * a);
  return buf;
}

int cmd_train(const CommonOptions& o) {
  const Resolved r = resolve(o);
  const RunConfig& cfg = r.config;
  echo_config(r);
  const Dataset ds = load_data(o, cfg);
  const TrainResult res = train_split(cfg, ds, cfg.target, cfg.seed);
  const fs::path out = cfg.out;
  write_text(out / "train_log.csv", epochs_csv({&res}));
  write_text(out / "result.csv",
             "seed,target,accuracy,accuracy_last,accuracy_best_val,best_val_accuracy,best_epoch\n" +
                 std::to_string(res.seed) + "," + std::to_string(res.target) + "," +
                 detail::fixed(res.test_accuracy) + "," + detail::fixed(res.test_accuracy_last) + "," +
                 detail::fixed(res.test_accuracy_best_val) + "," + detail::fixed(res.best_val_accuracy) + "," +
                 std::to_string(res.best_epoch) + "\n");
  write_text(out / "timing.csv", "seed,target,wall_seconds\n" + std::to_string(res.seed) + "," +
                                     std::to_string(res.target) + "," + detail::fixed(res.wall_seconds, 3) + "\n");
  const CheckpointHeader header{kCheckpointVersion, config_to_text(cfg), ""};
  save_checkpoint((out / "checkpoint.bin").string(), *res.best_model, header);
  save_checkpoint((out / "checkpoint_last.bin").string(), *res.last_model, header);
  std::cout << "target " << cfg.target << " seed " << cfg.seed << ": test " << fmt_pct(res.test_accuracy)
            << "% (last " << fmt_pct(res.test_accuracy_last) << "%, best-val " << fmt_pct(res.test_accuracy_best_val)
            << "% at epoch " << res.best_epoch << ")\n";
  return 0;
}

void print_protocol(const ProtocolResult& p) {
  for (int t = 0; t < p.num_domains; ++t) std::cout << "  target " << t << ": " << fmt_pct(p.target_mean(t)) << "%\n";
  std::cout << "  average : " << fmt_pct(p.average()) << "% +- " << fmt_pct(p.average_std()) << " over " << p.seeds
            << " seed(s)" << std::endl;
}

void write_protocol(const fs::path& out, const ProtocolResult& p) {
  std::vector<const TrainResult*> runs;
  for (const auto& r : p.runs) runs.push_back(&r);
  write_text(out / "protocol.csv", protocol_csv(p));
  write_text(out / "summary.csv", summary_csv(p));
  write_text(out / "train_log.csv", epochs_csv(runs));
  write_text(out / "timing.csv", timing_csv(p));
}

int cmd_protocol(const CommonOptions& o) {
  const Resolved r = resolve(o);
  echo_config(r);
  const Dataset ds = load_data(o, r.config);
  const ProtocolResult p = run_protocol(r.config, ds);
  write_protocol(r.config.out, p);
  print_protocol(p);
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::vector<std::string>& axes, bool dat) {
  const Resolved r = resolve(o);
  echo_config(r);
  const Dataset ds = load_data(o, r.config);
  const fs::path root = r.config.out;
  for (const auto& axis : axes) {
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_grid(r.config, axis)) {
      std::cout << axis << " / " << v.name << std::endl;
      rows.push_back({v.name, run_protocol(v.config, ds)});
      write_protocol(root / axis / v.name, rows.back().result);
      print_protocol(rows.back().result);
    }
    write_text(root / ("ablation_" + axis + ".csv"), ablation_csv(rows));
    if (axis == "scale") {
      const ScaleVerdict verdict = scale_verdict(rows);
      write_text(root / "scale_verdict.json", nlohmann::json{{"shape", verdict.shape},
                                                              {"best_variant", verdict.best_variant},
                                                              {"best_average", verdict.best_average}}
                                                      .dump(2) +
                                                  "\n");
      std::cout << "scale verdict: " << verdict.shape << " (best " << verdict.best_variant << ")\n";
      if (dat) {
        std::string text = "# s average std\n";
        for (const auto& row : rows) {
          text += row.name.substr(2) + " " + detail::fixed(row.result.average()) + " " +
                  detail::fixed(row.result.average_std()) + "\n";
        }
        write_text(root / "scale.dat", text);
      }
    }
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int instances, const std::string& out) {
  const auto checks = run_gradcheck(seed, instances);
  std::string csv = "component,instances,max_rel_error,passed\n";
  std::vector<std::string> failed;
  for (const auto& c : checks) {
    const bool ok = c.max_rel_error < 1e-4;
    if (!ok) failed.push_back(c.name);
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %3d instances  max rel err %.3e  %s\n", c.name.c_str(), c.instances,
                  c.max_rel_error, ok ? "ok" : "FAIL");
    std::cout << line;
    char err[32];
    std::snprintf(err, sizeof err, "%.6e", c.max_rel_error);
    csv += c.name + "," + std::to_string(c.instances) + "," + err + "," + (ok ? "true" : "false") + "\n";
  }
  if (!out.empty()) write_text(fs::path(out) / "gradcheck.csv", csv);
  if (!failed.empty()) {
    std::cerr << "gradient check failed for:";
    for (const auto& f : failed) std::cerr << " " << f;
    std::cerr << "\n";
    return 2;
  }
  return 0;
}

int cmd_gen_data(const CommonOptions& o, bool manifest) {
  const Resolved r = resolve(o, true);
  const Dataset ds = generate_task(r.config.task);
  const fs::path out = r.config.out;
  fs::create_directories(out);
  detail::write_file((out / "dataset.bin").string(), encode_dataset(ds));
  write_text(out / "dataset.json", dataset_sidecar(ds).dump(2) + "\n");
  if (manifest) write_text(out / "manifest.csv", dataset_manifest_csv(ds));
  std::cout << "wrote " << ds.size() << " samples to " << (out / "dataset.bin").string() << "\n";
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint) {
  // Architecture comes from the config stored in the checkpoint.
  std::string bytes = detail::read_file(checkpoint);
  RunConfig stored;
  {
    detail::Reader reader(bytes);
    if (reader.bytes(8) != "FSDGCKPT") throw ParameterError("checkpoint: bad magic");
    reader.get<std::uint32_t>();
    apply_config_text(stored, reader.str());
  }
  stored.validate();
  Model model(stored.model_config());
  decode_checkpoint(bytes, model);
  const Dataset ds = load_data(o, stored);
  std::string csv = "domain,samples,accuracy\n";
  for (int k = 0; k < ds.config.num_domains; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.domain_labels[i] == k) idx.push_back(i);
    const double acc = accuracy(model, ds, idx);
    csv += std::to_string(k) + "," + std::to_string(idx.size()) + "," + detail::fixed(acc) + "\n";
    std::cout << "domain " << k << (k == stored.target ? " (held out)" : "") << ": " << fmt_pct(acc) << "%\n";
  }
  if (!o.out.empty()) write_text(fs::path(o.out) / "eval.csv", csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-aware feature stylization for domain generalization"};
  app.require_subcommand(1);

  CommonOptions train_o, proto_o, ablate_o, gen_o, eval_o;
  auto* train = app.add_subcommand("train", "train on one leave-one-domain-out split");
  add_common(train, train_o);
  train->add_option("--target", train_o.target, "held-out domain");

  auto* protocol = app.add_subcommand("protocol", "every leave-one-domain-out split over several seeds");
  add_common(protocol, proto_o);
  protocol->add_option("--seeds", proto_o.seeds, "number of consecutive seeds");

  auto* ablate = app.add_subcommand("ablate", "one protocol run per variant of an ablation axis");
  add_common(ablate, ablate_o);
  ablate->add_option("--seeds", ablate_o.seeds, "number of consecutive seeds");
  std::vector<std::string> axes;
  ablate->add_option("--axis", axes, "components, scale, frequency, location or all")
      ->required()
      ->check(CLI::IsMember({"components", "scale", "frequency", "location", "all"}));
  bool dat = false;
  ablate->add_flag("--dat", dat, "also write gnuplot .dat files");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable component");
  std::uint64_t gc_seed = 0;
  int gc_instances = 20;
  std::string gc_out;
  gradcheck->add_option("--seed", gc_seed, "seed for the random instances");
  gradcheck->add_option("--instances", gc_instances, "instances per component")->check(CLI::PositiveNumber);
  gradcheck->add_option("--out", gc_out, "directory for gradcheck.csv");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic task as a binary container");
  add_common(gen, gen_o);
  bool manifest = false;
  gen->add_flag("--manifest", manifest, "also write a per-sample CSV manifest");

  auto* eval = app.add_subcommand("eval", "per-domain accuracy of a checkpoint");
  eval->add_option("--data", eval_o.data_path, "dataset container; default regenerates the training task");
  eval->add_option("--out", eval_o.out, "directory for eval.csv");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(train_o);
    if (*protocol) return cmd_protocol(proto_o);
    if (*ablate) {
      if (std::find(axes.begin(), axes.end(), "all") != axes.end()) axes = ablation_axes();
      return cmd_ablate(ablate_o, axes, dat);
    }
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_instances, gc_out);
    if (*gen) return cmd_gen_data(gen_o, manifest);
    if (*eval) return cmd_eval(eval_o, checkpoint);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
