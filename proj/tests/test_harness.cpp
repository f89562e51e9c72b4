#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "fsdg/harness.hpp"

using namespace fsdg;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.task.per_domain = 70;
  c.epochs = 2;
  c.per_domain = 8;
  c.seeds = 1;
  c.threads = 1;
  return c;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Config, ParsesKeyValueText) {
  RunConfig c;
  apply_config_text(c, "# comment\n train.epochs = 7 \nstyle.target=high\nloss.lambda_dsup = 0.5 # trailing\n"
                       "model.channels = 4, 8, 8\nloss.ce_on_stylized = true\n");
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.stylize_target, StylizeTarget::high);
  EXPECT_EQ(c.weights.lambda_dsup, 0.5);
  EXPECT_EQ(c.backbone.stage_channels, (std::vector<std::size_t>{4, 8, 8}));
  EXPECT_TRUE(c.ce_on_stylized);
  apply_config_text(c, "style.target = off");
  EXPECT_FALSE(c.stylize_target.has_value());
}

TEST(Config, RejectsMalformedInput) {
  RunConfig c;
  EXPECT_THROW(apply_config_text(c, "train.epochs 7"), ParameterError);
  EXPECT_THROW(apply_config_text(c, "train.epoch = 7"), ParameterError);
  EXPECT_THROW(apply_config_text(c, "train.epochs = seven"), ParameterError);
  EXPECT_THROW(apply_config_text(c, "train.epochs = 7.5"), ParameterError);
  EXPECT_THROW(apply_config_text(c, "style.target = mid"), ParameterError);
  EXPECT_THROW(apply_config_text(c, "loss.ce_on_stylized = maybe"), ParameterError);
}

TEST(Config, ResolvedTextRoundTrips) {
  RunConfig c;
  apply_config_text(c, "preset = resnet18-pacs\nrun.seed = 12\nstyle.s_mu = 0.1");
  const std::string text = config_to_text(c);
  RunConfig back;
  apply_config_text(back, text);
  EXPECT_EQ(config_to_text(back), text);
  EXPECT_EQ(back.scale.s_mu, 0.1);
}

TEST(Config, PresetCarriesReferenceHyperparameters) {
  RunConfig c;
  apply_preset(c, "resnet18-pacs");
  EXPECT_EQ(c.weights.lambda_cons, 0.3);
  EXPECT_EQ(c.weights.lambda_dsup, 12.0);
  EXPECT_EQ(c.weights.tau_cons, 0.5);
  EXPECT_EQ(c.weights.tau_dsup, 0.15);
  EXPECT_EQ(c.scale.s_mu, 10.0);
  EXPECT_EQ(c.scale.s_sigma, 10.0);
  EXPECT_EQ(c.lr, 0.004);
  EXPECT_EQ(c.epochs, 40);
  EXPECT_EQ(c.per_domain, 42);
  EXPECT_EQ(c.lr_decay_epoch, 20);
  EXPECT_THROW(apply_preset(c, "resnet99"), ParameterError);
}

TEST(Config, DeskDefaults) {
  const RunConfig c;
  EXPECT_EQ(c.epochs, 30);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_EQ(c.per_domain, 16);
  EXPECT_DOUBLE_EQ(c.lr_at(19), 0.01);
  EXPECT_DOUBLE_EQ(c.lr_at(20), 0.001);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ValidationRunsBeforeCompute) {
  auto bad = [](const std::string& text) {
    RunConfig c = tiny_config();
    apply_config_text(c, text);
    return c;
  };
  EXPECT_THROW(bad("train.per_domain = 64").validate(), ParameterError);
  EXPECT_THROW(bad("run.target = 4").validate(), ParameterError);
  EXPECT_THROW(bad("train.epochs = 0").validate(), ParameterError);
  EXPECT_THROW(bad("loss.tau_cons = 1.5").validate(), ParameterError);
  EXPECT_THROW(bad("style.s_mu = -1").validate(), ParameterError);
  EXPECT_THROW(bad("model.insertion = 4").validate(), DimensionError);
  EXPECT_THROW(bad("train.momentum = 1").validate(), ParameterError);
}

TEST(Train, ErmConfigurationLogsOnlyCrossEntropy) {
  RunConfig c = tiny_config();
  c.stylize_target.reset();
  c.weights.lambda_cons = c.weights.lambda_dsup = 0.0;
  const Dataset ds = generate_task(c.task);
  const TrainResult r = train_split(c, ds, 1, 0);
  ASSERT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.epochs) {
    EXPECT_FALSE(e.loss_cons.has_value());
    EXPECT_FALSE(e.loss_dsup.has_value());
    EXPECT_DOUBLE_EQ(e.loss_total, e.loss_ce);
  }
}

TEST(Train, FullConfigurationLogsEveryComponent) {
  const RunConfig c = tiny_config();
  const Dataset ds = generate_task(c.task);
  const TrainResult r = train_split(c, ds, 0, 0);
  for (const auto& e : r.epochs) {
    ASSERT_TRUE(e.loss_cons && e.loss_dsup);
    EXPECT_NEAR(e.loss_total, e.loss_ce + c.weights.lambda_cons * *e.loss_cons + c.weights.lambda_dsup * *e.loss_dsup,
                1e-9);
    EXPECT_GE(e.val_accuracy, 0.0);
    EXPECT_LE(e.val_accuracy, 1.0);
  }
  EXPECT_EQ(r.test_accuracy, r.test_accuracy_last);
  EXPECT_GE(r.best_epoch, 1);
}

TEST(Train, SameSeedGivesIdenticalLogs) {
  const RunConfig c = tiny_config();
  const Dataset ds = generate_task(c.task);
  const TrainResult a = train_split(c, ds, 2, 5), b = train_split(c, ds, 2, 5), other = train_split(c, ds, 2, 6);
  EXPECT_EQ(epochs_csv({&a}), epochs_csv({&b}));
  EXPECT_NE(epochs_csv({&a}), epochs_csv({&other}));
  EXPECT_EQ(encode_checkpoint(*a.best_model, {}), encode_checkpoint(*b.best_model, {}));
}

TEST(Train, BestValidationModelIsASnapshot) {
  RunConfig c = tiny_config();
  c.epochs = 3;
  c.selection = Selection::best_val;
  const Dataset ds = generate_task(c.task);
  const TrainResult r = train_split(c, ds, 0, 1);
  const auto split = leave_one_domain_out(ds, 0, 1);
  EXPECT_EQ(accuracy(*r.best_model, ds, split.val), r.best_val_accuracy);
  EXPECT_EQ(accuracy(*r.best_model, ds, split.test), r.test_accuracy);
  EXPECT_EQ(accuracy(*r.last_model, ds, split.test), r.test_accuracy_last);
}

TEST(Train, TargetDomainIsReadOnlyAfterTraining) {
  const RunConfig c = tiny_config();
  const Dataset ds = generate_task(c.task);
  for (int target = 0; target < 4; ++target) {
    std::vector<std::pair<AccessPhase, std::vector<std::size_t>>> log;
    train_split(c, ds, target, 0, [&](AccessPhase phase, std::span<const std::size_t> idx) {
      log.emplace_back(phase, std::vector<std::size_t>(idx.begin(), idx.end()));
    });
    ASSERT_FALSE(log.empty());
    EXPECT_EQ(log.back().first, AccessPhase::test);
    for (std::size_t k = 0; k + 1 < log.size(); ++k) {
      EXPECT_NE(log[k].first, AccessPhase::test);
      for (std::size_t i : log[k].second) ASSERT_NE(ds.domain_labels[i], target) << "read before evaluation";
    }
    for (std::size_t i : log.back().second) EXPECT_EQ(ds.domain_labels[i], target);
    EXPECT_EQ(log.back().second.size(), 70u);
  }
}

TEST(Protocol, RowsPerSeedAndAverage) {
  RunConfig c = tiny_config();
  c.epochs = 1;
  c.seeds = 2;
  c.seed = 10;
  const Dataset ds = generate_task(c.task);
  const ProtocolResult p = run_protocol(c, ds);
  const auto rows = lines(protocol_csv(p));
  ASSERT_EQ(rows.size(), 1u + 2 * 5);
  EXPECT_EQ(rows[0], "seed,target,accuracy,accuracy_last,accuracy_best_val,best_val_accuracy,best_epoch");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].substr(0, 3), i <= 5 ? "10," : "11,");
  EXPECT_EQ(rows[5].substr(0, 7), "10,avg,");
  for (int s = 0; s < 2; ++s) {
    double mean = 0;
    for (int t = 0; t < 4; ++t) mean += p.at(s, t).test_accuracy;
    EXPECT_NEAR(p.seed_average(s), mean / 4, 1e-12);
  }
  EXPECT_NEAR(p.average(), (p.seed_average(0) + p.seed_average(1)) / 2, 1e-12);
  const auto summary = lines(summary_csv(p));
  ASSERT_EQ(summary.size(), 6u);
  EXPECT_EQ(summary[5].substr(0, 4), "avg,");
}

TEST(Protocol, ThreadCountDoesNotChangeResults) {
  RunConfig c = tiny_config();
  c.epochs = 1;
  const Dataset ds = generate_task(c.task);
  c.threads = 1;
  const std::string serial = protocol_csv(run_protocol(c, ds));
  c.threads = 3;
  EXPECT_EQ(protocol_csv(run_protocol(c, ds)), serial);
}

TEST(Protocol, WorkerErrorsPropagate) {
  EXPECT_THROW(parallel_for(8, 2, [](std::size_t i) {
                 if (i == 5) throw NumericalError("boom");
               }),
               NumericalError);
}

TEST(Ablation, ComponentGridRows) {
  const RunConfig base;
  const auto g = ablation_grid(base, "components");
  ASSERT_EQ(g.size(), 5u);
  EXPECT_EQ(g[0].name, "baseline");
  EXPECT_FALSE(g[0].config.stylize_target.has_value());
  EXPECT_EQ(g[0].config.weights.lambda_cons + g[0].config.weights.lambda_dsup, 0.0);
  EXPECT_TRUE(g[1].config.ce_on_stylized);
  EXPECT_EQ(g[1].config.weights.lambda_cons + g[1].config.weights.lambda_dsup, 0.0);
  EXPECT_EQ(g[2].config.weights.lambda_cons, base.weights.lambda_cons);
  EXPECT_EQ(g[2].config.weights.lambda_dsup, 0.0);
  EXPECT_EQ(g[3].config.weights.lambda_cons, 0.0);
  EXPECT_EQ(g[3].config.weights.lambda_dsup, base.weights.lambda_dsup);
  EXPECT_EQ(g[4].config.weights.lambda_cons, base.weights.lambda_cons);
  EXPECT_EQ(g[4].config.weights.lambda_dsup, base.weights.lambda_dsup);
  for (std::size_t k = 1; k < 5; ++k) EXPECT_EQ(g[k].config.stylize_target, StylizeTarget::low);
}

TEST(Ablation, ScaleFrequencyAndLocationGrids) {
  const RunConfig base;
  std::vector<double> s;
  for (const auto& v : ablation_grid(base, "scale")) {
    EXPECT_EQ(v.config.scale.s_mu, v.config.scale.s_sigma);
    s.push_back(v.config.scale.s_mu);
  }
  EXPECT_EQ(s, (std::vector<double>{1, 5, 10, 15, 20}));
  const auto f = ablation_grid(base, "frequency");
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0].config.stylize_target, StylizeTarget::whole);
  EXPECT_EQ(f[1].config.stylize_target, StylizeTarget::high);
  EXPECT_EQ(f[2].config.stylize_target, StylizeTarget::low);
  const auto l = ablation_grid(base, "location");
  ASSERT_EQ(l.size(), 4u);
  for (std::size_t k = 0; k < l.size(); ++k) EXPECT_EQ(l[k].config.backbone.insertion_index, k);
  EXPECT_THROW(ablation_grid(base, "depth"), ParameterError);
  RunConfig wide = base;
  wide.backbone.pooled_stages = 4;  // last stage leaves a 1x1 map with no frequency split
  EXPECT_EQ(ablation_grid(wide, "location").size(), 3u);
}

TEST(Ablation, ScaleVerdict) {
  auto rows = [](std::vector<double> avgs) {
    std::vector<AblationRow> r;
    for (std::size_t i = 0; i < avgs.size(); ++i) {
      AblationRow row{"s=" + std::to_string(i), {}};
      row.result.num_domains = 1;
      row.result.seeds = 1;
      row.result.runs.resize(1);
      row.result.runs[0].test_accuracy = avgs[i];
      r.push_back(std::move(row));
    }
    return r;
  };
  EXPECT_EQ(scale_verdict(rows({0.5, 0.7, 0.8, 0.6, 0.5})).shape, "inverted-u");
  EXPECT_EQ(scale_verdict(rows({0.5, 0.7, 0.8, 0.6, 0.5})).best_variant, "s=2");
  EXPECT_EQ(scale_verdict(rows({0.5, 0.6, 0.6, 0.7, 0.8})).shape, "monotone-increasing");
  EXPECT_EQ(scale_verdict(rows({0.8, 0.6, 0.6, 0.5, 0.4})).shape, "monotone-decreasing");
  EXPECT_EQ(scale_verdict(rows({0.8, 0.6, 0.7, 0.5, 0.4})).shape, "endpoint-max");
}

TEST(Ablation, CsvHasOneRowPerVariant) {
  std::vector<AblationRow> rows(2);
  rows[0].name = "a";
  rows[1].name = "b";
  for (auto& r : rows) {
    r.result.num_domains = 2;
    r.result.seeds = 1;
    r.result.runs.resize(2);
    r.result.runs[0].test_accuracy = 0.5;
    r.result.runs[1].test_accuracy = 1.0;
  }
  const auto l = lines(ablation_csv(rows));
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l[0], "variant,target_0,target_1,avg,std,seeds");
  EXPECT_EQ(l[1], "a,0.500000,1.000000,0.750000,0.000000,1");
}

TEST(GradCheck, EveryComponentPasses) {
  const auto checks = run_gradcheck(3, 20);
  ASSERT_EQ(checks.size(), 6u);
  for (const auto& c : checks) {
    EXPECT_EQ(c.instances, 20);
    EXPECT_LT(c.max_rel_error, 1e-4) << c.name;
  }
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  // x * stop_gradient(x) differentiates as if one factor were constant.
  const std::vector<std::pair<std::string, GradCheckCase>> broken = {
      {"broken_square", [](Rng& rng) {
         Tensor x({5});
         for (auto& v : x.mutable_data()) v = rng.uniform(0.5, 2.0);
         x.set_requires_grad();
         return check_gradients([&] { return sum(mul(x, stop_gradient(x))); }, {x});
       }}};
  const auto checks = run_gradcheck(0, 3, broken);
  EXPECT_GT(checks[0].max_rel_error, 0.1);
}

TEST(Train, DivergenceAbortsWithNumericalError) {
  RunConfig c = tiny_config();
  c.lr = 1e9;
  const Dataset ds = generate_task(c.task);
  EXPECT_THROW(train_split(c, ds, 0, 0), NumericalError);
}

TEST(Train, ShapeIsLearnableWithinOneDomain) {
  RunConfig c;
  c.task.num_domains = 2;
  c.stylize_target.reset();
  c.weights.lambda_cons = c.weights.lambda_dsup = 0.0;
  c.epochs = 15;
  c.lr_decay_epoch = 10;
  auto domains = default_domains();
  domains.resize(2);
  domains[1] = domains[0];
  domains[1].domain_id = 1;
  const Dataset ds = generate_task(c.task, domains);
  const TrainResult r = train_split(c, ds, 1, 0);
  EXPECT_GT(r.test_accuracy, 0.9);
}
