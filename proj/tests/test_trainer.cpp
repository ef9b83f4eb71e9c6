#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "convexlab/trainer.hpp"

namespace cl = convexlab;
namespace ad = convexlab::ad;

using Catch::Matchers::ContainsSubstring;

namespace {

cl::SynthTask two_atom_task() {
  return cl::make_explicit_task(cl::Vocab::standard(2), 2, {{{"ab", 0.6}, {"ba", 0.4}}});
}

double final_kl(const auto& model, const cl::SynthTask& task) {
  const std::vector<std::size_t> widths{1};
  return cl::eval_metrics(model, task, 0, widths).kl_nats;
}

// Gradients of the mean batch loss for a fixed model and batch, under the
// requested gradient path.
std::vector<std::vector<double>> batch_gradients(const cl::ArModel& model,
                                                 const cl::LossFamily& fam,
                                                 double eps_ls, cl::GradPath path) {
  ad::Graph g;
  const std::vector<ad::NodeRef> leaves = model.make_leaves(g);
  cl::detail::BatchGroups groups;
  groups[{0, {0, 1}}] = 2;
  groups[{0, {1, 2}}] = 1;
  groups[{1, {2, 0}}] = 1;
  const ad::NodeRef loss =
      cl::detail::build_batch_loss(model, g, leaves, groups, 4, fam, eps_ls, path, 1);
  g.backward(loss);
  std::vector<std::vector<double>> out;
  for (const ad::NodeRef leaf : leaves) out.push_back(g.grad(leaf));
  return out;
}

}  // namespace

TEST_CASE("learning rate warms up linearly, then decays as inverse square root") {
  cl::OptimizerCfg cfg;
  cfg.lr = 4e-3;
  cfg.warmup_steps = 100;
  CHECK(cl::lr_at(cfg, 1) == Catch::Approx(4e-5).margin(1e-18));
  CHECK(cl::lr_at(cfg, 50) == Catch::Approx(2e-3).margin(1e-15));
  CHECK(cl::lr_at(cfg, 100) == Catch::Approx(4e-3).margin(1e-15));
  CHECK(cl::lr_at(cfg, 400) == Catch::Approx(2e-3).margin(1e-15));
  CHECK(cl::lr_at(cfg, 10000) == Catch::Approx(4e-4).margin(1e-15));

  cfg.warmup_steps = 0;
  CHECK(cl::lr_at(cfg, 1) == 4e-3);
  CHECK(cl::lr_at(cfg, 999) == 4e-3);
}

TEST_CASE("optimizer config validation") {
  cl::OptimizerCfg cfg;
  CHECK_NOTHROW(cfg.validate());

  cl::OptimizerCfg bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.label_smoothing = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.grad_clip = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("training is deterministic for a fixed batch seed") {
  cl::SynthTask task = two_atom_task();
  cl::Dataset data = cl::sample_dataset(task, 256, 5);
  cl::OptimizerCfg cfg;
  cfg.steps = 40;
  cfg.batch_size = 32;
  cfg.warmup_steps = 10;

  cl::ArModel a(cl::make_model_config(task, 3, 6), 2);
  cl::ArModel b(cl::make_model_config(task, 3, 6), 2);
  const auto curve_a = cl::train_phase(a, data, cl::LossFamily::log_loss(), cfg, 77);
  const auto curve_b = cl::train_phase(b, data, cl::LossFamily::log_loss(), cfg, 77);
  CHECK(curve_a == curve_b);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params()[i].t.v == b.params()[i].t.v);

  cl::ArModel c(cl::make_model_config(task, 3, 6), 2);
  const auto curve_c = cl::train_phase(c, data, cl::LossFamily::log_loss(), cfg, 78);
  CHECK(curve_a != curve_c);
}

TEST_CASE("batch seed is irrelevant once the batch covers the dataset") {
  cl::SynthTask task = two_atom_task();
  cl::Dataset data = cl::sample_dataset(task, 32, 5);
  cl::OptimizerCfg cfg;
  cfg.steps = 20;
  cfg.batch_size = 64;  // > dataset size, so every step sees all of it
  cfg.warmup_steps = 5;

  cl::ArModel a(cl::make_model_config(task, 3, 6), 2);
  cl::ArModel b(cl::make_model_config(task, 3, 6), 2);
  const auto curve_a = cl::train_phase(a, data, cl::LossFamily::log_loss(), cfg, 1);
  const auto curve_b = cl::train_phase(b, data, cl::LossFamily::log_loss(), cfg, 999);
  CHECK(curve_a == curve_b);
}

TEST_CASE("log-loss training drives an autoregressive model to the data") {
  cl::SynthTask task = two_atom_task();
  cl::Dataset data = cl::sample_dataset(task, 512, 5);
  cl::OptimizerCfg cfg;
  cfg.steps = 400;
  cfg.batch_size = 64;
  cfg.warmup_steps = 50;

  cl::ArModel m(cl::make_model_config(task, 4, 8), 1);
  const auto curve = cl::train_phase(m, data, cl::LossFamily::log_loss(), cfg, 9);
  REQUIRE(curve.size() == 400);
  CHECK(curve.back() < curve.front());
  CHECK(final_kl(m, task) < 0.05);
}

TEST_CASE("a position-factorized model cannot beat the factorization floor") {
  cl::SynthTask task = two_atom_task();
  const double floor = cl::nar_lower_bound(task);
  cl::Dataset data = cl::sample_dataset(task, 512, 5);
  cl::OptimizerCfg cfg;
  cfg.steps = 400;
  cfg.batch_size = 64;
  cfg.warmup_steps = 50;

  cl::NarModel m(cl::make_model_config(task, 4, 8), 1);
  cl::train_phase(m, data, cl::LossFamily::log_loss(), cfg, 9);
  const double kl = final_kl(m, task);
  CHECK(kl >= floor - 1e-9);
  CHECK(kl < floor + 0.05);
}

TEST_CASE("detaching the composition weight leaves gradients unchanged") {
  cl::ModelConfig cfg{2, cl::Vocab::standard(3), 2, 3, 4};
  cl::ArModel model(cfg, 31);

  const std::vector<cl::LossFamily> families{
      cl::LossFamily::log_loss(), cl::LossFamily::exp_composed(0.5),
      cl::LossFamily::power_composed(0.5),
      cl::LossFamily::pure_convex(cl::ConvexVariant::kIdentity),
      cl::LossFamily::pure_convex(cl::ConvexVariant::kExp)};
  for (const cl::LossFamily& fam : families) {
    for (double eps : {0.0, 0.1}) {
      const auto exact = batch_gradients(model, fam, eps, cl::GradPath::kExact);
      const auto detached = batch_gradients(model, fam, eps, cl::GradPath::kDetachedWeight);
      REQUIRE(exact.size() == detached.size());
      for (std::size_t p = 0; p < exact.size(); ++p) {
        for (std::size_t c = 0; c < exact[p].size(); ++c) {
          const double scale =
              std::max({1e-8, std::abs(exact[p][c]), std::abs(detached[p][c])});
          CHECK(std::abs(exact[p][c] - detached[p][c]) / scale <= 1e-10);
        }
      }
    }
  }
}

TEST_CASE("label smoothing runs through every composed family") {
  cl::SynthTask task = two_atom_task();
  cl::Dataset data = cl::sample_dataset(task, 64, 3);
  cl::OptimizerCfg cfg;
  cfg.steps = 3;
  cfg.batch_size = 16;
  cfg.warmup_steps = 1;
  cfg.label_smoothing = 0.1;

  for (const cl::LossFamily& fam :
       {cl::LossFamily::log_loss(), cl::LossFamily::exp_composed(2.0),
        cl::LossFamily::power_composed(0.5)}) {
    cl::ArModel m(cl::make_model_config(task, 3, 6), 4);
    const auto curve = cl::train_phase(m, data, fam, cfg, 8);
    REQUIRE(curve.size() == 3);
    for (double v : curve) CHECK(std::isfinite(v));
  }
}

TEST_CASE("power fine-tuning aborts when a sequence saturates") {
  cl::SynthTask task =
      cl::make_explicit_task(cl::Vocab::standard(2), 1, {{{"a", 0.9}, {"b", 0.1}}});
  cl::Dataset data;
  data.items.push_back({0, {0}});

  cl::ArModel m(cl::make_model_config(task, 2, 2), 0);
  for (auto& p : m.params())
    for (double& v : p.t.v) v = 0.0;
  m.param("b_out_0").t.v = {800.0, -800.0};  // p("a") underflows to exactly 1

  cl::OptimizerCfg cfg;
  cfg.steps = 5;
  CHECK_THROWS_MATCHES(
      cl::train_phase(m, data, cl::LossFamily::power_composed(0.5), cfg, 1), cl::TrainAbort,
      Catch::Matchers::MessageMatches(ContainsSubstring(cl::kPowerWeightAbortMessage) &&
                                      ContainsSubstring("(step 1)")));

  // The same model trains fine when the exponent removes the singularity.
  cl::ArModel ok(cl::make_model_config(task, 2, 2), 0);
  ok.params() = m.params();
  cfg.steps = 1;
  CHECK_NOTHROW(cl::train_phase(ok, data, cl::LossFamily::power_composed(1.0), cfg, 1));
}

TEST_CASE("training guards") {
  cl::SynthTask task = two_atom_task();
  cl::Dataset empty;
  cl::OptimizerCfg cfg;
  cfg.steps = 1;

  cl::ArModel m(cl::make_model_config(task, 3, 6), 1);
  CHECK_THROWS_AS(cl::train_phase(m, empty, cl::LossFamily::log_loss(), cfg, 1),
                  std::invalid_argument);

  cl::Dataset data = cl::sample_dataset(task, 16, 1);
  CHECK_THROWS_WITH(cl::train_phase(m, data, cl::LossFamily::pure_convex(), cfg, 1),
                    ContainsSubstring("allow_pure_convex"));

  cl::OptimizerCfg allowed = cfg;
  allowed.allow_pure_convex = true;
  CHECK_NOTHROW(cl::train_phase(m, data, cl::LossFamily::pure_convex(), allowed, 1));
}

TEST_CASE("two-phase runs record both phases with their metrics") {
  cl::SynthTask task = two_atom_task();
  cl::Dataset data = cl::sample_dataset(task, 64, 7);

  cl::PhasePlan plan;
  plan.pretrain.steps = 10;
  plan.pretrain.warmup_steps = 2;
  plan.finetune.steps = 5;
  plan.finetune.warmup_steps = 2;
  plan.finetune_family = cl::LossFamily::exp_composed(2.0);
  plan.beam_widths = {1, 2};

  cl::RunRecord rec = cl::run_two_phase(plan, task, data, 3, "ar",
                                        cl::make_model_config(task, 3, 6), "cafe0123");
  CHECK(rec.config_hash == "cafe0123");
  CHECK(rec.seed == 3);
  CHECK(rec.model_class == "ar");
  CHECK(rec.family == "exp");
  CHECK(rec.k == 2.0);
  REQUIRE(rec.phases.size() == 2);
  CHECK(rec.phases[0].name == "pretrain");
  CHECK(rec.phases[1].name == "finetune");
  CHECK(rec.phases[0].loss_curve.size() == 10);
  CHECK(rec.phases[1].loss_curve.size() == 5);
  for (const cl::PhaseResult& phase : rec.phases) {
    REQUIRE(phase.metrics.size() == task.num_contexts());
    CHECK(phase.wall_ms >= 0.0);
    REQUIRE(phase.metrics[0].beam_match.size() == 2);
    CHECK(phase.metrics[0].beam_match[1].width == 2);
  }

  CHECK_THROWS_AS(cl::run_two_phase(plan, task, data, 3, "transformer",
                                    cl::make_model_config(task, 3, 6), "cafe0123"),
                  std::invalid_argument);
}

TEST_CASE("k substitution is limited to families with an exponent") {
  CHECK(cl::family_with_k(cl::LossFamily::exp_composed(1.0), 3.0).k() == 3.0);
  CHECK(cl::family_with_k(cl::LossFamily::exp_composed(1.0), 3.0).name() == "exp");
  CHECK(cl::family_with_k(cl::LossFamily::power_composed(0.5), 0.25).k() == 0.25);
  CHECK_THROWS_AS(cl::family_with_k(cl::LossFamily::log_loss(), 2.0), std::invalid_argument);
  CHECK_THROWS_AS(cl::family_with_k(cl::LossFamily::pure_convex(), 2.0), std::invalid_argument);
}

TEST_CASE("k sweeps order records by value then seed and ignore scheduling") {
  cl::SynthTask task = two_atom_task();
  cl::PhasePlan plan;
  plan.pretrain.steps = 8;
  plan.pretrain.warmup_steps = 2;
  plan.finetune.steps = 4;
  plan.finetune.warmup_steps = 2;
  plan.finetune_family = cl::LossFamily::exp_composed(1.0);
  plan.beam_widths = {1};

  cl::SweepSpec sweep;
  sweep.k_values = {1.0, 2.0};
  sweep.seeds = {4, 9};
  sweep.dataset_size = 64;

  auto hash_for_k = [](double k) { return std::string("hash-k") + (k < 1.5 ? "1" : "2"); };
  const cl::ModelConfig mc = cl::make_model_config(task, 3, 6);

  auto serial = cl::sweep_k(plan, task, "ar", mc, sweep, hash_for_k);
  REQUIRE(serial.size() == 4);
  CHECK(serial[0].k == 1.0);
  CHECK(serial[0].seed == 4);
  CHECK(serial[1].k == 1.0);
  CHECK(serial[1].seed == 9);
  CHECK(serial[2].k == 2.0);
  CHECK(serial[2].seed == 4);
  CHECK(serial[3].k == 2.0);
  CHECK(serial[3].seed == 9);
  CHECK(serial[0].config_hash == "hash-k1");
  CHECK(serial[2].config_hash == "hash-k2");

  sweep.jobs = 4;
  auto parallel = cl::sweep_k(plan, task, "ar", mc, sweep, hash_for_k);
  REQUIRE(parallel.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(parallel[i].phases[0].loss_curve == serial[i].phases[0].loss_curve);
    CHECK(parallel[i].phases[1].loss_curve == serial[i].phases[1].loss_curve);
    CHECK(parallel[i].phases[1].metrics[0].kl_nats == serial[i].phases[1].metrics[0].kl_nats);
  }

  cl::SweepSpec bad = sweep;
  bad.k_values = {};
  CHECK_THROWS_AS(cl::sweep_k(plan, task, "ar", mc, bad, hash_for_k), std::invalid_argument);
  bad = sweep;
  bad.seeds = {};
  CHECK_THROWS_AS(cl::sweep_k(plan, task, "ar", mc, bad, hash_for_k), std::invalid_argument);
}
