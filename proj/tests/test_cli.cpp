#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "convexlab/cli.hpp"

namespace cl = convexlab;
namespace fs = std::filesystem;

using Catch::Matchers::ContainsSubstring;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("convexlab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_dist_csv(const fs::path& dir, const std::vector<std::string>& labels,
                        const std::vector<double>& probs) {
  cl::FiniteDistribution d;
  d.labels = labels;
  d.probs = probs;
  const fs::path p = dir / "dist.csv";
  cl::save_distribution_csv(d, p.string());
  return p;
}

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string::npos;
       pos = text.find(needle, pos + needle.size()))
    ++n;
  return n;
}

cl::Json base_config(const std::string& out_dir) {
  cl::Json task;
  task["type"] = "explicit";
  task["vocab"] = "ab";
  task["seq_len"] = 2;
  task["contexts"] = cl::Json::array({cl::Json{{"ab", 0.6}, {"ba", 0.4}}});

  cl::Json model;
  model["class"] = "ar";
  model["embed_dim"] = 3;
  model["hidden_dim"] = 6;

  cl::Json pretrain;
  pretrain["lr"] = 5e-3;
  pretrain["steps"] = 12;
  pretrain["batch_size"] = 32;
  pretrain["warmup_steps"] = 4;
  pretrain["label_smoothing"] = 0.1;

  cl::Json finetune;
  finetune["lr"] = 1e-3;
  finetune["steps"] = 6;
  finetune["batch_size"] = 32;
  finetune["warmup_steps"] = 2;
  finetune["family"] = "exp";
  finetune["k"] = 1.0;

  cl::Json j;
  j["task"] = task;
  j["model"] = model;
  j["pretrain"] = pretrain;
  j["finetune"] = finetune;
  j["dataset_size"] = 64;
  j["seeds"] = {1, 2};
  j["out_dir"] = out_dir;
  return j;
}

fs::path write_config(const fs::path& dir, const cl::Json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream out(p);
  out << j.dump(2) << "\n";
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("oracle command reports a passing run as machine-readable JSON") {
  const fs::path dir = fresh_dir("oracle_pass");
  const fs::path csv = write_dist_csv(dir, {"x", "y", "z"}, {0.5, 0.3, 0.2});

  std::ostringstream out, err;
  cl::OracleArgs args;
  args.dist_path = csv.string();
  args.family = "exp";
  args.k = 0.5;
  const int rc = cl::cmd_oracle(args, out, err);
  CHECK(rc == cl::kExitOk);
  CHECK(err.str().empty());

  const cl::Json j = cl::Json::parse(out.str());
  CHECK(j.at("family") == "exp");
  CHECK(j.at("k") == 0.5);
  CHECK(j.at("tol") == 1e-6);
  CHECK(j.at("baseline").at("loss").get<double>() ==
        Catch::Approx(1.0296530140645737).margin(1e-8));
  CHECK(j.at("baseline").at("converged") == true);
  CHECK(j.at("optimum").at("probs")[0].get<double>() ==
        Catch::Approx(25.0 / 38.0).margin(1e-6));
  CHECK(j.at("optimum").at("probs")[1].get<double>() ==
        Catch::Approx(9.0 / 38.0).margin(1e-6));
  CHECK(j.at("optimum").at("loss").get<double>() ==
        Catch::Approx(-0.6164414002968976).margin(1e-8));
  CHECK(j.at("optimum").at("labels") == cl::Json::array({"x", "y", "z"}));
  CHECK(j.at("properties").at("all_pass") == true);
  CHECK(j.at("properties").at("crossing_index") == 2);
  CHECK(j.at("properties").at("onehot").is_null());
  CHECK(j.at("properties").at("gap_monotone_ok") == true);
}

TEST_CASE("oracle log family returns the baseline itself") {
  const fs::path dir = fresh_dir("oracle_log");
  const fs::path csv = write_dist_csv(dir, {"x", "y", "z"}, {0.5, 0.3, 0.2});

  std::ostringstream out, err;
  cl::OracleArgs args;
  args.dist_path = csv.string();
  args.family = "log";
  CHECK(cl::cmd_oracle(args, out, err) == cl::kExitOk);

  const cl::Json j = cl::Json::parse(out.str());
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(j.at("optimum").at("probs")[i].get<double>() ==
          Catch::Approx(j.at("baseline").at("probs")[i].get<double>()).margin(1e-6));
  CHECK(j.at("properties").at("all_pass") == true);
}

TEST_CASE("oracle convex alias collapses the optimum to one atom") {
  const fs::path dir = fresh_dir("oracle_convex");
  const fs::path csv = write_dist_csv(dir, {"x", "y", "z"}, {0.5, 0.3, 0.2});

  std::ostringstream out, err;
  cl::OracleArgs args;
  args.dist_path = csv.string();
  args.family = "convex";
  CHECK(cl::cmd_oracle(args, out, err) == cl::kExitOk);

  const cl::Json j = cl::Json::parse(out.str());
  CHECK(j.at("family") == "convex_identity");
  CHECK(j.at("properties").at("onehot") == true);
  CHECK(j.at("optimum").at("probs")[0].get<double>() > 1.0 - 1e-6);
}

TEST_CASE("oracle rejects bad inputs with exit code 2") {
  const fs::path dir = fresh_dir("oracle_bad");
  std::ostringstream out, err;

  cl::OracleArgs missing;
  missing.dist_path = (dir / "nope.csv").string();
  CHECK(cl::cmd_oracle(missing, out, err) == cl::kExitInput);
  CHECK_THAT(err.str(), ContainsSubstring("cannot open"));

  const fs::path csv = write_dist_csv(dir, {"x", "y"}, {0.6, 0.4});
  cl::OracleArgs args;
  args.dist_path = csv.string();

  cl::OracleArgs bad = args;
  bad.family = "bogus";
  CHECK(cl::cmd_oracle(bad, out, err) == cl::kExitInput);

  bad = args;
  bad.family = "exp";  // no k
  CHECK(cl::cmd_oracle(bad, out, err) == cl::kExitInput);

  bad = args;
  bad.family = "log";
  bad.k = 2.0;
  CHECK(cl::cmd_oracle(bad, out, err) == cl::kExitInput);

  bad = args;
  bad.family = "log";
  bad.tol = 0.0;
  CHECK(cl::cmd_oracle(bad, out, err) == cl::kExitInput);

  // Tied atoms violate the all-distinct requirement of the property checks.
  const fs::path tied = dir / "tied.csv";
  {
    cl::FiniteDistribution d;
    d.labels = {"x", "y"};
    d.probs = {0.5, 0.5};
    cl::save_distribution_csv(d, tied.string());
  }
  cl::OracleArgs tie_args;
  tie_args.dist_path = tied.string();
  tie_args.family = "log";
  std::ostringstream terr;
  CHECK(cl::cmd_oracle(tie_args, out, terr) == cl::kExitInput);
  CHECK_THAT(terr.str(), ContainsSubstring("all-distinct"));
}

TEST_CASE("gradcheck passes at its stock tolerance and is deterministic") {
  std::ostringstream a, b;
  CHECK(cl::cmd_gradcheck(7, 1e-4, a) == cl::kExitOk);
  CHECK(cl::cmd_gradcheck(7, 1e-4, b) == cl::kExitOk);
  CHECK(a.str() == b.str());
  CHECK_THAT(a.str(), ContainsSubstring("gradcheck overall=pass"));
  CHECK(count_occurrences(a.str(), "status=pass") == 20);
  CHECK(count_occurrences(a.str(), "model=ar") == 10);
  CHECK(count_occurrences(a.str(), "model=nar") == 10);
  CHECK(count_occurrences(a.str(), "family=convex_exp") == 4);
}

TEST_CASE("gradcheck fails beyond finite-difference precision") {
  std::ostringstream out;
  CHECK(cl::cmd_gradcheck(7, 1e-12, out) == cl::kExitNoConverge);
  CHECK_THAT(out.str(), ContainsSubstring("gradcheck overall=fail"));
}

TEST_CASE("config parsing applies defaults and rejects unknown or missing keys") {
  const cl::Json good = base_config("results/x");
  cl::ExperimentConfig cfg = cl::parse_experiment_config(good);
  CHECK(cfg.model_class == "ar");
  CHECK(cfg.embed_dim == 3);
  CHECK(cfg.pretrain.steps == 12);
  CHECK(cfg.pretrain.label_smoothing == 0.1);
  CHECK(cfg.finetune.label_smoothing == 0.0);
  CHECK(cfg.finetune_family.name() == "exp");
  CHECK(cfg.finetune_family.k() == 1.0);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(cfg.beam_widths == std::vector<std::size_t>{1, 5});
  CHECK(cfg.argmax_tie_tol == 1e-12);
  CHECK(cfg.task.num_contexts() == 1);

  cl::Json defaults = good;
  defaults["pretrain"] = cl::Json::object();
  cl::ExperimentConfig d2 = cl::parse_experiment_config(defaults);
  CHECK(d2.pretrain.lr == 5e-3);
  CHECK(d2.pretrain.steps == 2000);
  CHECK(d2.pretrain.label_smoothing == 0.1);

  cl::Json unknown = good;
  unknown["finetune"]["bogus"] = 1;
  CHECK_THROWS_WITH(cl::parse_experiment_config(unknown),
                    ContainsSubstring("unknown config key: finetune.bogus"));

  cl::Json missing = good;
  missing.erase("task");
  CHECK_THROWS_WITH(cl::parse_experiment_config(missing),
                    ContainsSubstring("missing config key"));

  cl::Json top_unknown = good;
  top_unknown["extra"] = 1;
  CHECK_THROWS_WITH(cl::parse_experiment_config(top_unknown),
                    ContainsSubstring("unknown config key: config.extra"));

  cl::Json wrong_type = good;
  wrong_type["dataset_size"] = "many";
  CHECK_THROWS_WITH(cl::parse_experiment_config(wrong_type),
                    ContainsSubstring("wrong type"));
}

TEST_CASE("config family rules") {
  cl::Json j = base_config("results/x");

  cl::Json no_k = j;
  no_k["finetune"].erase("k");
  CHECK_THROWS_AS(cl::parse_experiment_config(no_k), cl::ConfigError);

  cl::Json log_with_k = j;
  log_with_k["finetune"]["family"] = "log";
  CHECK_THROWS_AS(cl::parse_experiment_config(log_with_k), cl::ConfigError);

  cl::Json convex = j;
  convex["finetune"]["family"] = "convex_identity";
  convex["finetune"].erase("k");
  CHECK_THROWS_WITH(cl::parse_experiment_config(convex),
                    ContainsSubstring("allow_pure_convex"));
  convex["finetune"]["allow_pure_convex"] = true;
  CHECK(cl::parse_experiment_config(convex).finetune_family.name() == "convex_identity");

  cl::Json sweep_log = j;
  sweep_log["finetune"]["family"] = "log";
  sweep_log["finetune"].erase("k");
  sweep_log["k_sweep"] = {1.0, 2.0};
  CHECK_THROWS_WITH(cl::parse_experiment_config(sweep_log),
                    ContainsSubstring("k_sweep"));

  cl::Json empty_seeds = j;
  empty_seeds["seeds"] = cl::Json::array();
  CHECK_THROWS_AS(cl::parse_experiment_config(empty_seeds), cl::ConfigError);
}

TEST_CASE("config hash ignores seeds and out_dir but tracks k") {
  cl::ExperimentConfig a = cl::parse_experiment_config(base_config("results/a"));

  cl::Json jb = base_config("results/b");
  jb["seeds"] = {7, 8, 9};
  cl::ExperimentConfig b = cl::parse_experiment_config(jb);

  const std::string ha = cl::config_hash(a, 1.0);
  CHECK(ha.size() == 16);
  CHECK(ha == cl::config_hash(b, 1.0));
  CHECK(ha != cl::config_hash(a, 2.0));

  cl::Json jc = base_config("results/a");
  jc["pretrain"]["steps"] = 13;
  cl::ExperimentConfig c = cl::parse_experiment_config(jc);
  CHECK(ha != cl::config_hash(c, 1.0));
}

TEST_CASE("train writes one record per seed and report summarizes them") {
  const fs::path dir = fresh_dir("train_report");
  const fs::path results = dir / "results";
  const fs::path cfg_path = write_config(dir, base_config(results.string()));

  std::ostringstream out;
  REQUIRE(cl::cmd_train(cfg_path.string(), 2, out) == cl::kExitOk);
  CHECK(count_occurrences(out.str(), "run config=") == 2);
  CHECK_THAT(out.str(), ContainsSubstring("phase=finetune"));

  const auto paths = cl::list_run_records(results);
  REQUIRE(paths.size() == 2);
  const cl::ExperimentConfig cfg = cl::load_experiment_config(cfg_path);
  const std::string hash = cl::config_hash(cfg, 1.0);
  CHECK(paths[0].filename().string() == hash + "-1.json");
  CHECK(paths[1].filename().string() == hash + "-2.json");

  const cl::RunRecord rec = cl::read_run_record(paths[0]);
  CHECK(rec.seed == 1);
  CHECK(rec.model_class == "ar");
  CHECK(rec.family == "exp");
  REQUIRE(rec.phases.size() == 2);
  CHECK(rec.phases[0].loss_curve.size() == 12);
  CHECK(rec.phases[1].loss_curve.size() == 6);
  REQUIRE(rec.phases[1].metrics.size() == 1);

  std::ostringstream rout, rerr;
  REQUIRE(cl::cmd_report(results.string(), rout, rerr) == cl::kExitOk);

  const std::string summary = slurp(results / "summary.csv");
  const std::string header = std::string(cl::detail::kSummaryHeader);
  CHECK(summary.substr(0, header.size()) == header);
  CHECK(count_occurrences(summary, "\n") == 3);  // header + 2 rows
  CHECK_THAT(summary, ContainsSubstring(hash + ",ar,1," + std::to_string(1) + ",finetune,"));

  // Series files aggregate the per-run rows at each k.
  const std::string series = slurp(results / "series_output_nll.csv");
  CHECK_THAT(series, ContainsSubstring("k,mean,std,count"));
  CHECK(count_occurrences(series, "\n") == 2);  // header + one k value
  CHECK_THAT(series, ContainsSubstring(",2\n"));

  const cl::detail::RecordRow r0 = cl::detail::summarize_record(cl::read_run_record(paths[0]));
  const cl::detail::RecordRow r1 = cl::detail::summarize_record(cl::read_run_record(paths[1]));
  const double mean = 0.5 * (r0.output_nll + r1.output_nll);
  std::istringstream ss(series);
  std::string line;
  std::getline(ss, line);  // header
  std::getline(ss, line);
  const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
  CHECK(std::stod(line.substr(0, c1)) == 1.0);
  CHECK(std::stod(line.substr(c1 + 1, c2 - c1 - 1)) == Catch::Approx(mean).margin(1e-12));

  for (const char* name :
       {"series_entropy_nats.csv", "series_kl_nats.csv", "series_mixture_rate.csv"})
    CHECK(fs::exists(results / name));

  // A second report pass over the same records is byte-identical.
  const std::string first = slurp(results / "summary.csv");
  REQUIRE(cl::cmd_report(results.string(), rout, rerr) == cl::kExitOk);
  CHECK(slurp(results / "summary.csv") == first);
}

TEST_CASE("training runs are reproducible across invocations and job counts") {
  const fs::path dir = fresh_dir("train_repro");
  const fs::path res_a = dir / "a";
  const fs::path res_b = dir / "b";

  std::ostringstream out;
  REQUIRE(cl::cmd_train(write_config(dir, base_config(res_a.string())).string(), 1, out) ==
          cl::kExitOk);
  const fs::path dir2 = fresh_dir("train_repro2");
  REQUIRE(cl::cmd_train(write_config(dir2, base_config(res_b.string())).string(), 4, out) ==
          cl::kExitOk);

  const auto pa = cl::list_run_records(res_a);
  const auto pb = cl::list_run_records(res_b);
  REQUIRE(pa.size() == 2);
  REQUIRE(pb.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const cl::RunRecord a = cl::read_run_record(pa[i]);
    const cl::RunRecord b = cl::read_run_record(pb[i]);
    CHECK(a.seed == b.seed);
    for (std::size_t ph = 0; ph < 2; ++ph) {
      CHECK(a.phases[ph].loss_curve == b.phases[ph].loss_curve);
      CHECK(a.phases[ph].metrics[0].kl_nats == b.phases[ph].metrics[0].kl_nats);
      CHECK(a.phases[ph].metrics[0].output_nll == b.phases[ph].metrics[0].output_nll);
    }
  }
}

TEST_CASE("results directory environment override wins over the config") {
  const fs::path dir = fresh_dir("train_env");
  const fs::path env_dir = dir / "env_results";
  const fs::path cfg_path =
      write_config(dir, base_config((dir / "config_results").string()));

  REQUIRE(setenv("CONVEXLAB_RESULTS_DIR", env_dir.string().c_str(), 1) == 0);
  std::ostringstream out;
  const int rc = cl::cmd_train(cfg_path.string(), 1, out);
  REQUIRE(unsetenv("CONVEXLAB_RESULTS_DIR") == 0);

  REQUIRE(rc == cl::kExitOk);
  CHECK(cl::list_run_records(env_dir).size() == 2);
  CHECK_FALSE(fs::exists(dir / "config_results"));
}

TEST_CASE("report on an empty directory exits with the input error code") {
  const fs::path dir = fresh_dir("report_empty");
  std::ostringstream out, err;
  CHECK(cl::cmd_report(dir.string(), out, err) == cl::kExitInput);
  CHECK_THAT(err.str(), ContainsSubstring("no run records"));
}

TEST_CASE("train surfaces config errors as ConfigError") {
  const fs::path dir = fresh_dir("train_badcfg");
  cl::Json j = base_config((dir / "r").string());
  j["model"]["class"] = "rnn";
  const fs::path cfg_path = write_config(dir, j);
  std::ostringstream out;
  CHECK_THROWS_AS(cl::cmd_train(cfg_path.string(), 1, out), cl::ConfigError);

  const fs::path garbled = dir / "garbled.json";
  std::ofstream(garbled) << "{not json";
  CHECK_THROWS_WITH(cl::cmd_train(garbled.string(), 1, out),
                    ContainsSubstring("config parse error"));

  CHECK_THROWS_WITH(cl::cmd_train((dir / "absent.json").string(), 1, out),
                    ContainsSubstring("cannot open config file"));
}
