// Experiment-runner tests: file formats, config parsing, the general-damping
// moment integrator against closed forms and an independent discrete
// recursion, manifest/metric plumbing for each runner, and end-to-end
// determinism of the command-line tool.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "cldlab/experiments.hpp"
#include "cldlab/io.hpp"
#include "cldlab/kernels.hpp"
#include "cldlab/mixtures.hpp"
#include "cldlab/scorenet.hpp"

using namespace cldlab;
using nlohmann::json;

namespace {

std::string temp_stem(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / "cldlab-exp-tests";
  std::filesystem::create_directories(dir);
  return (dir / tag).string();
}

ExperimentConfig base_config(const std::string& id, const std::string& tag) {
  ExperimentConfig cfg;
  cfg.id = id;
  cfg.seed = 7;
  cfg.seed_set = true;
  cfg.out = temp_stem(tag);
  cfg.options = json::object();
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = "CLD_LAB_THREADS=1 \"" CLDLAB_BIN "\" " + args +
                          " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc < 0 ? rc : WEXITSTATUS(rc);
}

}  // namespace

TEST_SUITE_BEGIN("experiments");

TEST_CASE("doubles render in shortest round-trip form") {
  CHECK(fmt_double(0.5) == "0.5");
  CHECK(fmt_double(-2.0) == "-2");
  CHECK(fmt_double(0.0) == "0");
  CHECK(fmt_double(1e-5) == "1e-05");
  const double third = 1.0 / 3.0;
  CHECK(std::stod(fmt_double(third)) == third);
  const double pi = 3.14159265358979323846;
  CHECK(std::stod(fmt_double(pi)) == pi);
  CHECK(fmt_double(std::nan("")) == "nan");
  CHECK(fmt_double(HUGE_VAL) == "inf");
  CHECK(fmt_double(-HUGE_VAL) == "-inf");
}

TEST_CASE("csv tables render headers and rows and reject ragged input") {
  CsvTable t;
  t.header = {"a", "b"};
  t.columns = {{1.0, 2.5}, {-3.0, 0.125}};
  CHECK(t.render() == "a,b\n1,-3\n2.5,0.125\n");

  t.columns[1].pop_back();
  CHECK_THROWS_AS((void)t.render(), std::invalid_argument);
  t.columns.pop_back();
  CHECK_THROWS_AS((void)t.render(), std::invalid_argument);
}

TEST_CASE("sample container round-trips and rejects corrupt files") {
  StateBatch b;
  b.n = 3;
  b.d = 2;
  b.x = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  b.v = {-1.0, -2.0, -3.0, -4.0, -5.0, -6.0};

  const std::string path = temp_stem("blob.bin");
  write_samples_blob(path, b, true);
  const SampleBlob blob = read_samples_blob(path);
  REQUIRE(blob.n == 3);
  REQUIRE(blob.cols == 4);
  CHECK(blob.values[0] == 1.0);
  CHECK(blob.values[2] == -1.0);
  CHECK(blob.values[3] == -2.0);
  CHECK(blob.values[4] == 3.0);
  CHECK(blob.values[11] == -6.0);

  // x-only container has d columns.
  write_samples_blob(path, b, false);
  CHECK(read_samples_blob(path).cols == 2);

  const std::string raw = read_text_file(path);
  write_text_file(path, raw.substr(0, raw.size() - 8));
  CHECK_THROWS_AS((void)read_samples_blob(path), std::runtime_error);
  write_text_file(path, "NOTSMP01" + raw.substr(8));
  CHECK_THROWS_AS((void)read_samples_blob(path), std::runtime_error);
}

TEST_CASE("config parsing applies fields and rejects unknown keys") {
  const json j = {
      {"experiment", "sample"},
      {"seed", 42},
      {"out", "runs/demo"},
      {"format", "json"},
      {"n_samples", 1234},
      {"sampler", "em"},
      {"schedule", {{"kind", "quadratic"}, {"n_steps", 99}}},
      {"diffusion", {{"gamma0", 1.0}, {"eps_cutoff", 5e-3}}},
      {"options", {{"with_v", true}}},
  };
  const ExperimentConfig cfg = ExperimentConfig::from_json(j);
  CHECK(cfg.id == "sample");
  CHECK(cfg.seed == 42);
  CHECK(cfg.seed_set);
  CHECK(cfg.out == "runs/demo");
  CHECK(cfg.format == "json");
  CHECK(cfg.n_samples == 1234);
  CHECK(cfg.sampler == "em");
  CHECK(cfg.schedule == ScheduleKind::quadratic);
  CHECK(cfg.n_steps == 99);
  CHECK(cfg.p.gamma0 == 1.0);
  CHECK(cfg.p.eps_cutoff == 5e-3);
  CHECK(cfg.p.beta == 4.0);  // untouched default
  CHECK(cfg.options.at("with_v").get<bool>());
  CHECK_NOTHROW(cfg.validate());

  // Normalized echo keeps every effective field.
  const json echo = cfg.to_json();
  CHECK(echo.at("diffusion").at("beta").get<double>() == 4.0);
  CHECK(echo.at("schedule").at("kind").get<std::string>() == "quadratic");

  CHECK_THROWS_AS((void)ExperimentConfig::from_json({{"sede", 1}}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)ExperimentConfig::from_json(
                      {{"diffusion", {{"betta", 1.0}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)ExperimentConfig::from_json(json::array()),
                  std::invalid_argument);
}

TEST_CASE("config validation requires an explicit seed and known names") {
  ExperimentConfig cfg = base_config("xi", "cfg");
  CHECK_NOTHROW(cfg.validate());

  ExperimentConfig bad = cfg;
  bad.seed_set = false;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.id = "mystery";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.format = "xml";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.sampler = "leapfrog";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.n_samples = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("damping integrator matches the critical closed form") {
  // At the critical relation the library's closed-form transition moments
  // cover the same dynamics, so the general integrator must agree tightly.
  CldParams p;
  const LangevinParams lp{p.beta, p.gamma_fric, p.mass};
  const double s0xx = 0.3, s0vv = 0.1;
  const DampingCurve dc =
      damping_curve(lp, s0xx, s0vv, 1.0, 1e-4, 100, 0.05);
  REQUIRE(dc.t.size() > 50);
  for (std::size_t i = 0; i < dc.t.size(); i += 7) {
    const PerDimKernel k = forward_moments(p, dc.t[i], s0xx, s0vv);
    CAPTURE(dc.t[i]);
    CHECK(std::abs(dc.sxx[i] - k.sxx) <= 1e-8);
    CHECK(std::abs(dc.sxv[i] - k.sxv) <= 1e-8);
    CHECK(std::abs(dc.svv[i] - k.svv) <= 1e-8);
    // The propagator column equals the mean map applied to (1, 0).
    CHECK(std::abs(dc.autocorr_x[i] - k.mxx) <= 1e-8);
  }
  CHECK_FALSE(dc.autocorr_sign_change);  // critical damping never crosses
}

TEST_CASE("damping integrator matches an euler recursion off criticality") {
  // Underdamped regime, far from the critical relation the closed forms
  // assume; the oracle is a first-order discrete recursion with a tiny step.
  const LangevinParams lp{4.0, 0.5, 0.25};
  const DampingCurve dc = damping_curve(lp, 0.0, 0.0, 0.2, 1e-4, 400, 0.05);

  const double dt = 1e-6;
  const double bm = lp.beta / lp.mass;
  const double fric = lp.gamma_fric * lp.beta / lp.mass;
  double sxx = 0.0, sxv = 0.0, svv = 0.0, p00 = 1.0, p10 = 0.0;
  std::size_t rec = 1;
  for (std::int64_t k = 1; k <= 200000 && rec < dc.t.size(); ++k) {
    const double nxx = sxx + dt * 2.0 * bm * sxv;
    const double nxv = sxv + dt * (bm * svv - lp.beta * sxx - fric * sxv);
    const double nvv =
        svv + dt * (-2.0 * lp.beta * sxv - 2.0 * fric * svv +
                    2.0 * lp.gamma_fric * lp.beta);
    const double np00 = p00 + dt * bm * p10;
    const double np10 = p10 + dt * (-lp.beta * p00 - fric * p10);
    sxx = nxx;
    sxv = nxv;
    svv = nvv;
    p00 = np00;
    p10 = np10;
    if (std::abs(double(k) * dt - dc.t[rec]) < 0.5 * dt) {
      CAPTURE(dc.t[rec]);
      CHECK(std::abs(dc.sxx[rec] - sxx) <= 2e-4);
      CHECK(std::abs(dc.svv[rec] - svv) <= 2e-3);
      CHECK(std::abs(dc.autocorr_x[rec] - p00) <= 2e-4);
      ++rec;
    }
  }
  CHECK(rec == dc.t.size());
}

TEST_CASE("damping study: critical settles fastest, underdamped oscillates") {
  ExperimentConfig cfg = base_config("damping", "damping");
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());

  const MetricResult* crit = find_metric(m, "critical_fastest");
  const MetricResult* osc = find_metric(m, "underdamped_sign_change");
  const MetricResult* conv = find_metric(m, "all_converged");
  REQUIRE(crit != nullptr);
  REQUIRE(osc != nullptr);
  REQUIRE(conv != nullptr);
  CHECK(crit->value == 1.0);
  CHECK(osc->value == 1.0);
  CHECK(conv->value == 1.0);

  // The settling times themselves: critical strictly below every other.
  const double tc = find_metric(m, "time_to_eq_f1")->value;
  for (const char* name :
       {"time_to_eq_f0.25", "time_to_eq_f16", "time_to_eq_f256"}) {
    const MetricResult* r = find_metric(m, name);
    REQUIRE(r != nullptr);
    CHECK(r->ok);
    CHECK(tc < r->value);
  }
  CHECK(std::filesystem::exists(cfg.out + ".csv"));
  CHECK(std::filesystem::exists(cfg.out + ".manifest.json"));
}

TEST_CASE("score-gap study keeps the joint process ahead everywhere") {
  ExperimentConfig cfg = base_config("xi", "xi");
  cfg.options = {{"n_mc", 5000}, {"n_grid", 9}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  CHECK(find_metric(m, "frac_cld_below")->value == 1.0);
  CHECK(find_metric(m, "min_gap")->value > 0.0);

  const std::string csv = read_text_file(cfg.out + ".csv");
  CHECK(csv.substr(0, csv.find('\n')) == "t,xi_cld,xi_vpsde,n_mc,seed");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);  // header + 9 rows
}

TEST_CASE("sampler table study orders the integrators at small scale") {
  ExperimentConfig cfg = base_config("analytical-table", "table");
  cfg.n_samples = 20000;
  cfg.options = {{"steps_grid", {20, 50}}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  for (const int ns : {20, 50}) {
    const std::string sfx = "_n" + std::to_string(ns);
    const double em = find_metric(m, "cld_em" + sfx)->value;
    const double sscs = find_metric(m, "cld_sscs" + sfx)->value;
    const double vp = find_metric(m, "vpsde_em" + sfx)->value;
    CAPTURE(ns);
    CHECK(std::isfinite(em));
    CHECK(std::isfinite(sscs));
    CHECK(std::isfinite(vp));
    CHECK(sscs < em);  // the splitting integrator wins at coarse schedules
  }
  const std::string csv = read_text_file(cfg.out + ".csv");
  CHECK(csv.substr(0, csv.find('\n')) == "n_steps,cld_em,cld_sscs,vpsde_em");
}

TEST_CASE("sample study writes every requested container") {
  ExperimentConfig cfg = base_config("sample", "sample");
  cfg.n_samples = 500;
  cfg.n_steps = 40;
  cfg.schedule = ScheduleKind::quadratic;
  cfg.options = {{"binary", true}, {"with_v", true}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  CHECK(std::isfinite(find_metric(m, "nll")->value));
  CHECK(find_metric(m, "n_samples")->value == 500.0);

  const SampleBlob blob = read_samples_blob(cfg.out + ".bin");
  CHECK(blob.n == 500);
  CHECK(blob.cols == 4);  // both coordinate blocks requested
  const std::string csv = read_text_file(cfg.out + ".csv");
  CHECK(csv.substr(0, csv.find('\n')) == "x_0,x_1,v_0,v_1");

  // Identical reruns produce identical bytes (library loops are per-row
  // streamed, so this holds at any worker count).
  const std::string first = csv;
  run_experiment(cfg);
  CHECK(read_text_file(cfg.out + ".csv") == first);
}

TEST_CASE("every sampler choice runs through the sample study") {
  for (const std::string sampler : {"em", "ode", "vpsde-em", "ddim"}) {
    CAPTURE(sampler);
    ExperimentConfig cfg = base_config("sample", "sample-" + sampler);
    cfg.sampler = sampler;
    cfg.n_samples = 64;
    cfg.n_steps = 10;
    const RunManifest m = run_experiment(cfg);
    REQUIRE(m.failures.empty());
    CHECK(m.all_ok());
    CHECK(std::isfinite(find_metric(m, "nll")->value));
    if (sampler == "ode") {
      CHECK(find_metric(m, "nfe_total")->value > 0.0);
    }
  }
}

TEST_CASE("likelihood study reproduces the exact mixture level") {
  ExperimentConfig cfg = base_config("likelihood", "likelihood");
  cfg.options = {{"n_data", 10}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  const double bound = find_metric(m, "mean_nll_nats")->value;
  const double exact = find_metric(m, "data_nll_exact")->value;
  // The flow bound sits near the exact NLL of the same points (single
  // velocity draw, so it carries a little MC noise on top of small slack).
  CHECK(std::abs(bound - exact) < 0.5);
  CHECK(find_metric(m, "mean_nfe")->value > 0.0);
}

TEST_CASE("importance-weight curves stay finite over the clamped horizon") {
  ExperimentConfig cfg = base_config("isweights", "isweights");
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  CHECK(find_metric(m, "all_finite")->value == 1.0);
  const std::string csv = read_text_file(cfg.out + ".csv");
  CHECK(csv.substr(0, csv.find('\n')) == "t,ml,fid,mlc,fidc");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 201);
}

TEST_CASE("training study saves loadable checkpoints and curves") {
  ExperimentConfig cfg = base_config("train", "train");
  cfg.options = {{"iters", 50},
                 {"batch", 32},
                 {"widths", {5, 8, 8, 2}},
                 {"record_every", 10}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  CHECK(find_metric(m, "steps")->value == 50.0);
  CHECK(std::isfinite(find_metric(m, "loss_final")->value));

  const Checkpoint ck = load_checkpoint(cfg.out + ".ckpt");
  CHECK(ck.model.net.widths == std::vector<int>{5, 8, 8, 2});
  CHECK(ck.step == 50);
  const Checkpoint ema = load_checkpoint(cfg.out + ".ema.ckpt");
  CHECK(ema.model.net.params.size() == ck.model.net.params.size());

  const std::string curve = read_text_file(cfg.out + ".losscurve.csv");
  CHECK(curve.substr(0, curve.find('\n')) == "iter,loss,grad_norm");
}

TEST_CASE("jacobian study emits a finite curve for a random model") {
  ExperimentConfig cfg = base_config("jacobian", "jacobian");
  cfg.options = {{"n_t", 4}, {"n_mc", 16}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  CHECK(find_metric(m, "jf_min")->value > 0.0);
  CHECK(std::isfinite(find_metric(m, "jf_max")->value));
}

TEST_CASE("gradvar study reports the conditioning-variance ratio") {
  ExperimentConfig cfg = base_config("gradvar", "gradvar");
  cfg.p.gamma0 = 1.0;
  cfg.options = {{"n_mc", 4000}, {"t_grid", {0.01, 0.05, 0.3}}};
  const RunManifest m = run_experiment(cfg);
  REQUIRE(m.failures.empty());
  CHECK(m.all_ok());
  CHECK(find_metric(m, "max_ratio")->value >
        find_metric(m, "max_ratio_small_t")->value * 0.999);
  const std::string csv = read_text_file(cfg.out + ".csv");
  CHECK(csv.substr(0, csv.find('\n')) ==
        "t,trace_hsm,trace_dsm,gamma,n_mc,seed");
}

TEST_CASE("failed runs enumerate their errors and exit unhealthy") {
  ExperimentConfig cfg = base_config("sample", "badnet");
  cfg.options = {{"net", temp_stem("missing.ckpt")}};
  const RunManifest m = run_experiment(cfg);
  CHECK_FALSE(m.all_ok());
  REQUIRE(m.failures.size() == 1);
  // The manifest is still written for post-mortems.
  CHECK(std::filesystem::exists(cfg.out + ".manifest.json"));
  const json mj = json::parse(read_text_file(cfg.out + ".manifest.json"));
  CHECK_FALSE(mj.at("all_ok").get<bool>());
}

TEST_CASE("command-line tool is byte-reproducible and honors overrides") {
  const std::string stem_a = temp_stem("cli-a");
  const std::string stem_b = temp_stem("cli-b");
  const std::string common = " --n-mc 512 --n-grid 5 --format csv";

  REQUIRE(run_cli("xi --seed 7 --out " + stem_a + common) == 0);
  REQUIRE(run_cli("xi --seed 7 --out " + stem_b + common) == 0);
  CHECK(read_text_file(stem_a + ".csv") == read_text_file(stem_b + ".csv"));

  // A different seed changes the bytes.
  REQUIRE(run_cli("xi --seed 8 --out " + stem_b + common) == 0);
  CHECK(read_text_file(stem_a + ".csv") != read_text_file(stem_b + ".csv"));

  // Flags win over config-file values: the CSV must match the flag seed.
  const std::string cfg_path = temp_stem("xi-config.json");
  write_text_file(cfg_path, json({{"experiment", "xi"},
                                  {"seed", 8},
                                  {"out", stem_b},
                                  {"options", {{"n_mc", 512}, {"n_grid", 5}}}})
                                .dump());
  REQUIRE(run_cli("xi --config " + cfg_path + " --seed 7 --out " + stem_b) ==
          0);
  CHECK(read_text_file(stem_b + ".csv") == read_text_file(stem_a + ".csv"));
  const json mj = json::parse(read_text_file(stem_b + ".manifest.json"));
  CHECK(mj.at("config").at("seed").get<std::uint64_t>() == 7);
  CHECK(mj.at("all_ok").get<bool>());
  CHECK(mj.at("version").get<std::string>().substr(0, 7) == "cld-lab");
}

TEST_CASE("command-line tool surfaces structured errors") {
  // Unknown experiment name: rejected by the argument parser.
  CHECK(run_cli("time-travel --seed 1") != 0);
  // Missing seed: rejected by config validation.
  CHECK(run_cli("xi --out " + temp_stem("cli-noseed")) == 2);
  // Config/subcommand mismatch.
  const std::string cfg_path = temp_stem("mismatch.json");
  write_text_file(cfg_path, json({{"experiment", "xi"}, {"seed", 1}}).dump());
  CHECK(run_cli("damping --config " + cfg_path) == 2);
  // Unknown option key inside the config file.
  const std::string cfg2 = temp_stem("unknown-key.json");
  write_text_file(cfg2,
                  json({{"experiment", "xi"}, {"seed", 1}, {"n_mcc", 3}})
                      .dump());
  CHECK(run_cli("xi --config " + cfg2) == 2);
}

TEST_CASE("the documented sampling invocation emits csv plus manifest") {
  const std::string stem = temp_stem("cli-sample");
  REQUIRE(run_cli("sample --sampler sscs --n 275 --schedule quadratic "
                  "--seed 11 --out " +
                  stem) == 0);
  const std::string csv = read_text_file(stem + ".csv");
  CHECK(csv.substr(0, csv.find('\n')) == "x_0,x_1");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 276);  // header + 275
  const json mj = json::parse(read_text_file(stem + ".manifest.json"));
  CHECK(mj.at("all_ok").get<bool>());
  CHECK(mj.at("config").at("schedule").at("kind").get<std::string>() ==
        "quadratic");
}

TEST_SUITE_END();
