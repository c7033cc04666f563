// cld-lab: seeded experiment runner for the kinetic-Langevin diffusion lab.
//
// Usage: cld-lab <experiment> [--config file.json] [--seed N] [--out stem]
//                [--format csv|json] [experiment flags]
//
// A JSON config file supplies any subset of the fields; command-line flags
// override file values. Every run writes "<out>.manifest.json" recording the
// normalized config, version, wall time, per-metric results, and RNG stream
// usage. Exit status is 0 only when every requested metric was computed.
// The CLD_LAB_THREADS environment variable caps worker threads.

#include <cstdio>
#include <exception>
#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cldlab/experiments.hpp"
#include "cldlab/io.hpp"

namespace {

using nlohmann::json;

// Records which flags were actually given so they can override config-file
// values ("flags win") without clobbering file values with defaults.
class FlagBinder {
 public:
  template <class T>
  void bind(CLI::App* sub, const std::string& flag, T& storage,
            const std::string& desc,
            std::function<void(json&, const T&)> apply) {
    CLI::Option* opt = sub->add_option(flag, storage, desc);
    appliers_.push_back({opt, [&storage, apply](json& j) {
                           apply(j, storage);
                         }});
  }

  void bind_flag(CLI::App* sub, const std::string& flag, bool& storage,
                 const std::string& desc,
                 std::function<void(json&, bool)> apply) {
    CLI::Option* opt = sub->add_flag(flag, storage, desc);
    appliers_.push_back({opt, [&storage, apply](json& j) {
                           apply(j, storage);
                         }});
  }

  void apply(json& j) const {
    for (const auto& [opt, fn] : appliers_) {
      if (opt->count() > 0) fn(j);
    }
  }

 private:
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> appliers_;
};

template <class T>
std::function<void(json&, const T&)> to_top(const char* key) {
  return [key](json& j, const T& v) { j[key] = v; };
}

template <class T>
std::function<void(json&, const T&)> to_options(const char* key) {
  return [key](json& j, const T& v) { j["options"][key] = v; };
}

template <class T>
std::function<void(json&, const T&)> to_diffusion(const char* key) {
  return [key](json& j, const T& v) { j["diffusion"][key] = v; };
}

struct Flags {
  std::string config, out, format, sampler, schedule_kind, net, weighting,
      mode, conditioning, score_time, spacing, probe_dist;
  std::uint64_t seed = 0;
  std::int64_t n_samples = 0, n_mc = 0, iters = 0, batch = 0, warmup = 0,
               n_v = 0, n_data = 0, n_grid = 0, n_t = 0, probes = 0;
  int steps = 0, dim = 0;
  double lr = 0, ema_rate = 0, t_cut = 0, rtol = 0, atol = 0, t_min = 0,
         t_max = 0, tol = 0, init_scale = 0;
  double beta = 0, gamma_fric = 0, mass = 0, gamma0 = 0, t_final = 0,
         eps_cutoff = 0;
  bool binary = false, with_v = false, denoise_velocity = false;
};

void add_common(FlagBinder& b, CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file (flags override)");
  b.bind<std::uint64_t>(sub, "--seed", f.seed, "RNG seed (required)",
                        to_top<std::uint64_t>("seed"));
  b.bind<std::string>(sub, "--out", f.out, "output stem",
                      to_top<std::string>("out"));
  b.bind<std::string>(sub, "--format", f.format, "csv or json",
                      to_top<std::string>("format"));
  b.bind<double>(sub, "--beta", f.beta, "diffusion rate",
                 to_diffusion<double>("beta"));
  b.bind<double>(sub, "--gamma-fric", f.gamma_fric, "friction",
                 to_diffusion<double>("gamma_fric"));
  b.bind<double>(sub, "--mass", f.mass, "velocity mass",
                 to_diffusion<double>("mass"));
  b.bind<double>(sub, "--gamma0", f.gamma0, "initial velocity variance scale",
                 to_diffusion<double>("gamma0"));
  b.bind<double>(sub, "--t-final", f.t_final, "diffusion horizon",
                 to_diffusion<double>("t_final"));
  b.bind<double>(sub, "--eps-cutoff", f.eps_cutoff, "sampler cutoff time",
                 to_diffusion<double>("eps_cutoff"));
}

void add_sampling(FlagBinder& b, CLI::App* sub, Flags& f) {
  b.bind<std::int64_t>(sub, "--n", f.n_samples, "number of samples",
                       to_top<std::int64_t>("n_samples"));
  b.bind<int>(sub, "--steps", f.steps, "sampler step count",
              [](json& j, const int& v) { j["schedule"]["n_steps"] = v; });
  b.bind<std::string>(sub, "--schedule", f.schedule_kind,
                      "uniform or quadratic", [](json& j,
                                                 const std::string& v) {
                        j["schedule"]["kind"] = v;
                      });
}

int run(const std::string& name, const Flags& f, const FlagBinder& binder) {
  json j = json::object();
  if (!f.config.empty()) {
    try {
      j = json::parse(cldlab::read_text_file(f.config));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: cannot load config %s: %s\n",
                   f.config.c_str(), e.what());
      return 2;
    }
  }
  if (j.contains("experiment") && j["experiment"] != name) {
    std::fprintf(stderr,
                 "error: config is for experiment \"%s\" but \"%s\" was "
                 "invoked\n",
                 j["experiment"].get<std::string>().c_str(), name.c_str());
    return 2;
  }
  j["experiment"] = name;
  binder.apply(j);

  cldlab::RunManifest manifest;
  try {
    const cldlab::ExperimentConfig cfg = cldlab::ExperimentConfig::from_json(j);
    manifest = cldlab::run_experiment(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  for (const auto& metric : manifest.metrics) {
    std::printf("%-24s %s%s%s%s\n", metric.name.c_str(),
                cldlab::fmt_double(metric.value).c_str(),
                metric.ok ? "" : "  [not ok]", metric.note.empty() ? "" : "  # ",
                metric.note.c_str());
  }
  for (const auto& path : manifest.outputs) {
    std::printf("wrote %s\n", path.c_str());
  }
  for (const auto& failure : manifest.failures) {
    std::fprintf(stderr, "failure: %s\n", failure.c_str());
  }
  std::fprintf(stderr, "%s finished in %.2f s\n", name.c_str(),
               manifest.wall_time_s);
  return manifest.all_ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kinetic-Langevin diffusion lab"};
  app.require_subcommand(1);
  Flags f;
  FlagBinder b;

  CLI::App* table = app.add_subcommand(
      "analytical-table", "sampler NLL grid with analytic scores");
  add_common(b, table, f);
  add_sampling(b, table, f);

  CLI::App* xi = app.add_subcommand(
      "xi", "score-gap curves of the joint and baseline processes");
  add_common(b, xi, f);
  b.bind<std::int64_t>(xi, "--n-mc", f.n_mc, "MC draws per grid time",
                       to_options<std::int64_t>("n_mc"));
  b.bind<std::int64_t>(xi, "--n-grid", f.n_grid, "time grid size",
                       to_options<std::int64_t>("n_grid"));
  b.bind<double>(xi, "--t-min", f.t_min, "smallest grid time",
                 to_options<double>("t_min"));

  CLI::App* jac = app.add_subcommand(
      "jacobian", "network Jacobian-smoothness curve");
  add_common(b, jac, f);
  b.bind<std::string>(jac, "--net", f.net, "checkpoint path",
                      to_options<std::string>("net"));
  b.bind<std::int64_t>(jac, "--n-mc", f.n_mc, "MC draws per grid time",
                       to_options<std::int64_t>("n_mc"));
  b.bind<std::int64_t>(jac, "--n-t", f.n_t, "time grid size",
                       to_options<std::int64_t>("n_t"));
  b.bind<double>(jac, "--t-min", f.t_min, "grid start",
                 to_options<double>("t_min"));
  b.bind<double>(jac, "--t-max", f.t_max, "grid end",
                 to_options<double>("t_max"));
  b.bind<double>(jac, "--init-scale", f.init_scale,
                 "random-model weight scale", to_options<double>("init_scale"));

  CLI::App* damping = app.add_subcommand(
      "damping", "forward-moment convergence across damping regimes");
  add_common(b, damping, f);
  b.bind<double>(damping, "--tol", f.tol, "settling distance threshold",
                 to_options<double>("tol"));

  CLI::App* gradvar = app.add_subcommand(
      "gradvar", "residual-covariance traces of the two conditionings");
  add_common(b, gradvar, f);
  b.bind<std::string>(gradvar, "--net", f.net, "checkpoint path",
                      to_options<std::string>("net"));
  b.bind<std::int64_t>(gradvar, "--n-mc", f.n_mc, "MC draws per grid time",
                       to_options<std::int64_t>("n_mc"));

  CLI::App* train = app.add_subcommand(
      "train", "train the velocity-score network on the nine-mode mixture");
  add_common(b, train, f);
  b.bind<std::int64_t>(train, "--iters", f.iters, "training iterations",
                       to_options<std::int64_t>("iters"));
  b.bind<std::int64_t>(train, "--batch", f.batch, "batch size",
                       to_options<std::int64_t>("batch"));
  b.bind<double>(train, "--lr", f.lr, "learning rate",
                 to_options<double>("lr"));
  b.bind<std::int64_t>(train, "--warmup", f.warmup, "LR warmup steps",
                       to_options<std::int64_t>("warmup"));
  b.bind<double>(train, "--ema-rate", f.ema_rate, "EMA decay",
                 to_options<double>("ema_rate"));
  b.bind<std::string>(train, "--weighting", f.weighting, "reweighted or ml",
                      to_options<std::string>("weighting"));
  b.bind<double>(train, "--t-cut", f.t_cut, "smallest training time",
                 to_options<double>("t_cut"));
  b.bind<std::string>(train, "--mode", f.mode, "mixed or raw",
                      to_options<std::string>("mode"));
  b.bind<std::string>(train, "--conditioning", f.conditioning,
                      "hybrid or denoising",
                      to_options<std::string>("conditioning"));

  CLI::App* sample = app.add_subcommand(
      "sample", "draw generative samples and write them to disk");
  add_common(b, sample, f);
  add_sampling(b, sample, f);
  b.bind<std::string>(sample, "--sampler", f.sampler,
                      "sscs | em | ode | vpsde-em | ddim",
                      to_top<std::string>("sampler"));
  b.bind<std::string>(sample, "--net", f.net, "checkpoint path",
                      to_options<std::string>("net"));
  b.bind_flag(sample, "--binary", f.binary, "also write the binary container",
              to_options<bool>("binary"));
  b.bind_flag(sample, "--with-v", f.with_v, "include velocity columns",
              to_options<bool>("with_v"));
  b.bind_flag(sample, "--denoise-velocity", f.denoise_velocity,
              "score-based terminal velocity update",
              to_options<bool>("denoise_velocity"));
  b.bind<std::string>(sample, "--score-time", f.score_time,
                      "step_start or midpoint",
                      to_options<std::string>("score_time"));

  CLI::App* like = app.add_subcommand(
      "likelihood", "flow-based NLL bound on mixture draws");
  add_common(b, like, f);
  b.bind<std::string>(like, "--net", f.net, "checkpoint path",
                      to_options<std::string>("net"));
  b.bind<std::int64_t>(like, "--n-data", f.n_data, "evaluation points",
                       to_options<std::int64_t>("n_data"));
  b.bind<std::int64_t>(like, "--n-v", f.n_v, "velocity draws per point",
                       to_options<std::int64_t>("n_v"));
  b.bind<double>(like, "--rtol", f.rtol, "integrator relative tolerance",
                 to_options<double>("rtol"));
  b.bind<double>(like, "--atol", f.atol, "integrator absolute tolerance",
                 to_options<double>("atol"));
  b.bind<std::int64_t>(like, "--probes", f.probes,
                       "divergence probes (0 = exact)",
                       to_options<std::int64_t>("probes"));

  CLI::App* isw = app.add_subcommand(
      "isweights", "closed-form importance-weight curves over time");
  add_common(b, isw, f);
  b.bind<std::int64_t>(isw, "--n-grid", f.n_grid, "time grid size",
                       to_options<std::int64_t>("n_grid"));
  b.bind<double>(isw, "--t-min", f.t_min, "grid start (clamp)",
                 to_options<double>("t_min"));
  b.bind<std::string>(isw, "--spacing", f.spacing, "log or uniform",
                      to_options<std::string>("spacing"));
  b.bind<int>(isw, "--dim", f.dim, "data dimension of the Gaussian model",
              to_options<int>("d"));

  CLI11_PARSE(app, argc, argv);

  for (CLI::App* sub : app.get_subcommands()) {
    return run(sub->get_name(), f, b);
  }
  return 2;  // unreachable: require_subcommand(1)
}
