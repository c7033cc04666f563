// Experiment runners: the nine seeded, manifest-writing studies exposed by
// the command-line tool. Each runner wires library operations to output
// files (CSV/JSON plus the binary sample container) and records per-metric
// results, RNG stream usage, and written paths in a RunManifest.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cldlab/kernels.hpp"
#include "cldlab/samplers.hpp"

namespace cldlab {

// Build/tool identification embedded in every manifest ("v<semver>+g<hash>").
std::string version_string();

// Fully resolved description of one experiment invocation. JSON config files
// carry the same fields; command-line flags override file values.
struct ExperimentConfig {
  std::string id;                                     // experiment name
  CldParams p{};                                      // diffusion parameters
  ScheduleKind schedule = ScheduleKind::uniform;      // sampler step striding
  int n_steps = 275;                                  // sampler step count
  std::string sampler = "sscs";  // sscs | em | ode | vpsde-em | ddim
  std::int64_t n_samples = 100000;
  std::uint64_t seed = 0;
  bool seed_set = false;  // seeds are always explicit, never wall-clock
  std::string out;        // output stem; writers append suffixes
  std::string format = "csv";     // csv | json
  nlohmann::json options;         // experiment-specific knobs (object)

  static const std::vector<std::string>& known_ids();

  // Parses a config object; unknown top-level keys and malformed values
  // throw std::invalid_argument. Missing keys keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);

  // Normalized echo with every effective value materialized.
  nlohmann::json to_json() const;

  // Throws std::invalid_argument unless the id is recognized, the seed was
  // given explicitly, and counts/paths are usable.
  void validate() const;
};

// One computed quantity. ok records whether the value was produced and is
// usable (finite where finiteness is expected); metrics never assert paper
// claims — acceptance tests do that.
struct MetricResult {
  std::string name;
  double value = 0.0;
  bool ok = true;
  std::string note;
};

struct RunManifest {
  nlohmann::json config;                  // normalized ExperimentConfig echo
  std::string version;                    // version_string()
  double wall_time_s = 0.0;
  std::vector<MetricResult> metrics;      // per-metric results
  std::vector<std::string> rng_streams;   // "(seed, stream): purpose" notes
  std::vector<std::string> outputs;       // files written
  std::vector<std::string> failures;      // errors caught mid-run

  bool all_ok() const;
  nlohmann::json to_json() const;
};

// Looks up a metric by name; nullptr when absent.
const MetricResult* find_metric(const RunManifest& m, const std::string& name);

// ---------------------------------------------------------------------------
// Core computations with library-level entry points (used by the runners and
// by tests that want values without touching the filesystem).
// ---------------------------------------------------------------------------

// NLL of generated samples against the nine-mode mixture for three
// reverse-time methods at several step counts: the velocity-augmented chain
// under Euler-Maruyama and under the splitting sampler (shared prior and
// noise seed per cell, so the two are a paired comparison), and the
// data-space baseline chain under Euler-Maruyama.
struct NllTable {
  std::vector<int> n_steps;
  std::vector<double> cld_em, cld_sscs, vpsde_em;
};
NllTable analytical_nll_table(const CldParams& p, std::span<const int> steps,
                              std::int64_t n_samples, ScheduleKind kind,
                              std::uint64_t seed);

// Deterministic second-moment and mean-propagator curves of the forward
// dynamics at arbitrary damping, integrated with classical RK4 from the
// diagonal start diag(s0xx, s0vv). dist is the normalized distance to the
// stationary moments (1, 0, M):
//   dist = max(|sxx - 1|, |sxv| / sqrt(M), |svv - M| / M).
// time_to_eq is the settling time: the first recorded time after which dist
// stays below tol through t_max (infinity when it never settles).
// autocorr_x is the stationary autocorrelation E[x_t x_0]/E[x_0^2], i.e. the
// (x,x) entry of the mean propagator.
struct DampingCurve {
  double gamma_fric = 0.0;
  std::vector<double> t, sxx, sxv, svv, dist, autocorr_x;
  double time_to_eq = 0.0;
  bool converged = false;
  bool autocorr_sign_change = false;
};
DampingCurve damping_curve(const LangevinParams& lp, double s0xx, double s0vv,
                           double t_max, double h, int record_every,
                           double tol);

// ---------------------------------------------------------------------------
// Runners. Each writes its data file(s) under cfg.out and appends metrics,
// stream notes, and output paths to the manifest. Throws on unrecoverable
// errors; run_experiment turns those into manifest failures.
// ---------------------------------------------------------------------------

void run_analytical_table(const ExperimentConfig& cfg, RunManifest& m);
void run_xi(const ExperimentConfig& cfg, RunManifest& m);
void run_jacobian(const ExperimentConfig& cfg, RunManifest& m);
void run_damping(const ExperimentConfig& cfg, RunManifest& m);
void run_gradvar(const ExperimentConfig& cfg, RunManifest& m);
void run_train(const ExperimentConfig& cfg, RunManifest& m);
void run_sample(const ExperimentConfig& cfg, RunManifest& m);
void run_likelihood(const ExperimentConfig& cfg, RunManifest& m);
void run_isweights(const ExperimentConfig& cfg, RunManifest& m);

// Validates, dispatches on cfg.id, times the run, writes
// "<out>.manifest.json", and returns the manifest. A runner exception is
// recorded in failures (the manifest is still written); the process-level
// caller maps all_ok() to its exit status.
RunManifest run_experiment(const ExperimentConfig& cfg);

}  // namespace cldlab
