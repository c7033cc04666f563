// Probability-flow ODE machinery: the deterministic generative field that
// shares its marginals with the reverse SDE, an adaptive Dormand-Prince 4(5)
// integrator, divergence estimation (exact or probe-based), and the joint
// log-likelihood / NLL upper bound built on top of them.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cldlab/kernels.hpp"
#include "cldlab/mixtures.hpp"
#include "cldlab/rng.hpp"
#include "cldlab/samplers.hpp"

namespace cldlab {

enum class ProbeDist { rademacher, gaussian };

struct OdeConfig {
  double rtol = 1e-5;
  double atol = 1e-5;
  int64_t max_steps = 100000;
  int hutchinson_probes = 1;
  ProbeDist probe_dist = ProbeDist::rademacher;

  void validate() const;  // throws std::invalid_argument
};

// Right-hand side over a flat state vector; t1 < t0 integrates backwards.
using OdeField =
    std::function<void(double t, std::span<const double> y, std::span<double> dy)>;

struct OdeResult {
  std::vector<double> y;
  int64_t nfe = 0;        // number of field invocations, counted exactly
  int64_t n_accepted = 0;
  int64_t n_rejected = 0;
};

// Dormand-Prince 4(5) with PI step-size control. The error norm is the RMS of
// componentwise errors scaled by atol + rtol * |y|. Throws std::runtime_error
// when max_steps is exceeded or the step size underflows.
OdeResult rk45(const OdeField& f, std::span<const double> y0, double t0,
               double t1, const OdeConfig& cfg);

// Generative-ODE right-hand side in reverse time s = T - t (s runs 0 -> T-eps
// during sampling). Writes (dx/ds, dv/ds) for a single state u = (x, v):
//   dx/ds = -M^{-1} v beta,   dv/ds = beta x + Gamma beta [s_theta + M^{-1} v].
// The score is evaluated at physical time T - s.
void cld_ode_rhs(const CldParams& p, const ScoreFn& s, std::span<const double> u,
                 double t_reverse, std::span<double> out);

// Trace of d(field)/du at u estimated by central finite differences along the
// given probe vectors (n_probes x dim, row-major), averaged over probes. For
// a linear field the directional difference is exact, so the estimate is the
// plain Hutchinson quadratic form. Each probe costs two field evaluations.
double probe_divergence(
    const std::function<void(std::span<const double>, std::span<double>)>& field,
    std::span<const double> u, std::span<const double> probes, int n_probes);

// n_probes x dim panel of probe vectors (+-1 entries or standard normals).
std::vector<double> draw_probes(int n_probes, int dim, ProbeDist dist,
                                CounterRng& rng);

// Exact trace of d(score_v)/dv for the analytic mixture score.
using ScoreDivFn = std::function<double(std::span<const double> x,
                                        std::span<const double> v, double t)>;
ScoreDivFn analytic_mixture_score_div(GaussianMixture mix, CldParams p);

struct LikelihoodResult {
  double logp_joint = 0.0;     // (averaged) estimate of log p_eps(x0, v0)
  int64_t nfe = 0;             // total field invocations
  int n_v = 1;                 // velocity draws averaged over
  double nll_bound_nats = 0.0; // -E_v[logp_joint] - H
  double nll_bound_bpd = 0.0;  // nats / (d log 2)
};

// Log-likelihood of one joint state placed at t = eps, computed by
// integrating the augmented state (u, delta-logp) from eps to T with the
// forward-time flow field and adding the stationary log-density at T.
// Divergence of the score block: exact via div_fn when given, otherwise
// Hutchinson probes (fixed per trajectory, drawn from (seed, probe stream)).
// The returned bound fields are the single-draw (n_v = 1) estimates.
LikelihoodResult log_likelihood_joint(const CldParams& p, const ScoreFn& s,
                                      std::span<const double> x0,
                                      std::span<const double> v0,
                                      const OdeConfig& cfg, uint64_t seed,
                                      const ScoreDivFn* div_fn = nullptr);

// NLL upper bound for one data point: averages log_likelihood_joint over
// n_v draws v0 ~ N(0, gamma0 M I) and subtracts the velocity entropy
// H = (d/2) log(2 pi e gamma0 M). Velocity draws use (seed, j) streams.
LikelihoodResult nll_bound(const CldParams& p, const ScoreFn& s,
                           std::span<const double> x0, int n_v,
                           const OdeConfig& cfg, uint64_t seed,
                           const ScoreDivFn* div_fn = nullptr);

// Integrates every prior row through the probability-flow ODE from t = T down
// to t = eps_cutoff (physical time) and applies the terminal denoising step.
// Rows are independent trajectories and run in parallel. Returns the batch
// plus the summed nfe across rows.
struct OdeSampleResult {
  StateBatch batch;
  int64_t nfe = 0;
};
OdeSampleResult ode_sample(const CldParams& p, const ScoreFn& s,
                           const StateBatch& prior, const OdeConfig& cfg);

}  // namespace cldlab
