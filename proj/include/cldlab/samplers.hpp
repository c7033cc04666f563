// Reverse-time generative samplers and forward trajectory simulation.
//
// Three ways to turn a velocity score into samples: Euler–Maruyama on the
// reverse SDE, a symmetric splitting scheme that treats the linear part of
// the dynamics exactly and only Euler-discretizes the score term, and (for
// the data-space baseline) Euler–Maruyama plus the deterministic DDIM rule.
// All samplers walk a TimeSchedule from t = T down to t = eps and finish
// with a drift-only denoising step.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cldlab/kernels.hpp"
#include "cldlab/mixtures.hpp"
#include "cldlab/rng.hpp"

namespace cldlab {

enum class ScheduleKind { uniform, quadratic };

// Ordered step durations covering [eps, T], stored in reverse-time order:
// steps[0] is taken first when integrating from T downward (the largest step
// under quadratic striding, which packs fine steps near the data end).
struct TimeSchedule {
  ScheduleKind kind = ScheduleKind::uniform;
  int n_steps = 0;
  double t_final = 1.0;
  double eps_cutoff = 0.0;
  std::vector<double> steps;

  double span() const { return t_final - eps_cutoff; }
};

// Builds a schedule with sum(steps) = T - eps within 1e-12. The quadratic
// kind places forward-time knots at tau_i = c i^2 with c = (T-eps)/N^2, so
// forward durations are c(2i-1) and the reverse-ordered steps decrease
// linearly. Throws std::invalid_argument on bad arguments.
TimeSchedule make_schedule(ScheduleKind kind, int n_steps, double t_final,
                           double eps_cutoff);

// A batch of n joint states. x and v are row-major (n x d); t is the current
// physical diffusion time of the batch (T at the prior, decreasing to eps
// during reverse sampling).
struct StateBatch {
  int64_t n = 0;
  int d = 0;
  std::vector<double> x;
  std::vector<double> v;
  double t = 0.0;
};

// Velocity-score model: writes an (n x d) approximation of grad_v log p_t
// evaluated at the batch state/time into out. Must be deterministic and safe
// for concurrent read-only use.
using ScoreFn = std::function<void(const StateBatch&, std::span<double>)>;

// Data-space score model for the baseline process: grad_x log p_t at the
// given row-major (n x d) points.
using XScoreFn = std::function<void(std::span<const double> x, int64_t n,
                                    int d, double t, std::span<double> out)>;

// Exact velocity score of a diffused Gaussian mixture.
ScoreFn analytic_mixture_score(GaussianMixture mix, CldParams p);

// Equilibrium score -v/M (the assumed-Gaussian model; also the score that
// exactly cancels the splitting sampler's Euler stage).
ScoreFn equilibrium_score(CldParams p);

// Exact data-space score of the baseline-diffused mixture.
XScoreFn analytic_vpsde_score(GaussianMixture mix, VpsdeParams vp);

// n draws from the stationary law N(0, I_d) x N(0, M I_d) at time T.
StateBatch sample_equilibrium_prior(const CldParams& p, int64_t n, int d,
                                    uint64_t seed);

// One explicit Euler–Maruyama step of the reverse SDE over dt, drift and
// score evaluated at the pre-step state:
//   x <- x - beta M^{-1} v dt
//   v <- v + (beta x + Gamma beta M^{-1} v + 2 Gamma beta s) dt
//          + sqrt(2 Gamma beta dt) * noise
// noise is a caller-supplied (n x d) standard-normal panel, which keeps the
// step a pure function. Advances t by -dt.
StateBatch em_step_cld(const CldParams& p, const ScoreFn& s,
                       const StateBatch& batch, double dt,
                       std::span<const double> noise);

// Drift-only terminal update from time eps to 0. The data component needs no
// score: x <- x - eps beta M^{-1} v. When s_for_velocity is non-null the
// velocity is also updated with one extra score call (the full one-step
// form); by default it is left untouched.
StateBatch denoise(const CldParams& p, const StateBatch& batch, double eps,
                   const ScoreFn* s_for_velocity = nullptr);

// Which time the splitting sampler hands to the score during its Euler
// stage: the step's start time (the literal algorithm) or the half-step
// midpoint time (where the state actually sits).
enum class SscsScoreTime { step_start, midpoint };

// Runs the symmetric splitting sampler over the whole schedule and applies
// the terminal denoising step. Each step is: exact half-step of the linear
// (score-free) reverse dynamics sampled from its Gaussian law, full Euler
// update v += dt * 2 Gamma beta (s + M^{-1} v), second exact half-step.
// Throws only on propagated Cholesky failures.
StateBatch sscs_run(const CldParams& p, const ScoreFn& s,
                    const StateBatch& prior, const TimeSchedule& sched,
                    uint64_t seed,
                    SscsScoreTime score_time = SscsScoreTime::step_start,
                    bool denoise_velocity = false);

// Runs Euler–Maruyama over the whole schedule and denoises.
StateBatch em_run_cld(const CldParams& p, const ScoreFn& s,
                      const StateBatch& prior, const TimeSchedule& sched,
                      uint64_t seed, bool denoise_velocity = false);

// Baseline reverse-time Euler–Maruyama on dx = [1/2 beta x + beta s] ds +
// sqrt(beta) dw from x_T ~ N(0, I). Ends with the drift-only denoising step
// from eps to 0 (one extra score call). Returns row-major (n x d) samples.
std::vector<double> vpsde_em_run(const VpsdeParams& vp, const XScoreFn& s,
                                 int64_t n, int d, const TimeSchedule& sched,
                                 uint64_t seed);

// Deterministic DDIM walk along the schedule's knots from x_T ~ N(0, I):
//   x_{prev} = (a_prev/a_cur)(x + sig_cur^2 s) - sig_prev sig_cur s.
// Returns row-major (n x d) samples at the schedule's terminal time.
std::vector<double> ddim_run(const VpsdeParams& vp, const XScoreFn& s,
                             int64_t n, int d, const TimeSchedule& sched,
                             uint64_t seed);

// Forward Langevin dynamics at arbitrary damping (not restricted to the
// critical relation Gamma^2 = 4M).
struct LangevinParams {
  double beta = 4.0;
  double gamma_fric = 1.0;
  double mass = 0.25;

  void validate() const;  // throws std::invalid_argument on non-positive values
};

// Streaming second-moment time series of an Euler–Maruyama forward
// simulation started from x0 ~ N(0, s0xx), v0 ~ N(0, s0vv): batch moments
// and the x-autocorrelation E[x0 x_t]/E[x0^2] at every record_every-th step.
struct ForwardMomentSeries {
  std::vector<double> t;
  std::vector<double> mean_x, mean_v;
  std::vector<double> sxx, sxv, svv;
  std::vector<double> autocorr_x;
};

ForwardMomentSeries forward_trajectories(const LangevinParams& lp, double s0xx,
                                         double s0vv, int64_t n, int d,
                                         double dt, int64_t n_steps,
                                         int64_t record_every, uint64_t seed);

}  // namespace cldlab
