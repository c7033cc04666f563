// Score-matching objectives and their variance toolbox: hybrid and denoising
// losses under several weightings, the closed-form constant that separates
// them, control variates built from a second score call at the kernel mean,
// closed-form importance weights over diffusion time under a Gaussian-data
// assumption, a piecewise-linear time proposal, and the gradient-variance
// study comparing the two conditioning choices.
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

enum class WeightVariant { ml, reweighted, custom };

// Time weighting lambda(t) of the practical objective
//   lambda(t) * ell_t^2 * || eps_v - alpha(u, t) ||^2.
// ml:        lambda = Gamma * beta   (maximum-likelihood weighting)
// reweighted: lambda = ell_t^{-2}    (prefactor collapses to exactly 1)
// custom:    lambda = custom_fn(t)
struct Weighting {
  WeightVariant variant = WeightVariant::ml;
  std::function<double(double)> custom_fn;

  // The combined prefactor lambda(t) * ell^2; the reweighted variant returns
  // the exact constant 1.0 rather than ell^{-2} * ell^2.
  double prefactor(const CldParams& p, double t, double ell) const;
};

// One reparameterized example: u = mu_t + L_t eps with eps ~ N(0, I_{2d});
// eps_v keeps the d velocity-block components (the regression target), mu
// keeps the kernel mean (the control variate's second evaluation point).
struct LossDraw {
  double t = 0.0;
  double ell = 0.0;
  std::vector<double> u;      // 2d, layout (x..., v...)
  std::vector<double> mu;     // 2d
  std::vector<double> eps_v;  // d
};

// Hybrid draw: x0 conditioned, v0 marginalized out (kernel starts from
// (x0, 0) with velocity variance gamma0 * M folded into the covariance).
LossDraw hsm_draw(const CldParams& p, std::span<const double> x0, double t,
                  CounterRng& rng);

// Denoising draw: v0 ~ N(0, gamma0 M I) sampled explicitly, kernel starts
// from the point (x0, v0).
LossDraw dsm_draw(const CldParams& p, std::span<const double> x0, double t,
                  CounterRng& rng);

// Noise-prediction model: writes the (n x d) velocity-noise prediction
// alpha(u, t) for row-major u (n x 2d) and per-row times.
using AlphaFn = std::function<void(std::span<const double> u, int64_t n, int d,
                                   std::span<const double> t,
                                   std::span<double> out)>;

// Weighted per-example loss for one draw given the model output at u.
double eq8_loss(const LossDraw& draw, std::span<const double> alpha,
                double prefactor);

// Batched losses over n examples (x0s row-major n x d, one t per row).
// Per-row draws use CounterRng(seed, row). Deterministic for any worker count.
std::vector<double> hsm_loss(const AlphaFn& model, const CldParams& p,
                             std::span<const double> x0s,
                             std::span<const double> ts, const Weighting& w,
                             uint64_t seed);
std::vector<double> dsm_loss(const AlphaFn& model, const CldParams& p,
                             std::span<const double> x0s,
                             std::span<const double> ts, const Weighting& w,
                             uint64_t seed);

// Model-independent constant separating the two conditionings at the
// score-space loss level: d * ((ell_t^DSM)^2 - (ell_t^HSM)^2), i.e.
// E[L_DSM] = E[L_HSM] + offset for any fixed score model (both draws share
// the marginal law of u_t; only the irreducible target norm differs).
double hsm_dsm_offset(const CldParams& p, double t, int d);

// Control-variate pair sharing one hybrid draw per row. plain is the
// unweighted-lambda loss (ell^2 prefactor for the ml flavor, 1 for the fid
// flavor); cv subtracts the mean-zero-shifted control term, dropping its
// known expectation (ell^2 d resp. d):
//   cv = pref * ( ||alpha(u)||^2 - 2 eps_v^T (alpha(u) - alpha(mu)) ).
// Costs two model calls per batch (at u and at mu).
struct CvSample {
  double plain = 0.0;
  double cv = 0.0;
};
std::vector<CvSample> cv_loss_ml(const AlphaFn& model, const CldParams& p,
                                 std::span<const double> x0s,
                                 std::span<const double> ts, uint64_t seed);
std::vector<CvSample> cv_loss_fid(const AlphaFn& model, const CldParams& p,
                                  std::span<const double> x0s,
                                  std::span<const double> ts, uint64_t seed);

// Assumed-Gaussian marginal covariance of the diffused joint when the data
// is N(0, I) and the initial velocity is N(0, gamma0 M I): per dimension
// Sigma_bar(t) = K_pre(t) * e^{-y}, y = 4 beta t / Gamma. K_pre is stored in
// pre-exponential form so expressions stay finite at large t.
struct ImportanceModel {
  CldParams p;

  struct Eval {
    double y = 0.0;        // 4 beta t / Gamma
    double k11 = 0.0;      // pre-exponential entries
    double k12 = 0.0;
    double k22 = 0.0;
    double det = 0.0;      // pre-exponential determinant
    double ellbar2 = 0.0;  // e^y k11 / det  ( = K_full,11 / det K_full )
  };
  Eval eval(double t) const;  // throws std::runtime_error if det underflows

  // Full marginal covariance entries (sxx, sxv, svv) at time t.
  PerDimKernel marginal(double t) const;
};

enum class IsVariant { ml, fid, mlc, fidc };

// Closed-form expected (weighted) loss of the assumed-Gaussian score model,
// used as the importance weight over t:
//   ml   = mean-term + (ellbar - ell)^2 d
//   mlc  = ml - ell^2 d              (control-variate version)
//   fid  = ml / ell^2,  fidc = mlc / ell^2
// with mean-term = e^y det^{-2} d [ br_x^2 + gamma0 M br_v^2 ],
//   br_x = -beta t k11 - (2 beta t / Gamma + 1) k12,
//   br_v = (1 - 2 beta t / Gamma) k11 - 4 beta t Gamma^{-2} k12,
// and ell the hybrid transition-kernel value at the same t.
double is_weight(const ImportanceModel& im, double t, IsVariant variant, int d);

// Sampler over [t_cut, t_final] with density proportional to a positive
// weight curve, discretized on a uniform grid with linear interpolation.
struct TimeProposal {
  std::vector<double> grid;     // n_grid knots, grid.front()=t_cut
  std::vector<double> density;  // normalized piecewise-linear q(t) at knots
  std::vector<double> cdf;      // cdf at knots, cdf.back()=1
  double t_cut = 0.0;
  double t_final = 1.0;

  double sample(double u01) const;     // inverse CDF of q
  double density_at(double t) const;   // linear interpolation
  // Importance correction making weighted losses unbiased for the
  // uniform-time objective: (1/(t_final - t_cut)) / q(t). Identically 1 (up
  // to rounding) for a constant weight curve.
  double correction(double t) const;
};
TimeProposal make_time_proposal(const std::function<double(double)>& weight,
                                double t_cut, double t_final, int n_grid = 256);

// Empirical trace of the covariance of the score-matching residual
// K = s_model(u_t, t) - grad_v log p(u_t | conditioning), under hybrid
// (conditioning on x0) and denoising (conditioning on (x0, v0))
// reparameterizations, per grid time. gamma is read from p.gamma0.
struct GradVarCurves {
  std::vector<double> t;
  std::vector<double> trace_hsm;
  std::vector<double> trace_dsm;
  double gamma = 0.0;
  int64_t n_mc = 0;
  uint64_t seed = 0;
};
GradVarCurves grad_variance_study(const ScoreFn& model,
                                  const GaussianMixture& mix,
                                  const CldParams& p,
                                  std::span<const double> t_grid, int64_t n_mc,
                                  uint64_t seed);

}  // namespace cldlab
