// Closed-form transition moments of the critically damped Langevin SDE.
//
// The forward process couples data x with a velocity v per dimension:
//   dx = (beta/M) v dt
//   dv = -beta x dt - (Gamma beta / M) v dt + sqrt(2 Gamma beta) dW
// with critical damping M = Gamma^2/4. Because drift and diffusion act
// blockwise per dimension, all Gaussian transition laws factor into d copies
// of one 2x2 problem; this module only ever handles that 2x2 block.
//
// Everything here is a pure function of its value arguments.

#pragma once

#include <cstdint>

namespace cldlab {

// Diffusion hyperparameters. Defaults are the standard operating point used
// throughout the experiments: beta=4, Gamma=1, M=1/4, gamma0=0.04, T=1.
struct CldParams {
  double beta = 4.0;        // time-rescaling rate (constant in t)
  double gamma_fric = 1.0;  // friction Gamma
  double mass = 0.25;       // M; must equal Gamma^2/4 (critical damping)
  double gamma0 = 0.04;     // initial velocity variance scale: v0 ~ N(0, gamma0*M)
  double t_final = 1.0;     // T
  double eps_cutoff = 1e-3; // terminal integration cutoff for samplers
  double eps_num = 1e-9;    // stabilizer added to covariance diagonals

  double inv_mass() const { return 1.0 / mass; }

  // Throws std::invalid_argument if the critical-damping relation or the
  // positivity/range constraints are violated.
  void validate() const;
};

// Per-dimension Gaussian transition law at time t:
//   mean = [mxx mxv; mvx mvv] * (x0, v0),  cov = [sxx sxv; sxv svv].
struct PerDimKernel {
  double mxx = 1.0, mxv = 0.0;  // coefficients of (x0, v0) in the x mean
  double mvx = 0.0, mvv = 1.0;  // coefficients of (x0, v0) in the v mean
  double sxx = 0.0, sxv = 0.0, svv = 0.0;
  double t = 0.0;

  void mean(double x0, double v0, double& mu_x, double& mu_v) const {
    mu_x = mxx * x0 + mxv * v0;
    mu_v = mvx * x0 + mvv * v0;
  }
};

// Lower-triangular factor of the (stabilized) 2x2 covariance: L L^T = cov.
struct CholFactor {
  double lxx = 0.0, lxv = 0.0, lvv = 0.0;

  // Maps a standard-normal pair (ex, ev) to a covariance-shaped pair.
  void apply(double ex, double ev, double& out_x, double& out_v) const {
    out_x = lxx * ex;
    out_v = lxv * ex + lvv * ev;
  }
};

// Transition moments after time t from a diagonal initial covariance
// diag(s0xx, s0vv). Throws std::domain_error when t is outside [0, T].
PerDimKernel forward_moments(const CldParams& p, double t, double s0xx,
                             double s0vv);

// Kernel conditioning on x0 only, with v0 ~ N(0, gamma0*M) folded into the
// covariance (use mean coefficients with v0 = 0).
PerDimKernel hsm_kernel(const CldParams& p, double t);

// Kernel conditioning on the full pair (x0, v0): zero initial covariance.
PerDimKernel dsm_kernel(const CldParams& p, double t);

// 2x2 Cholesky of cov + eps_num*I. Throws std::runtime_error when the
// stabilized matrix is not positive definite.
CholFactor cholesky2(const PerDimKernel& k, double eps_num);

// Velocity-noise scale ell = sqrt(sxx / (sxx*svv - sxv^2)) == 1/lvv, computed
// with the same eps_num stabilization as cholesky2. Throws std::domain_error
// when the stabilized determinant is not positive.
double ell(const PerDimKernel& k, double eps_num = 0.0);

// Stationary law of the forward SDE: zero mean, cov diag(1, M). The mean
// coefficients are zero (the process forgets its start) and t is +infinity.
PerDimKernel equilibrium(const CldParams& p);

// Exact moments of the score-free part of the reverse-time SDE over a half
// step dt_half (used by the splitting sampler). Initial covariance is zero;
// note the flipped off-diagonal signs relative to forward_moments.
PerDimKernel sscs_half_moments(const CldParams& p, double dt_half);

}  // namespace cldlab
