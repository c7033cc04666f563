// Gaussian-mixture toy distributions with exactly diffused marginals.
//
// An isotropic Gaussian mixture stays a Gaussian mixture under the linear
// forward SDE: only the component means move and all components share one
// covariance. That gives closed-form densities and scores at every time t,
// both for the velocity-augmented joint process and for the variance-
// preserving (VPSDE) baseline, which is what the score-gap experiment and the
// analytic sampler studies rely on.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cldlab/kernels.hpp"
#include "cldlab/rng.hpp"

namespace cldlab {

// Isotropic Gaussian mixture in d dimensions with shared per-component std.
struct GaussianMixture {
  int d = 2;
  std::vector<double> weights;              // one weight per component
  std::vector<std::vector<double>> means;   // component means, each length d
  double sigma = 0.04;                      // per-component isotropic std

  int n_components() const { return int(weights.size()); }

  // Throws std::invalid_argument unless weights are a probability vector
  // (sum 1 within 1e-12, all >= 0), sigma > 0, and all means have length d.
  void validate() const;
};

// The 3x3 grid of nine equally weighted components with std 0.04 and lattice
// constant a = 2^{-1/2} that all 2-D experiments use as data.
GaussianMixture nine_gaussians();

// log p_data(x) for a length-d point; stabilized log-sum-exp over components.
double data_log_density(const GaussianMixture& mix, std::span<const double> x);

// -mean log p_data over a row-major (n x d) batch.
double data_nll(const GaussianMixture& mix, std::span<const double> xs);

// Exact ancestral samples from the mixture into a row-major (n x d) buffer.
void sample_data(const GaussianMixture& mix, CounterRng& rng,
                 std::span<double> out);

// Joint (x, v) mixture at time t. Components share the per-dimension 2x2
// covariance (equal initial component covariances stay equal), so density and
// score evaluation cost O(K d) per point.
struct DiffusedJointMixture {
  int d = 2;
  double t = 0.0;
  std::vector<double> weights;
  std::vector<std::vector<double>> mean_x;  // component x-means, K x d
  std::vector<std::vector<double>> mean_v;  // component v-means, K x d
  PerDimKernel cov;                         // shared per-dimension covariance

  // Cached derived quantities (filled by diffuse()).
  double ixx = 0.0, ixv = 0.0, ivv = 0.0;   // inverse covariance entries
  double log_norm_per_dim = 0.0;            // -log(2 pi) - 0.5 log det
  CholFactor chol;                          // for exact sampling

  int n_components() const { return int(weights.size()); }
};

// Pushes every component mean through the transition-mean coefficients (the
// initial velocity has mean zero) and diffuses the shared covariance from
// diag(sigma^2, gamma0*M). Errors propagate from the kernel evaluation.
DiffusedJointMixture diffuse(const GaussianMixture& mix, const CldParams& p,
                             double t);

// log p_t(u) for u = (x_1..x_d, v_1..v_d); stabilized log-sum-exp.
double log_density(const DiffusedJointMixture& dm, std::span<const double> u);

// Exact velocity score grad_v log p_t(u) (equivalently the score of the
// conditional law of v given x), written into out (length d).
void score_v(const DiffusedJointMixture& dm, std::span<const double> u,
             std::span<double> out);

// Exact divergence of the velocity score: trace of d(score_v)/dv at u.
// Used for deterministic divergence accumulation in likelihood evaluation.
double score_v_div(const DiffusedJointMixture& dm, std::span<const double> u);

// Exact draws from the diffused joint mixture into a row-major (n x 2d)
// buffer laid out as (x_1..x_d, v_1..v_d) per row.
void sample_joint(const DiffusedJointMixture& dm, CounterRng& rng,
                  std::span<double> out);

// Variance-preserving baseline diffusion with the standard linear schedule
// beta(t) = beta0 + beta1 * t, so alpha_t^2 + sigma_t^2 = 1 identically.
struct VpsdeParams {
  double beta0 = 0.1;
  double beta1 = 19.9;

  double beta(double t) const { return beta0 + beta1 * t; }
  double int_beta(double t) const { return beta0 * t + 0.5 * beta1 * t * t; }
  double alpha(double t) const { return std::exp(-0.5 * int_beta(t)); }
  double sigma2(double t) const { return -std::expm1(-int_beta(t)); }
};

// log density of the mixture diffused by the VPSDE at time t: components
// N(alpha_t mu_k, (alpha_t^2 sigma^2 + sigma_t^2) I).
double vpsde_log_density(const GaussianMixture& mix, const VpsdeParams& vp,
                         std::span<const double> x, double t);

// Exact data-space score grad_x log p_t(x) of the VPSDE-diffused mixture.
void vpsde_score_x(const GaussianMixture& mix, const VpsdeParams& vp,
                   std::span<const double> x, double t, std::span<double> out);

// Score-gap curves: for each grid time, the mean squared distance between the
// exact time-t score and the equilibrium (standard-normal) score,
//   xi_cld(t)    = E || grad_v log p_t(v|x) + v ||^2,
//   xi_vpsde(t)  = E || grad_x log p_t(x)  + x ||^2,
// estimated with n_mc exact samples per time.
struct XiCurves {
  std::vector<double> t;
  std::vector<double> xi_cld;
  std::vector<double> xi_vpsde;
  int64_t n_mc = 0;
  uint64_t seed = 0;
};

// Constant rate with the same time average as the baseline schedule over
// [0, t_final]. Running the joint process at this rate gives both processes
// the same total integrated rate, i.e. equally converged priors at t_final,
// which is the normalization that makes the two gap curves comparable.
inline double rate_matched_beta(const VpsdeParams& vp, double t_final) {
  return vp.int_beta(t_final) / t_final;
}

// Requires M = gamma0 = 1 (unit-variance equilibrium in both x and v, so
// both equilibrium scores are -identity); throws std::invalid_argument
// otherwise. The joint branch runs at the constant rate p.beta; pass
// p.beta = rate_matched_beta(vp, T) for an equal total noise budget.
XiCurves xi_experiment(const CldParams& p, const VpsdeParams& vp,
                       const GaussianMixture& mix,
                       std::span<const double> t_grid, int64_t n_mc,
                       uint64_t seed);

}  // namespace cldlab
