#include "cldlab/kernels.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cldlab {

void CldParams::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("CldParams: beta must be > 0");
  if (!(gamma_fric > 0.0))
    throw std::invalid_argument("CldParams: gamma_fric must be > 0");
  const double m_crit = 0.25 * gamma_fric * gamma_fric;
  if (mass != m_crit)
    throw std::invalid_argument(
        "CldParams: mass must equal gamma_fric^2/4 exactly (critical "
        "damping); got mass=" +
        std::to_string(mass) + ", expected " + std::to_string(m_crit));
  if (!(gamma0 > 0.0))
    throw std::invalid_argument("CldParams: gamma0 must be > 0");
  if (!(t_final > 0.0))
    throw std::invalid_argument("CldParams: t_final must be > 0");
  if (!(eps_cutoff >= 0.0 && eps_cutoff < t_final))
    throw std::invalid_argument("CldParams: need 0 <= eps_cutoff < t_final");
  if (!(eps_num >= 0.0))
    throw std::invalid_argument("CldParams: eps_num must be >= 0");
}

PerDimKernel forward_moments(const CldParams& p, double t, double s0xx,
                             double s0vv) {
  if (t < 0.0 || t > p.t_final)
    throw std::domain_error("forward_moments: t outside [0, t_final]");
  const double g = p.gamma_fric;
  const double b = p.beta * t;          // integrated rate B(t) = beta*t
  const double y = 4.0 * b / g;         // exponent of the decay factor
  const double cm = std::exp(-0.5 * y); // mean decay e^{-2B/Gamma}
  const double cv = std::exp(-y);       // covariance decay e^{-4B/Gamma}
  const double em1 = std::expm1(y);     // e^y - 1, accurate for small t

  PerDimKernel k;
  k.t = t;
  k.mxx = (1.0 + 2.0 * b / g) * cm;
  k.mxv = (4.0 * b / (g * g)) * cm;
  k.mvx = -b * cm;
  k.mvv = (1.0 - 2.0 * b / g) * cm;

  const double bg = b / g;       // B/Gamma
  const double b2g2 = bg * bg;   // B^2/Gamma^2
  // Grouped so the small-t cancellation e^y - 1 - y happens inside expm1
  // arithmetic instead of between O(1) terms.
  const double pre_xx = s0xx * (1.0 + 4.0 * bg + 4.0 * b2g2) + (em1 - y) -
                        8.0 * b2g2 + 16.0 * (b2g2 / (g * g)) * s0vv;
  const double pre_xv = -b * s0xx + (4.0 * b / (g * g)) * s0vv -
                        2.0 * b * bg * (s0xx - 2.0) -
                        8.0 * (b * b / (g * g * g)) * s0vv;
  const double one_m = 1.0 - 2.0 * bg;
  const double pre_vv = 0.25 * g * g * em1 + b * g + s0vv * one_m * one_m +
                        b * b * (s0xx - 2.0);
  k.sxx = cv * pre_xx;
  k.sxv = cv * pre_xv;
  k.svv = cv * pre_vv;
  return k;
}

PerDimKernel hsm_kernel(const CldParams& p, double t) {
  return forward_moments(p, t, 0.0, p.gamma0 * p.mass);
}

PerDimKernel dsm_kernel(const CldParams& p, double t) {
  return forward_moments(p, t, 0.0, 0.0);
}

CholFactor cholesky2(const PerDimKernel& k, double eps_num) {
  const double a = k.sxx + eps_num;
  const double c = k.svv + eps_num;
  if (!(a > 0.0))
    throw std::runtime_error("cholesky2: sxx + eps_num not positive");
  CholFactor f;
  f.lxx = std::sqrt(a);
  f.lxv = k.sxv / f.lxx;
  const double rem = c - f.lxv * f.lxv;
  if (!(rem > 0.0))
    throw std::runtime_error(
        "cholesky2: stabilized covariance not positive definite (lvv^2 = " +
        std::to_string(rem) + "); consider a larger eps_num");
  f.lvv = std::sqrt(rem);
  return f;
}

double ell(const PerDimKernel& k, double eps_num) {
  const double a = k.sxx + eps_num;
  const double c = k.svv + eps_num;
  const double det = a * c - k.sxv * k.sxv;
  if (!(a > 0.0) || !(det > 0.0))
    throw std::domain_error("ell: stabilized covariance is singular");
  return std::sqrt(a / det);
}

PerDimKernel equilibrium(const CldParams& p) {
  PerDimKernel k;
  k.mxx = k.mxv = k.mvx = k.mvv = 0.0;
  k.sxx = 1.0;
  k.sxv = 0.0;
  k.svv = p.mass;
  k.t = std::numeric_limits<double>::infinity();
  return k;
}

PerDimKernel sscs_half_moments(const CldParams& p, double dt_half) {
  if (dt_half < 0.0)
    throw std::domain_error("sscs_half_moments: dt_half must be >= 0");
  const double g = p.gamma_fric;
  const double b = p.beta * dt_half;
  const double y = 4.0 * b / g;
  const double cm = std::exp(-0.5 * y);
  const double cv = std::exp(-y);
  const double em1 = std::expm1(y);

  PerDimKernel k;
  k.t = dt_half;
  // Reverse-time propagator: off-diagonal mean signs flip vs forward_moments.
  k.mxx = (1.0 + 2.0 * b / g) * cm;
  k.mxv = -(4.0 * b / (g * g)) * cm;
  k.mvx = b * cm;
  k.mvv = (1.0 - 2.0 * b / g) * cm;

  // e^y - 1 - y - y^2/2 = y^3/6 + ...; evaluated in this grouped form the
  // absolute error stays ~ulp(y) for small steps.
  const double pre_xx = (em1 - y) - 0.5 * y * y;
  const double pre_xv = -4.0 * b * b / g;
  const double pre_vv = 0.25 * g * g * em1 + b * g - 2.0 * b * b;
  k.sxx = cv * pre_xx;
  k.sxv = cv * pre_xv;
  k.svv = cv * pre_vv;
  return k;
}

}  // namespace cldlab
