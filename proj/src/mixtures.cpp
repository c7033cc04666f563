#include "cldlab/mixtures.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "cldlab/parallel.hpp"

namespace cldlab {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Stack space for per-component/per-dimension scratch with heap fallback.
struct Scratch {
  std::array<double, 64> stack;
  std::vector<double> heap;

  double* get(int n) {
    if (n <= int(stack.size())) return stack.data();
    heap.assign(size_t(n), 0.0);
    return heap.data();
  }
};

double log_sum_exp(const double* v, int n) {
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) m = std::max(m, v[k]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (int k = 0; k < n; ++k) s += std::exp(v[k] - m);
  return m + std::log(s);
}

int draw_component(const std::vector<double>& weights, CounterRng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  const int last = int(weights.size()) - 1;
  for (int k = 0; k < last; ++k) {
    acc += weights[k];
    if (u < acc) return k;
  }
  return last;
}

// Per-component joint log densities at u, written into lk (length K).
void component_log_densities(const DiffusedJointMixture& dm,
                             std::span<const double> u, double* lk) {
  const int d = dm.d;
  const int K = dm.n_components();
  for (int k = 0; k < K; ++k) {
    double quad = 0.0;
    const double* mx = dm.mean_x[size_t(k)].data();
    const double* mv = dm.mean_v[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      const double dx = u[size_t(i)] - mx[i];
      const double dv = u[size_t(d + i)] - mv[i];
      quad += dm.ixx * dx * dx + 2.0 * dm.ixv * dx * dv + dm.ivv * dv * dv;
    }
    lk[k] = std::log(dm.weights[size_t(k)]) +
            double(d) * dm.log_norm_per_dim - 0.5 * quad;
  }
}

void sample_joint_one(const DiffusedJointMixture& dm, CounterRng& rng,
                      double* row) {
  const int d = dm.d;
  const int k = draw_component(dm.weights, rng);
  const double* mx = dm.mean_x[size_t(k)].data();
  const double* mv = dm.mean_v[size_t(k)].data();
  for (int i = 0; i < d; ++i) {
    const double ex = rng.normal();
    const double ev = rng.normal();
    double nx = 0.0, nv = 0.0;
    dm.chol.apply(ex, ev, nx, nv);
    row[i] = mx[i] + nx;
    row[d + i] = mv[i] + nv;
  }
}

// Effective per-component std of the VPSDE-diffused mixture.
double vpsde_std(const GaussianMixture& mix, const VpsdeParams& vp, double t,
                 double& alpha) {
  alpha = vp.alpha(t);
  return std::sqrt(alpha * alpha * mix.sigma * mix.sigma + vp.sigma2(t));
}

}  // namespace

void GaussianMixture::validate() const {
  if (d < 1) throw std::invalid_argument("mixture dimension must be >= 1");
  if (weights.empty()) throw std::invalid_argument("mixture has no components");
  if (means.size() != weights.size()) {
    throw std::invalid_argument("means/weights count mismatch");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("weights must be >= 0");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw std::invalid_argument("weights must sum to 1 (got " +
                                std::to_string(sum) + ")");
  }
  for (const auto& mu : means) {
    if (int(mu.size()) != d) {
      throw std::invalid_argument("component mean has wrong dimension");
    }
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be > 0");
}

GaussianMixture nine_gaussians() {
  const double a = 1.0 / std::sqrt(2.0);
  GaussianMixture mix;
  mix.d = 2;
  mix.sigma = 0.04;
  mix.weights.assign(9, 1.0 / 9.0);
  mix.means = {{-a, 0.0},       {-a / 2, a / 2}, {0.0, a},
               {-a / 2, -a / 2}, {0.0, 0.0},      {a / 2, a / 2},
               {0.0, -a},        {a / 2, -a / 2}, {a, 0.0}};
  return mix;
}

double data_log_density(const GaussianMixture& mix, std::span<const double> x) {
  const int d = mix.d;
  const int K = mix.n_components();
  const double inv_var = 1.0 / (mix.sigma * mix.sigma);
  const double log_norm =
      -0.5 * double(d) * (kLog2Pi + 2.0 * std::log(mix.sigma));
  Scratch scratch;
  double* lk = scratch.get(K);
  for (int k = 0; k < K; ++k) {
    double q = 0.0;
    const double* mu = mix.means[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      const double dx = x[size_t(i)] - mu[i];
      q += dx * dx;
    }
    lk[k] = std::log(mix.weights[size_t(k)]) + log_norm - 0.5 * q * inv_var;
  }
  return log_sum_exp(lk, K);
}

double data_nll(const GaussianMixture& mix, std::span<const double> xs) {
  const int d = mix.d;
  if (xs.size() % size_t(d) != 0) {
    throw std::invalid_argument("batch size not divisible by dimension");
  }
  const int64_t n = int64_t(xs.size()) / d;
  if (n == 0) throw std::invalid_argument("empty batch");
  const double total = deterministic_sum(n, [&](int64_t r) {
    return data_log_density(mix, xs.subspan(size_t(r) * d, size_t(d)));
  });
  return -total / double(n);
}

void sample_data(const GaussianMixture& mix, CounterRng& rng,
                 std::span<double> out) {
  const int d = mix.d;
  if (out.size() % size_t(d) != 0) {
    throw std::invalid_argument("output size not divisible by dimension");
  }
  const int64_t n = int64_t(out.size()) / d;
  for (int64_t r = 0; r < n; ++r) {
    const int k = draw_component(mix.weights, rng);
    const double* mu = mix.means[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      out[size_t(r) * d + size_t(i)] = mu[i] + mix.sigma * rng.normal();
    }
  }
}

DiffusedJointMixture diffuse(const GaussianMixture& mix, const CldParams& p,
                             double t) {
  mix.validate();
  p.validate();
  DiffusedJointMixture dm;
  dm.d = mix.d;
  dm.t = t;
  dm.weights = mix.weights;
  dm.cov = forward_moments(p, t, mix.sigma * mix.sigma, p.gamma0 * p.mass);
  const int K = mix.n_components();
  dm.mean_x.resize(size_t(K));
  dm.mean_v.resize(size_t(K));
  for (int k = 0; k < K; ++k) {
    const auto& mu = mix.means[size_t(k)];
    auto& mx = dm.mean_x[size_t(k)];
    auto& mv = dm.mean_v[size_t(k)];
    mx.resize(size_t(mix.d));
    mv.resize(size_t(mix.d));
    for (int i = 0; i < mix.d; ++i) {
      // Initial velocity has mean zero, so only the x0 coefficients act.
      mx[size_t(i)] = dm.cov.mxx * mu[size_t(i)];
      mv[size_t(i)] = dm.cov.mvx * mu[size_t(i)];
    }
  }
  const double det = dm.cov.sxx * dm.cov.svv - dm.cov.sxv * dm.cov.sxv;
  if (!(det > 0.0)) {
    throw std::runtime_error("diffused covariance is not positive definite");
  }
  dm.ixx = dm.cov.svv / det;
  dm.ixv = -dm.cov.sxv / det;
  dm.ivv = dm.cov.sxx / det;
  dm.log_norm_per_dim = -kLog2Pi - 0.5 * std::log(det);
  dm.chol = cholesky2(dm.cov, 0.0);
  return dm;
}

double log_density(const DiffusedJointMixture& dm, std::span<const double> u) {
  Scratch scratch;
  double* lk = scratch.get(dm.n_components());
  component_log_densities(dm, u, lk);
  return log_sum_exp(lk, dm.n_components());
}

void score_v(const DiffusedJointMixture& dm, std::span<const double> u,
             std::span<double> out) {
  const int d = dm.d;
  const int K = dm.n_components();
  Scratch scratch;
  double* lk = scratch.get(K);
  component_log_densities(dm, u, lk);
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) m = std::max(m, lk[k]);
  for (int i = 0; i < d; ++i) out[size_t(i)] = 0.0;
  double z = 0.0;
  for (int k = 0; k < K; ++k) {
    const double w = std::exp(lk[k] - m);  // unnormalized responsibility
    z += w;
    const double* mx = dm.mean_x[size_t(k)].data();
    const double* mv = dm.mean_v[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      const double dx = u[size_t(i)] - mx[i];
      const double dv = u[size_t(d + i)] - mv[i];
      out[size_t(i)] += w * (-(dm.ixv * dx + dm.ivv * dv));
    }
  }
  for (int i = 0; i < d; ++i) out[size_t(i)] /= z;
}

double score_v_div(const DiffusedJointMixture& dm, std::span<const double> u) {
  const int d = dm.d;
  const int K = dm.n_components();
  Scratch scratch_lk, scratch_s, scratch_s2;
  double* lk = scratch_lk.get(K);
  component_log_densities(dm, u, lk);
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) m = std::max(m, lk[k]);
  double* s = scratch_s.get(d);    // responsibility-weighted mean of g
  double* s2 = scratch_s2.get(d);  // responsibility-weighted mean of g^2
  for (int i = 0; i < d; ++i) s[i] = s2[i] = 0.0;
  double z = 0.0;
  for (int k = 0; k < K; ++k) {
    const double w = std::exp(lk[k] - m);
    z += w;
    const double* mx = dm.mean_x[size_t(k)].data();
    const double* mv = dm.mean_v[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      const double dx = u[size_t(i)] - mx[i];
      const double dv = u[size_t(d + i)] - mv[i];
      const double g = -(dm.ixv * dx + dm.ivv * dv);
      s[i] += w * g;
      s2[i] += w * g * g;
    }
  }
  // d(score_v)_i/dv_i = E_r[g^2] - (E_r[g])^2 - (Sigma^{-1})_vv per dimension.
  double div = 0.0;
  for (int i = 0; i < d; ++i) {
    const double mean_g = s[i] / z;
    div += s2[i] / z - mean_g * mean_g - dm.ivv;
  }
  return div;
}

void sample_joint(const DiffusedJointMixture& dm, CounterRng& rng,
                  std::span<double> out) {
  const size_t row = size_t(2 * dm.d);
  if (out.size() % row != 0) {
    throw std::invalid_argument("output size not divisible by 2d");
  }
  const int64_t n = int64_t(out.size() / row);
  for (int64_t r = 0; r < n; ++r) {
    sample_joint_one(dm, rng, out.data() + size_t(r) * row);
  }
}

double vpsde_log_density(const GaussianMixture& mix, const VpsdeParams& vp,
                         std::span<const double> x, double t) {
  const int d = mix.d;
  const int K = mix.n_components();
  double alpha = 0.0;
  const double sd = vpsde_std(mix, vp, t, alpha);
  const double inv_var = 1.0 / (sd * sd);
  const double log_norm = -0.5 * double(d) * (kLog2Pi + 2.0 * std::log(sd));
  Scratch scratch;
  double* lk = scratch.get(K);
  for (int k = 0; k < K; ++k) {
    double q = 0.0;
    const double* mu = mix.means[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      const double dx = x[size_t(i)] - alpha * mu[i];
      q += dx * dx;
    }
    lk[k] = std::log(mix.weights[size_t(k)]) + log_norm - 0.5 * q * inv_var;
  }
  return log_sum_exp(lk, K);
}

void vpsde_score_x(const GaussianMixture& mix, const VpsdeParams& vp,
                   std::span<const double> x, double t,
                   std::span<double> out) {
  const int d = mix.d;
  const int K = mix.n_components();
  double alpha = 0.0;
  const double sd = vpsde_std(mix, vp, t, alpha);
  const double inv_var = 1.0 / (sd * sd);
  Scratch scratch;
  double* lk = scratch.get(K);
  for (int k = 0; k < K; ++k) {
    double q = 0.0;
    const double* mu = mix.means[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      const double dx = x[size_t(i)] - alpha * mu[i];
      q += dx * dx;
    }
    lk[k] = std::log(mix.weights[size_t(k)]) - 0.5 * q * inv_var;
  }
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) m = std::max(m, lk[k]);
  for (int i = 0; i < d; ++i) out[size_t(i)] = 0.0;
  double z = 0.0;
  for (int k = 0; k < K; ++k) {
    const double w = std::exp(lk[k] - m);
    z += w;
    const double* mu = mix.means[size_t(k)].data();
    for (int i = 0; i < d; ++i) {
      out[size_t(i)] += w * (-(x[size_t(i)] - alpha * mu[i]) * inv_var);
    }
  }
  for (int i = 0; i < d; ++i) out[size_t(i)] /= z;
}

XiCurves xi_experiment(const CldParams& p, const VpsdeParams& vp,
                       const GaussianMixture& mix,
                       std::span<const double> t_grid, int64_t n_mc,
                       uint64_t seed) {
  p.validate();
  mix.validate();
  if (std::abs(p.mass - 1.0) > 1e-12 || std::abs(p.gamma0 - 1.0) > 1e-12) {
    throw std::invalid_argument(
        "score-gap comparison requires M = gamma0 = 1 so both equilibria are "
        "standard normal");
  }
  if (n_mc <= 0) throw std::invalid_argument("n_mc must be > 0");

  XiCurves curves;
  curves.n_mc = n_mc;
  curves.seed = seed;
  curves.t.assign(t_grid.begin(), t_grid.end());
  curves.xi_cld.reserve(t_grid.size());
  curves.xi_vpsde.reserve(t_grid.size());

  const int d = mix.d;
  for (size_t ti = 0; ti < t_grid.size(); ++ti) {
    const double t = t_grid[ti];
    const DiffusedJointMixture dm = diffuse(mix, p, t);
    const uint64_t base = uint64_t(ti) << 34;

    const double sum_cld = deterministic_sum(n_mc, [&](int64_t i) {
      CounterRng rng(seed, base | uint64_t(i));
      Scratch scratch_u, scratch_s;
      double* u = scratch_u.get(2 * d);
      double* sv = scratch_s.get(d);
      sample_joint_one(dm, rng, u);
      score_v(dm, std::span<const double>(u, size_t(2 * d)),
              std::span<double>(sv, size_t(d)));
      double acc = 0.0;
      for (int j = 0; j < d; ++j) {
        const double r = sv[j] + u[d + j];
        acc += r * r;
      }
      return acc;
    });
    curves.xi_cld.push_back(sum_cld / double(n_mc));

    const double alpha = vp.alpha(t);
    const double sd =
        std::sqrt(alpha * alpha * mix.sigma * mix.sigma + vp.sigma2(t));
    const double sum_vp = deterministic_sum(n_mc, [&](int64_t i) {
      CounterRng rng(seed, base | (uint64_t(1) << 33) | uint64_t(i));
      Scratch scratch_x, scratch_s;
      double* x = scratch_x.get(d);
      double* sx = scratch_s.get(d);
      const int k = draw_component(mix.weights, rng);
      for (int j = 0; j < d; ++j) {
        x[j] = alpha * mix.means[size_t(k)][size_t(j)] + sd * rng.normal();
      }
      vpsde_score_x(mix, vp, std::span<const double>(x, size_t(d)), t,
                    std::span<double>(sx, size_t(d)));
      double acc = 0.0;
      for (int j = 0; j < d; ++j) {
        const double r = sx[j] + x[j];
        acc += r * r;
      }
      return acc;
    });
    curves.xi_vpsde.push_back(sum_vp / double(n_mc));
  }
  return curves;
}

}  // namespace cldlab
