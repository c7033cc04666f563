#include "cldlab/probflow.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cldlab/parallel.hpp"

namespace cldlab {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double rms_scaled(std::span<const double> v, std::span<const double> sc) {
  double acc = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    const double r = v[i] / sc[i];
    acc += r * r;
  }
  return std::sqrt(acc / double(v.size()));
}

// Hairer-style initial step-size guess; costs two field evaluations.
double initial_step(const OdeField& f, std::span<const double> y0, double t0,
                    double dir, double span, const OdeConfig& cfg,
                    std::span<const double> f0, std::vector<double>& scratch_y,
                    std::vector<double>& scratch_f, int64_t& nfe) {
  const size_t n = y0.size();
  std::vector<double> sc(n);
  for (size_t i = 0; i < n; ++i) sc[i] = cfg.atol + cfg.rtol * std::abs(y0[i]);
  const double d0 = rms_scaled(y0, sc);
  const double d1 = rms_scaled(f0, sc);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * (d0 / d1);
  h0 = std::min(h0, span);
  for (size_t i = 0; i < n; ++i) scratch_y[i] = y0[i] + dir * h0 * f0[i];
  f(t0 + dir * h0, scratch_y, scratch_f);
  ++nfe;
  for (size_t i = 0; i < n; ++i) scratch_f[i] -= f0[i];
  const double d2 = rms_scaled(scratch_f, sc) / h0;
  const double dm = std::max(d1, d2);
  const double h1 =
      dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
  return std::min({100.0 * h0, h1, span});
}

}  // namespace

void OdeConfig::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) {
    throw std::invalid_argument("tolerances must be > 0");
  }
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (hutchinson_probes < 1) throw std::invalid_argument("need >= 1 probe");
}

OdeResult rk45(const OdeField& f, std::span<const double> y0, double t0,
               double t1, const OdeConfig& cfg) {
  cfg.validate();
  const size_t n = y0.size();
  OdeResult res;
  res.y.assign(y0.begin(), y0.end());
  if (t0 == t1) return res;
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);

  // Dormand-Prince 4(5) tableau.
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5,
                          c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                          a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                          a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113,
                          a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                          a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695,
                          e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
  // PI controller constants.
  static constexpr double kBeta = 0.04, kExpo1 = 0.2 - kBeta * 0.75;
  static constexpr double kSafe = 0.9, kFacMin = 0.2, kFacMax = 10.0;

  std::vector<double> y = res.y;
  std::vector<double> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n),
      ynew(n), err(n);
  double t = t0;
  f(t, y, k1);
  ++res.nfe;
  double h = initial_step(f, y, t, dir, span, cfg, k1, tmp, ynew, res.nfe);
  double facold = 1e-4;

  for (int64_t step = 0;; ++step) {
    if (step >= cfg.max_steps) {
      throw std::runtime_error("adaptive integrator exceeded max_steps");
    }
    if (!(h > 1e-14 * std::max(1.0, std::abs(t)))) {
      throw std::runtime_error("adaptive integrator step underflow");
    }
    const double remaining = std::abs(t1 - t);
    if (h > remaining) h = remaining;
    const double hd = dir * h;

    for (size_t i = 0; i < n; ++i) tmp[i] = y[i] + hd * a21 * k1[i];
    f(t + c2 * hd, tmp, k2);
    for (size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + hd * (a31 * k1[i] + a32 * k2[i]);
    f(t + c3 * hd, tmp, k3);
    for (size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + hd * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    f(t + c4 * hd, tmp, k4);
    for (size_t i = 0; i < n; ++i)
      tmp[i] = y[i] +
               hd * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    f(t + c5 * hd, tmp, k5);
    for (size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + hd * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] +
                            a64 * k4[i] + a65 * k5[i]);
    f(t + hd, tmp, k6);
    for (size_t i = 0; i < n; ++i)
      ynew[i] = y[i] + hd * (a71 * k1[i] + a73 * k3[i] + a74 * k4[i] +
                             a75 * k5[i] + a76 * k6[i]);
    f(t + hd, ynew, k7);
    res.nfe += 6;

    double err_norm = 0.0;
    for (size_t i = 0; i < n; ++i) {
      err[i] = hd * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] +
                     e6 * k6[i] + e7 * k7[i]);
      const double sc =
          cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      const double r = err[i] / sc;
      err_norm += r * r;
    }
    err_norm = std::sqrt(err_norm / double(n));

    const double fac11 = std::pow(std::max(err_norm, 1e-16), kExpo1);
    if (err_norm <= 1.0) {
      // Accept; FSAL reuses k7 as the next k1.
      facold = std::max(err_norm, 1e-4);
      t += hd;
      y.swap(ynew);
      k1.swap(k7);
      ++res.n_accepted;
      if (std::abs(t1 - t) <= 1e-14 * std::max(1.0, std::abs(t1))) break;
      double fac = fac11 / std::pow(facold, kBeta);
      fac = std::max(1.0 / kFacMax, std::min(1.0 / kFacMin, fac / kSafe));
      h = h / fac;
    } else {
      ++res.n_rejected;
      h = h / std::min(1.0 / kFacMin, fac11 / kSafe);
    }
  }
  res.y = y;
  return res;
}

void cld_ode_rhs(const CldParams& p, const ScoreFn& s, std::span<const double> u,
                 double t_reverse, std::span<double> out) {
  const int d = int(u.size()) / 2;
  StateBatch b;
  b.n = 1;
  b.d = d;
  b.t = p.t_final - t_reverse;
  b.x.assign(u.begin(), u.begin() + d);
  b.v.assign(u.begin() + d, u.end());
  std::vector<double> score(static_cast<size_t>(d));
  s(b, score);
  const double bm = p.beta * p.inv_mass();
  const double gb = p.gamma_fric * p.beta;
  for (int i = 0; i < d; ++i) {
    out[size_t(i)] = -bm * u[size_t(d + i)];
    out[size_t(d + i)] =
        p.beta * u[size_t(i)] +
        gb * (score[size_t(i)] + p.inv_mass() * u[size_t(d + i)]);
  }
}

double probe_divergence(
    const std::function<void(std::span<const double>, std::span<double>)>& field,
    std::span<const double> u, std::span<const double> probes, int n_probes) {
  const size_t dim = u.size();
  if (probes.size() != size_t(n_probes) * dim) {
    throw std::invalid_argument("probe panel must be n_probes x dim");
  }
  double u2 = 0.0;
  for (const double x : u) u2 += x * x;
  const double h = 1e-5 * std::max(1.0, std::sqrt(u2 / double(dim)));

  std::vector<double> up(dim), um(dim), fp(dim), fm(dim);
  double acc = 0.0;
  for (int q = 0; q < n_probes; ++q) {
    const std::span<const double> e = probes.subspan(size_t(q) * dim, dim);
    for (size_t i = 0; i < dim; ++i) {
      up[i] = u[i] + h * e[i];
      um[i] = u[i] - h * e[i];
    }
    field(up, fp);
    field(um, fm);
    double dot = 0.0;
    for (size_t i = 0; i < dim; ++i) dot += (fp[i] - fm[i]) / (2.0 * h) * e[i];
    acc += dot;
  }
  return acc / double(n_probes);
}

std::vector<double> draw_probes(int n_probes, int dim, ProbeDist dist,
                                CounterRng& rng) {
  std::vector<double> out(size_t(n_probes) * dim);
  for (double& e : out) {
    e = dist == ProbeDist::rademacher ? (rng.uniform() < 0.5 ? -1.0 : 1.0)
                                      : rng.normal();
  }
  return out;
}

ScoreDivFn analytic_mixture_score_div(GaussianMixture mix, CldParams p) {
  mix.validate();
  p.validate();
  return [mix, p](std::span<const double> x, std::span<const double> v,
                  double t) {
    const DiffusedJointMixture dm = diffuse(mix, p, t);
    std::vector<double> u(x.size() + v.size());
    std::copy(x.begin(), x.end(), u.begin());
    std::copy(v.begin(), v.end(), u.begin() + x.size());
    return score_v_div(dm, u);
  };
}

LikelihoodResult log_likelihood_joint(const CldParams& p, const ScoreFn& s,
                                      std::span<const double> x0,
                                      std::span<const double> v0,
                                      const OdeConfig& cfg, uint64_t seed,
                                      const ScoreDivFn* div_fn) {
  p.validate();
  cfg.validate();
  const int d = int(x0.size());
  if (v0.size() != size_t(d)) {
    throw std::invalid_argument("x0 and v0 must have equal length");
  }

  std::vector<double> probes;
  if (div_fn == nullptr) {
    CounterRng rng(seed, uint64_t(1) << 62);
    probes = draw_probes(cfg.hutchinson_probes, 2 * d, cfg.probe_dist, rng);
  }

  const double bm = p.beta * p.inv_mass();
  const double fric = p.gamma_fric * p.beta * p.inv_mass();
  const double gb = p.gamma_fric * p.beta;

  // Forward-time flow field on u = (x, v); likelihood integrates data -> prior.
  const auto flow_at = [&](double t, std::span<const double> u,
                           std::span<double> du) {
    StateBatch b;
    b.n = 1;
    b.d = d;
    b.t = t;
    b.x.assign(u.begin(), u.begin() + d);
    b.v.assign(u.begin() + d, u.end());
    std::vector<double> score(static_cast<size_t>(d));
    s(b, score);
    for (int i = 0; i < d; ++i) {
      du[size_t(i)] = bm * u[size_t(d + i)];
      du[size_t(d + i)] = -p.beta * u[size_t(i)] - fric * u[size_t(d + i)] -
                          gb * score[size_t(i)];
    }
  };

  const OdeField augmented = [&](double t, std::span<const double> y,
                                 std::span<double> dy) {
    const std::span<const double> u = y.first(size_t(2 * d));
    flow_at(t, u, dy.first(size_t(2 * d)));
    double div;
    if (div_fn != nullptr) {
      div = -double(d) * fric -
            gb * (*div_fn)(u.first(size_t(d)), u.subspan(size_t(d)), t);
    } else {
      div = probe_divergence(
          [&](std::span<const double> uu, std::span<double> ff) {
            flow_at(t, uu, ff);
          },
          u, probes, cfg.hutchinson_probes);
    }
    dy[size_t(2 * d)] = div;
  };

  std::vector<double> y0(size_t(2 * d) + 1, 0.0);
  std::copy(x0.begin(), x0.end(), y0.begin());
  std::copy(v0.begin(), v0.end(), y0.begin() + d);
  const OdeResult ode = rk45(augmented, y0, p.eps_cutoff, p.t_final, cfg);

  // Stationary log-density at T: N(x; 0, I) x N(v; 0, M I) per dimension.
  double logp_T = 0.0;
  const double log_m = std::log(p.mass);
  for (int i = 0; i < d; ++i) {
    const double x = ode.y[size_t(i)];
    const double v = ode.y[size_t(d + i)];
    logp_T += -0.5 * kLog2Pi - 0.5 * x * x;
    logp_T += -0.5 * (kLog2Pi + log_m) - 0.5 * v * v / p.mass;
  }

  LikelihoodResult res;
  res.logp_joint = logp_T + ode.y[size_t(2 * d)];
  res.nfe = ode.nfe;
  res.n_v = 1;
  const double entropy =
      0.5 * double(d) * (kLog2Pi + 1.0 + std::log(p.gamma0 * p.mass));
  res.nll_bound_nats = -res.logp_joint - entropy;
  res.nll_bound_bpd = res.nll_bound_nats / (double(d) * std::log(2.0));
  return res;
}

LikelihoodResult nll_bound(const CldParams& p, const ScoreFn& s,
                           std::span<const double> x0, int n_v,
                           const OdeConfig& cfg, uint64_t seed,
                           const ScoreDivFn* div_fn) {
  if (n_v < 1) throw std::invalid_argument("n_v must be >= 1");
  const int d = int(x0.size());
  const double v_std = std::sqrt(p.gamma0 * p.mass);

  std::vector<double> logps(size_t(n_v), 0.0);
  std::vector<int64_t> nfes(size_t(n_v), 0);
  parallel_for(
      n_v,
      [&](int64_t j) {
        CounterRng rng(seed, uint64_t(j));
        std::vector<double> v0(static_cast<size_t>(d));
        for (double& v : v0) v = v_std * rng.normal();
        const LikelihoodResult one =
            log_likelihood_joint(p, s, x0, v0, cfg, seed, div_fn);
        logps[size_t(j)] = one.logp_joint;
        nfes[size_t(j)] = one.nfe;
      },
      1);

  LikelihoodResult res;
  res.n_v = n_v;
  double sum = 0.0;
  for (const double lp : logps) sum += lp;
  res.logp_joint = sum / double(n_v);
  for (const int64_t k : nfes) res.nfe += k;
  const double entropy =
      0.5 * double(d) * (kLog2Pi + 1.0 + std::log(p.gamma0 * p.mass));
  res.nll_bound_nats = -res.logp_joint - entropy;
  res.nll_bound_bpd = res.nll_bound_nats / (double(d) * std::log(2.0));
  return res;
}

OdeSampleResult ode_sample(const CldParams& p, const ScoreFn& s,
                           const StateBatch& prior, const OdeConfig& cfg) {
  p.validate();
  cfg.validate();
  const int d = prior.d;
  const double bm = p.beta * p.inv_mass();
  const double fric = p.gamma_fric * p.beta * p.inv_mass();
  const double gb = p.gamma_fric * p.beta;

  OdeSampleResult out;
  out.batch = prior;
  std::vector<int64_t> nfes(size_t(prior.n), 0);
  parallel_for(
      prior.n,
      [&](int64_t r) {
        const OdeField field = [&](double t, std::span<const double> u,
                                   std::span<double> du) {
          StateBatch b;
          b.n = 1;
          b.d = d;
          b.t = t;
          b.x.assign(u.begin(), u.begin() + d);
          b.v.assign(u.begin() + d, u.end());
          std::vector<double> score(static_cast<size_t>(d));
          s(b, score);
          for (int i = 0; i < d; ++i) {
            du[size_t(i)] = bm * u[size_t(d + i)];
            du[size_t(d + i)] = -p.beta * u[size_t(i)] -
                                fric * u[size_t(d + i)] - gb * score[size_t(i)];
          }
        };
        std::vector<double> y0(size_t(2 * d));
        for (int i = 0; i < d; ++i) {
          y0[size_t(i)] = prior.x[size_t(r) * d + i];
          y0[size_t(d + i)] = prior.v[size_t(r) * d + i];
        }
        const OdeResult ode = rk45(field, y0, p.t_final, p.eps_cutoff, cfg);
        for (int i = 0; i < d; ++i) {
          out.batch.x[size_t(r) * d + i] = ode.y[size_t(i)];
          out.batch.v[size_t(r) * d + i] = ode.y[size_t(d + i)];
        }
        nfes[size_t(r)] = ode.nfe;
      },
      8);
  for (const int64_t k : nfes) out.nfe += k;
  out.batch.t = p.eps_cutoff;
  out.batch = denoise(p, out.batch, p.eps_cutoff);
  return out;
}

}  // namespace cldlab
