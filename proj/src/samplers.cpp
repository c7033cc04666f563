#include "cldlab/samplers.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "cldlab/parallel.hpp"

namespace cldlab {

namespace {

// Stream layout: slot 0 holds prior/initial draws keyed by row; slot s >= 1
// holds the s-th noise panel keyed by row. Keeps every (phase, row) pair on
// its own counter stream so results do not depend on worker count.
uint64_t noise_stream(uint64_t slot, int64_t row) {
  return (slot << 40) | uint64_t(row);
}

void check_batch(const StateBatch& b) {
  if (b.n < 0 || b.d < 1) throw std::invalid_argument("bad batch shape");
  if (int64_t(b.x.size()) != b.n * b.d || int64_t(b.v.size()) != b.n * b.d) {
    throw std::invalid_argument("batch buffers do not match n x d");
  }
}

}  // namespace

TimeSchedule make_schedule(ScheduleKind kind, int n_steps, double t_final,
                           double eps_cutoff) {
  if (n_steps < 1) throw std::invalid_argument("schedule needs n_steps >= 1");
  if (!(t_final > 0.0)) throw std::invalid_argument("t_final must be > 0");
  if (!(eps_cutoff >= 0.0 && eps_cutoff < t_final)) {
    throw std::invalid_argument("need 0 <= eps_cutoff < t_final");
  }
  TimeSchedule sched;
  sched.kind = kind;
  sched.n_steps = n_steps;
  sched.t_final = t_final;
  sched.eps_cutoff = eps_cutoff;
  sched.steps.resize(size_t(n_steps));
  const double span = t_final - eps_cutoff;
  if (kind == ScheduleKind::uniform) {
    for (int k = 0; k < n_steps; ++k) {
      sched.steps[size_t(k)] = span / double(n_steps);
    }
  } else {
    // Forward knots tau_i = c i^2; reverse-ordered durations c(2i-1) with
    // i = N, N-1, ..., 1.
    const double c = span / (double(n_steps) * double(n_steps));
    for (int k = 0; k < n_steps; ++k) {
      const int i = n_steps - k;
      sched.steps[size_t(k)] = c * double(2 * i - 1);
    }
  }
  return sched;
}

ScoreFn analytic_mixture_score(GaussianMixture mix, CldParams p) {
  mix.validate();
  p.validate();
  return [mix, p](const StateBatch& b, std::span<double> out) {
    const DiffusedJointMixture dm = diffuse(mix, p, b.t);
    const int d = b.d;
    parallel_for(
        b.n,
        [&](int64_t r) {
          std::array<double, 32> u_stack;
          std::vector<double> u_heap;
          double* u = 2 * d <= int(u_stack.size()) ? u_stack.data()
                                                   : (u_heap.resize(2 * d),
                                                      u_heap.data());
          for (int i = 0; i < d; ++i) {
            u[i] = b.x[size_t(r) * d + i];
            u[d + i] = b.v[size_t(r) * d + i];
          }
          score_v(dm, std::span<const double>(u, size_t(2 * d)),
                  out.subspan(size_t(r) * d, size_t(d)));
        },
        512);
  };
}

ScoreFn equilibrium_score(CldParams p) {
  p.validate();
  const double inv_m = p.inv_mass();
  return [inv_m](const StateBatch& b, std::span<double> out) {
    parallel_for(
        b.n * b.d, [&](int64_t i) { out[size_t(i)] = -inv_m * b.v[size_t(i)]; },
        4096);
  };
}

XScoreFn analytic_vpsde_score(GaussianMixture mix, VpsdeParams vp) {
  mix.validate();
  return [mix, vp](std::span<const double> x, int64_t n, int d, double t,
                   std::span<double> out) {
    parallel_for(
        n,
        [&](int64_t r) {
          vpsde_score_x(mix, vp, x.subspan(size_t(r) * d, size_t(d)), t,
                        out.subspan(size_t(r) * d, size_t(d)));
        },
        512);
  };
}

StateBatch sample_equilibrium_prior(const CldParams& p, int64_t n, int d,
                                    uint64_t seed) {
  p.validate();
  if (n < 1 || d < 1) throw std::invalid_argument("bad prior shape");
  StateBatch b;
  b.n = n;
  b.d = d;
  b.t = p.t_final;
  b.x.resize(size_t(n) * d);
  b.v.resize(size_t(n) * d);
  const double v_std = std::sqrt(p.mass);
  parallel_for(n, [&](int64_t r) {
    CounterRng rng(seed, noise_stream(0, r));
    for (int i = 0; i < d; ++i) b.x[size_t(r) * d + i] = rng.normal();
    for (int i = 0; i < d; ++i) b.v[size_t(r) * d + i] = v_std * rng.normal();
  });
  return b;
}

StateBatch em_step_cld(const CldParams& p, const ScoreFn& s,
                       const StateBatch& batch, double dt,
                       std::span<const double> noise) {
  check_batch(batch);
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be > 0");
  if (int64_t(noise.size()) != batch.n * batch.d) {
    throw std::invalid_argument("noise panel must be n x d");
  }
  std::vector<double> score(size_t(batch.n) * batch.d);
  s(batch, score);

  StateBatch out = batch;
  const double bm = p.beta * p.inv_mass();
  const double fric = p.gamma_fric * p.beta * p.inv_mass();
  const double two_gb = 2.0 * p.gamma_fric * p.beta;
  const double nscale = std::sqrt(2.0 * p.gamma_fric * p.beta * dt);
  parallel_for(
      batch.n * batch.d,
      [&](int64_t i) {
        const double x = batch.x[size_t(i)];
        const double v = batch.v[size_t(i)];
        out.x[size_t(i)] = x - bm * v * dt;
        out.v[size_t(i)] = v +
                           (p.beta * x + fric * v + two_gb * score[size_t(i)]) *
                               dt +
                           nscale * noise[size_t(i)];
      },
      4096);
  out.t = batch.t - dt;
  return out;
}

StateBatch denoise(const CldParams& p, const StateBatch& batch, double eps,
                   const ScoreFn* s_for_velocity) {
  check_batch(batch);
  if (!(eps >= 0.0)) throw std::invalid_argument("eps must be >= 0");
  StateBatch out = batch;
  out.t = 0.0;
  if (eps == 0.0) {
    out.t = batch.t;
    return out;
  }
  std::vector<double> score;
  if (s_for_velocity != nullptr) {
    score.resize(size_t(batch.n) * batch.d);
    (*s_for_velocity)(batch, score);
  }
  const double cx = eps * p.beta * p.inv_mass();
  const double fric = eps * p.gamma_fric * p.beta * p.inv_mass();
  const double two_gb = 2.0 * eps * p.gamma_fric * p.beta;
  parallel_for(
      batch.n * batch.d,
      [&](int64_t i) {
        const double x = batch.x[size_t(i)];
        const double v = batch.v[size_t(i)];
        out.x[size_t(i)] = x - cx * v;
        if (s_for_velocity != nullptr) {
          out.v[size_t(i)] =
              v + eps * p.beta * x + fric * v + two_gb * score[size_t(i)];
        }
      },
      4096);
  return out;
}

StateBatch sscs_run(const CldParams& p, const ScoreFn& s,
                    const StateBatch& prior, const TimeSchedule& sched,
                    uint64_t seed, SscsScoreTime score_time,
                    bool denoise_velocity) {
  p.validate();
  check_batch(prior);
  StateBatch b = prior;
  std::vector<double> score(size_t(b.n) * b.d);
  const double two_gb = 2.0 * p.gamma_fric * p.beta;
  const double inv_m = p.inv_mass();

  for (int k = 0; k < sched.n_steps; ++k) {
    const double dt = sched.steps[size_t(k)];
    const double t_start = b.t;
    const PerDimKernel half = sscs_half_moments(p, 0.5 * dt);
    const CholFactor chol = cholesky2(half, 0.0);

    const auto half_step = [&](uint64_t slot) {
      parallel_for(
          b.n,
          [&](int64_t r) {
            CounterRng rng(seed, noise_stream(slot, r));
            for (int i = 0; i < b.d; ++i) {
              const size_t idx = size_t(r) * b.d + size_t(i);
              double mx = 0.0, mv = 0.0;
              half.mean(b.x[idx], b.v[idx], mx, mv);
              double nx = 0.0, nv = 0.0;
              chol.apply(rng.normal(), rng.normal(), nx, nv);
              b.x[idx] = mx + nx;
              b.v[idx] = mv + nv;
            }
          },
          512);
    };

    half_step(uint64_t(2 * k + 1));

    // Euler stage for the score term; the linear half-steps already account
    // for everything else.
    b.t = score_time == SscsScoreTime::step_start ? t_start
                                                  : t_start - 0.5 * dt;
    s(b, score);
    parallel_for(
        b.n * b.d,
        [&](int64_t i) {
          b.v[size_t(i)] +=
              dt * two_gb * (score[size_t(i)] + inv_m * b.v[size_t(i)]);
        },
        4096);

    half_step(uint64_t(2 * k + 2));
    b.t = t_start - dt;
  }

  const ScoreFn* vel = denoise_velocity ? &s : nullptr;
  return denoise(p, b, sched.eps_cutoff, vel);
}

StateBatch em_run_cld(const CldParams& p, const ScoreFn& s,
                      const StateBatch& prior, const TimeSchedule& sched,
                      uint64_t seed, bool denoise_velocity) {
  p.validate();
  check_batch(prior);
  StateBatch b = prior;
  std::vector<double> score(size_t(b.n) * b.d);
  const double bm = p.beta * p.inv_mass();
  const double fric = p.gamma_fric * p.beta * p.inv_mass();
  const double two_gb = 2.0 * p.gamma_fric * p.beta;

  for (int k = 0; k < sched.n_steps; ++k) {
    const double dt = sched.steps[size_t(k)];
    s(b, score);
    const double nscale = std::sqrt(2.0 * p.gamma_fric * p.beta * dt);
    parallel_for(
        b.n,
        [&](int64_t r) {
          CounterRng rng(seed, noise_stream(uint64_t(k + 1), r));
          for (int i = 0; i < b.d; ++i) {
            const size_t idx = size_t(r) * b.d + size_t(i);
            const double x = b.x[idx];
            const double v = b.v[idx];
            b.x[idx] = x - bm * v * dt;
            b.v[idx] = v +
                       (p.beta * x + fric * v + two_gb * score[idx]) * dt +
                       nscale * rng.normal();
          }
        },
        512);
    b.t -= dt;
  }

  const ScoreFn* vel = denoise_velocity ? &s : nullptr;
  return denoise(p, b, sched.eps_cutoff, vel);
}

std::vector<double> vpsde_em_run(const VpsdeParams& vp, const XScoreFn& s,
                                 int64_t n, int d, const TimeSchedule& sched,
                                 uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("bad batch shape");
  std::vector<double> x(size_t(n) * d);
  parallel_for(n, [&](int64_t r) {
    CounterRng rng(seed, noise_stream(0, r));
    for (int i = 0; i < d; ++i) x[size_t(r) * d + i] = rng.normal();
  });

  std::vector<double> score(size_t(n) * d);
  double t = sched.t_final;
  for (int k = 0; k < sched.n_steps; ++k) {
    const double dt = sched.steps[size_t(k)];
    s(x, n, d, t, score);
    const double beta_t = vp.beta(t);
    const double nscale = std::sqrt(beta_t * dt);
    parallel_for(
        n,
        [&](int64_t r) {
          CounterRng rng(seed, noise_stream(uint64_t(k + 1), r));
          for (int i = 0; i < d; ++i) {
            const size_t idx = size_t(r) * d + size_t(i);
            x[idx] += (0.5 * beta_t * x[idx] + beta_t * score[idx]) * dt +
                      nscale * rng.normal();
          }
        },
        512);
    t -= dt;
  }

  // Drift-only denoising step from eps to 0.
  const double eps = sched.eps_cutoff;
  if (eps > 0.0) {
    s(x, n, d, eps, score);
    const double beta_e = vp.beta(eps);
    parallel_for(
        n * d,
        [&](int64_t i) {
          x[size_t(i)] +=
              eps * (0.5 * beta_e * x[size_t(i)] + beta_e * score[size_t(i)]);
        },
        4096);
  }
  return x;
}

std::vector<double> ddim_run(const VpsdeParams& vp, const XScoreFn& s,
                             int64_t n, int d, const TimeSchedule& sched,
                             uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("bad batch shape");
  std::vector<double> x(size_t(n) * d);
  parallel_for(n, [&](int64_t r) {
    CounterRng rng(seed, noise_stream(0, r));
    for (int i = 0; i < d; ++i) x[size_t(r) * d + i] = rng.normal();
  });

  std::vector<double> score(size_t(n) * d);
  double t_cur = sched.t_final;
  for (int k = 0; k < sched.n_steps; ++k) {
    const double t_prev = t_cur - sched.steps[size_t(k)];
    const double a_cur = vp.alpha(t_cur);
    const double a_prev = vp.alpha(t_prev);
    const double sig_cur = std::sqrt(vp.sigma2(t_cur));
    const double sig_prev = std::sqrt(vp.sigma2(t_prev));
    s(x, n, d, t_cur, score);
    const double ratio = a_prev / a_cur;
    parallel_for(
        n * d,
        [&](int64_t i) {
          const double sc = score[size_t(i)];
          x[size_t(i)] = ratio * (x[size_t(i)] + sig_cur * sig_cur * sc) -
                         sig_prev * sig_cur * sc;
        },
        4096);
    t_cur = t_prev;
  }
  return x;
}

void LangevinParams::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  if (!(gamma_fric > 0.0))
    throw std::invalid_argument("gamma_fric must be > 0");
  if (!(mass > 0.0)) throw std::invalid_argument("mass must be > 0");
}

ForwardMomentSeries forward_trajectories(const LangevinParams& lp, double s0xx,
                                         double s0vv, int64_t n, int d,
                                         double dt, int64_t n_steps,
                                         int64_t record_every, uint64_t seed) {
  lp.validate();
  if (n < 1 || d < 1) throw std::invalid_argument("bad batch shape");
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be > 0");
  if (n_steps < 1 || record_every < 1) {
    throw std::invalid_argument("need n_steps >= 1 and record_every >= 1");
  }
  if (!(s0xx >= 0.0 && s0vv >= 0.0)) {
    throw std::invalid_argument("initial variances must be >= 0");
  }

  const int64_t m = n * d;
  const size_t msz = size_t(m);
  std::vector<double> x(msz), v(msz), x0(msz);
  const double sx0 = std::sqrt(s0xx);
  const double sv0 = std::sqrt(s0vv);
  parallel_for(n, [&](int64_t r) {
    CounterRng rng(seed, noise_stream(0, r));
    for (int i = 0; i < d; ++i) {
      const size_t idx = size_t(r) * d + size_t(i);
      x[idx] = sx0 * rng.normal();
      v[idx] = sv0 * rng.normal();
      x0[idx] = x[idx];
    }
  });

  ForwardMomentSeries out;
  const auto record = [&](double t) {
    const double inv_m = 1.0 / double(m);
    const double mx =
        deterministic_sum(m, [&](int64_t i) { return x[size_t(i)]; }) * inv_m;
    const double mv =
        deterministic_sum(m, [&](int64_t i) { return v[size_t(i)]; }) * inv_m;
    const double cxx = deterministic_sum(m, [&](int64_t i) {
                         const double cx = x[size_t(i)] - mx;
                         return cx * cx;
                       }) *
                       inv_m;
    const double cxv = deterministic_sum(m, [&](int64_t i) {
                         return (x[size_t(i)] - mx) * (v[size_t(i)] - mv);
                       }) *
                       inv_m;
    const double cvv = deterministic_sum(m, [&](int64_t i) {
                         const double cv = v[size_t(i)] - mv;
                         return cv * cv;
                       }) *
                       inv_m;
    const double num = deterministic_sum(
        m, [&](int64_t i) { return x0[size_t(i)] * x[size_t(i)]; });
    const double den = deterministic_sum(
        m, [&](int64_t i) { return x0[size_t(i)] * x0[size_t(i)]; });
    out.t.push_back(t);
    out.mean_x.push_back(mx);
    out.mean_v.push_back(mv);
    out.sxx.push_back(cxx);
    out.sxv.push_back(cxv);
    out.svv.push_back(cvv);
    out.autocorr_x.push_back(den > 0.0 ? num / den : 0.0);
  };

  record(0.0);
  const double bm = lp.beta / lp.mass;
  const double fric = lp.gamma_fric * lp.beta / lp.mass;
  const double nscale = std::sqrt(2.0 * lp.gamma_fric * lp.beta * dt);
  for (int64_t k = 0; k < n_steps; ++k) {
    parallel_for(
        n,
        [&](int64_t r) {
          CounterRng rng(seed, noise_stream(uint64_t(k + 1), r));
          for (int i = 0; i < d; ++i) {
            const size_t idx = size_t(r) * d + size_t(i);
            const double xc = x[idx];
            const double vc = v[idx];
            x[idx] = xc + bm * vc * dt;
            v[idx] = vc - (lp.beta * xc + fric * vc) * dt +
                     nscale * rng.normal();
          }
        },
        512);
    if ((k + 1) % record_every == 0 || k + 1 == n_steps) {
      record(double(k + 1) * dt);
    }
  }
  return out;
}

}  // namespace cldlab
