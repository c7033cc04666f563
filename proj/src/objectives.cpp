#include "cldlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "cldlab/parallel.hpp"

namespace cldlab {

namespace {

// Fills one example's flat buffers. Denoising rows additionally consume one
// initial-velocity normal per dimension (drawn before that dimension's noise
// pair, so hybrid and denoising rows with equal streams stay reproducible
// independently).
void draw_row(const CldParams& p, bool hybrid, const double* x0, int d,
              double t, CounterRng& rng, double* u, double* mu, double* eps_v,
              double* ell_out) {
  const PerDimKernel k = hybrid ? hsm_kernel(p, t) : dsm_kernel(p, t);
  const CholFactor L = cholesky2(k, p.eps_num);
  if (ell_out != nullptr) *ell_out = ell(k, p.eps_num);
  const double sv0 = std::sqrt(p.gamma0 * p.mass);
  for (int j = 0; j < d; ++j) {
    const double v0 = hybrid ? 0.0 : sv0 * rng.normal();
    double mu_x = 0.0, mu_v = 0.0;
    k.mean(x0[j], v0, mu_x, mu_v);
    const double ex = rng.normal();
    const double ev = rng.normal();
    double gx = 0.0, gv = 0.0;
    L.apply(ex, ev, gx, gv);
    mu[j] = mu_x;
    mu[d + j] = mu_v;
    u[j] = mu_x + gx;
    u[d + j] = mu_v + gv;
    eps_v[j] = ev;
  }
}

struct DrawBatch {
  int64_t n = 0;
  int d = 0;
  std::vector<double> u;      // n x 2d
  std::vector<double> mu;     // n x 2d
  std::vector<double> eps_v;  // n x d
  std::vector<double> ell;    // n
};

// Validates shapes/times up front (worker threads must not throw) and draws
// every row from its own stream CounterRng(seed, row).
DrawBatch draw_batch(const CldParams& p, bool hybrid,
                     std::span<const double> x0s, std::span<const double> ts,
                     uint64_t seed) {
  p.validate();
  const int64_t n = int64_t(ts.size());
  if (n <= 0) throw std::invalid_argument("loss batch must be non-empty");
  if (x0s.empty() || x0s.size() % size_t(n) != 0) {
    throw std::invalid_argument("x0 batch must be row-major n x d");
  }
  for (double t : ts) {
    if (!(t >= 0.0) || !(t <= p.t_final)) {
      throw std::domain_error("loss time outside [0, t_final]");
    }
  }
  DrawBatch b;
  b.n = n;
  b.d = int(x0s.size() / size_t(n));
  b.u.resize(size_t(n) * 2 * size_t(b.d));
  b.mu.resize(size_t(n) * 2 * size_t(b.d));
  b.eps_v.resize(size_t(n) * size_t(b.d));
  b.ell.resize(size_t(n));
  const size_t d = size_t(b.d);
  parallel_for(
      n,
      [&](int64_t i) {
        CounterRng rng(seed, uint64_t(i));
        draw_row(p, hybrid, x0s.data() + size_t(i) * d, b.d, ts[size_t(i)],
                 rng, b.u.data() + size_t(i) * 2 * d,
                 b.mu.data() + size_t(i) * 2 * d,
                 b.eps_v.data() + size_t(i) * d, &b.ell[size_t(i)]);
      },
      256);
  return b;
}

std::vector<double> loss_impl(bool hybrid, const AlphaFn& model,
                              const CldParams& p, std::span<const double> x0s,
                              std::span<const double> ts, const Weighting& w,
                              uint64_t seed) {
  if (!model) throw std::invalid_argument("loss needs a model");
  if (w.variant == WeightVariant::custom && !w.custom_fn) {
    throw std::invalid_argument("custom weighting needs custom_fn");
  }
  const DrawBatch b = draw_batch(p, hybrid, x0s, ts, seed);
  const size_t d = size_t(b.d);
  std::vector<double> alpha(size_t(b.n) * d);
  model(b.u, b.n, b.d, ts, alpha);
  std::vector<double> out(size_t(b.n));
  parallel_for(
      b.n,
      [&](int64_t i) {
        const double pref = w.prefactor(p, ts[size_t(i)], b.ell[size_t(i)]);
        double acc = 0.0;
        for (size_t j = 0; j < d; ++j) {
          const double r = b.eps_v[size_t(i) * d + j] - alpha[size_t(i) * d + j];
          acc += r * r;
        }
        out[size_t(i)] = pref * acc;
      },
      1024);
  return out;
}

std::vector<CvSample> cv_impl(bool ml_flavor, const AlphaFn& model,
                              const CldParams& p, std::span<const double> x0s,
                              std::span<const double> ts, uint64_t seed) {
  if (!model) throw std::invalid_argument("control-variate loss needs a model");
  const DrawBatch b = draw_batch(p, /*hybrid=*/true, x0s, ts, seed);
  const size_t d = size_t(b.d);
  std::vector<double> alpha_u(size_t(b.n) * d);
  std::vector<double> alpha_mu(size_t(b.n) * d);
  model(b.u, b.n, b.d, ts, alpha_u);
  model(b.mu, b.n, b.d, ts, alpha_mu);
  std::vector<CvSample> out(size_t(b.n));
  parallel_for(
      b.n,
      [&](int64_t i) {
        const double l = b.ell[size_t(i)];
        const double pref = ml_flavor ? l * l : 1.0;
        double plain = 0.0, norm2 = 0.0, cross = 0.0;
        for (size_t j = 0; j < d; ++j) {
          const double eps = b.eps_v[size_t(i) * d + j];
          const double au = alpha_u[size_t(i) * d + j];
          const double am = alpha_mu[size_t(i) * d + j];
          const double r = eps - au;
          plain += r * r;
          norm2 += au * au;
          cross += eps * (au - am);
        }
        out[size_t(i)].plain = pref * plain;
        out[size_t(i)].cv = pref * (norm2 - 2.0 * cross);
      },
      1024);
  return out;
}

}  // namespace

double Weighting::prefactor(const CldParams& p, double t, double ell_t) const {
  switch (variant) {
    case WeightVariant::ml:
      return p.gamma_fric * p.beta * ell_t * ell_t;
    case WeightVariant::reweighted:
      return 1.0;
    case WeightVariant::custom:
      if (!custom_fn) {
        throw std::invalid_argument("custom weighting needs custom_fn");
      }
      return custom_fn(t) * ell_t * ell_t;
  }
  throw std::logic_error("unknown weighting variant");
}

LossDraw hsm_draw(const CldParams& p, std::span<const double> x0, double t,
                  CounterRng& rng) {
  p.validate();
  if (x0.empty()) throw std::invalid_argument("draw needs a data point");
  if (!(t >= 0.0) || !(t <= p.t_final)) {
    throw std::domain_error("loss time outside [0, t_final]");
  }
  const int d = int(x0.size());
  LossDraw out;
  out.t = t;
  out.u.resize(2 * size_t(d));
  out.mu.resize(2 * size_t(d));
  out.eps_v.resize(size_t(d));
  draw_row(p, /*hybrid=*/true, x0.data(), d, t, rng, out.u.data(),
           out.mu.data(), out.eps_v.data(), &out.ell);
  return out;
}

LossDraw dsm_draw(const CldParams& p, std::span<const double> x0, double t,
                  CounterRng& rng) {
  p.validate();
  if (x0.empty()) throw std::invalid_argument("draw needs a data point");
  if (!(t >= 0.0) || !(t <= p.t_final)) {
    throw std::domain_error("loss time outside [0, t_final]");
  }
  const int d = int(x0.size());
  LossDraw out;
  out.t = t;
  out.u.resize(2 * size_t(d));
  out.mu.resize(2 * size_t(d));
  out.eps_v.resize(size_t(d));
  draw_row(p, /*hybrid=*/false, x0.data(), d, t, rng, out.u.data(),
           out.mu.data(), out.eps_v.data(), &out.ell);
  return out;
}

double eq8_loss(const LossDraw& draw, std::span<const double> alpha,
                double prefactor) {
  if (alpha.size() != draw.eps_v.size()) {
    throw std::invalid_argument("model output size must match eps_v");
  }
  double acc = 0.0;
  for (size_t j = 0; j < alpha.size(); ++j) {
    const double r = draw.eps_v[j] - alpha[j];
    acc += r * r;
  }
  return prefactor * acc;
}

std::vector<double> hsm_loss(const AlphaFn& model, const CldParams& p,
                             std::span<const double> x0s,
                             std::span<const double> ts, const Weighting& w,
                             uint64_t seed) {
  return loss_impl(/*hybrid=*/true, model, p, x0s, ts, w, seed);
}

std::vector<double> dsm_loss(const AlphaFn& model, const CldParams& p,
                             std::span<const double> x0s,
                             std::span<const double> ts, const Weighting& w,
                             uint64_t seed) {
  return loss_impl(/*hybrid=*/false, model, p, x0s, ts, w, seed);
}

double hsm_dsm_offset(const CldParams& p, double t, int d) {
  p.validate();
  if (d <= 0) throw std::invalid_argument("offset needs d >= 1");
  const double lh = ell(hsm_kernel(p, t), p.eps_num);
  const double ld = ell(dsm_kernel(p, t), p.eps_num);
  return double(d) * (ld * ld - lh * lh);
}

std::vector<CvSample> cv_loss_ml(const AlphaFn& model, const CldParams& p,
                                 std::span<const double> x0s,
                                 std::span<const double> ts, uint64_t seed) {
  return cv_impl(/*ml_flavor=*/true, model, p, x0s, ts, seed);
}

std::vector<CvSample> cv_loss_fid(const AlphaFn& model, const CldParams& p,
                                  std::span<const double> x0s,
                                  std::span<const double> ts, uint64_t seed) {
  return cv_impl(/*ml_flavor=*/false, model, p, x0s, ts, seed);
}

ImportanceModel::Eval ImportanceModel::eval(double t) const {
  p.validate();
  if (!(t >= 0.0)) throw std::domain_error("importance weight needs t >= 0");
  const double G = p.gamma_fric;
  const double bt = p.beta * t;
  Eval e;
  e.y = 4.0 * bt / G;
  const double ey = std::exp(e.y);
  const double gm1 = p.gamma0 - 1.0;
  e.k11 = ey + gm1 * 4.0 * bt * bt / (G * G);
  e.k12 = gm1 * (bt - 2.0 * bt * bt / G);
  e.k22 = 0.25 * G * G * ey + gm1 * (0.25 * G * G + bt * bt - G * bt);
  e.det = e.k11 * e.k22 - e.k12 * e.k12;
  if (!std::isfinite(e.det) || e.det <= 0.0) {
    throw std::runtime_error(
        "assumed-Gaussian covariance is singular or overflowed at t=" +
        std::to_string(t));
  }
  e.ellbar2 = ey * e.k11 / e.det;
  return e;
}

PerDimKernel ImportanceModel::marginal(double t) const {
  const Eval e = eval(t);
  const double emy = std::exp(-e.y);
  PerDimKernel k;
  k.mxx = k.mxv = k.mvx = k.mvv = 0.0;  // zero-mean marginal law
  k.sxx = e.k11 * emy;
  k.sxv = e.k12 * emy;
  k.svv = e.k22 * emy;
  k.t = t;
  return k;
}

double is_weight(const ImportanceModel& im, double t, IsVariant variant,
                 int d) {
  if (d <= 0) throw std::invalid_argument("is_weight needs d >= 1");
  const ImportanceModel::Eval e = im.eval(t);
  const CldParams& p = im.p;
  const double G = p.gamma_fric;
  const double bt = p.beta * t;
  const double br_x = -bt * e.k11 - (2.0 * bt / G + 1.0) * e.k12;
  const double br_v = (1.0 - 2.0 * bt / G) * e.k11 - 4.0 * bt / (G * G) * e.k12;
  const double mean_term =
      std::exp(e.y) / (e.det * e.det) * double(d) *
      (br_x * br_x + p.gamma0 * p.mass * br_v * br_v);
  const double l = ell(hsm_kernel(p, t), p.eps_num);
  const double lb = std::sqrt(e.ellbar2);
  const double ml = mean_term + (lb - l) * (lb - l) * double(d);
  switch (variant) {
    case IsVariant::ml:
      return ml;
    case IsVariant::mlc:
      return ml - l * l * double(d);
    case IsVariant::fid:
      return ml / (l * l);
    case IsVariant::fidc:
      return (ml - l * l * double(d)) / (l * l);
  }
  throw std::logic_error("unknown importance-weight variant");
}

double TimeProposal::sample(double u01) const {
  const double u = std::clamp(u01, 0.0, 1.0);
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  size_t s = size_t(std::max<std::ptrdiff_t>(it - cdf.begin() - 1, 0));
  s = std::min(s, cdf.size() - 2);
  const double h = grid[s + 1] - grid[s];
  const double q0 = density[s];
  const double q1 = density[s + 1];
  const double du = u - cdf[s];
  const double slope = (q1 - q0) / h;
  double tau = 0.0;
  if (std::abs(slope) * h <= 1e-13 * std::max(q0, 1e-300)) {
    tau = q0 > 0.0 ? du / q0 : 0.0;
  } else {
    const double disc = std::max(q0 * q0 + 2.0 * slope * du, 0.0);
    tau = (std::sqrt(disc) - q0) / slope;
  }
  return grid[s] + std::clamp(tau, 0.0, h);
}

double TimeProposal::density_at(double t) const {
  const double tc = std::clamp(t, t_cut, t_final);
  const auto it = std::upper_bound(grid.begin(), grid.end(), tc);
  size_t s = size_t(std::max<std::ptrdiff_t>(it - grid.begin() - 1, 0));
  s = std::min(s, grid.size() - 2);
  const double h = grid[s + 1] - grid[s];
  const double w1 = (tc - grid[s]) / h;
  return (1.0 - w1) * density[s] + w1 * density[s + 1];
}

double TimeProposal::correction(double t) const {
  return 1.0 / ((t_final - t_cut) * density_at(t));
}

TimeProposal make_time_proposal(const std::function<double(double)>& weight,
                                double t_cut, double t_final, int n_grid) {
  if (!weight) throw std::invalid_argument("time proposal needs a weight fn");
  if (!(t_cut >= 0.0) || !(t_final > t_cut)) {
    throw std::invalid_argument("time proposal needs 0 <= t_cut < t_final");
  }
  if (n_grid < 2) {
    throw std::invalid_argument("time proposal needs at least 2 grid points");
  }
  TimeProposal tp;
  tp.t_cut = t_cut;
  tp.t_final = t_final;
  tp.grid.resize(size_t(n_grid));
  tp.density.resize(size_t(n_grid));
  tp.cdf.assign(size_t(n_grid), 0.0);
  const double h = (t_final - t_cut) / double(n_grid - 1);
  for (int i = 0; i < n_grid; ++i) {
    tp.grid[size_t(i)] = (i + 1 == n_grid) ? t_final : t_cut + h * double(i);
    const double w = weight(tp.grid[size_t(i)]);
    if (!std::isfinite(w) || w < 0.0) {
      throw std::invalid_argument(
          "time-proposal weights must be finite and nonnegative");
    }
    tp.density[size_t(i)] = w;  // raw weights for now
  }
  for (int i = 0; i + 1 < n_grid; ++i) {
    const double seg = tp.grid[size_t(i) + 1] - tp.grid[size_t(i)];
    tp.cdf[size_t(i) + 1] =
        tp.cdf[size_t(i)] +
        0.5 * (tp.density[size_t(i)] + tp.density[size_t(i) + 1]) * seg;
  }
  const double total = tp.cdf.back();
  if (!(total > 0.0)) {
    throw std::invalid_argument("time-proposal weights are all zero");
  }
  for (int i = 0; i < n_grid; ++i) {
    tp.density[size_t(i)] /= total;
    tp.cdf[size_t(i)] /= total;
  }
  tp.cdf.back() = 1.0;
  return tp;
}

GradVarCurves grad_variance_study(const ScoreFn& model,
                                  const GaussianMixture& mix,
                                  const CldParams& p,
                                  std::span<const double> t_grid, int64_t n_mc,
                                  uint64_t seed) {
  if (!model) throw std::invalid_argument("variance study needs a model");
  mix.validate();
  p.validate();
  if (n_mc < 2) throw std::invalid_argument("variance study needs n_mc >= 2");
  if (t_grid.empty()) throw std::invalid_argument("variance study needs times");
  for (double t : t_grid) {
    if (!(t > 0.0) || !(t <= p.t_final)) {
      throw std::domain_error("variance-study time outside (0, t_final]");
    }
  }
  const int d = mix.d;
  const size_t dd = size_t(d);
  GradVarCurves out;
  out.t.assign(t_grid.begin(), t_grid.end());
  out.trace_hsm.resize(t_grid.size());
  out.trace_dsm.resize(t_grid.size());
  out.gamma = p.gamma0;
  out.n_mc = n_mc;
  out.seed = seed;

  StateBatch bh, bd;
  bh.n = bd.n = n_mc;
  bh.d = bd.d = d;
  bh.x.resize(size_t(n_mc) * dd);
  bh.v.resize(size_t(n_mc) * dd);
  bd.x.resize(size_t(n_mc) * dd);
  bd.v.resize(size_t(n_mc) * dd);
  std::vector<double> tgt_h(size_t(n_mc) * dd), tgt_d(size_t(n_mc) * dd);
  std::vector<double> s_h(size_t(n_mc) * dd), s_d(size_t(n_mc) * dd);
  std::vector<double> x0(size_t(n_mc) * dd);

  for (size_t ti = 0; ti < t_grid.size(); ++ti) {
    const double t = t_grid[ti];
    const PerDimKernel kh = hsm_kernel(p, t);
    const PerDimKernel kd = dsm_kernel(p, t);
    const CholFactor lh_chol = cholesky2(kh, p.eps_num);
    const CholFactor ld_chol = cholesky2(kd, p.eps_num);
    const double lh = ell(kh, p.eps_num);
    const double ld = ell(kd, p.eps_num);
    const double sv0 = std::sqrt(p.gamma0 * p.mass);
    parallel_for(
        n_mc,
        [&](int64_t i) {
          CounterRng rng(seed, (uint64_t(ti) << 40) | uint64_t(i));
          const std::span<double> x0_row(x0.data() + size_t(i) * dd, dd);
          sample_data(mix, rng, x0_row);
          for (size_t j = 0; j < dd; ++j) {
            const double v0 = sv0 * rng.normal();
            const double ex = rng.normal();
            const double ev = rng.normal();
            double mx = 0.0, mv = 0.0, gx = 0.0, gv = 0.0;
            kh.mean(x0_row[j], 0.0, mx, mv);
            lh_chol.apply(ex, ev, gx, gv);
            bh.x[size_t(i) * dd + j] = mx + gx;
            bh.v[size_t(i) * dd + j] = mv + gv;
            tgt_h[size_t(i) * dd + j] = -lh * ev;
            kd.mean(x0_row[j], v0, mx, mv);
            ld_chol.apply(ex, ev, gx, gv);
            bd.x[size_t(i) * dd + j] = mx + gx;
            bd.v[size_t(i) * dd + j] = mv + gv;
            tgt_d[size_t(i) * dd + j] = -ld * ev;
          }
        },
        256);
    bh.t = bd.t = t;
    model(bh, s_h);
    model(bd, s_d);
    double tr_h = 0.0, tr_d = 0.0;
    for (size_t j = 0; j < dd; ++j) {
      const double sh1 = deterministic_sum(
          n_mc, [&](int64_t i) { return s_h[size_t(i) * dd + j] - tgt_h[size_t(i) * dd + j]; });
      const double sh2 = deterministic_sum(n_mc, [&](int64_t i) {
        const double k = s_h[size_t(i) * dd + j] - tgt_h[size_t(i) * dd + j];
        return k * k;
      });
      const double sd1 = deterministic_sum(
          n_mc, [&](int64_t i) { return s_d[size_t(i) * dd + j] - tgt_d[size_t(i) * dd + j]; });
      const double sd2 = deterministic_sum(n_mc, [&](int64_t i) {
        const double k = s_d[size_t(i) * dd + j] - tgt_d[size_t(i) * dd + j];
        return k * k;
      });
      const double nn = double(n_mc);
      tr_h += (sh2 - sh1 * sh1 / nn) / (nn - 1.0);
      tr_d += (sd2 - sd1 * sd1 / nn) / (nn - 1.0);
    }
    out.trace_hsm[ti] = tr_h;
    out.trace_dsm[ti] = tr_d;
  }
  return out;
}

}  // namespace cldlab
