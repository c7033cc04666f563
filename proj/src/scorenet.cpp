#include "cldlab/scorenet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "cldlab/parallel.hpp"
#include "cldlab/rng.hpp"

namespace cldlab {

namespace {

using json = nlohmann::json;

// Branch-free exp for the activation path: exp(x) = 2^k * exp(r) with
// x = k*ln2 + r and |r| <= ln2/2, exp(r) by degree-11 Horner (~2e-13 rel).
// Saturates (no inf) for |x| > ~709, propagates NaN, and auto-vectorizes,
// which matters because every hidden unit evaluates it once per step.
inline double fast_exp(double x) {
  constexpr double inv_ln2 = 1.4426950408889634;
  constexpr double ln2_hi = 6.93147180369123816490e-01;
  constexpr double ln2_lo = 1.90821492927058770002e-10;
  double kd = std::nearbyint(x * inv_ln2);
  const double r = (x - kd * ln2_hi) - kd * ln2_lo;
  double q = 1.0 / 39916800.0;
  q = q * r + 1.0 / 3628800.0;
  q = q * r + 1.0 / 362880.0;
  q = q * r + 1.0 / 40320.0;
  q = q * r + 1.0 / 5040.0;
  q = q * r + 1.0 / 720.0;
  q = q * r + 1.0 / 120.0;
  q = q * r + 1.0 / 24.0;
  q = q * r + 1.0 / 6.0;
  q = q * r + 0.5;
  q = q * r + 1.0;
  q = q * r + 1.0;
  kd = std::min(1023.0, std::max(-1022.0, kd));
  const auto k = static_cast<std::int64_t>(kd);
  const double scale =
      std::bit_cast<double>(static_cast<std::uint64_t>(k + 1023) << 52);
  return q * scale;
}

inline double fast_sigmoid(double x) { return 1.0 / (1.0 + fast_exp(-x)); }

// Weights are stored input-major: entry (out r, in k) of a layer sits at
// W[k * no + r]. Iterating k outermost streams each weight row through L1
// once per batch (instead of once per sample) and keeps every inner loop a
// contiguous, vectorizable update with a fixed, reproducible summation order.

// Input-index tile size: a tile of weight rows (kTile x no doubles) stays
// L1-resident while the sample loop streams over it, so each sample row is
// touched once per tile instead of once per input index.
constexpr int kTile = 32;

// out (n x no) = in (n x ni) * W + b with W input-major (ni x no).
void affine_forward(const double* __restrict__ W, const double* __restrict__ b,
                    const double* __restrict__ in, double* __restrict__ out,
                    std::int64_t n, int ni, int no) {
  for (std::int64_t i = 0; i < n; ++i) {
    double* o = out + std::size_t(i) * no;
    for (int r = 0; r < no; ++r) o[r] = b[r];
  }
  for (int k0 = 0; k0 < ni; k0 += kTile) {
    const int k1 = std::min(ni, k0 + kTile);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* a = in + std::size_t(i) * ni;
      double* __restrict__ o = out + std::size_t(i) * no;
      for (int k = k0; k < k1; ++k) {
        const double c = a[k];
        const double* w = W + std::size_t(k) * no;
        for (int r = 0; r < no; ++r) o[r] += c * w[r];
      }
    }
  }
}

// dW += in^T * g, db += column sums of g.
void affine_param_grad(const double* __restrict__ g,
                       const double* __restrict__ a, double* __restrict__ dW,
                       double* __restrict__ db, std::int64_t n, int ni,
                       int no) {
  for (int k0 = 0; k0 < ni; k0 += kTile) {
    const int k1 = std::min(ni, k0 + kTile);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* ai = a + std::size_t(i) * ni;
      const double* gi = g + std::size_t(i) * no;
      for (int k = k0; k < k1; ++k) {
        const double c = ai[k];
        double* __restrict__ w = dW + std::size_t(k) * no;
        for (int r = 0; r < no; ++r) w[r] += c * gi[r];
      }
    }
  }
  for (std::int64_t i = 0; i < n; ++i) {
    const double* gi = g + std::size_t(i) * no;
    for (int r = 0; r < no; ++r) db[r] += gi[r];
  }
}

// din (n x ni) = g (n x no) * W^T with W input-major (ni x no). Each weight
// tile is first transposed into wt (at least no * kTile doubles) so the inner
// update is a contiguous axpy over the tile of input indices; four output
// rows are folded per pass to raise arithmetic intensity.
void affine_input_grad(const double* __restrict__ g,
                       const double* __restrict__ W, double* __restrict__ din,
                       double* __restrict__ wt, std::int64_t n, int ni,
                       int no) {
  for (int k0 = 0; k0 < ni; k0 += kTile) {
    const int tk = std::min(ni, k0 + kTile) - k0;
    for (int r = 0; r < no; ++r)
      for (int k = 0; k < tk; ++k)
        wt[std::size_t(r) * tk + k] = W[std::size_t(k0 + k) * no + r];
    for (std::int64_t i = 0; i < n; ++i) {
      const double* gi = g + std::size_t(i) * no;
      double* __restrict__ o = din + std::size_t(i) * ni + k0;
      for (int k = 0; k < tk; ++k) o[k] = 0.0;
      int r = 0;
      for (; r + 4 <= no; r += 4) {
        const double c0 = gi[r], c1 = gi[r + 1];
        const double c2 = gi[r + 2], c3 = gi[r + 3];
        const double* w0 = wt + std::size_t(r) * tk;
        const double* w1 = w0 + tk;
        const double* w2 = w1 + tk;
        const double* w3 = w2 + tk;
        for (int k = 0; k < tk; ++k)
          o[k] += (c0 * w0[k] + c1 * w1[k]) + (c2 * w2[k] + c3 * w3[k]);
      }
      for (; r < no; ++r) {
        const double c = gi[r];
        const double* w = wt + std::size_t(r) * tk;
        for (int k = 0; k < tk; ++k) o[k] += c * w[k];
      }
    }
  }
}

void check_net_shapes(const Mlp& net) {
  if (net.widths.size() < 2)
    throw std::invalid_argument("network needs at least one layer");
  for (int w : net.widths)
    if (w <= 0) throw std::invalid_argument("network widths must be positive");
  if (std::int64_t(net.params.size()) != net.n_params())
    throw std::invalid_argument("parameter vector does not match the widths");
}

}  // namespace

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

std::int64_t Mlp::n_params() const {
  std::int64_t total = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l)
    total += std::int64_t(widths[l + 1]) * widths[l] + widths[l + 1];
  return total;
}

std::size_t Mlp::weight_offset(int layer) const {
  std::size_t off = 0;
  for (int l = 0; l < layer; ++l)
    off += std::size_t(widths[l + 1]) * widths[l] + widths[l + 1];
  return off;
}

std::size_t Mlp::bias_offset(int layer) const {
  return weight_offset(layer) + std::size_t(widths[layer + 1]) * widths[layer];
}

Mlp Mlp::make(std::vector<int> widths, std::uint64_t seed) {
  Mlp net;
  net.widths = std::move(widths);
  if (net.widths.size() < 2)
    throw std::invalid_argument("network needs at least one layer");
  for (int w : net.widths)
    if (w <= 0) throw std::invalid_argument("network widths must be positive");
  net.params.assign(std::size_t(net.n_params()), 0.0);
  CounterRng rng(seed, 0);
  const int last = net.n_layers() - 1;
  for (int l = 0; l < last; ++l) {
    const int ni = net.widths[l], no = net.widths[l + 1];
    const double scale = std::sqrt(1.0 / ni);
    double* w = net.params.data() + net.weight_offset(l);
    for (std::int64_t k = 0; k < std::int64_t(no) * ni; ++k)
      w[k] = scale * rng.normal();
  }
  // Final layer stays zero: a fresh mixed-score model equals its base term.
  return net;
}

void mlp_forward(const Mlp& net, std::span<const double> in, std::int64_t n,
                 std::span<double> out) {
  MlpTape tape;
  mlp_forward_tape(net, in, n, tape, out);
}

void mlp_forward_tape(const Mlp& net, std::span<const double> in,
                      std::int64_t n, MlpTape& tape, std::span<double> out) {
  check_net_shapes(net);
  if (n < 0) throw std::invalid_argument("negative batch size");
  if (in.size() != std::size_t(n) * net.in_dim())
    throw std::invalid_argument("input batch has the wrong size");
  if (out.size() != std::size_t(n) * net.out_dim())
    throw std::invalid_argument("output batch has the wrong size");

  const int L = net.n_layers();
  tape.n = n;
  tape.pre.resize(std::size_t(L) - 1);
  tape.sig.resize(std::size_t(L) - 1);
  tape.act.resize(std::size_t(L));
  tape.act[0].assign(in.begin(), in.end());
  for (int l = 0; l < L; ++l) {
    const int ni = net.widths[l], no = net.widths[l + 1];
    const double* W = net.params.data() + net.weight_offset(l);
    const double* b = net.params.data() + net.bias_offset(l);
    const double* a = tape.act[std::size_t(l)].data();
    double* z;
    if (l == L - 1) {
      z = out.data();
    } else {
      tape.pre[std::size_t(l)].resize(std::size_t(n) * no);
      z = tape.pre[std::size_t(l)].data();
    }
    affine_forward(W, b, a, z, n, ni, no);
    if (l < L - 1) {
      tape.sig[std::size_t(l)].resize(std::size_t(n) * no);
      tape.act[std::size_t(l) + 1].resize(std::size_t(n) * no);
      double* s = tape.sig[std::size_t(l)].data();
      double* act = tape.act[std::size_t(l) + 1].data();
      const std::int64_t m = n * no;
      for (std::int64_t k = 0; k < m; ++k) {
        const double sk = fast_sigmoid(z[k]);
        s[k] = sk;
        act[k] = z[k] * sk;
      }
    }
  }
}

void mlp_backward(const Mlp& net, const MlpTape& tape,
                  std::span<const double> upstream,
                  std::span<double> grad_params, std::span<double> input_grad) {
  check_net_shapes(net);
  const std::int64_t n = tape.n;
  const int L = net.n_layers();
  if (upstream.size() != std::size_t(n) * net.out_dim())
    throw std::invalid_argument("upstream batch has the wrong size");
  if (!grad_params.empty() && grad_params.size() != net.params.size())
    throw std::invalid_argument("gradient buffer has the wrong size");
  if (!input_grad.empty() && input_grad.size() != std::size_t(n) * net.in_dim())
    throw std::invalid_argument("input-gradient buffer has the wrong size");

  std::vector<double>& ga = tape.scratch_g;
  std::vector<double>& gb = tape.scratch_din;
  ga.assign(upstream.begin(), upstream.end());
  for (int l = L - 1; l >= 0; --l) {
    const int ni = net.widths[l], no = net.widths[l + 1];
    if (!grad_params.empty()) {
      affine_param_grad(ga.data(), tape.act[std::size_t(l)].data(),
                        grad_params.data() + net.weight_offset(l),
                        grad_params.data() + net.bias_offset(l), n, ni, no);
    }
    const bool need_input = l > 0 || !input_grad.empty();
    if (!need_input) break;
    double* din;
    if (l == 0) {
      din = input_grad.data();
    } else {
      gb.resize(std::size_t(n) * ni);
      din = gb.data();
    }
    tape.scratch_wt.resize(std::size_t(no) * kTile);
    affine_input_grad(ga.data(), net.params.data() + net.weight_offset(l), din,
                      tape.scratch_wt.data(), n, ni, no);
    if (l == 0) break;
    // Chain through the sigmoid-weighted linear unit of layer l-1 using the
    // cached sigmoid: d/dz [z*s(z)] = s * (1 + z * (1 - s)).
    const double* z = tape.pre[std::size_t(l) - 1].data();
    const double* s = tape.sig[std::size_t(l) - 1].data();
    const std::int64_t m = n * ni;
    ga.resize(std::size_t(m));
    for (std::int64_t k = 0; k < m; ++k)
      ga[std::size_t(k)] = din[k] * s[k] * (1.0 + z[k] * (1.0 - s[k]));
  }
}

// ---------------------------------------------------------------------------
// MixedScoreModel
// ---------------------------------------------------------------------------

double MixedScoreModel::svv_at(double t) const { return hsm_kernel(p, t).svv; }

double MixedScoreModel::ell_at(double t) const {
  const PerDimKernel k = conditioning == Conditioning::hybrid
                             ? hsm_kernel(p, t)
                             : dsm_kernel(p, t);
  return ell(k, p.eps_num);
}

void MixedScoreModel::alpha(std::span<const double> u, std::int64_t n, int dd,
                            std::span<const double> t,
                            std::span<double> out) const {
  if (dd != d || dd != net.out_dim() || 2 * dd + 1 != net.in_dim())
    throw std::invalid_argument("state dimension does not match the network");
  if (u.size() != std::size_t(n) * 2 * dd || t.size() != std::size_t(n) ||
      out.size() != std::size_t(n) * dd)
    throw std::invalid_argument("alpha batch shapes are inconsistent");
  const int ni = net.in_dim();
  std::vector<double> in(std::size_t(n) * ni);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* ur = u.data() + std::size_t(i) * 2 * dd;
    double* row = in.data() + std::size_t(i) * ni;
    for (int j = 0; j < 2 * dd; ++j) row[j] = ur[j];
    row[2 * dd] = t[std::size_t(i)] / p.t_final;
  }
  mlp_forward(net, in, n, out);
  if (mode == ScoreMode::mixed) {
    for (std::int64_t i = 0; i < n; ++i) {
      const double ti = t[std::size_t(i)];
      const double c = 1.0 / (ell_at(ti) * svv_at(ti));
      const double* vr = u.data() + std::size_t(i) * 2 * dd + dd;
      double* o = out.data() + std::size_t(i) * dd;
      for (int j = 0; j < dd; ++j) o[j] += c * vr[j];
    }
  }
}

AlphaFn MixedScoreModel::alpha_fn() const {
  MixedScoreModel copy = *this;
  return [copy](std::span<const double> u, std::int64_t n, int dd,
                std::span<const double> t, std::span<double> out) {
    copy.alpha(u, n, dd, t, out);
  };
}

ScoreFn MixedScoreModel::score_fn() const {
  MixedScoreModel copy = *this;
  return [copy](const StateBatch& b, std::span<double> out) {
    const int dd = copy.d;
    if (b.d != dd)
      throw std::invalid_argument("state dimension does not match the network");
    if (out.size() != std::size_t(b.n) * dd)
      throw std::invalid_argument("score output has the wrong size");
    const int ni = copy.net.in_dim();
    std::vector<double> in(std::size_t(b.n) * ni);
    const double ts = b.t / copy.p.t_final;
    for (std::int64_t i = 0; i < b.n; ++i) {
      double* row = in.data() + std::size_t(i) * ni;
      for (int j = 0; j < dd; ++j) {
        row[j] = b.x[std::size_t(i) * dd + j];
        row[dd + j] = b.v[std::size_t(i) * dd + j];
      }
      row[2 * dd] = ts;
    }
    mlp_forward(copy.net, in, b.n, out);
    const double l = copy.ell_at(b.t);
    if (copy.mode == ScoreMode::mixed) {
      // s = -ell * (v / (ell * svv) + net) = -v / svv - ell * net.
      const double isvv = 1.0 / copy.svv_at(b.t);
      for (std::int64_t i = 0; i < b.n; ++i)
        for (int j = 0; j < dd; ++j) {
          double& o = out[std::size_t(i) * dd + j];
          o = -b.v[std::size_t(i) * dd + j] * isvv - l * o;
        }
    } else {
      for (double& o : out) o = -l * o;
    }
  };
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

void adam_step(std::span<double> params, std::span<const double> grad,
               AdamState& state, double lr, std::int64_t warmup) {
  if (grad.size() != params.size())
    throw std::invalid_argument("gradient size does not match parameters");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("optimizer state does not match parameters");
  state.step += 1;
  const double t = double(state.step);
  const double lr_t =
      lr * (warmup > 0 ? std::min(1.0, t / double(warmup)) : 1.0);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr_t * mhat / (std::sqrt(vhat) + state.eps);
  }
}

void ema_update(std::span<double> shadow, std::span<const double> params,
                double rate) {
  if (shadow.size() != params.size())
    throw std::invalid_argument("EMA shadow size does not match parameters");
  for (std::size_t i = 0; i < shadow.size(); ++i)
    shadow[i] = rate * shadow[i] + (1.0 - rate) * params[i];
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct ChunkWs {
  MlpTape tape;
  std::vector<double> in, net_out, alpha, eps, ups, weight, base_coef, grad;
  double loss_sum = 0.0;
};

constexpr std::int64_t kChunkRows = 64;

}  // namespace

TrainResult train(MixedScoreModel& model, const GaussianMixture& mix,
                  const TrainConfig& cfg) {
  model.p.validate();
  mix.validate();
  check_net_shapes(model.net);
  const int d = mix.d;
  if (model.d != d || model.net.out_dim() != d ||
      model.net.in_dim() != 2 * d + 1)
    throw std::invalid_argument("network shape does not match the data");
  if (cfg.batch <= 0 || cfg.batch >= (std::int64_t(1) << 20))
    throw std::invalid_argument("batch size out of range");
  if (cfg.n_iters < 0 || cfg.n_iters >= (std::int64_t(1) << 40))
    throw std::invalid_argument("iteration count out of range");
  if (!(cfg.t_cut >= 0.0) || cfg.t_cut >= model.p.t_final)
    throw std::invalid_argument("time cutoff must lie in [0, t_final)");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr))
    throw std::invalid_argument("learning rate must be positive");
  if (!(cfg.ema_rate >= 0.0) || cfg.ema_rate >= 1.0)
    throw std::invalid_argument("EMA rate must lie in [0, 1)");
  if (cfg.warmup < 0) throw std::invalid_argument("negative warmup");
  if (cfg.weighting.variant == WeightVariant::custom && !cfg.weighting.custom_fn)
    throw std::invalid_argument("custom weighting requires a function");

  const CldParams p = model.p;
  const bool hybrid = model.conditioning == Conditioning::hybrid;
  const bool mixed = model.mode == ScoreMode::mixed;
  const double sv0 = std::sqrt(p.gamma0 * p.mass);
  const double t_span = p.t_final - cfg.t_cut;
  const std::int64_t np = model.net.n_params();
  const std::int64_t n_chunks = (cfg.batch + kChunkRows - 1) / kChunkRows;
  const int ni = model.net.in_dim();

  std::vector<ChunkWs> ws(static_cast<std::size_t>(n_chunks));
  for (ChunkWs& w : ws) {
    w.in.resize(std::size_t(kChunkRows) * ni);
    w.net_out.resize(std::size_t(kChunkRows) * d);
    w.alpha.resize(std::size_t(kChunkRows) * d);
    w.eps.resize(std::size_t(kChunkRows) * d);
    w.ups.resize(std::size_t(kChunkRows) * d);
    w.weight.resize(std::size_t(kChunkRows));
    w.base_coef.resize(std::size_t(kChunkRows));
    w.grad.assign(std::size_t(np), 0.0);
  }

  AdamState adam;
  adam.m.assign(std::size_t(np), 0.0);
  adam.v.assign(std::size_t(np), 0.0);
  TrainResult res;
  res.loss_curve.reserve(std::size_t(cfg.n_iters));
  res.grad_norm_curve.reserve(std::size_t(cfg.n_iters));
  res.ema_params = model.net.params;
  std::vector<double> grad(static_cast<std::size_t>(np));

  for (std::int64_t iter = 0; iter < cfg.n_iters; ++iter) {
    parallel_for(
        n_chunks,
        [&](std::int64_t c) {
          ChunkWs& w = ws[std::size_t(c)];
          const std::int64_t row0 = c * kChunkRows;
          const std::int64_t rows =
              std::min(kChunkRows, cfg.batch - row0);
          for (std::int64_t r = 0; r < rows; ++r) {
            CounterRng rng(cfg.seed,
                           (std::uint64_t(iter) << 20) |
                               std::uint64_t(row0 + r));
            double* in_row = w.in.data() + std::size_t(r) * ni;
            double* eps_row = w.eps.data() + std::size_t(r) * d;
            // x0 occupies the front of the input row until overwritten below.
            sample_data(mix, rng, std::span<double>(in_row, std::size_t(d)));
            const double t = cfg.t_cut + t_span * rng.uniform();
            const PerDimKernel k = hybrid ? hsm_kernel(p, t) : dsm_kernel(p, t);
            const CholFactor ch = cholesky2(k, p.eps_num);
            const double l = ell(k, p.eps_num);
            for (int j = 0; j < d; ++j) {
              const double x0 = in_row[j];
              const double v0 = hybrid ? 0.0 : sv0 * rng.normal();
              const double mu_x = k.mxx * x0 + k.mxv * v0;
              const double mu_v = k.mvx * x0 + k.mvv * v0;
              const double ex = rng.normal();
              const double ev = rng.normal();
              double gx, gv;
              ch.apply(ex, ev, gx, gv);
              in_row[j] = mu_x + gx;
              in_row[d + j] = mu_v + gv;
              eps_row[j] = ev;
            }
            in_row[2 * d] = t / p.t_final;
            w.weight[std::size_t(r)] = cfg.weighting.prefactor(p, t, l);
            w.base_coef[std::size_t(r)] =
                mixed ? 1.0 / (l * hsm_kernel(p, t).svv) : 0.0;
          }
          std::span<double> out(w.net_out.data(), std::size_t(rows) * d);
          mlp_forward_tape(model.net,
                           std::span<const double>(w.in.data(),
                                                   std::size_t(rows) * ni),
                           rows, w.tape, out);
          w.loss_sum = 0.0;
          for (std::int64_t r = 0; r < rows; ++r) {
            const double bc = w.base_coef[std::size_t(r)];
            const double wt = w.weight[std::size_t(r)];
            const double* in_row = w.in.data() + std::size_t(r) * ni;
            double row_loss = 0.0;
            for (int j = 0; j < d; ++j) {
              const std::size_t idx = std::size_t(r) * d + std::size_t(j);
              const double a = w.net_out[idx] + bc * in_row[d + j];
              const double resid = a - w.eps[idx];
              row_loss += resid * resid;
              w.ups[idx] = 2.0 * wt * resid / double(cfg.batch);
            }
            w.loss_sum += wt * row_loss;
          }
          std::fill(w.grad.begin(), w.grad.end(), 0.0);
          mlp_backward(model.net, w.tape,
                       std::span<const double>(w.ups.data(),
                                               std::size_t(rows) * d),
                       w.grad, {});
        },
        1);

    double loss = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::int64_t c = 0; c < n_chunks; ++c) {
      loss += ws[std::size_t(c)].loss_sum;
      const std::vector<double>& g = ws[std::size_t(c)].grad;
      for (std::int64_t k = 0; k < np; ++k)
        grad[std::size_t(k)] += g[std::size_t(k)];
    }
    loss /= double(cfg.batch);
    if (!std::isfinite(loss))
      throw std::runtime_error("training diverged at iteration " +
                               std::to_string(iter) +
                               ": batch loss is not finite");
    double g2 = 0.0;
    for (std::int64_t k = 0; k < np; ++k)
      g2 += grad[std::size_t(k)] * grad[std::size_t(k)];

    adam_step(model.net.params, grad, adam, cfg.lr, cfg.warmup);
    ema_update(res.ema_params, model.net.params, cfg.ema_rate);
    res.loss_curve.push_back(loss);
    res.grad_norm_curve.push_back(std::sqrt(g2));
  }
  res.steps = cfg.n_iters;
  return res;
}

// ---------------------------------------------------------------------------
// Jacobian-smoothness probe
// ---------------------------------------------------------------------------

JfCurve jacobian_frobenius(const MixedScoreModel& model,
                           const GaussianMixture& mix, const CldParams& p,
                           std::span<const double> t_grid, std::int64_t n_mc,
                           std::uint64_t seed) {
  check_net_shapes(model.net);
  const int d = mix.d;
  if (model.net.out_dim() != d || model.net.in_dim() != 2 * d + 1)
    throw std::invalid_argument("network shape does not match the data");
  if (n_mc <= 0) throw std::invalid_argument("need at least one sample");
  JfCurve curve;
  curve.t.assign(t_grid.begin(), t_grid.end());
  curve.jf.assign(t_grid.size(), 0.0);
  const int ni = model.net.in_dim();
  std::vector<double> u(std::size_t(n_mc) * 2 * d);
  std::vector<double> in(std::size_t(n_mc) * ni);
  std::vector<double> out(std::size_t(n_mc) * d);
  std::vector<double> ups(std::size_t(n_mc) * d);
  std::vector<double> din(std::size_t(n_mc) * ni);
  MlpTape tape;
  for (std::size_t ti = 0; ti < t_grid.size(); ++ti) {
    const double t = t_grid[ti];
    const DiffusedJointMixture dm = diffuse(mix, p, t);
    CounterRng rng(seed, ti);
    sample_joint(dm, rng, u);
    for (std::int64_t i = 0; i < n_mc; ++i) {
      double* row = in.data() + std::size_t(i) * ni;
      const double* ur = u.data() + std::size_t(i) * 2 * d;
      for (int j = 0; j < 2 * d; ++j) row[j] = ur[j];
      row[2 * d] = t / p.t_final;
    }
    mlp_forward_tape(model.net, in, n_mc, tape, out);
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      std::fill(ups.begin(), ups.end(), 0.0);
      for (std::int64_t i = 0; i < n_mc; ++i)
        ups[std::size_t(i) * d + std::size_t(j)] = 1.0;
      mlp_backward(model.net, tape, ups, {}, din);
      for (std::int64_t i = 0; i < n_mc; ++i) {
        const double* row = din.data() + std::size_t(i) * ni;
        for (int k = 0; k < 2 * d; ++k) acc += row[k] * row[k];
      }
    }
    curve.jf[ti] = acc / double(n_mc);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kNetMagic[9] = "CLDNET01";
}

void save_checkpoint(const MixedScoreModel& model, std::int64_t step,
                     const std::string& path) {
  check_net_shapes(model.net);
  json header;
  header["widths"] = model.net.widths;
  header["mode"] = model.mode == ScoreMode::mixed ? "mixed" : "raw";
  header["conditioning"] =
      model.conditioning == Conditioning::hybrid ? "hybrid" : "denoising";
  header["d"] = model.d;
  header["step"] = step;
  header["diffusion"] = {
      {"beta", model.p.beta},           {"gamma_fric", model.p.gamma_fric},
      {"mass", model.p.mass},           {"gamma0", model.p.gamma0},
      {"t_final", model.p.t_final},     {"eps_cutoff", model.p.eps_cutoff},
      {"eps_num", model.p.eps_num},
  };
  const std::string text = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint file " + path);
  f.write(kNetMagic, 8);
  const std::uint64_t len = text.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(text.data(), std::streamsize(text.size()));
  f.write(reinterpret_cast<const char*>(model.net.params.data()),
          std::streamsize(model.net.params.size() * sizeof(double)));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint file " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kNetMagic, 8) != 0)
    throw std::runtime_error("not a network checkpoint: " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!f || len == 0 || len > (1u << 20))
    throw std::runtime_error("corrupt checkpoint header: " + path);
  std::string text(len, '\0');
  f.read(text.data(), std::streamsize(len));
  if (!f) throw std::runtime_error("corrupt checkpoint header: " + path);
  json header = json::parse(text, nullptr, false);
  if (header.is_discarded())
    throw std::runtime_error("corrupt checkpoint header: " + path);

  Checkpoint ck;
  ck.model.net.widths = header.at("widths").get<std::vector<int>>();
  ck.model.mode = header.at("mode").get<std::string>() == "mixed"
                      ? ScoreMode::mixed
                      : ScoreMode::raw;
  ck.model.conditioning =
      header.at("conditioning").get<std::string>() == "hybrid"
          ? Conditioning::hybrid
          : Conditioning::denoising;
  ck.model.d = header.at("d").get<int>();
  ck.step = header.at("step").get<std::int64_t>();
  const json& dp = header.at("diffusion");
  ck.model.p.beta = dp.at("beta").get<double>();
  ck.model.p.gamma_fric = dp.at("gamma_fric").get<double>();
  ck.model.p.mass = dp.at("mass").get<double>();
  ck.model.p.gamma0 = dp.at("gamma0").get<double>();
  ck.model.p.t_final = dp.at("t_final").get<double>();
  ck.model.p.eps_cutoff = dp.at("eps_cutoff").get<double>();
  ck.model.p.eps_num = dp.at("eps_num").get<double>();

  ck.model.net.params.resize(std::size_t(ck.model.net.n_params()));
  f.read(reinterpret_cast<char*>(ck.model.net.params.data()),
         std::streamsize(ck.model.net.params.size() * sizeof(double)));
  if (!f) throw std::runtime_error("checkpoint weight blob is truncated: " +
                                   path);
  check_net_shapes(ck.model.net);
  return ck;
}

}  // namespace cldlab
