#pragma once
// Minimal trainable score network for the kinetic-Langevin diffusion lab:
// an MLP over the concatenated features [x, v, t/t_final] with SiLU hidden
// units and hand-rolled reverse-mode differentiation, a mixed-score wrapper
// that adds the analytic equilibrium-style velocity term, Adam with linear
// warmup, an exponential moving average of the parameters, and the
// Jacobian-smoothness probe.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cldlab/kernels.hpp"
#include "cldlab/mixtures.hpp"
#include "cldlab/objectives.hpp"
#include "cldlab/samplers.hpp"

namespace cldlab {

// ---------------------------------------------------------------------------
// MLP with manual reverse mode
// ---------------------------------------------------------------------------

// Fully connected network; hidden layers use the sigmoid-weighted linear unit
// x*sigmoid(x), the output layer is affine. Parameters are stored flat, layer
// by layer: weight matrix stored input-major (entry for output r, input k at
// index k*out + r) followed by the bias vector.
struct Mlp {
  std::vector<int> widths;     // e.g. {5, 128, 128, 128, 2}
  std::vector<double> params;  // flattened weights and biases

  // Hidden weights are drawn N(0, 1/fan_in); the final layer starts at zero
  // so a fresh mixed-score model coincides with its analytic base term.
  static Mlp make(std::vector<int> widths, std::uint64_t seed);

  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }
  int n_layers() const { return int(widths.size()) - 1; }
  std::int64_t n_params() const;
  std::size_t weight_offset(int layer) const;
  std::size_t bias_offset(int layer) const;
};

// Per-batch buffers captured by the taped forward pass and consumed by the
// backward pass. Reusable across iterations to avoid reallocation.
struct MlpTape {
  std::int64_t n = 0;
  std::vector<std::vector<double>> pre;  // pre-activations per hidden layer
  std::vector<std::vector<double>> sig;  // cached sigmoids per hidden layer
  std::vector<std::vector<double>> act;  // act[0] = input, act[l] activations
  // Reused by the backward pass so repeated calls do not reallocate.
  mutable std::vector<double> scratch_g, scratch_din, scratch_wt;
};

// out has shape (n x out_dim), in has shape (n x in_dim), both row-major.
void mlp_forward(const Mlp& net, std::span<const double> in, std::int64_t n,
                 std::span<double> out);
void mlp_forward_tape(const Mlp& net, std::span<const double> in,
                      std::int64_t n, MlpTape& tape, std::span<double> out);

// Accumulates (+=) parameter gradients for upstream cotangents of shape
// (n x out_dim). If input_grad is non-empty it receives d(upstream . out)/d(in)
// with shape (n x in_dim), overwritten.
void mlp_backward(const Mlp& net, const MlpTape& tape,
                  std::span<const double> upstream,
                  std::span<double> grad_params, std::span<double> input_grad);

// ---------------------------------------------------------------------------
// Score model
// ---------------------------------------------------------------------------

enum class ScoreMode { mixed, raw };
enum class Conditioning { hybrid, denoising };

// Velocity-score model s_theta(u,t) = -ell_t * alpha_theta(u,t). In mixed
// mode alpha_theta = ell_t^{-1} v / svv_t + net(u, t/t_final) where svv_t is
// the v-v entry of the position-conditioned kernel at x0 = 0, so the network
// only has to learn the residual on top of the Gaussian-like base score
// -v/svv_t. In raw mode alpha_theta is the bare network output. ell_t is the
// inverse Cholesky scale of the kernel matching `conditioning`.
struct MixedScoreModel {
  Mlp net;
  CldParams p;
  ScoreMode mode = ScoreMode::mixed;
  Conditioning conditioning = Conditioning::hybrid;
  int d = 2;

  // alpha over a row-major batch u (n x 2d) at per-row times t (n).
  void alpha(std::span<const double> u, std::int64_t n, int dd,
             std::span<const double> t, std::span<double> out) const;
  AlphaFn alpha_fn() const;  // adapter for the objective losses
  ScoreFn score_fn() const;  // adapter for the samplers (copies the model)

  double ell_at(double t) const;
  double svv_at(double t) const;
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;  // number of applied updates
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// One Adam update with linear learning-rate warmup over `warmup` steps.
void adam_step(std::span<double> params, std::span<const double> grad,
               AdamState& state, double lr, std::int64_t warmup);

// shadow <- rate * shadow + (1 - rate) * params
void ema_update(std::span<double> shadow, std::span<const double> params,
                double rate);

struct TrainConfig {
  std::int64_t n_iters = 200000;
  std::int64_t batch = 512;
  double lr = 2e-4;
  std::int64_t warmup = 10000;
  double ema_rate = 0.9999;
  Weighting weighting{WeightVariant::reweighted, {}};
  double t_cut = 1e-5;  // training times are uniform on [t_cut, t_final]
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;       // per-iteration batch loss
  std::vector<double> grad_norm_curve;  // per-iteration L2 parameter gradient
  std::vector<double> ema_params;       // final EMA shadow of the parameters
  std::int64_t steps = 0;
};

// Trains model.net in place on freshly synthesized draws from `mix` using the
// reparameterized noise-prediction loss for the model's conditioning. Fails
// with a diagnostic if the loss stops being finite. Deterministic for a fixed
// seed at any worker count.
TrainResult train(MixedScoreModel& model, const GaussianMixture& mix,
                  const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Jacobian-smoothness probe
// ---------------------------------------------------------------------------

struct JfCurve {
  std::vector<double> t;
  std::vector<double> jf;  // E || d net(u, t) / d u ||_F^2 over diffused draws
};

// Assembles the exact network Jacobian from out_dim reverse-mode rows per
// sample, averaged over n_mc draws of u ~ p_t for each grid time.
JfCurve jacobian_frobenius(const MixedScoreModel& model,
                           const GaussianMixture& mix, const CldParams& p,
                           std::span<const double> t_grid, std::int64_t n_mc,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints: magic "CLDNET01", little-endian u64 JSON header length, JSON
// header (widths, mode, conditioning, d, step, diffusion parameters), then
// the raw little-endian f64 parameter blob.
// ---------------------------------------------------------------------------

struct Checkpoint {
  MixedScoreModel model;
  std::int64_t step = 0;
};

void save_checkpoint(const MixedScoreModel& model, std::int64_t step,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace cldlab
