#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"

#include "cldlab/mixtures.hpp"
#include "cldlab/samplers.hpp"
#include "cldlab/scorenet.hpp"
#include "oracles.hpp"

using namespace cldlab;

namespace {

// Fill every parameter (including the final layer, which Mlp::make zeros)
// with small random values so gradients flow through the whole graph.
Mlp random_net(std::vector<int> widths, uint64_t seed) {
  Mlp net = Mlp::make(widths, seed);
  CounterRng rng(seed, 999);
  for (double& p : net.params) p = 0.4 * rng.normal();
  return net;
}

double batch_objective(const Mlp& net, const std::vector<double>& in,
                       std::int64_t n, const std::vector<double>& upstream) {
  std::vector<double> out(std::size_t(n) * net.out_dim());
  mlp_forward(net, in, n, out);
  double acc = 0.0;
  for (std::size_t k = 0; k < out.size(); ++k) acc += upstream[k] * out[k];
  return acc;
}

}  // namespace

TEST_SUITE_BEGIN("scorenet");

TEST_CASE("default topology stays under the parameter budget") {
  const Mlp net = Mlp::make({5, 128, 128, 128, 2}, 3);
  CHECK(net.n_params() == 34050);
  CHECK(net.n_params() < 100000);
  for (double p : net.params) CHECK(std::isfinite(p));
  // The output layer starts at zero so a fresh mixed model is exactly its
  // closed-form base term.
  const std::size_t w3 = net.weight_offset(3);
  for (std::size_t k = w3; k < net.params.size(); ++k)
    CHECK(net.params[k] == 0.0);

  CHECK_THROWS_AS(Mlp::make({5}, 0), std::invalid_argument);
  CHECK_THROWS_AS(Mlp::make({5, -1, 2}, 0), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
  // Spec'd tiny-net check: every parameter of every tensor, relative error
  // below 1e-4 against a step-1e-6 central difference.
  Mlp net = random_net({5, 7, 6, 2}, 17);
  const std::int64_t n = 3;
  CounterRng rng(18, 0);
  std::vector<double> in(std::size_t(n) * 5), upstream(std::size_t(n) * 2);
  for (double& x : in) x = rng.normal();
  for (double& u : upstream) u = rng.normal();

  std::vector<double> out(std::size_t(n) * 2);
  std::vector<double> grad(net.params.size(), 0.0);
  MlpTape tape;
  mlp_forward_tape(net, in, n, tape, out);
  mlp_backward(net, tape, upstream, grad, {});

  const double h = 1e-6;
  for (std::size_t k = 0; k < net.params.size(); ++k) {
    const double save = net.params[k];
    net.params[k] = save + h;
    const double fp = batch_objective(net, in, n, upstream);
    net.params[k] = save - h;
    const double fm = batch_objective(net, in, n, upstream);
    net.params[k] = save;
    const double fd = (fp - fm) / (2.0 * h);
    const double scale = std::max({std::abs(fd), std::abs(grad[k]), 1e-3});
    CHECK(std::abs(grad[k] - fd) / scale < 1e-4);
  }
}

TEST_CASE("zero-weight network reduces to its bias path") {
  // With all weights zero the output is the final bias alone, and the
  // analytic bias gradients match finite differences to 1e-5 relative.
  Mlp net = Mlp::make({5, 4, 2}, 5);
  std::fill(net.params.begin(), net.params.end(), 0.0);
  net.params[net.bias_offset(1) + 0] = 0.7;
  net.params[net.bias_offset(1) + 1] = -0.3;

  const std::int64_t n = 2;
  std::vector<double> in(std::size_t(n) * 5, 1.3);
  std::vector<double> out(std::size_t(n) * 2);
  mlp_forward(net, in, n, out);
  for (std::int64_t i = 0; i < n; ++i) {
    CHECK(out[std::size_t(i) * 2 + 0] == doctest::Approx(0.7));
    CHECK(out[std::size_t(i) * 2 + 1] == doctest::Approx(-0.3));
  }

  std::vector<double> upstream(std::size_t(n) * 2);
  upstream = {0.5, -1.0, 2.0, 0.25};
  std::vector<double> grad(net.params.size(), 0.0);
  MlpTape tape;
  mlp_forward_tape(net, in, n, tape, out);
  mlp_backward(net, tape, upstream, grad, {});
  const double h = 1e-6;
  for (std::size_t k = 0; k < net.params.size(); ++k) {
    const double save = net.params[k];
    net.params[k] = save + h;
    const double fp = batch_objective(net, in, n, upstream);
    net.params[k] = save - h;
    const double fm = batch_objective(net, in, n, upstream);
    net.params[k] = save;
    const double fd = (fp - fm) / (2.0 * h);
    if (std::abs(fd) > 1e-7) {
      CHECK(std::abs(grad[k] - fd) / std::abs(fd) < 1e-5);
    } else {
      CHECK(std::abs(grad[k]) < 1e-7);
    }
  }
}

TEST_CASE("forward is row-independent and handles empty batches") {
  Mlp net = random_net({5, 8, 2}, 23);
  CounterRng rng(24, 0);
  std::vector<double> a(2 * 5), b(3 * 5);
  for (double& x : a) x = rng.normal();
  for (double& x : b) x = rng.normal();
  std::vector<double> cat(a);
  cat.insert(cat.end(), b.begin(), b.end());

  std::vector<double> oa(2 * 2), ob(3 * 2), ocat(5 * 2);
  mlp_forward(net, a, 2, oa);
  mlp_forward(net, b, 3, ob);
  mlp_forward(net, cat, 5, ocat);
  for (std::size_t k = 0; k < oa.size(); ++k) CHECK(ocat[k] == oa[k]);
  for (std::size_t k = 0; k < ob.size(); ++k)
    CHECK(ocat[oa.size() + k] == ob[k]);

  std::vector<double> none;
  mlp_forward(net, none, 0, none);  // must not throw or write
  CHECK(none.empty());

  std::vector<double> wrong(7);
  CHECK_THROWS_AS(mlp_forward(net, wrong, 1, oa), std::invalid_argument);
}

TEST_CASE("mixed parameterization reduces to the closed-form base term") {
  CldParams p;
  MixedScoreModel model;
  model.p = p;
  model.d = 2;
  model.net = Mlp::make({5, 16, 2}, 31);  // final layer zero => alpha' == 0

  CounterRng rng(32, 0);
  const std::int64_t n = 64;
  StateBatch b;
  b.n = n;
  b.d = 2;
  b.x.resize(std::size_t(n) * 2);
  b.v.resize(std::size_t(n) * 2);
  for (double& x : b.x) x = rng.normal();
  for (double& v : b.v) v = 0.5 * rng.normal();
  std::vector<double> s(std::size_t(n) * 2);

  SUBCASE("score equals -v / svv at a generic time") {
    b.t = 0.31;
    const double svv = hsm_kernel(p, b.t).svv;
    model.score_fn()(b, s);
    for (std::size_t k = 0; k < s.size(); ++k)
      CHECK(s[k] == doctest::Approx(-b.v[k] / svv).epsilon(1e-12));
  }

  SUBCASE("equilibrium-scale time recovers the stationary velocity score") {
    b.t = 2.5;  // beta*t = 10
    model.score_fn()(b, s);
    for (std::size_t k = 0; k < s.size(); ++k)
      CHECK(s[k] == doctest::Approx(-b.v[k] / p.mass).epsilon(1e-6));
  }

  SUBCASE("raw mode passes the network output through unchanged") {
    model.mode = ScoreMode::raw;
    b.t = 0.31;
    std::vector<double> alpha_out(std::size_t(n) * 2);
    std::vector<double> u(std::size_t(n) * 4), ts(std::size_t(n), b.t);
    for (std::int64_t i = 0; i < n; ++i)
      for (int j = 0; j < 2; ++j) {
        u[std::size_t(i) * 4 + j] = b.x[std::size_t(i) * 2 + j];
        u[std::size_t(i) * 4 + 2 + j] = b.v[std::size_t(i) * 2 + j];
      }
    model.alpha(u, n, 2, ts, alpha_out);
    for (double a : alpha_out) CHECK(a == 0.0);  // zero final layer
    model.score_fn()(b, s);
    for (double sv : s) CHECK(sv == 0.0);
  }
}

TEST_CASE("adam follows the hand-computed update on a constant gradient") {
  // With g constant, mhat = g and vhat = g^2 at every step, so each update
  // moves by lr_t * sign(g) / (1 + eps) with lr_t ramped linearly by warmup.
  std::vector<double> params{1.0, -2.0};
  std::vector<double> grad{1.0, -3.0};
  AdamState st;
  const double lr = 0.1;
  const std::int64_t warmup = 4;
  for (int step = 1; step <= 3; ++step) adam_step(params, grad, st, lr, warmup);
  const double moved = lr * (1.0 + 2.0 + 3.0) / 4.0 / (1.0 + 1e-8);
  CHECK(params[0] == doctest::Approx(1.0 - moved).epsilon(1e-12));
  CHECK(params[1] == doctest::Approx(-2.0 + moved).epsilon(1e-12));
  CHECK(st.step == 3);

  SUBCASE("no warmup applies the full rate immediately") {
    std::vector<double> q{0.0};
    std::vector<double> g{2.0};
    AdamState s2;
    adam_step(q, g, s2, lr, 0);
    CHECK(q[0] == doctest::Approx(-lr / (1.0 + 1e-8)).epsilon(1e-12));
  }

  SUBCASE("shape mismatches throw") {
    std::vector<double> q{0.0};
    std::vector<double> g{1.0, 2.0};
    AdamState s3;
    CHECK_THROWS_AS(adam_step(q, g, s3, lr, 0), std::invalid_argument);
  }
}

TEST_CASE("ema shadow stays inside the convex hull of past parameters") {
  CounterRng rng(41, 0);
  std::vector<double> shadow{0.0};
  double lo = 0.0, hi = 0.0;
  for (int step = 0; step < 200; ++step) {
    const double p = rng.normal();
    lo = std::min(lo, p);
    hi = std::max(hi, p);
    std::vector<double> cur{p};
    ema_update(shadow, cur, 0.98);
    CHECK(shadow[0] >= lo);
    CHECK(shadow[0] <= hi);
  }
}

TEST_CASE("jacobian probe is exact on a linear map and matches differences") {
  GaussianMixture mix = nine_gaussians();
  CldParams p;

  SUBCASE("single affine layer reports its squared Frobenius norm") {
    MixedScoreModel model;
    model.p = p;
    model.d = 2;
    model.net = Mlp::make({5, 2}, 0);
    // Input-major layout: weight (r, k) at index k*2 + r. Set the state
    // block to a known matrix and make the time column non-zero to prove it
    // is excluded from the norm.
    double fro2 = 0.0;
    CounterRng rng(51, 0);
    for (int k = 0; k < 4; ++k)
      for (int r = 0; r < 2; ++r) {
        const double w = rng.normal();
        model.net.params[std::size_t(k) * 2 + std::size_t(r)] = w;
        fro2 += w * w;
      }
    model.net.params[4 * 2 + 0] = 9.0;  // time column
    model.net.params[4 * 2 + 1] = -9.0;

    const std::vector<double> tg{0.05, 0.4, 0.9};
    const JfCurve c = jacobian_frobenius(model, mix, p, tg, 5, 7);
    for (double jf : c.jf) CHECK(jf == doctest::Approx(fro2).epsilon(1e-12));
  }

  SUBCASE("reverse-mode rows match finite-difference columns") {
    Mlp net = random_net({5, 6, 2}, 53);
    const std::int64_t n = 4;
    CounterRng rng(54, 0);
    std::vector<double> in(std::size_t(n) * 5);
    for (double& x : in) x = rng.normal();

    MlpTape tape;
    std::vector<double> out(std::size_t(n) * 2);
    mlp_forward_tape(net, in, n, tape, out);
    for (int j = 0; j < 2; ++j) {
      std::vector<double> ups(std::size_t(n) * 2, 0.0);
      for (std::int64_t i = 0; i < n; ++i) ups[std::size_t(i) * 2 + j] = 1.0;
      std::vector<double> din(std::size_t(n) * 5);
      mlp_backward(net, tape, ups, {}, din);

      const double h = 1e-5;
      for (std::int64_t i = 0; i < n; ++i)
        for (int k = 0; k < 5; ++k) {
          std::vector<double> ip(in), im(in);
          ip[std::size_t(i) * 5 + k] += h;
          im[std::size_t(i) * 5 + k] -= h;
          std::vector<double> op(out.size()), om(out.size());
          mlp_forward(net, ip, n, op);
          mlp_forward(net, im, n, om);
          const double fd = (op[std::size_t(i) * 2 + j] -
                             om[std::size_t(i) * 2 + j]) /
                            (2.0 * h);
          const double an = din[std::size_t(i) * 5 + k];
          const double scale = std::max({std::abs(fd), std::abs(an), 1e-3});
          CHECK(std::abs(an - fd) / scale < 1e-4);
        }
    }
  }
}

TEST_CASE("checkpoints roundtrip exactly and reject foreign files") {
  MixedScoreModel model;
  model.p = CldParams{};
  model.p.gamma0 = 0.7;
  model.d = 2;
  model.mode = ScoreMode::raw;
  model.conditioning = Conditioning::denoising;
  model.net = random_net({5, 9, 2}, 61);

  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "cldlab_net_roundtrip.bin").string();
  save_checkpoint(model, 12345, path);
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.step == 12345);
  CHECK(ck.model.d == 2);
  CHECK(ck.model.mode == ScoreMode::raw);
  CHECK(ck.model.conditioning == Conditioning::denoising);
  CHECK(ck.model.net.widths == model.net.widths);
  CHECK(ck.model.p.gamma0 == model.p.gamma0);
  CHECK(ck.model.p.beta == model.p.beta);
  REQUIRE(ck.model.net.params.size() == model.net.params.size());
  for (std::size_t k = 0; k < model.net.params.size(); ++k)
    CHECK(ck.model.net.params[k] == model.net.params[k]);

  SUBCASE("foreign magic is rejected") {
    const std::string bad = (dir / "cldlab_net_badmagic.bin").string();
    std::ofstream f(bad, std::ios::binary);
    f << "NOTANET0" << std::string(64, 'x');
    f.close();
    CHECK_THROWS_AS(load_checkpoint(bad), std::runtime_error);
    std::filesystem::remove(bad);
  }

  SUBCASE("truncated weight blobs are rejected") {
    const std::string cut = (dir / "cldlab_net_truncated.bin").string();
    std::filesystem::copy_file(path, cut,
                               std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(cut, std::filesystem::file_size(cut) - 16);
    CHECK_THROWS_AS(load_checkpoint(cut), std::runtime_error);
    std::filesystem::remove(cut);
  }

  std::filesystem::remove(path);
}

TEST_CASE("training validates its configuration up front") {
  GaussianMixture mix = nine_gaussians();
  MixedScoreModel model;
  model.p = CldParams{};
  model.d = 2;
  model.net = Mlp::make({5, 8, 2}, 71);

  TrainConfig cfg;
  cfg.n_iters = 1;

  SUBCASE("bad batch") {
    cfg.batch = 0;
    CHECK_THROWS_AS(train(model, mix, cfg), std::invalid_argument);
  }
  SUBCASE("bad cutoff") {
    cfg.t_cut = 2.0;
    CHECK_THROWS_AS(train(model, mix, cfg), std::invalid_argument);
  }
  SUBCASE("bad learning rate") {
    cfg.lr = -1.0;
    CHECK_THROWS_AS(train(model, mix, cfg), std::invalid_argument);
  }
  SUBCASE("bad EMA rate") {
    cfg.ema_rate = 1.0;
    CHECK_THROWS_AS(train(model, mix, cfg), std::invalid_argument);
  }
  SUBCASE("network/data shape mismatch") {
    model.net = Mlp::make({7, 8, 3}, 71);
    CHECK_THROWS_AS(train(model, mix, cfg), std::invalid_argument);
  }
  SUBCASE("missing custom weight function") {
    cfg.weighting.variant = WeightVariant::custom;
    CHECK_THROWS_AS(train(model, mix, cfg), std::invalid_argument);
  }
}

TEST_CASE("训练") {  // placeholder, replaced below
  CHECK(true);
}

TEST_SUITE_END();
