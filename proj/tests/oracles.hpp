// Independent reference implementations used only by the test suite.
// Everything here is deliberately written the "slow but obviously right" way
// (fixed-step RK4, central differences, Simpson panels, Welford statistics)
// so that library closed forms can be checked against machinery that shares
// no code with them.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracles {

using Vec = std::vector<double>;
using OdeRhs = std::function<void(double t, const Vec& y, Vec& dy)>;

// Classic fixed-step RK4.  n_steps large enough makes the O(h^4) error
// negligible next to the tolerances the tests assert.
inline Vec rk4(const OdeRhs& f, Vec y, double t0, double t1, int n_steps) {
    const double h = (t1 - t0) / n_steps;
    const std::size_t n = y.size();
    Vec k1(n), k2(n), k3(n), k4(n), tmp(n);
    double t = t0;
    for (int step = 0; step < n_steps; ++step) {
        f(t, y, k1);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
        f(t + 0.5 * h, tmp, k2);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
        f(t + 0.5 * h, tmp, k3);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
        f(t + h, tmp, k4);
        for (std::size_t i = 0; i < n; ++i)
            y[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        t = t0 + (step + 1) * h;
    }
    return y;
}

// Moment ODEs of the damped-oscillator diffusion, valid for ANY mass (not
// just critical damping).  State layout: (mu_x, mu_v, sxx, sxv, svv).
//
// forward (+1):  dx =  (beta/M) v dt
//                dv = -beta x dt - (Gamma beta / M) v dt + sqrt(2 Gamma beta) dW
// reverse-A (-1): the noise-carrying affine part of the reverse-time dynamics,
//                dx = -(beta/M) v dt
//                dv = +beta x dt - (Gamma beta / M) v dt + sqrt(2 Gamma beta) dW
//
// Only the x<->v coupling flips sign between the two; friction and noise are
// direction-independent.
struct MomentOde {
    double beta;
    double gamma_fric;
    double mass;
    double sign = +1.0;  // +1 forward, -1 reverse affine part

    void operator()(double /*t*/, const Vec& y, Vec& dy) const {
        const double bm = beta / mass;          // beta / M
        const double fric = gamma_fric * beta / mass;
        const double mu_x = y[0], mu_v = y[1];
        const double sxx = y[2], sxv = y[3], svv = y[4];
        dy.assign(5, 0.0);
        dy[0] = sign * bm * mu_v;
        dy[1] = -sign * beta * mu_x - fric * mu_v;
        dy[2] = 2.0 * sign * bm * sxv;
        dy[3] = sign * bm * svv - sign * beta * sxx - fric * sxv;
        dy[4] = -2.0 * sign * beta * sxv - 2.0 * fric * svv + 2.0 * gamma_fric * beta;
    }
};

// Central finite difference d/dt of a scalar-valued function of time.
inline double central_diff(const std::function<double(double)>& f, double t, double h) {
    return (f(t + h) - f(t - h)) / (2.0 * h);
}

// Composite Simpson quadrature of f over [ax,bx] x [ay,by] with n panels per
// axis (n must be even).
inline double simpson2d(const std::function<double(double, double)>& f,
                        double ax, double bx, double ay, double by, int n) {
    if (n % 2 != 0) throw std::invalid_argument("simpson2d: n must be even");
    const double hx = (bx - ax) / n, hy = (by - ay) / n;
    auto w = [n](int i) { return (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0); };
    double total = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = ax + i * hx;
        double row = 0.0;
        for (int j = 0; j <= n; ++j) row += w(j) * f(x, ay + j * hy);
        total += w(i) * row;
    }
    return total * hx * hy / 9.0;
}

// Streaming mean/variance (Welford).  se() is the standard error of the mean.
struct RunningStats {
    std::int64_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        ++n;
        const double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    double variance() const { return n > 1 ? m2 / (n - 1) : 0.0; }
    double sd() const { return std::sqrt(variance()); }
    double se() const { return n > 0 ? sd() / std::sqrt((double)n) : 0.0; }
};

}  // namespace oracles
