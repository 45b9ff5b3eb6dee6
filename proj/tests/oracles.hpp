#pragma once
// Independent reference implementations used by the test suite. Everything
// here is deliberately written the slow, obvious way and must not share code
// with the library paths it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "gradsplit/rng.hpp"

namespace oracle {

// Full central finite-difference gradient.
inline std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> point,
    double step) {
    std::vector<double> g(point.size());
    for (size_t i = 0; i < point.size(); ++i) {
        double orig = point[i];
        point[i] = orig + step;
        double up = f(point);
        point[i] = orig - step;
        double dn = f(point);
        point[i] = orig;
        g[i] = (up - dn) / (2 * step);
    }
    return g;
}

// Directional derivative via central differences along dir.
inline double fd_directional(const std::function<double(const std::vector<double>&)>& f,
                             const std::vector<double>& point, const std::vector<double>& dir,
                             double step) {
    if (point.size() != dir.size()) throw std::invalid_argument("fd_directional: size mismatch");
    std::vector<double> up = point, dn = point;
    for (size_t i = 0; i < point.size(); ++i) {
        up[i] += step * dir[i];
        dn[i] -= step * dir[i];
    }
    return (f(up) - f(dn)) / (2 * step);
}

inline std::vector<double> random_vec(size_t n, uint64_t seed, double scale = 1.0) {
    gradsplit::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

// ---------------------------------------------------------------------------
// Textbook Adam (Kingma & Ba), one first moment over the full gradient,
// bias-corrected step returned as a parameter delta.

struct AdamOracle {
    std::vector<double> m, v;
    long t = 0;
    explicit AdamOracle(size_t n) : m(n, 0.0), v(n, 0.0) {}

    std::vector<double> step(const std::vector<double>& g, double lr, double b1, double b2,
                             double eps) {
        if (g.size() != m.size()) throw std::invalid_argument("AdamOracle: size mismatch");
        ++t;
        std::vector<double> delta(g.size());
        double c1 = 1.0 - std::pow(b1, double(t));
        double c2 = 1.0 - std::pow(b2, double(t));
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            double mhat = m[i] / c1;
            double vhat = v[i] / c2;
            delta[i] = -lr * mhat / (std::sqrt(vhat) + eps);
        }
        return delta;
    }
};

// ---------------------------------------------------------------------------
// Naive Othello reference: flat 64-cell array, per-square 8-direction ray
// scans. Squares are rank*8 + file, file A..H, rank 1..8. 0 empty, 1 black,
// 2 white.

using NaiveBoard = std::array<int8_t, 64>;

inline NaiveBoard naive_initial() {
    NaiveBoard b{};
    b[3 * 8 + 3] = 2;  // D4 white
    b[4 * 8 + 4] = 2;  // E5 white
    b[3 * 8 + 4] = 1;  // E4 black
    b[4 * 8 + 3] = 1;  // D5 black
    return b;
}

// Stones the mover would flip by playing sq; empty when sq is not legal.
inline std::vector<int> naive_flips(const NaiveBoard& b, int mover, int sq) {
    static const int kDirs[8][2] = {{0, 1},  {0, -1}, {1, 0},  {-1, 0},
                                    {1, 1},  {1, -1}, {-1, 1}, {-1, -1}};
    std::vector<int> flips;
    if (b[size_t(sq)] != 0) return flips;
    int opp = 3 - mover;
    int r0 = sq / 8, f0 = sq % 8;
    for (auto& d : kDirs) {
        std::vector<int> run;
        int r = r0 + d[0], f = f0 + d[1];
        while (r >= 0 && r < 8 && f >= 0 && f < 8 && b[size_t(r * 8 + f)] == opp) {
            run.push_back(r * 8 + f);
            r += d[0];
            f += d[1];
        }
        if (!run.empty() && r >= 0 && r < 8 && f >= 0 && f < 8 && b[size_t(r * 8 + f)] == mover)
            flips.insert(flips.end(), run.begin(), run.end());
    }
    return flips;
}

inline std::vector<int> naive_legal(const NaiveBoard& b, int mover) {
    std::vector<int> out;
    for (int sq = 0; sq < 64; ++sq)
        if (!naive_flips(b, mover, sq).empty()) out.push_back(sq);
    return out;
}

// Ridge regression by plain gradient descent on ||Xw + b - y||^2 + l*||w||^2
// with the intercept unpenalized, run to (near) stationarity. Step size from
// a power-iteration bound on the augmented Gram matrix.
struct RidgeGdResult {
    std::vector<double> w;
    double b = 0.0;
    int iters = 0;
};

inline RidgeGdResult ridge_gd(const std::vector<double>& X, int n, int d,
                              const std::vector<double>& y, double lambda,
                              int max_iters = 2000000, double tol = 1e-12) {
    // Gram of [X 1] (d+1 square) for the Lipschitz bound.
    int m = d + 1;
    std::vector<double> G(size_t(m) * m, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* row = &X[size_t(i) * d];
        for (int r = 0; r < m; ++r) {
            double xr = r < d ? row[r] : 1.0;
            for (int c = 0; c < m; ++c) G[size_t(r) * m + c] += xr * (c < d ? row[c] : 1.0);
        }
    }
    std::vector<double> v(size_t(m), 1.0), Gv(size_t(m), 0.0);
    double eig = 0.0;
    for (int it = 0; it < 200; ++it) {
        double norm = 0.0;
        for (int r = 0; r < m; ++r) {
            double s = 0.0;
            for (int c = 0; c < m; ++c) s += G[size_t(r) * m + c] * v[size_t(c)];
            Gv[size_t(r)] = s;
            norm += s * s;
        }
        norm = std::sqrt(norm);
        eig = norm;
        for (int r = 0; r < m; ++r) v[size_t(r)] = Gv[size_t(r)] / norm;
    }
    double L = 2.0 * (eig + lambda);
    double lr = 1.0 / L;

    RidgeGdResult res;
    res.w.assign(size_t(d), 0.0);
    std::vector<double> grad_w(size_t(d), 0.0);
    for (res.iters = 0; res.iters < max_iters; ++res.iters) {
        std::fill(grad_w.begin(), grad_w.end(), 0.0);
        double grad_b = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* row = &X[size_t(i) * d];
            double e = res.b - y[size_t(i)];
            for (int c = 0; c < d; ++c) e += row[c] * res.w[size_t(c)];
            for (int c = 0; c < d; ++c) grad_w[size_t(c)] += 2.0 * e * row[c];
            grad_b += 2.0 * e;
        }
        double gmax = std::abs(grad_b);
        for (int c = 0; c < d; ++c) {
            grad_w[size_t(c)] += 2.0 * lambda * res.w[size_t(c)];
            gmax = std::max(gmax, std::abs(grad_w[size_t(c)]));
        }
        if (gmax < tol) break;
        for (int c = 0; c < d; ++c) res.w[size_t(c)] -= lr * grad_w[size_t(c)];
        res.b -= lr * grad_b;
    }
    return res;
}

// move 64 = pass, allowed only when nothing is legal.
inline NaiveBoard naive_apply(const NaiveBoard& b, int mover, int move) {
    if (move == 64) {
        if (!naive_legal(b, mover).empty())
            throw std::logic_error("naive_apply: pass with legal moves");
        return b;
    }
    auto flips = naive_flips(b, mover, move);
    if (flips.empty()) throw std::logic_error("naive_apply: illegal move");
    NaiveBoard out = b;
    out[size_t(move)] = int8_t(mover);
    for (int sq : flips) out[size_t(sq)] = int8_t(mover);
    return out;
}

}  // namespace oracle
