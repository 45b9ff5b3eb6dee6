#pragma once
// Small statistics kit: Pearson/Spearman correlation, bootstrap confidence
// intervals, one-sided sign test. Correlations on degenerate (zero-variance)
// input are undefined and reported as absent rather than coerced to zero.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "rng.hpp"

namespace gradsplit {

inline std::optional<double> pearson(const std::vector<double>& a,
                                     const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
    size_t n = a.size();
    if (n < 2) return std::nullopt;
    double ma = std::accumulate(a.begin(), a.end(), 0.0) / double(n);
    double mb = std::accumulate(b.begin(), b.end(), 0.0) / double(n);
    double saa = 0, sbb = 0, sab = 0;
    for (size_t i = 0; i < n; ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return sab / std::sqrt(saa * sbb);
}

// Ranks with ties averaged (fractional ranks, 1-based).
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
    size_t n = v.size();
    std::vector<size_t> ord(n);
    std::iota(ord.begin(), ord.end(), size_t(0));
    std::stable_sort(ord.begin(), ord.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[ord[j + 1]] == v[ord[i]]) ++j;
        double r = 0.5 * double(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) rank[ord[k]] = r;
        i = j + 1;
    }
    return rank;
}

inline std::optional<double> spearman(const std::vector<double>& a,
                                      const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
    if (a.size() < 2) return std::nullopt;
    return pearson(fractional_ranks(a), fractional_ranks(b));
}

struct BootstrapCi {
    double mean = 0, lo = 0, hi = 0;
    bool degenerate = false;  // fewer than 2 observations: CI collapses to the point
};

// Percentile bootstrap CI of the mean. Deterministic given (seed, values).
inline BootstrapCi bootstrap_ci_mean(const std::vector<double>& v, uint64_t seed,
                                     int resamples = 2000, double level = 0.95) {
    if (v.empty()) throw std::invalid_argument("bootstrap_ci_mean: empty sample");
    BootstrapCi out;
    out.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    if (v.size() < 2) {
        out.lo = out.hi = out.mean;
        out.degenerate = true;
        return out;
    }
    Rng rng = Rng::stream(seed, "bootstrap");
    std::vector<double> means(static_cast<size_t>(resamples));
    for (int r = 0; r < resamples; ++r) {
        double s = 0;
        for (size_t i = 0; i < v.size(); ++i) s += v[size_t(rng.uniform_int(int64_t(v.size())))];
        means[size_t(r)] = s / double(v.size());
    }
    std::sort(means.begin(), means.end());
    double alpha = (1.0 - level) / 2.0;
    auto pick = [&](double q) {
        double x = q * double(resamples - 1);
        size_t i = size_t(x);
        double f = x - double(i);
        return i + 1 < means.size() ? means[i] * (1 - f) + means[i + 1] * f : means[i];
    };
    out.lo = pick(alpha);
    out.hi = pick(1.0 - alpha);
    return out;
}

// One-sided sign test: p-value for observing >= wins successes in n fair coin
// flips (ties must be excluded by the caller). Exact binomial tail.
inline double sign_test_p(int wins, int n) {
    if (n < 0 || wins < 0 || wins > n) throw std::invalid_argument("sign_test_p: bad counts");
    if (n == 0) return 1.0;
    // log C(n,k) via lgamma for numerical safety at larger n
    double p = 0;
    for (int k = wins; k <= n; ++k) {
        double logc = std::lgamma(double(n) + 1) - std::lgamma(double(k) + 1) -
                      std::lgamma(double(n - k) + 1);
        p += std::exp(logc - double(n) * std::log(2.0));
    }
    return std::min(1.0, p);
}

}  // namespace gradsplit
