#pragma once

// Linear regression probes on residual-stream activations. A probe binds one
// scalar feature at one sequence position to the residual vector at one
// layer boundary, is fit by ridge regression (normal equations, Cholesky),
// and is scored by the Pearson correlation of its predictions.
//
// Position convention: bindings use the same 1-based position i = 1..T as
// gradient taps, so position i reads residual row b*T + (i-1) and feature
// index i-1. Fits always run in double regardless of the model's precision.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradsplit/io.hpp"
#include "gradsplit/model.hpp"
#include "gradsplit/tasks.hpp"

namespace gradsplit {

struct ProbeError : std::runtime_error {
    explicit ProbeError(const std::string& m) : std::runtime_error(m) {}
};

struct ProbeBinding {
    std::string feature;
    int position = 1;  // 1-based, like gradient taps
    int layer = 0;     // residual boundary k = 0..L
};

struct Probe {
    std::vector<double> w;
    double b = 0.0;
    ProbeBinding binding;
    double lambda = 0.0;  // the value actually used in the fit
    int train_rows = 0;
    bool lambda_degraded = false;  // true when rows < d/4 forced a larger lambda
};

// Design matrix for one (feature, position, layer) binding: rows are residual
// vectors of examples whose feature mask is set at that position.
struct ProbeDesign {
    ProbeBinding binding;
    int rows = 0;
    int cols = 0;
    std::vector<double> X;  // rows x cols, row-major
    std::vector<double> y;
};

// ---- residual collection ----

// Runs the model over the dataset and extracts, for every requested
// (position, layer) pair, the design matrix for `feature`. Examples whose
// mask is unset at a position are excluded from that position's design.
template <class Real>
std::vector<ProbeDesign> collect_residuals(const Model<Real>& model, const std::vector<Real>& flat,
                                           const Dataset& ds, const std::string& feature,
                                           const std::vector<int>& positions,
                                           const std::vector<int>& layers, int batch = 256) {
    if (ds.examples.empty()) throw ProbeError("collect_residuals: empty dataset");
    int T = int(ds.examples.front().tokens.size());
    int d = model.config().hidden_dim;
    for (int p : positions)
        if (p < 1 || p > T) throw ProbeError("collect_residuals: position out of range");
    for (int k : layers)
        if (k < 0 || k > model.config().n_layers)
            throw ProbeError("collect_residuals: layer out of range");

    std::vector<ProbeDesign> out;
    for (int k : layers)
        for (int p : positions) {
            ProbeDesign dsg;
            dsg.binding = {feature, p, k};
            dsg.cols = d;
            out.push_back(std::move(dsg));
        }

    int64_t N = int64_t(ds.examples.size());
    std::vector<int32_t> toks;
    for (int64_t at = 0; at < N; at += batch) {
        int B = int(std::min<int64_t>(batch, N - at));
        toks.assign(size_t(B) * size_t(T), 0);
        for (int b = 0; b < B; ++b) {
            const Example& ex = ds.examples[size_t(at + b)];
            if (int(ex.tokens.size()) != T)
                throw ProbeError("collect_residuals: ragged dataset");
            for (int t = 0; t < T; ++t) toks[size_t(b) * T + t] = ex.tokens[size_t(t)];
        }
        auto fw = model.forward(flat, toks, B, T);
        size_t di = 0;
        for (int k : layers) {
            const Matrix<Real>& r = fw.residuals.at(size_t(k));
            for (int p : positions) {
                ProbeDesign& dsg = out[di++];
                for (int b = 0; b < B; ++b) {
                    const Example& ex = ds.examples[size_t(at + b)];
                    auto fit = ex.features.find(feature);
                    if (fit == ex.features.end())
                        throw ProbeError("collect_residuals: example lacks feature " + feature);
                    auto mit = ex.masks.find(feature);
                    if (mit != ex.masks.end() && mit->second.at(size_t(p - 1)) == 0) continue;
                    const Real* row = &r.v[size_t(b) * T * size_t(d) + size_t(p - 1) * size_t(d)];
                    for (int c = 0; c < d; ++c) dsg.X.push_back(double(row[c]));
                    dsg.y.push_back(double(fit->second.at(size_t(p - 1))));
                    ++dsg.rows;
                }
            }
        }
    }
    for (const ProbeDesign& dsg : out)
        if (dsg.rows == 0)
            throw ProbeError("collect_residuals: feature " + feature +
                             " has an empty mask at position " +
                             std::to_string(dsg.binding.position));
    return out;
}

// ---- ridge fit ----

// Scale-aware default: 1e-3 * trace(Xc^T Xc) / d on the centered design.
inline constexpr double kLambdaTraceScale = 1e-3;
// Forced floor scale when a fit has fewer than d/4 rows.
inline constexpr double kSmallSampleTraceScale = 1e-1;

namespace detail {

// In-place Cholesky A = L L^T on a d x d SPD matrix (lower triangle).
// Returns false on a pivot at or below pivot_floor; roundoff can leave an
// exactly singular system with tiny positive pivots, so callers pass a floor
// relative to the diagonal scale.
inline bool cholesky(std::vector<double>& A, int d, double pivot_floor = 0.0) {
    for (int j = 0; j < d; ++j) {
        double diag = A[size_t(j) * d + j];
        for (int t = 0; t < j; ++t) diag -= A[size_t(j) * d + t] * A[size_t(j) * d + t];
        if (!(diag > pivot_floor)) return false;
        double lv = std::sqrt(diag);
        A[size_t(j) * d + j] = lv;
        for (int i = j + 1; i < d; ++i) {
            double s = A[size_t(i) * d + j];
            for (int t = 0; t < j; ++t) s -= A[size_t(i) * d + t] * A[size_t(j) * d + t];
            A[size_t(i) * d + j] = s / lv;
        }
    }
    return true;
}

inline void cholesky_solve(const std::vector<double>& L, int d, std::vector<double>& x) {
    // forward: L z = x
    for (int i = 0; i < d; ++i) {
        double s = x[size_t(i)];
        for (int t = 0; t < i; ++t) s -= L[size_t(i) * d + t] * x[size_t(t)];
        x[size_t(i)] = s / L[size_t(i) * d + i];
    }
    // backward: L^T w = z
    for (int i = d - 1; i >= 0; --i) {
        double s = x[size_t(i)];
        for (int t = i + 1; t < d; ++t) s -= L[size_t(t) * d + i] * x[size_t(t)];
        x[size_t(i)] = s / L[size_t(i) * d + i];
    }
}

}  // namespace detail

// Ridge regression with an unpenalized intercept: center X and y, solve
// (Xc^T Xc + lambda I) w = Xc^T yc by Cholesky, then b = mean(y) - mean(x).w.
// lambda < 0 requests the scale-aware default. Fits with fewer than d/4 rows
// are degraded to a larger lambda floor and flagged on the returned probe.
inline Probe fit_probe(const ProbeDesign& dsg, double lambda = -1.0) {
    int n = dsg.rows, d = dsg.cols;
    if (n < 1 || d < 1) throw ProbeError("fit_probe: empty design");

    std::vector<double> xbar(size_t(d), 0.0);
    double ybar = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = &dsg.X[size_t(i) * d];
        for (int c = 0; c < d; ++c) xbar[size_t(c)] += row[c];
        ybar += dsg.y[size_t(i)];
    }
    for (double& v : xbar) v /= n;
    ybar /= n;

    // A = Xc^T Xc (lower triangle filled), rhs = Xc^T yc
    std::vector<double> A(size_t(d) * size_t(d), 0.0);
    std::vector<double> rhs(size_t(d), 0.0);
    std::vector<double> xc(size_t(d), 0.0);
    for (int i = 0; i < n; ++i) {
        const double* row = &dsg.X[size_t(i) * d];
        double yc = dsg.y[size_t(i)] - ybar;
        for (int c = 0; c < d; ++c) xc[size_t(c)] = row[c] - xbar[size_t(c)];
        for (int r = 0; r < d; ++r) {
            rhs[size_t(r)] += xc[size_t(r)] * yc;
            for (int c = 0; c <= r; ++c) A[size_t(r) * d + c] += xc[size_t(r)] * xc[size_t(c)];
        }
    }
    double trace = 0.0;
    for (int c = 0; c < d; ++c) trace += A[size_t(c) * d + c];

    Probe probe;
    probe.binding = dsg.binding;
    probe.train_rows = n;
    double lam = lambda >= 0.0 ? lambda : kLambdaTraceScale * trace / d;
    if (n < d / 4) {
        double floor_lam = kSmallSampleTraceScale * trace / d;
        if (lam < floor_lam) {
            lam = floor_lam;
            probe.lambda_degraded = true;
        }
    }
    probe.lambda = lam;

    double dmax = 0.0, dmin = std::numeric_limits<double>::infinity();
    for (int c = 0; c < d; ++c) {
        double v = A[size_t(c) * d + c];
        dmax = std::max(dmax, v);
        dmin = std::min(dmin, v);
        A[size_t(c) * d + c] = v + lam;
    }
    if (!detail::cholesky(A, d, dmax * 1e-12)) {
        double cond = dmin > 0.0 ? dmax / dmin : std::numeric_limits<double>::infinity();
        throw ProbeError("fit_probe: singular normal equations at lambda=" +
                         std::to_string(lam) + " (diagonal condition estimate " +
                         std::to_string(cond) + ")");
    }
    detail::cholesky_solve(A, d, rhs);
    probe.w = std::move(rhs);
    probe.b = ybar;
    for (int c = 0; c < d; ++c) probe.b -= xbar[size_t(c)] * probe.w[size_t(c)];
    return probe;
}

// ---- evaluation ----

inline std::vector<double> probe_predictions(const Probe& probe, const ProbeDesign& dsg) {
    if (int(probe.w.size()) != dsg.cols) throw ProbeError("probe/design width mismatch");
    std::vector<double> pred(size_t(dsg.rows), 0.0);
    for (int i = 0; i < dsg.rows; ++i) {
        double s = probe.b;
        const double* row = &dsg.X[size_t(i) * dsg.cols];
        for (int c = 0; c < dsg.cols; ++c) s += row[c] * probe.w[size_t(c)];
        pred[size_t(i)] = s;
    }
    return pred;
}

// Pearson correlation; undefined (not zero) when either side has no variance.
struct PearsonResult {
    bool defined = false;
    double r = 0.0;
};

inline PearsonResult pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ProbeError("pearson: length mismatch");
    size_t n = a.size();
    if (n < 2) throw ProbeError("pearson: needs at least 2 rows");
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(n);
    mb /= double(n);
    double saa = 0, sbb = 0, sab = 0;
    for (size_t i = 0; i < n; ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    PearsonResult res;
    if (saa <= 0.0 || sbb <= 0.0) return res;
    res.defined = true;
    res.r = sab / std::sqrt(saa * sbb);
    return res;
}

inline PearsonResult eval_probe(const Probe& probe, const ProbeDesign& dsg) {
    return pearson(probe_predictions(probe, dsg), dsg.y);
}

// ---- bundle IO ----

// One file: magic, version, JSON header, then per probe d weights + intercept
// as little-endian f64 in header order.
inline constexpr uint32_t kProbeBundleMagic = 0x42505347;  // "GSPB"
inline constexpr uint32_t kProbeBundleVersion = 1;

inline void save_probe_bundle(const std::string& path, const std::vector<Probe>& probes) {
    nlohmann::json header;
    header["probes"] = nlohmann::json::array();
    for (const Probe& p : probes) {
        header["probes"].push_back({{"feature", p.binding.feature},
                                    {"position", p.binding.position},
                                    {"layer", p.binding.layer},
                                    {"lambda", p.lambda},
                                    {"train_rows", p.train_rows},
                                    {"lambda_degraded", p.lambda_degraded},
                                    {"dim", p.w.size()}});
    }
    std::string htext = header.dump();
    ByteWriter bw;
    bw.u32(kProbeBundleMagic);
    bw.u32(kProbeBundleVersion);
    bw.u32(uint32_t(htext.size()));
    bw.raw(htext.data(), htext.size());
    for (const Probe& p : probes) {
        for (double v : p.w) bw.f64(v);
        bw.f64(p.b);
    }
    bw.save(path);
}

inline std::vector<Probe> load_probe_bundle(const std::string& path) {
    ByteReader br = ByteReader::load(path);
    if (br.u32() != kProbeBundleMagic) throw ProbeError("probe bundle: bad magic in " + path);
    if (br.u32() != kProbeBundleVersion) throw ProbeError("probe bundle: unsupported version");
    uint32_t hlen = br.u32();
    std::string htext(hlen, '\0');
    br.raw(htext.data(), hlen);
    nlohmann::json header = nlohmann::json::parse(htext);
    std::vector<Probe> probes;
    for (const auto& j : header.at("probes")) {
        Probe p;
        p.binding.feature = j.at("feature").get<std::string>();
        p.binding.position = j.at("position").get<int>();
        p.binding.layer = j.at("layer").get<int>();
        p.lambda = j.at("lambda").get<double>();
        p.train_rows = j.at("train_rows").get<int>();
        p.lambda_degraded = j.at("lambda_degraded").get<bool>();
        size_t dim = j.at("dim").get<size_t>();
        p.w.resize(dim);
        for (size_t c = 0; c < dim; ++c) p.w[c] = br.f64();
        p.b = br.f64();
        probes.push_back(std::move(p));
    }
    if (!br.done()) throw ProbeError("probe bundle: trailing bytes in " + path);
    return probes;
}

}  // namespace gradsplit
