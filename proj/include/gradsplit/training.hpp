#pragma once
// Next-token-prediction training: per-position cross-entropy, SGD and Adam,
// and the component-split Adam used when replaying a run with decomposed
// gradients. All loss scalars are normalized by batch * (T-1), so the sum of
// per-position loss nodes equals the training loss node and gradient
// components keep the same scale as the optimizer's input.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradsplit/model.hpp"
#include "gradsplit/tasks.hpp"

namespace gradsplit {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    enum class Opt { sgd, adam };
    Opt optimizer = Opt::adam;
    double lr = 1e-3;
    int batch_size = 256;
    int steps = 3000;
    uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, eps_adam = 1e-8;
    bool myopic = false;
    std::optional<int> untie_at;
    int ckpt_every = 0;  // 0: checkpoint only at init and the final step
    int eval_every = 250;

    void validate() const {
        if (lr <= 0) throw TrainError("config: lr must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw TrainError("config: betas must lie in [0, 1)");
        if (batch_size < 1 || steps < 0) throw TrainError("config: bad batch/steps");
        if (eval_every < 1 || ckpt_every < 0) throw TrainError("config: bad cadence");
        if (untie_at && *untie_at < 1) throw TrainError("config: bad untie position");
    }
};

inline std::string mode_string(bool myopic, std::optional<int> untie_at) {
    std::string s = myopic ? "myopic" : "tied";
    if (untie_at) s += "+untied@" + std::to_string(*untie_at);
    return s;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"optimizer", c.optimizer == TrainConfig::Opt::sgd ? "sgd" : "adam"},
                       {"lr", c.lr},
                       {"batch_size", c.batch_size},
                       {"steps", c.steps},
                       {"seed", c.seed},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"eps_adam", c.eps_adam},
                       {"myopic", c.myopic},
                       {"ckpt_every", c.ckpt_every},
                       {"eval_every", c.eval_every}};
    if (c.untie_at)
        j["untie_at"] = *c.untie_at;
    else
        j["untie_at"] = nullptr;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    std::string opt = j.value("optimizer", "adam");
    if (opt != "sgd" && opt != "adam") throw TrainError("config: unknown optimizer " + opt);
    c.optimizer = opt == "sgd" ? TrainConfig::Opt::sgd : TrainConfig::Opt::adam;
    c.lr = j.value("lr", 1e-3);
    c.batch_size = j.value("batch_size", 256);
    c.steps = j.value("steps", 3000);
    c.seed = j.value("seed", uint64_t(0));
    c.beta1 = j.value("beta1", 0.9);
    c.beta2 = j.value("beta2", 0.999);
    c.eps_adam = j.value("eps_adam", 1e-8);
    c.myopic = j.value("myopic", false);
    c.ckpt_every = j.value("ckpt_every", 0);
    c.eval_every = j.value("eval_every", 250);
    if (j.contains("untie_at") && !j.at("untie_at").is_null())
        c.untie_at = j.at("untie_at").get<int>();
    else
        c.untie_at.reset();
}

// ---------------------------------------------------------------------------
// Loss. Value-level for metrics, node-level for training and attribution.

struct NtpLoss {
    std::vector<double> per_position;  // mean loss at positions 1..T-1 (predicting 2..T)
    double total = 0;                  // mean over batch and positions
};

template <class Real>
NtpLoss ntp_loss(const Matrix<Real>& logits, const std::vector<int32_t>& tokens, int B, int T) {
    if (T < 2) throw TrainError("ntp_loss: need sequences of length >= 2");
    if (logits.rows != int64_t(B) * T || int64_t(tokens.size()) != int64_t(B) * T)
        throw TrainError("ntp_loss: shape mismatch");
    int V = int(logits.cols);
    NtpLoss out;
    out.per_position.assign(size_t(T - 1), 0.0);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t + 1 < T; ++t) {
            const Real* row = logits.v.data() + (size_t(b) * T + size_t(t)) * size_t(V);
            int32_t target = tokens[size_t(b) * T + size_t(t) + 1];
            double mx = double(row[0]);
            for (int v = 1; v < V; ++v) mx = std::max(mx, double(row[v]));
            double lse = 0;
            for (int v = 0; v < V; ++v) lse += std::exp(double(row[v]) - mx);
            lse = mx + std::log(lse);
            out.per_position[size_t(t)] += lse - double(row[target]);
        }
    }
    for (double& x : out.per_position) x /= double(B);
    for (double x : out.per_position) out.total += x;
    out.total /= double(T - 1);
    return out;
}

// Fraction of argmax hits at each position 1..T-1.
template <class Real>
std::vector<double> per_position_accuracy(const Matrix<Real>& logits,
                                          const std::vector<int32_t>& tokens, int B, int T) {
    int V = int(logits.cols);
    std::vector<double> acc(size_t(T - 1), 0.0);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t + 1 < T; ++t) {
            const Real* row = logits.v.data() + (size_t(b) * T + size_t(t)) * size_t(V);
            int best = 0;
            for (int v = 1; v < V; ++v)
                if (row[v] > row[best]) best = v;
            if (best == tokens[size_t(b) * T + size_t(t) + 1]) acc[size_t(t)] += 1.0;
        }
    }
    for (double& x : acc) x /= double(B);
    return acc;
}

// Graph-side loss. xent holds one cross-entropy per (example, position) row;
// total is their mean over batch * (T-1). position_loss_node slices out one
// position with the same normalization, so the T-1 slices sum to total.
struct LossNodes {
    int xent = -1;
    int total = -1;
};

template <class Real>
LossNodes ntp_loss_nodes(Tape<Real>& tape, int logits_node, const std::vector<int32_t>& tokens,
                         int B, int T) {
    if (T < 2) throw TrainError("ntp_loss_nodes: need sequences of length >= 2");
    std::vector<int32_t> targets(size_t(B) * size_t(T), -1);
    std::vector<Real> w(size_t(B) * size_t(T), Real(0));
    Real norm = Real(1.0 / (double(B) * double(T - 1)));
    for (int b = 0; b < B; ++b)
        for (int t = 0; t + 1 < T; ++t) {
            targets[size_t(b) * T + size_t(t)] = tokens[size_t(b) * T + size_t(t) + 1];
            w[size_t(b) * T + size_t(t)] = norm;
        }
    LossNodes out;
    out.xent = tape.xent_rows(logits_node, targets);
    out.total = tape.weighted_sum(out.xent, w);
    return out;
}

template <class Real>
int position_loss_node(Tape<Real>& tape, const LossNodes& ln, int B, int T, int position) {
    if (position < 1 || position >= T) throw TrainError("position_loss_node: out of range");
    std::vector<Real> w(size_t(B) * size_t(T), Real(0));
    Real norm = Real(1.0 / (double(B) * double(T - 1)));
    for (int b = 0; b < B; ++b) w[size_t(b) * T + size_t(position - 1)] = norm;
    return tape.weighted_sum(ln.xent, w);
}

// ---------------------------------------------------------------------------
// Optimizers.

template <class Real>
void sgd_step(std::vector<Real>& params, const GradVector<Real>& g, Real lr) {
    if (params.size() != g.flat.size()) throw TrainError("sgd_step: size mismatch");
    for (size_t i = 0; i < params.size(); ++i) params[i] -= lr * g.flat[i];
}

template <class Real>
struct AdamState {
    std::vector<Real> m, v;
    long t = 0;
    explicit AdamState(size_t n) : m(n, Real(0)), v(n, Real(0)) {}
};

namespace detail {

// Shared per-element Adam arithmetic. Both optimizer variants route through
// these, so a component step whose other components are zero reproduces the
// plain step bit-for-bit regardless of how either loop is compiled.
template <class Real>
[[gnu::noinline]] Real adam_ema(Real beta, Real prev, Real x) {
    return beta * prev + (Real(1) - beta) * x;
}

template <class Real>
[[gnu::noinline]] Real adam_delta(Real m, Real v, Real lr, Real c1, Real c2, Real eps) {
    Real alpha = lr / (std::sqrt(v / c2) + eps);
    return -alpha * (m / c1);
}

}  // namespace detail

template <class Real>
void adam_step(std::vector<Real>& params, AdamState<Real>& st, const GradVector<Real>& g,
               Real lr, Real b1, Real b2, Real eps) {
    if (params.size() != st.m.size() || params.size() != g.flat.size())
        throw TrainError("adam_step: size mismatch");
    ++st.t;
    Real c1 = Real(1) - Real(std::pow(double(b1), double(st.t)));
    Real c2 = Real(1) - Real(std::pow(double(b2), double(st.t)));
    for (size_t i = 0; i < params.size(); ++i) {
        Real gi = g.flat[i];
        st.m[i] = detail::adam_ema(b1, st.m[i], gi);
        st.v[i] = detail::adam_ema(b2, st.v[i], gi * gi);
        params[i] += detail::adam_delta(st.m[i], st.v[i], lr, c1, c2, eps);
    }
}

// ---------------------------------------------------------------------------
// Component-split Adam. The second moment (and with it the adaptive rate
// alpha) always comes from the full gradient; each component keeps its own
// first moment, updated linearly, so the three returned steps sum to the
// standard Adam step up to rounding order.

template <class Real>
struct GradientComponents {
    GradVector<Real> direct, precached, shared;

    GradVector<Real> sum() const {
        GradVector<Real> s = direct;
        s.add_scaled(precached, Real(1));
        s.add_scaled(shared, Real(1));
        return s;
    }
};

template <class Real>
struct AdamComponentState {
    std::vector<Real> v;
    std::vector<Real> m_direct, m_precached, m_shared;
    long t = 0;
    explicit AdamComponentState(size_t n)
        : v(n, Real(0)), m_direct(n, Real(0)), m_precached(n, Real(0)), m_shared(n, Real(0)) {}
};

template <class Real>
struct ComponentStep {
    GradVector<Real> direct, precached, shared;  // parameter-space deltas, summing to the update
};

template <class Real>
ComponentStep<Real> adam_component_step(std::vector<Real>& params, AdamComponentState<Real>& st,
                                        const GradientComponents<Real>& comps, Real lr, Real b1,
                                        Real b2, Real eps) {
    size_t n = params.size();
    if (st.v.size() != n || comps.direct.flat.size() != n || comps.precached.flat.size() != n ||
        comps.shared.flat.size() != n)
        throw TrainError("adam_component_step: size mismatch");
    ++st.t;
    Real c1 = Real(1) - Real(std::pow(double(b1), double(st.t)));
    Real c2 = Real(1) - Real(std::pow(double(b2), double(st.t)));
    ComponentStep<Real> out;
    out.direct = GradVector<Real>(comps.direct.index);
    out.precached = GradVector<Real>(comps.precached.index);
    out.shared = GradVector<Real>(comps.shared.index);
    for (size_t i = 0; i < n; ++i) {
        Real gd = comps.direct.flat[i], gp = comps.precached.flat[i], gs = comps.shared.flat[i];
        Real gfull = gd + gp + gs;
        st.v[i] = detail::adam_ema(b2, st.v[i], gfull * gfull);
        st.m_direct[i] = detail::adam_ema(b1, st.m_direct[i], gd);
        st.m_precached[i] = detail::adam_ema(b1, st.m_precached[i], gp);
        st.m_shared[i] = detail::adam_ema(b1, st.m_shared[i], gs);
        Real sd = detail::adam_delta(st.m_direct[i], st.v[i], lr, c1, c2, eps);
        Real sp = detail::adam_delta(st.m_precached[i], st.v[i], lr, c1, c2, eps);
        Real ss = detail::adam_delta(st.m_shared[i], st.v[i], lr, c1, c2, eps);
        out.direct.flat[i] = sd;
        out.precached.flat[i] = sp;
        out.shared.flat[i] = ss;
        params[i] += sd + sp + ss;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop. Deterministic: batches are consecutive dataset slices
// (wrapping around when the data runs out), the model initializes from the
// config seed, and no other randomness enters.

struct MetricRecord {
    int step = 0;
    double total_loss = 0;
    std::vector<double> per_position_accuracy;
    std::string mode;
};

inline void to_json(nlohmann::json& j, const MetricRecord& r) {
    j = nlohmann::json{{"step", r.step},
                       {"total_loss", r.total_loss},
                       {"per_position_accuracy", r.per_position_accuracy},
                       {"mode", r.mode}};
}

inline int dataset_seq_len(const Dataset& ds) {
    if (ds.examples.empty()) throw TrainError("dataset is empty");
    size_t T = ds.examples[0].tokens.size();
    for (const Example& ex : ds.examples)
        if (ex.tokens.size() != T) throw TrainError("dataset sequences must share one length");
    return int(T);
}

inline std::vector<int32_t> batch_tokens(const Dataset& ds, int64_t start, int B, int T) {
    std::vector<int32_t> out(size_t(B) * size_t(T));
    int64_t N = int64_t(ds.examples.size());
    for (int b = 0; b < B; ++b) {
        const Example& ex = ds.examples[size_t((start + b) % N)];
        std::copy(ex.tokens.begin(), ex.tokens.end(), out.begin() + size_t(b) * size_t(T));
    }
    return out;
}

template <class Real>
MetricRecord evaluate_model(const Model<Real>& model, const std::vector<Real>& flat,
                            const Dataset& eval, int step, const std::string& mode,
                            int eval_batch = 256) {
    int T = dataset_seq_len(eval);
    int64_t N = int64_t(eval.examples.size());
    MetricRecord rec;
    rec.step = step;
    rec.mode = mode;
    rec.per_position_accuracy.assign(size_t(T - 1), 0.0);
    double loss_sum = 0;
    for (int64_t at = 0; at < N; at += eval_batch) {
        int B = int(std::min<int64_t>(eval_batch, N - at));
        std::vector<int32_t> toks = batch_tokens(eval, at, B, T);
        auto fw = model.forward(flat, toks, B, T);
        NtpLoss l = ntp_loss(fw.logits, toks, B, T);
        loss_sum += l.total * B;
        std::vector<double> acc = per_position_accuracy(fw.logits, toks, B, T);
        for (size_t j = 0; j < acc.size(); ++j)
            rec.per_position_accuracy[j] += acc[j] * B;
    }
    rec.total_loss = loss_sum / double(N);
    for (double& x : rec.per_position_accuracy) x /= double(N);
    return rec;
}

template <class Real>
struct TrainRun {
    ModelConfig arch;
    GradVector<Real> params;
    std::vector<MetricRecord> metrics;
    std::vector<std::string> checkpoints;
    bool data_cycled = false;
};

inline std::string ckpt_name(int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%07d.bin", step);
    return buf;
}

template <class Real>
TrainRun<Real> train_run(ModelConfig arch, const TrainConfig& tc, const Dataset& train,
                         const Dataset& eval, const std::string& out_dir) {
    tc.validate();
    arch.myopic = tc.myopic;
    arch.untie_at = tc.untie_at;
    int T = dataset_seq_len(train);
    if (T > arch.max_seq_len) throw TrainError("training sequences exceed max_seq_len");
    if (tc.untie_at && *tc.untie_at >= T) throw TrainError("untie position outside sequence");
    arch.validate();

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    Model<Real> model(arch);
    auto idx = model.index();
    GradVector<Real> params = model.init_params(tc.seed);

    TrainRun<Real> run;
    run.arch = arch;
    run.data_cycled = int64_t(tc.steps) * tc.batch_size > int64_t(train.examples.size());
    std::string mode = mode_string(tc.myopic, tc.untie_at);

    auto save_ckpt = [&](int step) {
        std::string path = out_dir + "/" + ckpt_name(step);
        save_checkpoint(path, arch, *idx, params.flat);
        run.checkpoints.push_back(path);
    };
    save_ckpt(0);
    run.metrics.push_back(evaluate_model(model, params.flat, eval, 0, mode));

    AdamState<Real> adam(size_t(idx->total));
    GradVector<Real> grad(idx);
    Tape<Real> tape(idx);
    for (int step = 1; step <= tc.steps; ++step) {
        std::vector<int32_t> toks =
            batch_tokens(train, int64_t(step - 1) * tc.batch_size, tc.batch_size, T);
        tape.reset();
        auto g = model.build(tape, params.flat.data(), toks, tc.batch_size, T);
        LossNodes ln = ntp_loss_nodes(tape, g.logits, toks, tc.batch_size, T);
        tape.backward(ln.total);
        tape.extract_grad(grad);
        if (tc.optimizer == TrainConfig::Opt::sgd)
            sgd_step(params.flat, grad, Real(tc.lr));
        else
            adam_step(params.flat, adam, grad, Real(tc.lr), Real(tc.beta1), Real(tc.beta2),
                      Real(tc.eps_adam));

        bool last = step == tc.steps;
        if (step % tc.eval_every == 0 || last)
            run.metrics.push_back(evaluate_model(model, params.flat, eval, step, mode));
        if ((tc.ckpt_every > 0 && step % tc.ckpt_every == 0) || last) save_ckpt(step);
    }

    std::string lines;
    for (const MetricRecord& r : run.metrics) {
        nlohmann::json j = r;
        lines += j.dump();
        lines += "\n";
    }
    write_text_file(out_dir + "/metrics.jsonl", lines);
    run.params = std::move(params);
    return run;
}

}  // namespace gradsplit
