#pragma once
// Pre-norm causal Transformer over the autodiff tape: token + learned
// positional embeddings, attention/MLP blocks, final layer norm, untied
// unembedding. Exposes every residual-stream boundary r^k (k = 0..L, r^0 the
// embedding output, r^k the output of block k) as tape nodes so gradient
// sweeps can tap or sever them.
//
// Forward variants (all value-identical to the plain forward):
//  - stop-gradient tap: residual rows at one (position, layer) routed through
//    detach, severing every gradient path into earlier computation.
//  - myopic: attention ops flagged so backward skips cross-position K/V flow.
//  - prefix-untied: two parameter sets; positions 1..m run on the first set,
//    later positions on the second, attending to K/V built from the first
//    set's residuals for rows <= m.
//  - intervened: a fixed vector added to residual rows before block k+1.

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gradsplit {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int hidden_dim = 128;
    int ffn_dim = 512;
    int vocab_size = 3;
    int max_seq_len = 20;
    bool myopic = false;
    std::optional<int> untie_at;  // positions 1..m ride the first parameter set

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || hidden_dim < 1 || ffn_dim < 1 || vocab_size < 2 ||
            max_seq_len < 1)
            throw ModelError("config: all dimensions must be positive (vocab >= 2)");
        if (hidden_dim % n_heads != 0)
            throw ModelError("config: hidden_dim must be divisible by n_heads");
        if (untie_at && (*untie_at < 1 || *untie_at >= max_seq_len))
            throw ModelError("config: untie position must lie inside the sequence");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                       {"hidden_dim", c.hidden_dim}, {"ffn_dim", c.ffn_dim},
                       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                       {"myopic", c.myopic}};
    if (c.untie_at)
        j["untie_at"] = *c.untie_at;
    else
        j["untie_at"] = nullptr;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("hidden_dim").get_to(c.hidden_dim);
    j.at("ffn_dim").get_to(c.ffn_dim);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    c.myopic = j.value("myopic", false);
    if (j.contains("untie_at") && !j.at("untie_at").is_null())
        c.untie_at = j.at("untie_at").get<int>();
    else
        c.untie_at.reset();
}

template <class Real>
class Model {
  public:
    struct BlockIds {
        int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        int ln2_g, ln2_b, w1, b1, w2, b2;
    };
    struct SetIds {
        int tok_emb, pos_emb;
        std::vector<BlockIds> blocks;
        int lnf_g, lnf_b, unembed;
    };

    struct Graph {
        int logits = -1;             // (B*T, V)
        std::vector<int> residuals;  // node per boundary k = 0..L, (B*T, d)
        int B = 0, T = 0;
    };

    struct BuildOpts {
        // Measurement graphs want the true Jacobian of the forward function;
        // training graphs follow the config's gradient-mode flags.
        bool measurement = false;
        std::optional<std::pair<int, int>> sg_tap;  // (position i, layer k), i 1-based
        int delta_layer = -1;
        std::vector<int> delta_positions;  // 1-based
        const std::vector<Real>* delta = nullptr;
    };

    struct ForwardResult {
        Matrix<Real> logits;
        std::vector<Matrix<Real>> residuals;
    };

    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        auto idx = std::make_shared<ParamIndex>();
        if (cfg_.untie_at) {
            pre_ = register_set(*idx, "pre.");
            post_ = register_set(*idx, "post.");
        } else {
            pre_ = register_set(*idx, "");
        }
        idx_ = idx;
    }

    const ModelConfig& config() const { return cfg_; }
    std::shared_ptr<const ParamIndex> index() const { return idx_; }

    // Weights ~ N(0, 0.02), biases and norm offsets zero, norm gains one.
    // Each parameter draws from its own named stream, so values do not depend
    // on registration order.
    GradVector<Real> init_params(uint64_t seed) const {
        GradVector<Real> out(idx_);
        for (const ParamInfo& info : idx_->entries) {
            Real* dst = out.flat.data() + info.offset;
            int64_t n = info.rows * info.cols;
            std::string leaf = info.name.substr(info.name.rfind('.') + 1);
            if (leaf == "g") {
                std::fill(dst, dst + n, Real(1));
            } else if (leaf[0] == 'b') {
                std::fill(dst, dst + n, Real(0));
            } else {
                Rng rng = Rng::stream(seed, "init/" + info.name);
                for (int64_t i = 0; i < n; ++i) dst[i] = Real(rng.normal() * 0.02);
            }
        }
        return out;
    }

    Graph build(Tape<Real>& tape, const Real* flat, const std::vector<int32_t>& tokens, int B,
                int T, const BuildOpts& opts = {}) const {
        check_tokens(tokens, B, T);
        GS_REQUIRE(tape.param_index().get() == idx_.get(), "build: tape index mismatch");
        if (opts.sg_tap) {
            GS_REQUIRE(opts.sg_tap->first >= 1 && opts.sg_tap->first <= T,
                       "tap position out of range");
            GS_REQUIRE(opts.sg_tap->second >= 0 && opts.sg_tap->second <= cfg_.n_layers,
                       "tap layer out of range");
        }
        if (opts.delta) {
            GS_REQUIRE(opts.delta_layer >= 0 && opts.delta_layer <= cfg_.n_layers,
                       "intervention layer out of range");
            for (int i : opts.delta_positions)
                GS_REQUIRE(i >= 1 && i <= T, "intervention position out of range");
        }
        bool myopic = opts.measurement ? false : cfg_.myopic;
        if (cfg_.untie_at) {
            GS_REQUIRE(!opts.sg_tap && opts.delta_layer < 0,
                       "taps and interventions are supported on single-set models only");
            return build_untied(tape, flat, tokens, B, T, myopic);
        }
        return build_tied(tape, flat, tokens, B, T, myopic, opts);
    }

    // Value-level wrappers. Each builds a throwaway tape.
    ForwardResult forward(const std::vector<Real>& flat, const std::vector<int32_t>& tokens,
                          int B, int T) const {
        return values(flat, tokens, B, T, BuildOpts{});
    }
    ForwardResult forward_sg(const std::vector<Real>& flat, const std::vector<int32_t>& tokens,
                             int B, int T, int i, int k) const {
        BuildOpts o;
        o.sg_tap = {i, k};
        return values(flat, tokens, B, T, o);
    }
    ForwardResult forward_myopic(const std::vector<Real>& flat,
                                 const std::vector<int32_t>& tokens, int B, int T) const {
        // Gradient-mode flag only; values match forward() bit-for-bit.
        return values(flat, tokens, B, T, BuildOpts{});
    }
    ForwardResult forward_untied(const std::vector<Real>& flat,
                                 const std::vector<int32_t>& tokens, int B, int T) const {
        GS_REQUIRE(cfg_.untie_at.has_value(), "forward_untied: model is not prefix-untied");
        return values(flat, tokens, B, T, BuildOpts{});
    }
    Matrix<Real> forward_intervened(const std::vector<Real>& flat,
                                    const std::vector<int32_t>& tokens, int B, int T, int i,
                                    int k, const std::vector<Real>& delta) const {
        BuildOpts o;
        o.delta_layer = k;
        o.delta_positions = {i};
        o.delta = &delta;
        Tape<Real> tape(idx_);
        Graph g = build(tape, flat.data(), tokens, B, T, o);
        return tape.value(g.logits);
    }

    // Tape rows carrying position i (1-based) across the batch.
    static std::vector<int32_t> position_rows(int i, int B, int T) {
        GS_REQUIRE(i >= 1 && i <= T, "position out of range");
        std::vector<int32_t> rows(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) rows[size_t(b)] = int32_t(b * T + i - 1);
        return rows;
    }

    const SetIds& ids() const { return pre_; }
    const SetIds& ids_post() const {
        GS_REQUIRE(cfg_.untie_at.has_value(), "single-set model has no second set");
        return post_;
    }

  private:
    ModelConfig cfg_;
    std::shared_ptr<const ParamIndex> idx_;
    SetIds pre_, post_;

    SetIds register_set(ParamIndex& idx, const std::string& p) const {
        SetIds s;
        int d = cfg_.hidden_dim, f = cfg_.ffn_dim;
        s.tok_emb = idx.add(p + "tok_emb", cfg_.vocab_size, d);
        s.pos_emb = idx.add(p + "pos_emb", cfg_.max_seq_len, d);
        for (int k = 0; k < cfg_.n_layers; ++k) {
            std::string b = p + "blocks." + std::to_string(k) + ".";
            BlockIds ids;
            ids.ln1_g = idx.add(b + "ln1.g", 1, d);
            ids.ln1_b = idx.add(b + "ln1.b", 1, d);
            ids.wq = idx.add(b + "attn.wq", d, d);
            ids.bq = idx.add(b + "attn.bq", 1, d);
            ids.wk = idx.add(b + "attn.wk", d, d);
            ids.bk = idx.add(b + "attn.bk", 1, d);
            ids.wv = idx.add(b + "attn.wv", d, d);
            ids.bv = idx.add(b + "attn.bv", 1, d);
            ids.wo = idx.add(b + "attn.wo", d, d);
            ids.bo = idx.add(b + "attn.bo", 1, d);
            ids.ln2_g = idx.add(b + "ln2.g", 1, d);
            ids.ln2_b = idx.add(b + "ln2.b", 1, d);
            ids.w1 = idx.add(b + "mlp.w1", d, f);
            ids.b1 = idx.add(b + "mlp.b1", 1, f);
            ids.w2 = idx.add(b + "mlp.w2", f, d);
            ids.b2 = idx.add(b + "mlp.b2", 1, d);
            s.blocks.push_back(ids);
        }
        s.lnf_g = idx.add(p + "ln_f.g", 1, d);
        s.lnf_b = idx.add(p + "ln_f.b", 1, d);
        s.unembed = idx.add(p + "unembed", d, cfg_.vocab_size);
        return s;
    }

    void check_tokens(const std::vector<int32_t>& tokens, int B, int T) const {
        GS_REQUIRE(B >= 1 && T >= 1, "batch and sequence length must be positive");
        GS_REQUIRE(T <= cfg_.max_seq_len, "sequence longer than max_seq_len");
        GS_REQUIRE(int64_t(tokens.size()) == int64_t(B) * T, "token buffer size mismatch");
        for (int32_t t : tokens)
            GS_REQUIRE(t >= 0 && t < cfg_.vocab_size, "token id out of vocabulary");
    }

    struct LeafSet {
        int tok_emb, pos_emb;
        std::vector<BlockIds> blocks;  // reused as node-id holder
        int lnf_g, lnf_b, unembed;
    };

    LeafSet make_leaves(Tape<Real>& tape, const Real* flat, const SetIds& s) const {
        LeafSet l;
        l.tok_emb = tape.param(flat, s.tok_emb);
        l.pos_emb = tape.param(flat, s.pos_emb);
        for (const BlockIds& b : s.blocks) {
            BlockIds n;
            n.ln1_g = tape.param(flat, b.ln1_g);
            n.ln1_b = tape.param(flat, b.ln1_b);
            n.wq = tape.param(flat, b.wq);
            n.bq = tape.param(flat, b.bq);
            n.wk = tape.param(flat, b.wk);
            n.bk = tape.param(flat, b.bk);
            n.wv = tape.param(flat, b.wv);
            n.bv = tape.param(flat, b.bv);
            n.wo = tape.param(flat, b.wo);
            n.bo = tape.param(flat, b.bo);
            n.ln2_g = tape.param(flat, b.ln2_g);
            n.ln2_b = tape.param(flat, b.ln2_b);
            n.w1 = tape.param(flat, b.w1);
            n.b1 = tape.param(flat, b.b1);
            n.w2 = tape.param(flat, b.w2);
            n.b2 = tape.param(flat, b.b2);
            l.blocks.push_back(n);
        }
        l.lnf_g = tape.param(flat, s.lnf_g);
        l.lnf_b = tape.param(flat, s.lnf_b);
        l.unembed = tape.param(flat, s.unembed);
        return l;
    }

    int embed(Tape<Real>& tape, const LeafSet& l, const std::vector<int32_t>& tokens, int B,
              int T) const {
        std::vector<int32_t> pos(size_t(B) * size_t(T));
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) pos[size_t(b * T + t)] = int32_t(t);
        return tape.add(tape.gather(l.tok_emb, tokens), tape.gather(l.pos_emb, pos));
    }

    struct AttnProj {
        int q, k, v;
    };

    AttnProj project_qkv(Tape<Real>& tape, const BlockIds& n, int x) const {
        AttnProj p;
        int a_in = tape.layer_norm(x, n.ln1_g, n.ln1_b);
        p.q = tape.add_bias(tape.matmul(a_in, n.wq), n.bq);
        p.k = tape.add_bias(tape.matmul(a_in, n.wk), n.bk);
        p.v = tape.add_bias(tape.matmul(a_in, n.wv), n.bv);
        return p;
    }

    int finish_block(Tape<Real>& tape, const BlockIds& n, int x, int att) const {
        int x2 = tape.add(x, tape.add_bias(tape.matmul(att, n.wo), n.bo));
        int m_in = tape.layer_norm(x2, n.ln2_g, n.ln2_b);
        int h = tape.gelu(tape.add_bias(tape.matmul(m_in, n.w1), n.b1));
        return tape.add(x2, tape.add_bias(tape.matmul(h, n.w2), n.b2));
    }

    int unembed_logits(Tape<Real>& tape, const LeafSet& l, int rL) const {
        return tape.matmul(tape.layer_norm(rL, l.lnf_g, l.lnf_b), l.unembed);
    }

    // Residual rows at one position routed through detach; values unchanged.
    static int detach_rows(Tape<Real>& tape, int x, const std::vector<int32_t>& rows_list) {
        int64_t R = tape.rows(x);
        std::vector<int32_t> rest;
        std::vector<bool> is_cut(size_t(R), false);
        for (int32_t r : rows_list) is_cut[size_t(r)] = true;
        for (int64_t r = 0; r < R; ++r)
            if (!is_cut[size_t(r)]) rest.push_back(int32_t(r));
        int cut = tape.place_rows(tape.detach(tape.gather_rows(x, rows_list)), rows_list, R);
        int kept = tape.place_rows(tape.gather_rows(x, rest), rest, R);
        return tape.add(kept, cut);
    }

    Graph build_tied(Tape<Real>& tape, const Real* flat, const std::vector<int32_t>& tokens,
                     int B, int T, bool myopic, const BuildOpts& opts) const {
        LeafSet l = make_leaves(tape, flat, pre_);
        Graph g;
        g.B = B;
        g.T = T;
        int x = embed(tape, l, tokens, B, T);
        x = apply_taps(tape, x, 0, B, T, opts);
        g.residuals.push_back(x);
        for (int k = 0; k < cfg_.n_layers; ++k) {
            AttnProj p = project_qkv(tape, l.blocks[size_t(k)], x);
            int att = tape.attention(p.q, p.k, p.v, B, T, cfg_.n_heads, myopic);
            x = finish_block(tape, l.blocks[size_t(k)], x, att);
            x = apply_taps(tape, x, k + 1, B, T, opts);
            g.residuals.push_back(x);
        }
        g.logits = unembed_logits(tape, l, x);
        return g;
    }

    int apply_taps(Tape<Real>& tape, int x, int layer, int B, int T,
                   const BuildOpts& opts) const {
        if (opts.delta && opts.delta_layer == layer) {
            GS_REQUIRE(int64_t(opts.delta->size()) == cfg_.hidden_dim,
                       "intervention vector dimension mismatch");
            Matrix<Real> dm(1, cfg_.hidden_dim);
            dm.v = *opts.delta;
            std::vector<int32_t> rows;
            for (int i : opts.delta_positions) {
                auto pr = position_rows(i, B, T);
                rows.insert(rows.end(), pr.begin(), pr.end());
            }
            x = tape.add_to_rows(x, tape.constant(dm), rows);
        }
        if (opts.sg_tap && opts.sg_tap->second == layer)
            x = detach_rows(tape, x, position_rows(opts.sg_tap->first, B, T));
        return x;
    }

    // rows with in-sequence position < m come from `pre`, the rest from `post`.
    int mix_rows(Tape<Real>& tape, int pre, int post, int B, int T) const {
        int m = *cfg_.untie_at;
        std::vector<int32_t> pre_rows, post_rows;
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t)
                (t < m ? pre_rows : post_rows).push_back(int32_t(b * T + t));
        int64_t R = int64_t(B) * T;
        return tape.add(tape.place_rows(tape.gather_rows(pre, pre_rows), pre_rows, R),
                        tape.place_rows(tape.gather_rows(post, post_rows), post_rows, R));
    }

    Graph build_untied(Tape<Real>& tape, const Real* flat, const std::vector<int32_t>& tokens,
                       int B, int T, bool myopic) const {
        GS_REQUIRE(*cfg_.untie_at < T, "untie position must precede part of the sequence");
        LeafSet pre_leaves = make_leaves(tape, flat, pre_);
        Graph gpre = build_from_leaves(tape, pre_leaves, tokens, B, T, myopic);
        // Second set: full forward whose attention keys/values for prefix rows
        // are taken from the first set's stream.
        LeafSet post_leaves = make_leaves(tape, flat, post_);
        Graph gpost;
        gpost.B = B;
        gpost.T = T;
        int x = embed(tape, post_leaves, tokens, B, T);
        gpost.residuals.push_back(x);
        for (int k = 0; k < cfg_.n_layers; ++k) {
            AttnProj p = project_qkv(tape, post_leaves.blocks[size_t(k)], x);
            AttnProj q = project_qkv(tape, pre_leaves.blocks[size_t(k)],
                                     gpre.residuals[size_t(k)]);
            int kk = mix_rows(tape, q.k, p.k, B, T);
            int vv = mix_rows(tape, q.v, p.v, B, T);
            int att = tape.attention(p.q, kk, vv, B, T, cfg_.n_heads, myopic);
            x = finish_block(tape, post_leaves.blocks[size_t(k)], x, att);
            gpost.residuals.push_back(x);
        }
        gpost.logits = unembed_logits(tape, post_leaves, x);

        Graph g;
        g.B = B;
        g.T = T;
        for (int k = 0; k <= cfg_.n_layers; ++k)
            g.residuals.push_back(
                mix_rows(tape, gpre.residuals[size_t(k)], gpost.residuals[size_t(k)], B, T));
        g.logits = mix_rows(tape, gpre.logits, gpost.logits, B, T);
        return g;
    }

    Graph build_from_leaves(Tape<Real>& tape, const LeafSet& l,
                            const std::vector<int32_t>& tokens, int B, int T,
                            bool myopic) const {
        Graph g;
        g.B = B;
        g.T = T;
        int x = embed(tape, l, tokens, B, T);
        g.residuals.push_back(x);
        for (int k = 0; k < cfg_.n_layers; ++k) {
            AttnProj p = project_qkv(tape, l.blocks[size_t(k)], x);
            int att = tape.attention(p.q, p.k, p.v, B, T, cfg_.n_heads, myopic);
            x = finish_block(tape, l.blocks[size_t(k)], x, att);
            g.residuals.push_back(x);
        }
        g.logits = unembed_logits(tape, l, x);
        return g;
    }

    ForwardResult values(const std::vector<Real>& flat, const std::vector<int32_t>& tokens,
                         int B, int T, const BuildOpts& opts) const {
        Tape<Real> tape(idx_);
        Graph g = build(tape, flat.data(), tokens, B, T, opts);
        ForwardResult out;
        out.logits = tape.value(g.logits);
        for (int n : g.residuals) out.residuals.push_back(tape.value(n));
        return out;
    }
};

// ---------------- checkpoint format ----------------
// "GSCK" magic, format version, JSON config block, then named parameter
// arrays (name, dtype code, rows, cols, row-major data). Little-endian.

inline constexpr uint32_t kCkptMagic = 0x4b435347;  // "GSCK"
inline constexpr uint32_t kCkptVersion = 1;

template <class Real>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamIndex& idx,
                     const std::vector<Real>& flat) {
    if (int64_t(flat.size()) != idx.total) throw ModelError("checkpoint: flat size mismatch");
    ByteWriter w;
    w.u32(kCkptMagic);
    w.u32(kCkptVersion);
    nlohmann::json j = cfg;
    std::string cfg_str = j.dump();
    w.u32(uint32_t(cfg_str.size()));
    w.raw(cfg_str.data(), cfg_str.size());
    w.u32(uint32_t(idx.entries.size()));
    for (const ParamInfo& info : idx.entries) {
        w.str16(info.name);
        w.u8(sizeof(Real) == 4 ? 4 : 8);
        w.u32(uint32_t(info.rows));
        w.u32(uint32_t(info.cols));
        const Real* src = flat.data() + info.offset;
        for (int64_t i = 0; i < info.rows * info.cols; ++i) {
            if constexpr (sizeof(Real) == 4)
                w.f32(float(src[i]));
            else
                w.f64(double(src[i]));
        }
    }
    w.save(path);
}

inline ModelConfig read_checkpoint_config(ByteReader& r) {
    if (r.u32() != kCkptMagic) throw ModelError("checkpoint: bad magic");
    if (r.u32() != kCkptVersion) throw ModelError("checkpoint: unsupported version");
    uint32_t len = r.u32();
    std::string cfg_str(len, '\0');
    r.raw(cfg_str.data(), len);
    ModelConfig cfg = nlohmann::json::parse(cfg_str).get<ModelConfig>();
    cfg.validate();
    return cfg;
}

inline ModelConfig read_checkpoint_config(const std::string& path) {
    ByteReader r = ByteReader::load(path);
    return read_checkpoint_config(r);
}

// Loads a checkpoint, validating names and shapes against `idx` (order must
// match registration order). Values convert to Real if dtypes differ.
template <class Real>
std::pair<ModelConfig, std::vector<Real>> load_checkpoint(const std::string& path,
                                                          const ParamIndex& idx) {
    ByteReader r = ByteReader::load(path);
    ModelConfig cfg = read_checkpoint_config(r);
    uint32_t count = r.u32();
    if (count != idx.entries.size()) throw ModelError("checkpoint: parameter count mismatch");
    std::vector<Real> flat(size_t(idx.total));
    for (const ParamInfo& info : idx.entries) {
        std::string name = r.str16();
        if (name != info.name)
            throw ModelError("checkpoint: parameter order mismatch at " + name);
        uint8_t dtype = r.u8();
        if (dtype != 4 && dtype != 8) throw ModelError("checkpoint: unknown dtype");
        if (int64_t(r.u32()) != info.rows || int64_t(r.u32()) != info.cols)
            throw ModelError("checkpoint: shape mismatch at " + name);
        Real* dst = flat.data() + info.offset;
        for (int64_t i = 0; i < info.rows * info.cols; ++i)
            dst[i] = dtype == 4 ? Real(r.f32()) : Real(r.f64());
    }
    if (!r.done()) throw ModelError("checkpoint: trailing bytes");
    return {cfg, std::move(flat)};
}

}  // namespace gradsplit
