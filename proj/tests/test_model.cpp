#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gradsplit/model.hpp"
#include "oracles.hpp"

using namespace gradsplit;
using M = Model<double>;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.hidden_dim = 8;
    c.ffn_dim = 16;
    c.vocab_size = 3;
    c.max_seq_len = 6;
    return c;
}

// Mean cross entropy of next-token prediction over all predicting rows.
int ntp_scalar(Tape<double>& tape, const M::Graph& g, const std::vector<int32_t>& tokens) {
    std::vector<int32_t> targets(size_t(g.B) * size_t(g.T), -1);
    std::vector<double> w(size_t(g.B) * size_t(g.T), 0.0);
    double norm = 1.0 / (double(g.B) * double(g.T - 1));
    for (int b = 0; b < g.B; ++b)
        for (int t = 0; t + 1 < g.T; ++t) {
            targets[size_t(b * g.T + t)] = tokens[size_t(b * g.T + t + 1)];
            w[size_t(b * g.T + t)] = norm;
        }
    return tape.weighted_sum(tape.xent_rows(g.logits, targets), w);
}

std::vector<int32_t> random_tokens(int n, int vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<int32_t> t(static_cast<size_t>(n));
    for (auto& x : t) x = int32_t(rng.uniform_int(vocab));
    return t;
}

}  // namespace

TEST_CASE("config validation rejects bad shapes") {
    ModelConfig c = tiny_config();
    c.n_heads = 3;  // 8 % 3 != 0
    REQUIRE_THROWS_AS(Model<double>(c), ModelError);
    c = tiny_config();
    c.untie_at = 6;  // == max_seq_len
    REQUIRE_THROWS_AS(Model<double>(c), ModelError);
    c = tiny_config();
    c.untie_at = 2;
    REQUIRE_NOTHROW(Model<double>(c));
}

TEST_CASE("forward rejects bad tokens and accepts length-1 input") {
    M model(tiny_config());
    auto p = model.init_params(1);
    REQUIRE_THROWS_AS(model.forward(p.flat, {0, 1, 3}, 1, 3), AutodiffError);
    REQUIRE_THROWS_AS(model.forward(p.flat, std::vector<int32_t>(7, 0), 1, 7), AutodiffError);
    auto r = model.forward(p.flat, {1}, 1, 1);
    REQUIRE(r.logits.rows == 1);
    REQUIRE(r.logits.cols == 3);
    REQUIRE(r.residuals.size() == 3);  // boundaries 0..L
}

TEST_CASE("causality: suffix edits leave earlier logits bit-identical") {
    M model(tiny_config());
    auto p = model.init_params(2);
    auto base = random_tokens(6, 3, 77);
    auto edited = base;
    std::swap(edited[3], edited[5]);
    edited[4] = (edited[4] + 1) % 3;
    auto ra = model.forward(p.flat, base, 1, 6);
    auto rb = model.forward(p.flat, edited, 1, 6);
    for (int t = 0; t < 3; ++t)
        for (int c = 0; c < 3; ++c) REQUIRE(ra.logits.at(t, c) == rb.logits.at(t, c));
    // And the edit does reach later rows.
    double diff = 0;
    for (int t = 3; t < 6; ++t)
        for (int c = 0; c < 3; ++c) diff += std::fabs(ra.logits.at(t, c) - rb.logits.at(t, c));
    REQUIRE(diff > 0);
}

TEST_CASE("stop-gradient and intervention-free variants keep forward values") {
    ModelConfig cfg = tiny_config();
    M plain(cfg);
    cfg.myopic = true;
    M myopic(cfg);
    auto p = plain.init_params(3);
    auto tokens = random_tokens(12, 3, 88);
    auto a = plain.forward(p.flat, tokens, 2, 6);
    auto b = plain.forward_sg(p.flat, tokens, 2, 6, 3, 1);
    auto c = myopic.forward_myopic(p.flat, tokens, 2, 6);
    REQUIRE(a.logits.v == b.logits.v);
    REQUIRE(a.logits.v == c.logits.v);
    for (size_t k = 0; k < a.residuals.size(); ++k) {
        REQUIRE(a.residuals[k].v == b.residuals[k].v);
        REQUIRE(a.residuals[k].v == c.residuals[k].v);
    }
    std::vector<double> zero(8, 0.0);
    auto d = plain.forward_intervened(p.flat, tokens, 2, 6, 3, 1, zero);
    REQUIRE(a.logits.v == d.v);
}

TEST_CASE("full-model gradient matches finite differences") {
    M model(tiny_config());
    auto p0 = model.init_params(4);
    auto tokens = random_tokens(8, 3, 99);
    auto idx = model.index();

    auto build = [&](Tape<double>& t, const double* p) {
        auto g = model.build(t, p, tokens, 2, 4);
        return ntp_scalar(t, g, tokens);
    };
    Tape<double> tape(idx);
    int s = build(tape, p0.flat.data());
    tape.backward(s);
    GradVector<double> g(idx);
    tape.extract_grad(g);
    auto f = [&](const std::vector<double>& p) {
        Tape<double> t2(idx);
        return t2.scalar(build(t2, p.data()));
    };
    REQUIRE(grad_check(f, g.flat, p0.flat, 1e-5, 1e-3) < 1e-6);
}

TEST_CASE("prefix-untied gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    cfg.untie_at = 2;
    M model(cfg);
    auto p0 = model.init_params(5);
    auto tokens = random_tokens(4, 3, 111);
    auto idx = model.index();
    auto build = [&](Tape<double>& t, const double* p) {
        auto g = model.build(t, p, tokens, 1, 4);
        return ntp_scalar(t, g, tokens);
    };
    Tape<double> tape(idx);
    int s = build(tape, p0.flat.data());
    tape.backward(s);
    GradVector<double> g(idx);
    tape.extract_grad(g);
    auto f = [&](const std::vector<double>& p) {
        Tape<double> t2(idx);
        return t2.scalar(build(t2, p.data()));
    };
    REQUIRE(grad_check(f, g.flat, p0.flat, 1e-5, 1e-3) < 1e-6);
}

TEST_CASE("structural stop-gradient equals row-cut backward") {
    M model(tiny_config());
    auto p = model.init_params(6);
    auto tokens = random_tokens(12, 3, 123);
    auto idx = model.index();
    const int i = 3, k = 1;

    Tape<double> t1(idx);
    auto g1 = model.build(t1, p.flat.data(), tokens, 2, 6);
    int s1 = ntp_scalar(t1, g1, tokens);
    t1.backward(s1, Tape<double>::RowCut{g1.residuals[size_t(k)], i - 1, 6});
    GradVector<double> cutg(idx);
    t1.extract_grad(cutg);

    Tape<double> t2(idx);
    M::BuildOpts opts;
    opts.sg_tap = {i, k};
    auto g2 = model.build(t2, p.flat.data(), tokens, 2, 6, opts);
    int s2 = ntp_scalar(t2, g2, tokens);
    t2.backward(s2);
    GradVector<double> sgg(idx);
    t2.extract_grad(sgg);

    REQUIRE(cutg.flat == sgg.flat);

    // Severing changes something relative to the plain gradient.
    Tape<double> t3(idx);
    auto g3 = model.build(t3, p.flat.data(), tokens, 2, 6);
    t3.backward(ntp_scalar(t3, g3, tokens));
    GradVector<double> plain(idx);
    t3.extract_grad(plain);
    REQUIRE(plain.flat != cutg.flat);
}

TEST_CASE("myopic loss gradient never reaches other positions' activations") {
    ModelConfig cfg = tiny_config();
    cfg.myopic = true;
    M model(cfg);
    auto p = model.init_params(7);
    // Token 2 appears only at position 1; the loss reads only position 3.
    std::vector<int32_t> tokens{2, 0, 1, 0};
    Tape<double> tape(model.index());
    auto g = model.build(tape, p.flat.data(), tokens, 1, 4);
    int s = tape.weighted_sum(tape.xent_rows(g.logits, {-1, -1, 0, -1}), {0, 0, 1, 0});
    tape.backward(s);
    GradVector<double> grad(model.index());
    tape.extract_grad(grad);

    const ParamInfo& emb = model.index()->entries[size_t(model.ids().tok_emb)];
    for (int c = 0; c < 8; ++c) REQUIRE(grad.flat[size_t(emb.offset + 2 * 8 + c)] == 0.0);
    // Position 3's own token row (token 1) does receive gradient.
    double own = 0;
    for (int c = 0; c < 8; ++c) own += std::fabs(grad.flat[size_t(emb.offset + 1 * 8 + c)]);
    REQUIRE(own > 0.0);

    // The positional table behaves the same way: rows for positions 1, 2, 4
    // get nothing, position 3's row does.
    const ParamInfo& pos = model.index()->entries[size_t(model.ids().pos_emb)];
    for (int t : {0, 1, 3})
        for (int c = 0; c < 8; ++c) REQUIRE(grad.flat[size_t(pos.offset + t * 8 + c)] == 0.0);
}

TEST_CASE("myopic + untied: prefix-set gradient ignores tokens after the boundary target") {
    ModelConfig cfg = tiny_config();
    cfg.myopic = true;
    cfg.untie_at = 2;
    M model(cfg);
    auto p = model.init_params(8);

    // Position m+1's token is the target of loss row m, so it stays fixed;
    // everything after it is substituted freely.
    std::vector<int32_t> base{0, 1, 2, 1, 0};
    std::vector<int32_t> edited{0, 1, 2, 2, 1};

    auto grad_of = [&](const std::vector<int32_t>& tokens) {
        Tape<double> tape(model.index());
        auto g = model.build(tape, p.flat.data(), tokens, 1, 5);
        tape.backward(ntp_scalar(tape, g, tokens));
        GradVector<double> out(model.index());
        tape.extract_grad(out);
        return out;
    };
    GradVector<double> ga = grad_of(base), gb = grad_of(edited);

    int64_t pre_size = model.index()->entries[size_t(model.ids_post().tok_emb)].offset;
    for (int64_t i = 0; i < pre_size; ++i) REQUIRE(ga.flat[size_t(i)] == gb.flat[size_t(i)]);
    bool post_differs = false;
    for (int64_t i = pre_size; i < model.index()->total; ++i)
        post_differs |= (ga.flat[size_t(i)] != gb.flat[size_t(i)]);
    REQUIRE(post_differs);
}

TEST_CASE("cloned prefix-untied model reproduces the tied forward bit-exactly") {
    ModelConfig cfg = tiny_config();
    M tied(cfg);
    cfg.untie_at = 3;
    M untied(cfg);
    auto pt = tied.init_params(9);
    GradVector<double> pu(untied.index());
    // Clone the tied parameters into both sets.
    for (const ParamInfo& info : untied.index()->entries) {
        std::string base = info.name.substr(info.name.find('.') + 1);
        const ParamInfo& src = tied.index()->entries[size_t(tied.index()->id_of(base))];
        std::copy(pt.flat.begin() + src.offset,
                  pt.flat.begin() + src.offset + src.rows * src.cols,
                  pu.flat.begin() + info.offset);
    }
    auto tokens = random_tokens(12, 3, 222);
    auto rt = tied.forward(pt.flat, tokens, 2, 6);
    auto ru = untied.forward_untied(pu.flat, tokens, 2, 6);
    REQUIRE(rt.logits.v == ru.logits.v);
    for (size_t k = 0; k < rt.residuals.size(); ++k)
        REQUIRE(rt.residuals[k].v == ru.residuals[k].v);
}

TEST_CASE("interventions respect causality and final-layer locality") {
    M model(tiny_config());
    auto p = model.init_params(10);
    auto tokens = random_tokens(6, 3, 333);
    auto plain = model.forward(p.flat, tokens, 1, 6);
    std::vector<double> delta(8);
    for (int i = 0; i < 8; ++i) delta[size_t(i)] = 0.3 * (i - 4);

    auto mid = model.forward_intervened(p.flat, tokens, 1, 6, 4, 1, delta);
    for (int t = 0; t < 3; ++t)
        for (int c = 0; c < 3; ++c) REQUIRE(mid.at(t, c) == plain.logits.at(t, c));
    double later = 0;
    for (int c = 0; c < 3; ++c) later += std::fabs(mid.at(3, c) - plain.logits.at(3, c));
    REQUIRE(later > 0);

    auto top = model.forward_intervened(p.flat, tokens, 1, 6, 4, 2, delta);
    for (int t = 0; t < 6; ++t)
        for (int c = 0; c < 3; ++c) {
            if (t == 3) continue;
            REQUIRE(top.at(t, c) == plain.logits.at(t, c));
        }
    double at_i = 0;
    for (int c = 0; c < 3; ++c) at_i += std::fabs(top.at(3, c) - plain.logits.at(3, c));
    REQUIRE(at_i > 0);
}

TEST_CASE("checkpoints round-trip parameters and config") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "gs_model_test";
    fs::create_directories(dir);
    std::string path = (dir / "ckpt_0000001.bin").string();

    ModelConfig cfg = tiny_config();
    cfg.myopic = true;
    cfg.untie_at = 2;
    M model(cfg);
    auto p = model.init_params(11);
    save_checkpoint(path, cfg, *model.index(), p.flat);

    ModelConfig peeked = read_checkpoint_config(path);
    REQUIRE(peeked.n_layers == cfg.n_layers);
    REQUIRE(peeked.myopic);
    REQUIRE(peeked.untie_at == cfg.untie_at);

    auto [loaded_cfg, flat] = load_checkpoint<double>(path, *model.index());
    REQUIRE(flat == p.flat);
    REQUIRE(loaded_cfg.hidden_dim == cfg.hidden_dim);

    // Corrupt the magic: load must fail.
    auto bytes = read_text_file(path);
    bytes[0] = 'X';
    write_text_file(path, bytes);
    REQUIRE_THROWS_AS(load_checkpoint<double>(path, *model.index()), ModelError);
    fs::remove_all(dir);
}

TEST_CASE("float32 checkpoints reload within round-trip tolerance") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "gs_model_test32";
    fs::create_directories(dir);
    std::string path = (dir / "ckpt_0000002.bin").string();

    ModelConfig cfg = tiny_config();
    Model<float> model(cfg);
    auto p = model.init_params(12);
    save_checkpoint<float>(path, cfg, *model.index(), p.flat);
    auto [c2, flat] = load_checkpoint<float>(path, *model.index());
    REQUIRE(flat == p.flat);  // f32 -> f32 is exact

    auto tokens = random_tokens(6, 3, 444);
    auto before = model.forward(p.flat, tokens, 1, 6);
    auto after = model.forward(flat, tokens, 1, 6);
    REQUIRE(before.logits.v == after.logits.v);
    fs::remove_all(dir);
}
