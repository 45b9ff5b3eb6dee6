#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <set>

#include "gradsplit/tasks.hpp"
#include "oracles.hpp"

using namespace gradsplit;

namespace {

int sq(const char* name) { return (name[1] - '1') * 8 + (name[0] - 'A'); }

oracle::NaiveBoard to_naive(const OthelloState& s) {
    oracle::NaiveBoard b{};
    for (int i = 0; i < 64; ++i) b[size_t(i)] = int8_t(othello_cell(s, i));
    return b;
}

std::set<int> legal_set(const OthelloState& s) {
    std::set<int> out;
    uint64_t m = othello_legal_moves(s);
    while (m) {
        out.insert(std::countr_zero(m));
        m &= m - 1;
    }
    return out;
}

}  // namespace

TEST_CASE("majority outputs and feature match a counting oracle") {
    const int M = 10, V = 3;
    bool saw_unique = false, saw_tie = false;
    for (int i = 0; i < 10000; ++i) {
        Rng rng = Rng::stream(7, "t/maj", uint64_t(i));
        Example ex = gen_majority(M, V, rng);
        REQUIRE(ex.tokens.size() == size_t(2 * M));

        std::vector<int> cnt(V, 0);
        for (int p = 0; p < 2 * M; ++p) {
            if (p < M) ++cnt[size_t(ex.tokens[size_t(p)])];
            // expected target: recount from scratch, smallest id on ties
            int best = 0;
            for (int v = 1; v < V; ++v)
                if (cnt[size_t(v)] > cnt[size_t(best)]) best = v;
            REQUIRE(ex.features.at("majority_token")[size_t(p)] == float(best));
            REQUIRE(ex.masks.at("majority_token")[size_t(p)] == 1);
        }
        int top = *std::max_element(cnt.begin(), cnt.end());
        int n_top = 0;
        for (int v = 0; v < V; ++v) n_top += cnt[size_t(v)] == top;
        (n_top == 1 ? saw_unique : saw_tie) = true;
        for (int p = M; p < 2 * M; ++p)
            REQUIRE(cnt[size_t(ex.tokens[size_t(p)])] == top);
    }
    REQUIRE(saw_unique);
    REQUIRE(saw_tie);
}

TEST_CASE("majority degenerate prefix pins feature and outputs to one token") {
    // find a generated example whose prefix is a single repeated token
    const int M = 4, V = 2;
    bool found = false;
    for (int i = 0; i < 2000 && !found; ++i) {
        Rng rng = Rng::stream(11, "t/maj-deg", uint64_t(i));
        Example ex = gen_majority(M, V, rng);
        if (std::count(ex.tokens.begin(), ex.tokens.begin() + M, 0) != M) continue;
        found = true;
        for (size_t p = 0; p < ex.tokens.size(); ++p) {
            REQUIRE(ex.features.at("majority_token")[p] == 0.0f);
            if (p >= size_t(M)) REQUIRE(ex.tokens[p] == 0);
        }
    }
    REQUIRE(found);
}

TEST_CASE("conditioned majority respects the transition-count oracle") {
    const int M = 10, V = 3;
    for (int i = 0; i < 10000; ++i) {
        Rng rng = Rng::stream(9, "t/cmaj", uint64_t(i));
        Example ex = gen_conditioned_majority(M, V, rng);

        std::vector<int> cnt(V, 0);
        bool any_a = false;
        for (int p = 0; p + 1 < M; ++p) {
            if (ex.tokens[size_t(p)] == 0) {
                ++cnt[size_t(ex.tokens[size_t(p + 1)])];
                any_a = true;
            }
        }
        REQUIRE(any_a);  // resample guard
        int top = *std::max_element(cnt.begin(), cnt.end());
        for (int p = M; p < 2 * M; ++p)
            REQUIRE(cnt[size_t(ex.tokens[size_t(p)])] == top);

        const auto& f2 = ex.features.at("after_A");
        REQUIRE(f2[0] == 0.0f);
        for (size_t p = 1; p < ex.tokens.size(); ++p)
            REQUIRE(f2[p] == (ex.tokens[p - 1] == 0 ? 1.0f : 0.0f));
    }
}

TEST_CASE("after_A indicator on a hand sequence") {
    Example ex;
    ex.tokens = {1, 0, 2, 0};  // B A C A
    derive_features(TaskKind::conditioned_majority, ex);
    const auto& f2 = ex.features.at("after_A");
    REQUIRE(f2 == std::vector<float>{0.0f, 0.0f, 1.0f, 0.0f});
}

TEST_CASE("derived features reproduce generator features from tokens alone") {
    for (int i = 0; i < 50; ++i) {
        Rng r1 = Rng::stream(21, "t/derive", uint64_t(i));
        Example full = gen_majority(10, 3, r1);
        Example bare;
        bare.tokens = full.tokens;
        derive_features(TaskKind::majority, bare);
        REQUIRE(bare.features == full.features);
        REQUIRE(bare.masks == full.masks);
    }
}

TEST_CASE("othello initial position and first capture") {
    OthelloState s;
    REQUIRE(othello_cell(s, sq("D4")) == Cell::white);
    REQUIRE(othello_cell(s, sq("E5")) == Cell::white);
    REQUIRE(othello_cell(s, sq("E4")) == Cell::black);
    REQUIRE(othello_cell(s, sq("D5")) == Cell::black);
    REQUIRE(std::popcount(s.black | s.white) == 4);

    REQUIRE(legal_set(s) == std::set<int>{sq("D3"), sq("C4"), sq("F5"), sq("E6")});

    OthelloState t = othello_apply(s, sq("D3"));
    REQUIRE(othello_cell(t, sq("D3")) == Cell::black);
    REQUIRE(othello_cell(t, sq("D4")) == Cell::black);  // the one flipped stone
    REQUIRE(othello_cell(t, sq("E5")) == Cell::white);
    REQUIRE(std::popcount(t.black) == 4);
    REQUIRE(std::popcount(t.white) == 1);
    REQUIRE(t.to_move == 2);
    REQUIRE(t.move_count == 1);
}

TEST_CASE("othello rejects illegal input") {
    OthelloState s;
    REQUIRE_THROWS_AS(othello_apply(s, kPass), TaskError);      // moves exist
    REQUIRE_THROWS_AS(othello_apply(s, sq("A1")), TaskError);   // flips nothing
    REQUIRE_THROWS_AS(othello_apply(s, sq("D4")), TaskError);   // occupied
    REQUIRE_THROWS_AS(othello_apply(s, 99), TaskError);

    OthelloState full;
    full.black = ~0ull;
    full.white = 0;
    REQUIRE(othello_legal_moves(full) == 0);
    OthelloState after = othello_apply(full, kPass);
    REQUIRE(after.to_move == 2);
}

TEST_CASE("bitboard engine matches the naive ray-scan oracle") {
    // Random playout, comparing legal sets and boards at every turn. With
    // 1700 games x 60 turns this crosses 1e5 distinct reachable positions.
    long positions = 0;
    for (int g = 0; g < 1700; ++g) {
        Rng rng = Rng::stream(31, "t/oth-oracle", uint64_t(g));
        OthelloState s;
        oracle::NaiveBoard nb = oracle::naive_initial();
        REQUIRE(to_naive(s) == nb);
        for (int turn = 0; turn < kOthelloTurns; ++turn) {
            auto ls = legal_set(s);
            auto nl = oracle::naive_legal(nb, s.to_move);
            REQUIRE(std::vector<int>(ls.begin(), ls.end()) == nl);
            ++positions;

            int mv = kPass;
            if (!nl.empty()) mv = nl[size_t(rng.uniform_int(int64_t(nl.size())))];
            int mover = s.to_move;
            s = othello_apply(s, mv);
            nb = oracle::naive_apply(nb, mover, mv);
            REQUIRE(to_naive(s) == nb);

            // stone count grows by one per non-pass move
            int stones = std::popcount(s.black | s.white);
            int passes = 0;
            (void)passes;
            REQUIRE(stones >= 4);
        }
    }
    REQUIRE(positions >= 100000);
}

TEST_CASE("stone count equals four plus non-pass moves") {
    Rng rng = Rng::stream(33, "t/oth-count", 0);
    OthelloState s;
    int placed = 0;
    for (int turn = 0; turn < kOthelloTurns; ++turn) {
        uint64_t legal = othello_legal_moves(s);
        int mv = kPass;
        if (legal) {
            mv = std::countr_zero(legal);
            ++placed;
        }
        s = othello_apply(s, mv);
        REQUIRE(std::popcount(s.black | s.white) == 4 + placed);
        REQUIRE(s.move_count == turn + 1);
    }
}

TEST_CASE("board labels take the mover's perspective and alternate sign") {
    for (int g = 0; g < 50; ++g) {
        Rng rng = Rng::stream(35, "t/oth-label", uint64_t(g));
        OthelloState s;
        std::array<float, 64> prev{};
        bool have_prev = false;
        for (int turn = 0; turn < kOthelloTurns; ++turn) {
            uint64_t legal = othello_legal_moves(s);
            int mv = kPass;
            if (legal) {
                int k = int(rng.uniform_int(std::popcount(legal)));
                uint64_t m = legal;
                for (int i = 0; i < k; ++i) m &= m - 1;
                mv = std::countr_zero(m);
            }
            uint64_t before = s.black | s.white;
            OthelloState next = othello_apply(s, mv);
            auto lab = board_label(next);

            // absolute board negated exactly when white is to move
            for (int c = 0; c < 64; ++c) {
                float absolute = othello_cell(next, c) == Cell::black    ? 1.0f
                                 : othello_cell(next, c) == Cell::white ? -1.0f
                                                                        : 0.0f;
                REQUIRE(lab[size_t(c)] == (next.to_move == 1 ? absolute : -absolute));
            }
            if (mv != kPass) REQUIRE(lab[size_t(mv)] == -1.0f);  // placed stone is the opponent's now

            // squares untouched by the move flip sign relative to last turn
            if (have_prev) {
                uint64_t changed = (s.black ^ next.black) | (s.white ^ next.white);
                for (int c = 0; c < 64; ++c)
                    if (!(changed & (1ull << c)) && (before & (1ull << c)))
                        REQUIRE(lab[size_t(c)] == -prev[size_t(c)]);
            }
            prev = lab;
            have_prev = true;
            s = next;
        }
    }
}

TEST_CASE("classify_square against brute-force recoloring") {
    OthelloState init;
    for (const char* n : {"D4", "E4", "D5", "E5"})
        REQUIRE(classify_square(init, sq(n)) == SquareClass::useful);
    REQUIRE(classify_square(init, sq("A1")) == SquareClass::excluded);
    REQUIRE(classify_square(init, sq("H8")) == SquareClass::excluded);

    int checked = 0;
    for (int g = 0; g < 40; ++g) {
        Rng rng = Rng::stream(37, "t/oth-cls", uint64_t(g));
        OthelloState s;
        for (int turn = 0; turn < 30; ++turn) {
            uint64_t legal = othello_legal_moves(s);
            int mv = kPass;
            if (legal) {
                int k = int(rng.uniform_int(std::popcount(legal)));
                uint64_t m = legal;
                for (int i = 0; i < k; ++i) m &= m - 1;
                mv = std::countr_zero(m);
            }
            s = othello_apply(s, mv);

            oracle::NaiveBoard nb = to_naive(s);
            auto base = oracle::naive_legal(nb, s.to_move);
            for (int c = 0; c < 64; ++c) {
                SquareClass got = classify_square(s, c);
                if (nb[size_t(c)] == 0) {
                    REQUIRE(got == SquareClass::excluded);
                    continue;
                }
                oracle::NaiveBoard fb = nb;
                fb[size_t(c)] = int8_t(3 - fb[size_t(c)]);
                bool differs = oracle::naive_legal(fb, s.to_move) != base;
                REQUIRE(got == (differs ? SquareClass::useful : SquareClass::useless));
                ++checked;
            }
        }
    }
    REQUIRE(checked > 1000);
}

TEST_CASE("othello transcripts replay legally and carry square features") {
    for (int g = 0; g < 30; ++g) {
        Rng rng = Rng::stream(41, "t/oth-ts", uint64_t(g));
        Example ex = othello_transcript(rng);
        REQUIRE(ex.tokens.size() == size_t(kOthelloTurns));
        std::set<int> opening{sq("D3"), sq("C4"), sq("F5"), sq("E6")};
        REQUIRE(opening.count(int(ex.tokens[0])) == 1);
        REQUIRE(ex.features.size() == 128);

        // replay under the naive oracle; throws on any illegal step
        oracle::NaiveBoard nb = oracle::naive_initial();
        int mover = 1;
        OthelloState s;
        for (size_t t = 0; t < ex.tokens.size(); ++t) {
            nb = oracle::naive_apply(nb, mover, int(ex.tokens[t]));
            mover = 3 - mover;
            s = othello_apply(s, int(ex.tokens[t]));
            auto lab = board_label(s);
            for (int c = 0; c < 64; ++c) {
                std::string n = square_name(c);
                REQUIRE(ex.features.at("board." + n)[t] == lab[size_t(c)]);
                REQUIRE(ex.masks.at("board." + n)[t] == 1);
                SquareClass cls = classify_square(s, c);
                REQUIRE(ex.masks.at("useful." + n)[t] == (cls != SquareClass::excluded ? 1 : 0));
                if (cls != SquareClass::excluded)
                    REQUIRE(ex.features.at("useful." + n)[t] ==
                            (cls == SquareClass::useful ? 1.0f : 0.0f));
            }
        }
    }
}

TEST_CASE("generation is reproducible per stream and differs across counters") {
    Rng a = Rng::stream(5, "g", 0), b = Rng::stream(5, "g", 0), c = Rng::stream(5, "g", 1);
    auto g1 = gen_othello_game(a);
    auto g2 = gen_othello_game(b);
    auto g3 = gen_othello_game(c);
    REQUIRE(g1 == g2);
    REQUIRE(g1 != g3);
}

TEST_CASE("dataset files round-trip bit-exactly") {
    namespace fs = std::filesystem;
    fs::create_directories("test_tmp");
    std::string path = "test_tmp/ds.bin";

    Dataset ds = make_majority_dataset(8, 10, 3, 99);
    // one corpus-style example with a [0,1] position feature and a hole mask
    Example ex;
    ex.tokens = {0, 2, 1, 2, 0};
    size_t T = ex.tokens.size();
    std::vector<float> posf(T);
    for (size_t i = 0; i < T; ++i) posf[i] = float(i) / float(T - 1);
    ex.features["story_position"] = posf;
    ex.masks["story_position"] = {1, 1, 0, 1, 1};
    ds.examples.push_back(ex);

    save_dataset(path, ds);
    Dataset back = load_annotated_corpus(path);
    REQUIRE(back.vocab == ds.vocab);
    REQUIRE(back.examples.size() == ds.examples.size());
    for (size_t i = 0; i < ds.examples.size(); ++i) {
        REQUIRE(back.examples[i].tokens == ds.examples[i].tokens);
        REQUIRE(back.examples[i].features == ds.examples[i].features);
        REQUIRE(back.examples[i].masks == ds.examples[i].masks);
    }
    const auto& pf = back.examples.back().features.at("story_position");
    REQUIRE(pf.front() == 0.0f);
    REQUIRE(pf.back() == 1.0f);

    // same generator seed, same bytes
    save_dataset("test_tmp/ds2.bin", make_majority_dataset(8, 10, 3, 99));
    save_dataset("test_tmp/ds3.bin", make_majority_dataset(8, 10, 3, 99));
    REQUIRE(read_text_file("test_tmp/ds2.bin") == read_text_file("test_tmp/ds3.bin"));
    REQUIRE(read_text_file("test_tmp/ds2.bin") != read_text_file(path));
}

TEST_CASE("dataset loader rejects malformed input") {
    namespace fs = std::filesystem;
    fs::create_directories("test_tmp");

    {  // wrong magic
        ByteWriter w;
        w.u32(0xdeadbeef);
        w.u32(kDatasetVersion);
        w.u32(3);
        w.u32(0);
        w.save("test_tmp/bad_magic.bin");
        REQUIRE_THROWS_AS(load_annotated_corpus("test_tmp/bad_magic.bin"), TaskError);
    }
    {  // token out of vocab range
        ByteWriter w;
        w.u32(kDatasetMagic);
        w.u32(kDatasetVersion);
        w.u32(2);
        w.u32(1);
        w.u16(1);
        w.u16(5);
        w.u16(0);
        w.save("test_tmp/bad_tok.bin");
        REQUIRE_THROWS_AS(load_annotated_corpus("test_tmp/bad_tok.bin"), TaskError);
    }
    {  // feature array shorter than the token count
        ByteWriter w;
        w.u32(kDatasetMagic);
        w.u32(kDatasetVersion);
        w.u32(3);
        w.u32(1);
        w.u16(2);
        w.u16(0);
        w.u16(1);
        w.u16(1);           // one feature
        w.str16("f");
        w.f32(0.5f);        // only one value for two positions
        w.u8(1);
        w.u8(1);
        w.save("test_tmp/short_feat.bin");
        REQUIRE_THROWS_AS(load_annotated_corpus("test_tmp/short_feat.bin"), std::runtime_error);
    }
    {  // truncated mid-example
        ByteWriter w;
        w.u32(kDatasetMagic);
        w.u32(kDatasetVersion);
        w.u32(3);
        w.u32(2);
        w.u16(4);
        w.save("test_tmp/trunc.bin");
        REQUIRE_THROWS_AS(load_annotated_corpus("test_tmp/trunc.bin"), IoError);
    }
    {  // saving mismatched feature length fails up front
        Dataset ds;
        ds.vocab = 3;
        Example ex;
        ex.tokens = {0, 1, 2};
        ex.features["f"] = {1.0f};
        ex.masks["f"] = {1, 1, 1};
        ds.examples.push_back(ex);
        REQUIRE_THROWS_AS(save_dataset("test_tmp/never.bin", ds), TaskError);
    }
}

TEST_CASE("othello dataset stores tokens only and derives labels on demand") {
    Dataset ds = make_othello_dataset(4, 123);
    REQUIRE(ds.vocab == uint32_t(kOthelloVocab));
    for (const Example& ex : ds.examples) {
        REQUIRE(ex.features.empty());
        REQUIRE(ex.tokens.size() == size_t(kOthelloTurns));
    }
    Example ex = ds.examples[0];
    derive_features(TaskKind::othello, ex);
    REQUIRE(ex.features.size() == 128);

    // derived labels equal the transcript generator's own
    Rng rng = Rng::stream(123, "gen/othello", 0);
    Example direct = othello_transcript(rng);
    REQUIRE(direct.tokens == ex.tokens);
    REQUIRE(direct.features == ex.features);
    REQUIRE(direct.masks == ex.masks);
}
