#pragma once
// Synthetic tasks and dataset IO. Three generators share the Example shape:
// token-count majority, A-conditioned majority, and random Othello games with
// per-square board labels. Feature targets are deterministic functions of the
// token sequence, so Othello datasets store tokens only and labels are
// rebuilt on demand (storing 128 per-position arrays per game would dwarf the
// tokens by three orders of magnitude).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradsplit/io.hpp"
#include "gradsplit/rng.hpp"

namespace gradsplit {

struct TaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Example {
    std::vector<int32_t> tokens;
    // Per-position targets and validity flags, keyed by feature name. Every
    // array matches tokens.size(); mask 0 positions are excluded from fits
    // and metrics but still occupy a slot.
    std::map<std::string, std::vector<float>> features;
    std::map<std::string, std::vector<uint8_t>> masks;
};

struct Dataset {
    uint32_t vocab = 0;
    std::vector<Example> examples;
};

enum class TaskKind { majority, conditioned_majority, othello, corpus };

inline const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::majority: return "majority";
        case TaskKind::conditioned_majority: return "conditioned_majority";
        case TaskKind::othello: return "othello";
        case TaskKind::corpus: return "corpus";
    }
    return "?";
}

inline TaskKind task_from_string(const std::string& s) {
    if (s == "majority") return TaskKind::majority;
    if (s == "conditioned_majority") return TaskKind::conditioned_majority;
    if (s == "othello") return TaskKind::othello;
    if (s == "corpus") return TaskKind::corpus;
    throw TaskError("unknown task: " + s);
}

// ---------------------------------------------------------------------------
// Majority: M uniform tokens, then M tokens sampled uniformly from the set of
// most-frequent prefix tokens. Feature "majority_token" at position i is the
// most frequent token over the first min(i+1, M) tokens, smallest id on ties
// (the sampled token is uniform over the tied set; the regression target
// needs a single scalar, hence the deterministic pick).

inline Example gen_majority(int M, int V, Rng& rng) {
    if (M < 1 || V < 2) throw TaskError("gen_majority: need M >= 1, V >= 2");
    Example ex;
    ex.tokens.resize(size_t(2 * M));
    std::vector<int64_t> cnt(size_t(V), 0);
    std::vector<float> f1(size_t(2 * M));
    for (int i = 0; i < M; ++i) {
        int t = int(rng.uniform_int(V));
        ex.tokens[size_t(i)] = t;
        ++cnt[size_t(t)];
        int lead = 0;
        for (int v = 1; v < V; ++v)
            if (cnt[size_t(v)] > cnt[size_t(lead)]) lead = v;
        f1[size_t(i)] = float(lead);
    }
    int64_t best = *std::max_element(cnt.begin(), cnt.end());
    std::vector<int32_t> arg;
    for (int v = 0; v < V; ++v)
        if (cnt[size_t(v)] == best) arg.push_back(v);
    for (int i = M; i < 2 * M; ++i) {
        ex.tokens[size_t(i)] = arg[size_t(rng.uniform_int(int64_t(arg.size())))];
        f1[size_t(i)] = f1[size_t(M - 1)];  // counts frozen after the prefix
    }
    ex.features["majority_token"] = std::move(f1);
    ex.masks["majority_token"] = std::vector<uint8_t>(size_t(2 * M), 1);
    return ex;
}

// ---------------------------------------------------------------------------
// Conditioned majority: the output phase repeats whichever token most often
// followed token 0 ("A") inside the prefix. Prefixes with no A before the
// last prefix slot are resampled, otherwise the transition table is empty.
// Feature "after_A" at position i is 1 iff the previous token is A (0 at the
// first position).

inline Example gen_conditioned_majority(int M, int V, Rng& rng) {
    if (M < 2 || V < 2) throw TaskError("gen_conditioned_majority: need M >= 2, V >= 2");
    Example ex;
    ex.tokens.resize(size_t(2 * M));
    std::vector<int64_t> cnt(size_t(V), 0);
    for (;;) {
        for (int i = 0; i < M; ++i) ex.tokens[size_t(i)] = int32_t(rng.uniform_int(V));
        std::fill(cnt.begin(), cnt.end(), 0);
        bool any = false;
        for (int i = 0; i + 1 < M; ++i) {
            if (ex.tokens[size_t(i)] == 0) {
                ++cnt[size_t(ex.tokens[size_t(i + 1)])];
                any = true;
            }
        }
        if (any) break;
    }
    int64_t best = *std::max_element(cnt.begin(), cnt.end());
    std::vector<int32_t> arg;
    for (int v = 0; v < V; ++v)
        if (cnt[size_t(v)] == best) arg.push_back(v);
    for (int i = M; i < 2 * M; ++i)
        ex.tokens[size_t(i)] = arg[size_t(rng.uniform_int(int64_t(arg.size())))];
    std::vector<float> f2(size_t(2 * M), 0.0f);
    for (int i = 1; i < 2 * M; ++i) f2[size_t(i)] = ex.tokens[size_t(i - 1)] == 0 ? 1.0f : 0.0f;
    ex.features["after_A"] = std::move(f2);
    ex.masks["after_A"] = std::vector<uint8_t>(size_t(2 * M), 1);
    return ex;
}

// ---------------------------------------------------------------------------
// Othello. Bitboards, one uint64 per color, square id = rank*8 + file with
// file A..H and rank 1..8. Token 64 is pass. Games run exactly 60 turns and
// pad with passes once neither side can move.

constexpr int kPass = 64;
constexpr int kOthelloVocab = 65;
constexpr int kOthelloTurns = 60;

enum class Cell : int8_t { empty = 0, black = 1, white = 2 };

struct OthelloState {
    uint64_t black = (1ull << 28) | (1ull << 35);  // E4, D5
    uint64_t white = (1ull << 27) | (1ull << 36);  // D4, E5
    int8_t to_move = 1;                            // 1 black, 2 white
    int32_t move_count = 0;
};

inline Cell othello_cell(const OthelloState& s, int sq) {
    uint64_t bit = 1ull << sq;
    if (s.black & bit) return Cell::black;
    if (s.white & bit) return Cell::white;
    return Cell::empty;
}

inline std::string square_name(int sq) {
    std::string n(2, '?');
    n[0] = char('A' + sq % 8);
    n[1] = char('1' + sq / 8);
    return n;
}

namespace detail {

// Shift the whole bitboard one step in direction d, masking off wrap-around
// between file H and file A.
inline uint64_t shift_dir(uint64_t x, int d) {
    constexpr uint64_t kNotA = 0xfefefefefefefefeull;
    constexpr uint64_t kNotH = 0x7f7f7f7f7f7f7f7full;
    switch (d) {
        case 0: return (x << 1) & kNotA;  // +file
        case 1: return (x >> 1) & kNotH;  // -file
        case 2: return x << 8;            // +rank
        case 3: return x >> 8;            // -rank
        case 4: return (x << 9) & kNotA;  // +rank +file
        case 5: return (x << 7) & kNotH;  // +rank -file
        case 6: return (x >> 7) & kNotA;  // -rank +file
        default: return (x >> 9) & kNotH; // -rank -file
    }
}

}  // namespace detail

// Bitmask of squares where the mover flips at least one opponent stone.
inline uint64_t othello_legal_moves(const OthelloState& s) {
    uint64_t P = s.to_move == 1 ? s.black : s.white;
    uint64_t O = s.to_move == 1 ? s.white : s.black;
    uint64_t empty = ~(P | O);
    uint64_t moves = 0;
    for (int d = 0; d < 8; ++d) {
        uint64_t t = detail::shift_dir(P, d) & O;
        for (int k = 0; k < 5; ++k) t |= detail::shift_dir(t, d) & O;
        moves |= detail::shift_dir(t, d) & empty;
    }
    return moves;
}

inline OthelloState othello_apply(const OthelloState& s, int move) {
    uint64_t legal = othello_legal_moves(s);
    OthelloState out = s;
    if (move == kPass) {
        if (legal) throw TaskError("othello_apply: pass while moves are legal");
    } else {
        if (move < 0 || move >= 64 || !(legal & (1ull << move)))
            throw TaskError("othello_apply: illegal move " + std::to_string(move));
        uint64_t P = s.to_move == 1 ? s.black : s.white;
        uint64_t O = s.to_move == 1 ? s.white : s.black;
        uint64_t bit = 1ull << move;
        uint64_t flips = 0;
        for (int d = 0; d < 8; ++d) {
            uint64_t run = 0, c = detail::shift_dir(bit, d);
            while (c & O) {
                run |= c;
                c = detail::shift_dir(c, d);
            }
            if (c & P) flips |= run;
        }
        P |= bit | flips;
        O &= ~flips;
        out.black = s.to_move == 1 ? P : O;
        out.white = s.to_move == 1 ? O : P;
    }
    out.to_move = int8_t(3 - s.to_move);
    out.move_count = s.move_count + 1;
    return out;
}

// Board from the perspective of the player to move: +1 own stone, -1
// opponent stone, 0 empty. Applying a move toggles to_move, so consecutive
// labels of an unchanged square alternate sign.
inline std::array<float, 64> board_label(const OthelloState& s) {
    uint64_t mine = s.to_move == 1 ? s.black : s.white;
    uint64_t theirs = s.to_move == 1 ? s.white : s.black;
    std::array<float, 64> lab{};
    for (int sq = 0; sq < 64; ++sq) {
        uint64_t bit = 1ull << sq;
        lab[size_t(sq)] = (mine & bit) ? 1.0f : (theirs & bit) ? -1.0f : 0.0f;
    }
    return lab;
}

enum class SquareClass { useful, useless, excluded };

// A stone is useful when recoloring it changes the mover's legal set; empty
// squares are out of scope.
inline SquareClass classify_square(const OthelloState& s, int sq) {
    uint64_t bit = 1ull << sq;
    if (!((s.black | s.white) & bit)) return SquareClass::excluded;
    OthelloState flipped = s;
    flipped.black ^= bit;
    flipped.white ^= bit;
    return othello_legal_moves(flipped) != othello_legal_moves(s) ? SquareClass::useful
                                                                  : SquareClass::useless;
}

inline std::vector<int32_t> gen_othello_game(Rng& rng) {
    OthelloState s;
    std::vector<int32_t> toks;
    toks.reserve(kOthelloTurns);
    for (int t = 0; t < kOthelloTurns; ++t) {
        uint64_t legal = othello_legal_moves(s);
        int mv = kPass;
        if (legal) {
            int k = int(rng.uniform_int(std::popcount(legal)));
            uint64_t m = legal;
            for (int i = 0; i < k; ++i) m &= m - 1;
            mv = std::countr_zero(m);
        }
        s = othello_apply(s, mv);
        toks.push_back(mv);
    }
    return toks;
}

// Replays a transcript and attaches, per square, the post-move board value
// ("board.D3", always valid) and a usefulness flag ("useful.D3", masked to
// occupied squares).
inline void derive_othello_features(Example& ex) {
    size_t T = ex.tokens.size();
    std::array<std::vector<float>*, 64> bf{}, uf{};
    std::array<std::vector<uint8_t>*, 64> bm{}, um{};
    for (int sq = 0; sq < 64; ++sq) {
        std::string n = square_name(sq);
        bf[size_t(sq)] = &ex.features["board." + n];
        bm[size_t(sq)] = &ex.masks["board." + n];
        uf[size_t(sq)] = &ex.features["useful." + n];
        um[size_t(sq)] = &ex.masks["useful." + n];
        bf[size_t(sq)]->assign(T, 0.0f);
        bm[size_t(sq)]->assign(T, 1);
        uf[size_t(sq)]->assign(T, 0.0f);
        um[size_t(sq)]->assign(T, 0);
    }
    OthelloState s;
    for (size_t t = 0; t < T; ++t) {
        s = othello_apply(s, int(ex.tokens[t]));
        auto lab = board_label(s);
        for (int sq = 0; sq < 64; ++sq) {
            (*bf[size_t(sq)])[t] = lab[size_t(sq)];
            SquareClass c = classify_square(s, sq);
            if (c != SquareClass::excluded) {
                (*um[size_t(sq)])[t] = 1;
                (*uf[size_t(sq)])[t] = c == SquareClass::useful ? 1.0f : 0.0f;
            }
        }
    }
}

inline Example othello_transcript(Rng& rng) {
    Example ex;
    ex.tokens = gen_othello_game(rng);
    derive_othello_features(ex);
    return ex;
}

// ---------------------------------------------------------------------------
// Feature rebuild for examples loaded from token-only files. Majority-family
// features are recomputed exactly as the generators defined them; corpus
// examples carry whatever the file had.

inline void derive_features(TaskKind k, Example& ex) {
    if (!ex.features.empty()) return;
    size_t T = ex.tokens.size();
    switch (k) {
        case TaskKind::majority: {
            size_t M = T / 2;
            int V = 0;
            for (int32_t t : ex.tokens) V = std::max(V, int(t) + 1);
            std::vector<int64_t> cnt(size_t(V), 0);
            std::vector<float> f1(T);
            int lead = 0;
            for (size_t i = 0; i < T; ++i) {
                if (i < M) {
                    ++cnt[size_t(ex.tokens[i])];
                    lead = 0;
                    for (int v = 1; v < V; ++v)
                        if (cnt[size_t(v)] > cnt[size_t(lead)]) lead = v;
                }
                f1[i] = float(lead);
            }
            ex.features["majority_token"] = std::move(f1);
            ex.masks["majority_token"] = std::vector<uint8_t>(T, 1);
            break;
        }
        case TaskKind::conditioned_majority: {
            std::vector<float> f2(T, 0.0f);
            for (size_t i = 1; i < T; ++i) f2[i] = ex.tokens[i - 1] == 0 ? 1.0f : 0.0f;
            ex.features["after_A"] = std::move(f2);
            ex.masks["after_A"] = std::vector<uint8_t>(T, 1);
            break;
        }
        case TaskKind::othello: derive_othello_features(ex); break;
        case TaskKind::corpus: break;
    }
}

// ---------------------------------------------------------------------------
// Dataset files: "GSDS" magic, version, vocab, then per example the tokens
// and a feature directory (name, f32 values, u8 masks, all sized by the
// token count).

constexpr uint32_t kDatasetMagic = 0x53445347;  // "GSDS"
constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const Dataset& ds) {
    ByteWriter w;
    w.u32(kDatasetMagic);
    w.u32(kDatasetVersion);
    w.u32(ds.vocab);
    w.u32(uint32_t(ds.examples.size()));
    for (const Example& ex : ds.examples) {
        if (ex.tokens.size() > 0xffff) throw TaskError("save_dataset: sequence too long");
        w.u16(uint16_t(ex.tokens.size()));
        for (int32_t t : ex.tokens) {
            if (t < 0 || uint32_t(t) >= ds.vocab) throw TaskError("save_dataset: token out of range");
            w.u16(uint16_t(t));
        }
        if (ex.features.size() != ex.masks.size())
            throw TaskError("save_dataset: features and masks disagree");
        w.u16(uint16_t(ex.features.size()));
        for (const auto& [name, vals] : ex.features) {
            auto mit = ex.masks.find(name);
            if (mit == ex.masks.end() || vals.size() != ex.tokens.size() ||
                mit->second.size() != ex.tokens.size())
                throw TaskError("save_dataset: feature arrays must match token count: " + name);
            w.str16(name);
            for (float v : vals) w.f32(v);
            for (uint8_t m : mit->second) w.u8(m);
        }
    }
    w.save(path);
}

inline Dataset load_annotated_corpus(const std::string& path) {
    ByteReader r = ByteReader::load(path);
    if (r.u32() != kDatasetMagic) throw TaskError("dataset: bad magic in " + path);
    if (r.u32() != kDatasetVersion) throw TaskError("dataset: unsupported version in " + path);
    Dataset ds;
    ds.vocab = r.u32();
    uint32_t count = r.u32();
    ds.examples.resize(count);
    for (Example& ex : ds.examples) {
        uint16_t len = r.u16();
        ex.tokens.resize(len);
        for (uint16_t i = 0; i < len; ++i) {
            uint16_t t = r.u16();
            if (t >= ds.vocab) throw TaskError("dataset: token out of range in " + path);
            ex.tokens[i] = int32_t(t);
        }
        uint16_t nf = r.u16();
        for (uint16_t f = 0; f < nf; ++f) {
            std::string name = r.str16();
            auto& vals = ex.features[name];
            auto& mask = ex.masks[name];
            vals.resize(len);
            mask.resize(len);
            for (uint16_t i = 0; i < len; ++i) vals[i] = r.f32();
            for (uint16_t i = 0; i < len; ++i) mask[i] = r.u8();
        }
    }
    if (!r.done()) throw TaskError("dataset: trailing bytes in " + path);
    return ds;
}

// ---------------------------------------------------------------------------
// Batch builders used by the training and analysis pipelines. Each example is
// generated on its own counter-derived stream, so datasets are reproducible
// under any generation order or parallel split.

inline Dataset make_majority_dataset(int count, int M, int V, uint64_t seed) {
    Dataset ds;
    ds.vocab = uint32_t(V);
    ds.examples.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        Rng rng = Rng::stream(seed, "gen/majority", uint64_t(i));
        ds.examples.push_back(gen_majority(M, V, rng));
    }
    return ds;
}

inline Dataset make_conditioned_majority_dataset(int count, int M, int V, uint64_t seed) {
    Dataset ds;
    ds.vocab = uint32_t(V);
    ds.examples.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        Rng rng = Rng::stream(seed, "gen/conditioned_majority", uint64_t(i));
        ds.examples.push_back(gen_conditioned_majority(M, V, rng));
    }
    return ds;
}

// Token-only games; call derive_features(TaskKind::othello, ex) when labels
// are needed.
inline Dataset make_othello_dataset(int count, uint64_t seed) {
    Dataset ds;
    ds.vocab = kOthelloVocab;
    ds.examples.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        Rng rng = Rng::stream(seed, "gen/othello", uint64_t(i));
        Example ex;
        ex.tokens = gen_othello_game(rng);
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace gradsplit
