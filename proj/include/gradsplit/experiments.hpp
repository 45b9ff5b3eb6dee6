#pragma once

// Canned experiment setups shared by the run driver, the CLI, and the
// acceptance gate: the five toy training configurations (two counting tasks
// crossed with tied / myopic / untied-stitching variants) over a seed list,
// plus the artifact layout that lets finished runs be reused. A run directory
// is trusted iff its DONE file holds the fingerprint of the exact
// configuration that would be run now.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradsplit/io.hpp"
#include "gradsplit/model.hpp"
#include "gradsplit/tasks.hpp"
#include "gradsplit/training.hpp"

namespace gradsplit {

// Toy task shape: M random tokens from a V-way alphabet, then M copies of
// the token the task's rule selects. Sequences are 2M long.
inline constexpr int kToyM = 10;
inline constexpr int kToyV = 3;
inline constexpr int kToySeqLen = 2 * kToyM;
inline constexpr int kToyTrainCount = 102400;
inline constexpr int kToyEvalCount = 10240;

// Train and eval draws come from disjoint generator streams.
inline constexpr uint64_t kToyEvalSeedOffset = 0x100000;

struct ToyRunSpec {
    TaskKind task = TaskKind::majority;
    bool myopic = false;
    std::optional<int> untie_at;
    uint64_t seed = 1;
};

inline std::string toy_mode_tag(const ToyRunSpec& s) {
    std::string tag = s.myopic ? "myopic" : "tied";
    if (s.untie_at) tag += "_untied" + std::to_string(*s.untie_at);
    return tag;
}

inline std::string toy_run_name(const ToyRunSpec& s) {
    std::string task = s.task == TaskKind::majority ? "majority" : "condmaj";
    return task + "_" + toy_mode_tag(s) + "_s" + std::to_string(s.seed);
}

inline ModelConfig toy_model_config() {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.hidden_dim = 128;
    mc.ffn_dim = 512;
    mc.vocab_size = kToyV;
    mc.max_seq_len = kToySeqLen;
    return mc;
}

inline TrainConfig toy_train_config(const ToyRunSpec& s) {
    TrainConfig tc;
    tc.optimizer = TrainConfig::Opt::adam;
    tc.lr = 1e-3;
    tc.batch_size = 256;
    tc.steps = 3000;
    tc.eval_every = 250;
    tc.ckpt_every = 0;  // checkpoint at step 0 and the final step only
    tc.myopic = s.myopic;
    tc.untie_at = s.untie_at;
    tc.seed = s.seed;
    return tc;
}

inline Dataset make_toy_dataset(TaskKind task, int count, uint64_t seed) {
    if (task == TaskKind::majority) return make_majority_dataset(count, kToyM, kToyV, seed);
    if (task == TaskKind::conditioned_majority)
        return make_conditioned_majority_dataset(count, kToyM, kToyV, seed);
    throw TaskError("make_toy_dataset: not a toy task");
}

// The five-configuration matrix behind the toy analyses: full training on
// both tasks, the myopic ablation on the conditioned task (tied and with the
// last untie_at positions on their own parameter set), and the same
// untied-myopic variant on plain majority for probe comparisons.
inline std::vector<ToyRunSpec> toy_matrix(int n_seeds) {
    std::vector<ToyRunSpec> out;
    for (uint64_t seed = 1; seed <= uint64_t(n_seeds); ++seed) {
        out.push_back({TaskKind::majority, false, std::nullopt, seed});
        out.push_back({TaskKind::majority, true, kToyM, seed});
        out.push_back({TaskKind::conditioned_majority, false, std::nullopt, seed});
        out.push_back({TaskKind::conditioned_majority, true, std::nullopt, seed});
        out.push_back({TaskKind::conditioned_majority, true, kToyM, seed});
    }
    return out;
}

// Mean next-token accuracy over the deterministic half of the sequence
// (rows M-1 .. 2M-2 predict the M copied tokens).
inline double toy_output_accuracy(const MetricRecord& rec, int M = kToyM) {
    double s = 0;
    int n = 0;
    for (int r = M - 1; r <= 2 * M - 2; ++r) {
        s += rec.per_position_accuracy.at(size_t(r));
        ++n;
    }
    return s / n;
}

// Fraction of examples whose argmax prediction at the first output slot
// (next-token row M-1) lands in the task's winning-token set. The generators
// sample output tokens uniformly among tied winners, so exact-match accuracy
// tops out at the tie rate even for a perfect model; membership in the
// winning set is what "solved the task" means.
template <class Real>
double first_output_set_accuracy(const Model<Real>& model, const std::vector<Real>& flat,
                                 const Dataset& ds, TaskKind task, int M = kToyM,
                                 int batch = 256) {
    int64_t N = int64_t(ds.examples.size());
    if (N == 0) throw TaskError("first_output_set_accuracy: empty dataset");
    int T = int(ds.examples.front().tokens.size());
    int V = int(model.config().vocab_size);
    int64_t correct = 0;
    std::vector<int32_t> toks;
    std::vector<int64_t> cnt(size_t(V), 0);
    for (int64_t at = 0; at < N; at += batch) {
        int B = int(std::min<int64_t>(batch, N - at));
        toks.assign(size_t(B) * size_t(T), 0);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t)
                toks[size_t(b) * T + t] = ds.examples[size_t(at + b)].tokens[size_t(t)];
        auto fw = model.forward(flat, toks, B, T);
        for (int b = 0; b < B; ++b) {
            const Example& ex = ds.examples[size_t(at + b)];
            std::fill(cnt.begin(), cnt.end(), 0);
            if (task == TaskKind::majority) {
                for (int i = 0; i < M; ++i) ++cnt[size_t(ex.tokens[size_t(i)])];
            } else if (task == TaskKind::conditioned_majority) {
                for (int i = 0; i + 1 < M; ++i)
                    if (ex.tokens[size_t(i)] == 0) ++cnt[size_t(ex.tokens[size_t(i + 1)])];
            } else {
                throw TaskError("first_output_set_accuracy: not a toy task");
            }
            int64_t best = *std::max_element(cnt.begin(), cnt.end());
            const Real* row = &fw.logits.v[(size_t(b) * T + size_t(M - 1)) * size_t(V)];
            int arg = 0;
            for (int v = 1; v < V; ++v)
                if (row[v] > row[arg]) arg = v;
            if (cnt[size_t(arg)] == best) ++correct;
        }
    }
    return double(correct) / double(N);
}

// Recomputes the set accuracy for a finished run from its final checkpoint
// and a regenerated eval split.
template <class Real>
double toy_checkpoint_first_output_accuracy(const ToyRunSpec& spec, const std::string& dir) {
    std::string path = dir + "/" + ckpt_name(toy_train_config(spec).steps);
    ModelConfig cfg = read_checkpoint_config(path);
    Model<Real> model(cfg);
    auto loaded = load_checkpoint<Real>(path, *model.index());
    Dataset eval = make_toy_dataset(spec.task, kToyEvalCount, spec.seed + kToyEvalSeedOffset);
    return first_output_set_accuracy(model, loaded.second, eval, spec.task);
}

template <class Real>
inline std::string toy_config_json(const ToyRunSpec& s) {
    nlohmann::json j;
    j["arch"] = toy_model_config();
    j["train"] = toy_train_config(s);
    j["task"] = task_name(s.task);
    j["data"] = {{"train_count", kToyTrainCount},
                 {"eval_count", kToyEvalCount},
                 {"train_seed", s.seed},
                 {"eval_seed", s.seed + kToyEvalSeedOffset},
                 {"M", kToyM},
                 {"V", kToyV}};
    j["precision"] = sizeof(Real) == 4 ? "f32" : "f64";
    return j.dump(2);
}

inline std::string config_fingerprint(const std::string& config_json) {
    return hash_hex(fnv1a(config_json.data(), config_json.size()));
}

inline std::string final_ckpt_name(int steps) { return ckpt_name(steps); }

// A run directory produced earlier is reusable iff DONE records the same
// configuration fingerprint and the final checkpoint file is present.
inline bool toy_run_reusable(const std::string& dir, const std::string& fingerprint, int steps) {
    namespace fs = std::filesystem;
    fs::path done = fs::path(dir) / "DONE";
    if (!fs::exists(done)) return false;
    std::string recorded = read_text_file(done.string());
    while (!recorded.empty() && (recorded.back() == '\n' || recorded.back() == '\r'))
        recorded.pop_back();
    if (recorded != fingerprint) return false;
    return fs::exists(fs::path(dir) / final_ckpt_name(steps)) &&
           fs::exists(fs::path(dir) / "metrics.jsonl");
}

struct ToyRunResult {
    std::string dir;
    bool reused = false;
    double final_output_accuracy = 0.0;
    double final_loss = 0.0;
};

// Reads the last record of a metrics.jsonl file.
inline MetricRecord last_metric(const std::string& metrics_path) {
    std::string text = read_text_file(metrics_path);
    size_t end = text.find_last_not_of("\r\n");
    if (end == std::string::npos) throw TrainError("metrics file is empty: " + metrics_path);
    size_t start = text.find_last_of('\n', end);
    start = start == std::string::npos ? 0 : start + 1;
    nlohmann::json j = nlohmann::json::parse(text.substr(start, end - start + 1));
    MetricRecord rec;
    rec.step = j.at("step").get<int>();
    rec.total_loss = j.at("total_loss").get<double>();
    rec.per_position_accuracy = j.at("per_position_accuracy").get<std::vector<double>>();
    rec.mode = j.at("mode").get<std::string>();
    return rec;
}

// Trains one toy configuration into root/<run name>/, or reuses the artifacts
// already there. Writes config.json, metrics.jsonl, checkpoints, and DONE.
template <class Real>
ToyRunResult run_toy(const ToyRunSpec& spec, const std::string& root) {
    namespace fs = std::filesystem;
    std::string dir = (fs::path(root) / toy_run_name(spec)).string();
    std::string config = toy_config_json<Real>(spec);
    std::string fp = config_fingerprint(config);
    TrainConfig tc = toy_train_config(spec);

    ToyRunResult res;
    res.dir = dir;
    if (toy_run_reusable(dir, fp, tc.steps)) {
        MetricRecord rec = last_metric(dir + "/metrics.jsonl");
        res.reused = true;
        res.final_output_accuracy = toy_output_accuracy(rec);
        res.final_loss = rec.total_loss;
        return res;
    }

    fs::create_directories(dir);
    write_text_file(dir + "/config.json", config);
    Dataset train = make_toy_dataset(spec.task, kToyTrainCount, spec.seed);
    Dataset eval = make_toy_dataset(spec.task, kToyEvalCount, spec.seed + kToyEvalSeedOffset);
    TrainRun<Real> run = train_run<Real>(toy_model_config(), tc, train, eval, dir);
    write_text_file(dir + "/DONE", fp + "\n");

    const MetricRecord& rec = run.metrics.back();
    res.final_output_accuracy = toy_output_accuracy(rec);
    res.final_loss = rec.total_loss;
    return res;
}

}  // namespace gradsplit
