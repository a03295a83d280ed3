#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "hiacg/acg.hpp"
#include "hiacg/corpus.hpp"
#include "hiacg/hi_acg.hpp"
#include "hiacg/metrics.hpp"
#include "hiacg/midi.hpp"

namespace hiacg {

inline double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw ShapeError("cosine distance of unequal vectors");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) return 1.0;
    double d = 1.0 - dot / std::sqrt(na * nb);
    return std::min(2.0, std::max(0.0, d));
}

// ---------------------------------------------------------------------------
// Feature-drift experiment: free-run vs teacher-forced semantic features.
// ---------------------------------------------------------------------------

using FeatureSeq = std::vector<std::vector<float>>;

// One comparison arm: teacher-forced feature extractor plus a free-running
// one. Wrapping them in functions lets tests compare a model against itself.
struct DriftArm {
    std::function<FeatureSeq(const TokenMatrix&)> teacher;
    std::function<FeatureSeq(const TokenMatrix&, int, int, const SamplerConfig&)> free_run;
};

inline DriftArm drift_arm(const AcgModel& model) {
    return {[&model](const TokenMatrix& m) { return model.teacher_features(m); },
            [&model](const TokenMatrix& m, int p, int s, const SamplerConfig& cfg) {
                return model.free_run_features(m, p, s, cfg);
            }};
}

inline DriftArm drift_arm(const FlatBaseline& model) {
    return {[&model](const TokenMatrix& m) { return model.teacher_features(m); },
            [&model](const TokenMatrix& m, int p, int s, const SamplerConfig& cfg) {
                return model.free_run_features(m, p, s, cfg);
            }};
}

struct DriftCurve {
    std::vector<double> acg;       // mean cosine distance at steps 1..N
    std::vector<double> baseline;
    double mean_acg = 0.0;
    double mean_baseline = 0.0;
    double mean_reduction = 0.0;  // 1 - mean_acg / mean_baseline
    int pieces_used = 0;
    int pieces_filtered = 0;
};

inline DriftCurve drift_compare(const DriftArm& arm_a, const DriftArm& arm_b,
                                const std::vector<TokenMatrix>& pieces, int steps,
                                int prompt_blocks, const SamplerConfig& sampler) {
    if (steps < 1 || prompt_blocks < 0) throw ValueError("bad drift parameters");
    DriftCurve curve;
    curve.acg.assign(steps, 0.0);
    curve.baseline.assign(steps, 0.0);
    uint64_t piece_idx = 0;
    for (const auto& piece : pieces) {
        ++piece_idx;
        if (piece.n_cols < prompt_blocks + steps) {
            ++curve.pieces_filtered;
            continue;
        }
        SamplerConfig piece_sampler = sampler;
        piece_sampler.seed = sampler.seed ^ (piece_idx * 0x9e3779b97f4a7c15ull);
        FeatureSeq ta = arm_a.teacher(piece);
        FeatureSeq fa = arm_a.free_run(piece, prompt_blocks, steps, piece_sampler);
        FeatureSeq tb = arm_b.teacher(piece);
        FeatureSeq fb = arm_b.free_run(piece, prompt_blocks, steps, piece_sampler);
        for (int s = 0; s < steps; ++s) {
            curve.acg[s] += cosine_distance(fa[s], ta[prompt_blocks + s]);
            curve.baseline[s] += cosine_distance(fb[s], tb[prompt_blocks + s]);
        }
        ++curve.pieces_used;
    }
    if (curve.pieces_used == 0)
        throw ValueError("no evaluation piece has at least " +
                         std::to_string(prompt_blocks + steps) + " blocks");
    for (int s = 0; s < steps; ++s) {
        curve.acg[s] /= curve.pieces_used;
        curve.baseline[s] /= curve.pieces_used;
        curve.mean_acg += curve.acg[s];
        curve.mean_baseline += curve.baseline[s];
    }
    curve.mean_acg /= steps;
    curve.mean_baseline /= steps;
    curve.mean_reduction = curve.mean_baseline == 0.0 && curve.mean_acg == 0.0
                               ? 0.0
                               : 1.0 - curve.mean_acg / curve.mean_baseline;
    return curve;
}

inline DriftCurve drift_experiment(const AcgModel& acg, const FlatBaseline& baseline,
                                   const std::vector<TokenMatrix>& pieces, int steps,
                                   int prompt_blocks, const SamplerConfig& sampler) {
    return drift_compare(drift_arm(acg), drift_arm(baseline), pieces, steps, prompt_blocks,
                         sampler);
}

// ---------------------------------------------------------------------------
// Complexity benchmark: instrumented attention-score multiply counts.
// ---------------------------------------------------------------------------

struct ComplexityRow {
    int64_t tokens = 0;           // requested length L
    int64_t blocks = 0;           // ceil(L / n)
    uint64_t baseline_count = 0;  // instrumented score multiplies
    uint64_t baseline_expected = 0;
    uint64_t acg_count = 0;
    uint64_t acg_expected = 0;
    double baseline_ms = 0.0;
    double acg_ms = 0.0;
};

struct ComplexityReport {
    std::vector<ComplexityRow> rows;
    double baseline_slope = 0.0;  // log-log slope of counts vs tokens
    double acg_slope = 0.0;
};

// Closed-form score-multiply counts for incremental generation: feeding
// position i attends over i cached positions, each dot product costing
// `dim` multiplies per layer.
inline uint64_t expected_flat_count(int layers, int dim, int64_t positions) {
    return static_cast<uint64_t>(layers) * dim *
           (static_cast<uint64_t>(positions) * (positions + 1) / 2);
}

inline uint64_t expected_acg_count(const AcgConfig& cfg, int64_t blocks) {
    uint64_t n = cfg.block_len();
    uint64_t sem = static_cast<uint64_t>(cfg.sem_layers) * cfg.hidden_dim *
                   (static_cast<uint64_t>(blocks) * (blocks + 1) / 2);
    uint64_t rec = static_cast<uint64_t>(blocks) * cfg.rec_layers * cfg.hidden_dim *
                   (n * (n + 1) / 2);
    return sem + rec;
}

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= x.size();
    my /= y.size();
    double num = 0, den = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        num += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        den += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return num / den;
}

inline ComplexityReport complexity_bench(const AcgModel& acg, const FlatBaseline& baseline,
                                         const std::vector<int64_t>& lengths,
                                         const SamplerConfig& sampler) {
    if (lengths.size() < 3) throw ValueError("need at least 3 lengths to fit a slope");
    using clock = std::chrono::steady_clock;
    ComplexityReport report;
    int n = acg.config().block_len();
    for (int64_t len : lengths) {
        ComplexityRow row;
        row.tokens = len;
        row.blocks = (len + n - 1) / n;
        auto t0 = clock::now();
        baseline.generate_tokens(len, sampler, &row.baseline_count);
        auto t1 = clock::now();
        Condition cond;
        cond.target_blocks = static_cast<int>(row.blocks);
        acg.generate(cond, sampler, &row.acg_count);
        auto t2 = clock::now();
        row.baseline_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        row.acg_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
        row.baseline_expected =
            expected_flat_count(baseline.config().layers, baseline.config().hidden_dim, len);
        row.acg_expected = expected_acg_count(acg.config(), row.blocks);
        report.rows.push_back(row);
    }
    std::vector<double> xs, yb, ya;
    for (const auto& r : report.rows) {
        xs.push_back(static_cast<double>(r.tokens));
        yb.push_back(static_cast<double>(r.baseline_count));
        ya.push_back(static_cast<double>(r.acg_count));
    }
    report.baseline_slope = loglog_slope(xs, yb);
    report.acg_slope = loglog_slope(xs, ya);
    return report;
}

// ---------------------------------------------------------------------------
// Ablation sweep over model sizes and patch configs.
// ---------------------------------------------------------------------------

struct AblationSize {
    std::string name;
    int sem_layers;
    int rec_layers;
};

inline std::vector<AblationSize> default_ablation_sizes() {
    return {{"small", 8, 4}, {"middle", 10, 5}, {"large", 12, 6}};
}

struct AblationCell {
    std::string size_name;
    PatchConfig patch;
    int vocab = 0;
    bool skipped = false;
    std::string skip_reason;
    double final_loss = 0.0;
    double pitch = 0.0, rhythm = 0.0, harmony = 0.0, melody = 0.0;
    int eval_pieces = 0;
};

struct AblationOptions {
    int hidden_dim = 64;
    int heads = 4;
    int train_steps = 50;
    int gen_pieces = 4;
    int gen_blocks = 8;
    uint64_t seed = 1;
};

inline AblationCell run_ablation_cell(const std::vector<PianoRoll>& corpus,
                                      const AblationSize& size, PatchConfig patch,
                                      const AblationOptions& opt) {
    AblationCell cell;
    cell.size_name = size.name;
    cell.patch = patch;
    try {
        patch.validate();
    } catch (const Error& e) {
        cell.skipped = true;
        cell.skip_reason = e.what();
        return cell;
    }
    cell.vocab = patch.vocab();

    AcgConfig cfg;
    cfg.patch = patch;
    cfg.hidden_dim = opt.hidden_dim;
    cfg.heads = opt.heads;
    cfg.sem_layers = size.sem_layers;
    cfg.rec_layers = size.rec_layers;
    AcgModel model(cfg, opt.seed);
    Adam adam;

    std::vector<TokenMatrix> encoded;
    for (const auto& roll : corpus) {
        if (roll.steps() % patch.t != 0) continue;
        TokenMatrix m = encode(roll, patch);
        if (m.n_cols <= cfg.max_blocks) encoded.push_back(std::move(m));
    }
    if (encoded.empty()) {
        cell.skipped = true;
        cell.skip_reason = "no corpus piece fits this patch config";
        return cell;
    }
    for (int s = 0; s < opt.train_steps; ++s)
        cell.final_loss = model.train_step({encoded[s % encoded.size()]}, adam);

    int evaluated = 0;
    double pe = 0, re = 0, hc = 0, ms = 0;
    int ms_count = 0;
    for (int g = 0; g < opt.gen_pieces; ++g) {
        SamplerConfig sampler;
        sampler.seed = opt.seed * 1000 + g;
        Condition cond;
        cond.target_blocks = opt.gen_blocks;
        PianoRoll roll = decode(model.generate(cond, sampler));
        try {
            MetricReport rep = evaluate(roll);
            pe += rep.pitch_entropy;
            re += rep.rhythm_entropy;
            hc += rep.harmonic_consistency;
            if (rep.melodic_smoothness) {
                ms += *rep.melodic_smoothness;
                ++ms_count;
            }
            ++evaluated;
        } catch (const ValueError&) {
            // silent generation; skip this sample
        }
    }
    if (evaluated > 0) {
        cell.pitch = pe / evaluated;
        cell.rhythm = re / evaluated;
        cell.harmony = hc / evaluated;
        cell.melody = ms_count > 0 ? ms / ms_count : 0.0;
        cell.eval_pieces = evaluated;
    }
    return cell;
}

inline std::vector<AblationCell> ablation_sweep(const std::vector<PianoRoll>& corpus,
                                                const std::vector<AblationSize>& sizes,
                                                const std::vector<PatchConfig>& patches,
                                                const AblationOptions& opt) {
    std::vector<AblationCell> table;
    for (const auto& size : sizes)
        for (const auto& patch : patches)
            table.push_back(run_ablation_cell(corpus, size, patch, opt));
    return table;
}

// ---------------------------------------------------------------------------
// Run manifests and corpus files.
// ---------------------------------------------------------------------------

inline std::string hash_file_hex(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), {});
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

inline std::string hash_string_hex(const std::string& s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(s.data(), s.size())));
    return buf;
}

// Every harness run records enough to reproduce it: command, seed, config
// hash, and input/output file hashes.
struct RunManifest {
    std::string command;
    uint64_t seed = 0;
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> inputs;   // name -> content hash
    std::map<std::string, std::string> outputs;

    void add_input_file(const std::string& name, const std::string& path) {
        inputs[name] = hash_file_hex(path);
    }
    void add_output_file(const std::string& name, const std::string& path) {
        outputs[name] = hash_file_hex(path);
    }

    void write(const std::string& path) const {
        nlohmann::json j;
        j["command"] = command;
        j["seed"] = seed;
        j["config"] = config;
        std::string cfg_text;
        for (const auto& [k, v] : config) cfg_text += k + "=" + v + "\n";
        j["config_hash"] = hash_string_hex(cfg_text);
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        std::ofstream os(path);
        if (!os) throw ValueError("cannot open " + path + " for writing");
        os << j.dump(2) << "\n";
    }
};

inline void save_corpus_dir(const std::vector<PianoRoll>& corpus, const std::string& dir,
                            bool also_midi = false) {
    std::filesystem::create_directories(dir);
    char name[32];
    for (size_t i = 0; i < corpus.size(); ++i) {
        std::snprintf(name, sizeof name, "piece_%04zu", i);
        save_roll_file(corpus[i], dir + "/" + name + ".hprl");
        if (also_midi)
            write_file_bytes(dir + "/" + name + ".mid",
                             events_to_midi(pianoroll_to_events(corpus[i]), corpus[i].tempo_bpm()));
    }
}

// Loads every .hprl and .mid file in a directory, sorted by filename.
inline std::vector<PianoRoll> load_roll_dir(const std::string& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        if (ext == ".hprl" || ext == ".mid" || ext == ".midi") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValueError("no .hprl or .mid files in " + dir);
    std::vector<PianoRoll> rolls;
    for (const auto& f : files) {
        if (f.extension() == ".hprl")
            rolls.push_back(load_roll_file(f.string()));
        else
            rolls.push_back(midi_to_pianoroll(read_file_bytes(f.string())));
    }
    return rolls;
}

}  // namespace hiacg
