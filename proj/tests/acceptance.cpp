// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// fails. Heavier criteria print progress to keep long runs observable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "hiacg/harness.hpp"

using namespace hiacg;
using clk = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int number, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s — %s\n", pass ? "PASS" : "FAIL", number, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(clk::time_point t0) {
    return std::chrono::duration<double>(clk::now() - t0).count();
}

PianoRoll random_roll(Rng& rng, int64_t steps, double density = 0.12) {
    PianoRoll roll(steps);
    for (int r = 0; r < 88; ++r)
        for (int64_t s = 0; s < steps; ++s)
            if (rng.uniform() < density) roll.set(r, s, 1);
    return roll;
}

// --- criterion 1: codec exactness -------------------------------------------

void criterion_1() {
    auto t0 = clk::now();
    bool pass = true;
    std::string detail;
    Rng rng(20240101);
    for (PatchConfig cfg : {PatchConfig{1, 4}, PatchConfig{2, 4}, PatchConfig{3, 4}}) {
        for (int trial = 0; trial < 1000 && pass; ++trial) {
            PianoRoll roll = random_roll(rng, 64);
            if (decode(encode(roll, cfg)) != roll) {
                pass = false;
                detail = "round trip mismatch at patch " + std::to_string(cfg.d) + "x" +
                         std::to_string(cfg.t);
            }
        }
        if (cfg.d * cfg.t <= 12) {  // exhaustive single-patch round trip
            for (int tok = 0; tok < cfg.vocab() && pass; ++tok) {
                TokenMatrix m(cfg, 1);
                m.at(0, 0) = static_cast<uint16_t>(tok);
                if (encode(decode(m), cfg).at(0, 0) != tok) {
                    pass = false;
                    detail = "exhaustive token " + std::to_string(tok) + " failed";
                }
            }
        }
    }
    double secs = seconds_since(t0);
    if (secs >= 10.0) {
        pass = false;
        detail = "runtime " + std::to_string(secs) + " s exceeds 10 s";
    }
    if (pass)
        detail = "3000 random rolls + exhaustive patches round-trip bitwise in " +
                 std::to_string(secs).substr(0, 4) + " s";
    report(1, "codec exactness", pass, detail);
}

// --- criterion 2: shape law ---------------------------------------------------

void criterion_2() {
    bool pass = true;
    std::string detail = "encode yields (T/4)x44 tokens in [0,255] for T in {16,64,960}";
    Rng rng(2);
    for (int64_t steps : {16, 64, 960}) {
        PianoRoll roll = random_roll(rng, steps);
        TokenMatrix m = encode(roll);
        if (m.n_cols != steps / 4 || m.n_rows != 44) {
            pass = false;
            detail = "wrong shape for T=" + std::to_string(steps);
        }
        for (auto tok : m.tokens)
            if (tok > 255) {
                pass = false;
                detail = "token above 255";
            }
    }
    report(2, "shape law", pass, detail);
}

// --- criterion 3: gradient correctness ----------------------------------------

using DT = TensorT<double>;

template <typename LossFn>
double worst_fd_error(std::vector<DT> params, LossFn loss_fn, double eps = 1e-4) {
    for (auto& p : params) p.zero_grad();
    backward(loss_fn());
    double worst = 0.0;
    for (auto& p : params) {
        auto analytic = p.grad();
        for (int64_t i = 0; i < p.numel(); ++i) {
            double orig = p.data()[i];
            p.data()[i] = orig + eps;
            double up = loss_fn().item();
            p.data()[i] = orig - eps;
            double dn = loss_fn().item();
            p.data()[i] = orig;
            double fd = (up - dn) / (2 * eps);
            worst = std::max(worst, std::abs(fd - analytic[i]) /
                                        std::max({1.0, std::abs(fd), std::abs(analytic[i])}));
        }
    }
    return worst;
}

void criterion_3() {
    auto t0 = clk::now();
    constexpr double kTol = 1e-3;
    constexpr int kInstances = 20;
    Rng rng(33);
    double worst = 0.0;
    std::string worst_op = "none";
    auto track = [&](const char* op, double err) {
        if (err > worst) {
            worst = err;
            worst_op = op;
        }
    };

    // fixed weights per check so the probed loss is one function
    auto make_w = [&rng](std::vector<int64_t> shape) { return DT::randn(std::move(shape), rng, 1.0); };
    auto wsum = [](const DT& x, const DT& w) { return ops::sum(ops::mul(x, w)); };
    for (int inst = 0; inst < kInstances; ++inst) {
        {
            auto a = DT::param(DT::randn({3, 4}, rng, 1.0));
            auto b = DT::param(DT::randn({4, 5}, rng, 1.0));
            auto w = make_w({3, 5});
            track("matmul", worst_fd_error({a, b}, [&] { return wsum(ops::matmul(a, b), w); }));
        }
        {
            auto a = DT::param(DT::randn({3, 5}, rng, 1.0));
            auto b = DT::param(DT::randn({5}, rng, 1.0));
            auto c = DT::param(DT::randn({3, 5}, rng, 1.0));
            auto w = make_w({3, 5});
            track("add", worst_fd_error({a, b, c}, [&] {
                return wsum(ops::add(ops::add(a, b), c), w);
            }));
            track("scale", worst_fd_error({a}, [&] { return wsum(ops::scale(a, -0.7), w); }));
            track("mul", worst_fd_error({a, c}, [&] { return wsum(ops::mul(a, c), w); }));
            track("sum", worst_fd_error({a}, [&] { return ops::sum(a); }));
        }
        {
            auto x = DT::param(DT::randn({4, 6}, rng, 1.0));
            auto w = make_w({4, 6});
            track("softmax", worst_fd_error({x}, [&] { return wsum(ops::softmax_rows(x), w); }));
            track("gelu", worst_fd_error({x}, [&] { return wsum(ops::gelu(x), w); }));
            auto ws = make_w({2, 6});
            track("slice", worst_fd_error({x}, [&] { return wsum(ops::slice_rows(x, 1, 2), ws); }));
            auto wr = make_w({6, 4});
            track("reshape", worst_fd_error({x}, [&] { return wsum(ops::reshape(x, {6, 4}), wr); }));
        }
        {
            auto x = DT::param(DT::randn({5, 5}, rng, 1.0));
            auto w = make_w({5, 5});
            track("softmax_causal",
                  worst_fd_error({x}, [&] { return wsum(ops::softmax_rows(x, true), w); }));
        }
        {
            auto x = DT::param(DT::randn({3, 8}, rng, 1.0));
            auto g = DT::param(DT::randn({8}, rng, 0.4));
            auto b = DT::param(DT::randn({8}, rng, 0.4));
            auto w = make_w({3, 8});
            track("layer_norm",
                  worst_fd_error({x, g, b}, [&] { return wsum(ops::layer_norm(x, g, b), w); }));
        }
        {
            auto tbl = DT::param(DT::randn({7, 4}, rng, 1.0));
            std::vector<int> ids{1, 6, 6, 0};
            auto w = make_w({4, 4});
            track("embedding", worst_fd_error({tbl}, [&] {
                return wsum(ops::embedding_lookup(tbl, ids), w);
            }));
        }
        {
            auto a = DT::param(DT::randn({2, 4}, rng, 1.0));
            auto b = DT::param(DT::randn({3, 4}, rng, 1.0));
            auto w = make_w({5, 4});
            track("concat", worst_fd_error({a, b}, [&] {
                return wsum(ops::concat_rows<double>({a, b}), w);
            }));
        }
        {
            auto logits = DT::param(DT::randn({4, 6}, rng, 1.0));
            std::vector<int> t{5, 0, 2, 2};
            track("cross_entropy",
                  worst_fd_error({logits}, [&] { return ops::cross_entropy(logits, t); }));
        }
        {
            auto q = DT::param(DT::randn({6, 8}, rng, 1.0));
            auto k = DT::param(DT::randn({6, 8}, rng, 1.0));
            auto v = DT::param(DT::randn({6, 8}, rng, 1.0));
            auto w = make_w({6, 8});
            track("attention", worst_fd_error({q, k, v}, [&] {
                return wsum(ops::multihead_attention(q, k, v, 2, true), w);
            }));
            track("attention_block", worst_fd_error({q, k, v}, [&] {
                return wsum(ops::multihead_attention(q, k, v, 2, true, 3), w);
            }));
        }
        {
            ParamStoreT<double> store;
            DecoderLayerT<double> layer;
            layer.init(store, "l.", 12, 3, rng);
            auto x = DT::param(DT::randn({4, 12}, rng, 1.0));
            std::vector<DT> params{x};
            for (auto& [n, t] : store.entries) params.push_back(t);
            auto w = make_w({4, 12});
            track("decoder_layer",
                  worst_fd_error(params, [&] { return wsum(layer.forward(x), w); }));
        }
    }
    double secs = seconds_since(t0);
    bool pass = worst < kTol && secs < 60.0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "worst rel err %.2e (%s) over %d instances/op in %.1f s",
                  worst, worst_op.c_str(), kInstances, secs);
    report(3, "gradient correctness", pass, buf);
}

// --- criterion 4: overfit oracle ----------------------------------------------

void criterion_4() {
    auto t0 = clk::now();
    auto corpus = make_toy_corpus(1, 7, 2, 2);  // one 8-block piece
    TokenMatrix piece = encode(corpus[0]);
    AcgConfig cfg;  // hidden 128 per the desk-scale pin
    cfg.sem_layers = 8;
    cfg.rec_layers = 4;
    AcgModel model(cfg, 42);
    Adam opt;
    constexpr int kSteps = 500;
    float loss = 1e9f;
    for (int s = 0; s < kSteps; ++s) {
        opt.lr = 1e-4 + 0.5 * (1e-3 - 1e-4) * (1.0 + std::cos(M_PI * s / kSteps));
        loss = model.train_step({piece}, opt);
        if ((s + 1) % 100 == 0) {
            std::printf("  criterion 4: step %d loss %.4f (%.0f s)\n", s + 1, loss,
                        seconds_since(t0));
            std::fflush(stdout);
        }
    }
    SamplerConfig greedy;
    greedy.greedy = true;
    Condition cond;
    cond.target_blocks = static_cast<int>(piece.n_cols);
    TokenMatrix regen = model.generate(cond, greedy);
    double secs = seconds_since(t0);
    bool loss_ok = loss < 0.1f;
    bool exact = regen == piece;
    bool time_ok = secs < 300.0;
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "loss %.4f after %d steps (<0.1 %s), greedy regeneration %s, %.0f s (<300)",
                  loss, kSteps, loss_ok ? "ok" : "FAILED", exact ? "exact" : "DIFFERS", secs);
    report(4, "overfit oracle", loss_ok && exact && time_ok, buf);
}

// --- criterion 5: duration exactness -------------------------------------------

void criterion_5() {
    AcgConfig cfg;
    cfg.hidden_dim = 32;
    cfg.heads = 2;
    cfg.sem_layers = 1;
    cfg.rec_layers = 1;
    cfg.reemb_layers = 2;
    cfg.max_blocks = 64;
    AcgModel sketch_model(cfg, 1), refine_model(cfg, 2);
    Rng rng(3);
    PianoRoll roll = make_toy_piece(rng, 4, 4);
    Adam a1, a2;
    sketch_model.train_step({sketch_tokens(roll)}, a1);
    refine_model.train_step_refine(refine_examples(roll), a2);

    bool pass = true;
    std::string detail;
    for (int m : {1, 8, 60}) {
        for (uint64_t seed = 0; seed < 100 && pass; ++seed) {
            GeneratePieceOptions opt;
            opt.measures = m;
            opt.sampler.seed = seed;
            PianoRoll out = generate_piece(sketch_model, refine_model, opt);
            if (out.steps() != 16 * m) {
                pass = false;
                detail = "M=" + std::to_string(m) + " seed " + std::to_string(seed) + " gave T=" +
                         std::to_string(out.steps());
            }
        }
    }
    if (pass) detail = "T == 16*M for M in {1,8,60}, 100/100 seeded trials each";
    report(5, "duration exactness", pass, detail);
}

// --- criterion 6: metric oracles ------------------------------------------------

void criterion_6() {
    bool pass = true;
    std::string detail = "entropy/consistency/smoothness/key fixtures at 1e-9";
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond && pass) {
            pass = false;
            detail = what;
        }
    };
    std::vector<NoteEvent> mix;
    for (int i = 0; i < 4; ++i) mix.push_back({60, i * 8, 4});
    for (int i = 0; i < 2; ++i) mix.push_back({62, 40 + i * 8, 2});
    for (int i = 0; i < 2; ++i) mix.push_back({64, 60 + i * 8, 8});
    expect(std::abs(pitch_entropy(mix) - 1.5) <= 1e-9, "pitch entropy {4,2,2} != 1.5");
    expect(std::abs(rhythm_entropy(mix) - 1.5) <= 1e-9, "rhythm entropy {4,2,2} != 1.5");

    std::vector<NoteEvent> chroma;
    for (int p = 0; p < 12; ++p) chroma.push_back({60 + p, p * 4, 4});
    expect(std::abs(harmonic_consistency(chroma) - 7.0 / 12.0) <= 1e-9,
           "chromatic consistency != 7/12");

    std::vector<NoteEvent> fixture{{60, 0, 4}, {62, 4, 4}, {69, 8, 4}, {74, 12, 4}, {86, 16, 4}};
    expect(melodic_smoothness(fixture) == 0.5, "interval fixture [2,7,5,12] != 0.5");

    std::vector<NoteEvent> scale;
    int pitches[7] = {60, 62, 64, 65, 67, 69, 71};
    for (int i = 0; i < 7; ++i) scale.push_back({pitches[i], i * 4, 4});
    KeyEstimate key = detect_key(scale);
    expect(key.tonic == 0 && key.major, "C-major scale not detected as (0, major)");
    report(6, "metric oracles", pass, detail);
}

// --- criterion 7: complexity benchmark -------------------------------------------

void criterion_7() {
    auto t0 = clk::now();
    AcgConfig acfg;
    acfg.hidden_dim = 64;
    acfg.heads = 4;
    acfg.sem_layers = 4;
    acfg.rec_layers = 2;
    acfg.reemb_layers = 3;
    acfg.max_blocks = 64;
    AcgModel acg(acfg, 21);
    FlatBaselineConfig bcfg;
    bcfg.hidden_dim = 64;
    bcfg.heads = 4;
    bcfg.max_blocks = 64;
    bcfg.layers = matched_baseline_layers(acg.param_count(), bcfg);
    FlatBaseline base(bcfg, 22);

    SamplerConfig sampler;
    sampler.seed = 9;
    ComplexityReport rep = complexity_bench(acg, base, {256, 512, 1024, 2048}, sampler);

    bool slope_ok = std::abs(rep.baseline_slope - 2.0) <= 0.15;
    bool exact_ok = true, lower_ok = true;
    for (const auto& row : rep.rows) {
        if (row.baseline_count != row.baseline_expected || row.acg_count != row.acg_expected)
            exact_ok = false;
        if (row.tokens >= 512 && row.acg_count >= row.baseline_count) lower_ok = false;
    }
    double secs = seconds_since(t0);
    bool time_ok = secs < 300.0;
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "baseline slope %.3f (2.0±0.15 %s), counts==formula %s, acg<baseline for L>=512 "
                  "%s, %.0f s",
                  rep.baseline_slope, slope_ok ? "ok" : "FAILED", exact_ok ? "ok" : "FAILED",
                  lower_ok ? "ok" : "FAILED", secs);
    report(7, "complexity benchmark", slope_ok && exact_ok && lower_ok && time_ok, buf);
}

// --- criterion 8: anchoring direction --------------------------------------------

void criterion_8() {
    auto t0 = clk::now();
    constexpr int kTrainSteps = 1500;  // equal budget per arm
    auto corpus = make_toy_corpus(200, 2024);
    std::vector<TokenMatrix> pieces;
    for (auto& roll : corpus) pieces.push_back(encode(roll));

    AcgConfig acfg;
    acfg.hidden_dim = 64;
    acfg.heads = 4;
    acfg.sem_layers = 4;
    acfg.rec_layers = 2;
    acfg.reemb_layers = 3;
    acfg.max_blocks = 64;
    AcgModel acg(acfg, 11);
    FlatBaselineConfig bcfg;
    bcfg.hidden_dim = 64;
    bcfg.heads = 4;
    bcfg.max_blocks = 64;
    bcfg.layers = matched_baseline_layers(acg.param_count(), bcfg);
    FlatBaseline base(bcfg, 12);
    double ratio = static_cast<double>(base.param_count()) / acg.param_count();

    Adam aopt, bopt;
    Rng crop_rng(99);
    for (int s = 0; s < kTrainSteps; ++s) {
        aopt.lr = 1e-4 + 0.5 * (1e-3 - 1e-4) * (1.0 + std::cos(M_PI * s / kTrainSteps));
        float l = acg.train_step({pieces[s % pieces.size()]}, aopt);
        if ((s + 1) % 300 == 0) {
            std::printf("  criterion 8: acg step %d loss %.3f (%.0f s)\n", s + 1, l,
                        seconds_since(t0));
            std::fflush(stdout);
        }
    }
    for (int s = 0; s < kTrainSteps; ++s) {
        bopt.lr = 1e-4 + 0.5 * (1e-3 - 1e-4) * (1.0 + std::cos(M_PI * s / kTrainSteps));
        float l = base.train_step({pieces[s % pieces.size()]}, bopt, crop_rng, 24);
        if ((s + 1) % 300 == 0) {
            std::printf("  criterion 8: baseline step %d loss %.3f (%.0f s)\n", s + 1, l,
                        seconds_since(t0));
            std::fflush(stdout);
        }
    }

    std::vector<TokenMatrix> eval_pieces;
    for (auto& p : pieces)
        if (p.n_cols >= 54) eval_pieces.push_back(p);
    SamplerConfig sampler;
    sampler.seed = 5;
    DriftCurve curve = drift_experiment(acg, base, eval_pieces, 50, 4, sampler);

    double secs = seconds_since(t0);
    bool match_ok = ratio > 0.9 && ratio < 1.1;
    bool direction_ok = curve.mean_acg <= curve.mean_baseline;
    bool time_ok = secs < 3600.0;
    char buf[240];
    std::snprintf(buf, sizeof buf,
                  "mean drift acg %.4f vs baseline %.4f (reduction %.1f%%) over %d pieces x 50 "
                  "steps; params ratio %.2f; %.0f s (<3600)",
                  curve.mean_acg, curve.mean_baseline, curve.mean_reduction * 100,
                  curve.pieces_used, ratio, secs);
    report(8, "anchoring direction", match_ok && direction_ok && time_ok, buf);
}

}  // namespace

int main() {
    std::printf("hiacg acceptance suite\n");
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    std::printf(
        "[NOTE] criterion 9: published table values are not reproduction targets at this scale; "
        "covered by criteria 4-8.\n");
    if (g_failures) {
        std::printf("%d criterion(s) FAILED\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
