#include <catch2/catch_amalgamated.hpp>

#include "hiacg/harness.hpp"

#include <filesystem>
#include <fstream>

using namespace hiacg;

namespace {

AcgConfig bench_acg_config() {
    AcgConfig cfg;
    cfg.hidden_dim = 32;
    cfg.heads = 2;
    cfg.sem_layers = 2;
    cfg.rec_layers = 1;
    cfg.reemb_layers = 2;
    cfg.max_blocks = 64;
    return cfg;
}

FlatBaselineConfig bench_flat_config() {
    FlatBaselineConfig cfg;
    cfg.hidden_dim = 32;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.max_blocks = 64;
    return cfg;
}

}  // namespace

TEST_CASE("toy corpus invariants", "[harness]") {
    auto corpus = make_toy_corpus(30, 4242);
    REQUIRE(corpus.size() == 30);
    for (const auto& roll : corpus) {
        CHECK(roll.steps() % 16 == 0);
        CHECK(roll.steps() >= 4 * 16);
        CHECK(roll.steps() <= 16 * 16);
        CHECK(roll.any_active());
        CHECK(evaluate(roll).harmonic_consistency >= 0.9);
    }
    auto again = make_toy_corpus(30, 4242);
    for (size_t i = 0; i < corpus.size(); ++i) CHECK(corpus[i] == again[i]);
    CHECK(make_toy_corpus(1, 7).size() == 1);
    CHECK_THROWS_AS(make_toy_corpus(0, 7), ValueError);
}

TEST_CASE("cosine distance is bounded and zero on itself", "[harness]") {
    std::vector<float> a{1.0f, 2.0f, -0.5f};
    std::vector<float> b{-1.0f, -2.0f, 0.5f};
    CHECK(cosine_distance(a, a) == 0.0);
    CHECK(cosine_distance(a, b) == 2.0);
    CHECK(cosine_distance(a, {0.0f, 0.0f, 0.0f}) == 1.0);
    CHECK_THROWS_AS(cosine_distance(a, {1.0f}), ShapeError);
}

TEST_CASE("a model compared against itself reports zero reduction", "[harness]") {
    AcgModel model(bench_acg_config(), 3);
    auto corpus = make_toy_corpus(4, 9, 3, 4);
    std::vector<TokenMatrix> pieces;
    for (auto& r : corpus) pieces.push_back(encode(r));
    Adam opt;
    model.train_step({pieces[0]}, opt);

    SamplerConfig sampler;
    sampler.seed = 5;
    DriftArm arm = drift_arm(model);
    DriftCurve curve = drift_compare(arm, arm, pieces, 4, 2, sampler);
    CHECK(curve.mean_reduction == 0.0);
    for (int s = 0; s < 4; ++s) {
        CHECK(curve.acg[s] == curve.baseline[s]);
        CHECK(curve.acg[s] >= 0.0);
        CHECK(curve.acg[s] <= 2.0);
    }
}

TEST_CASE("short pieces are filtered, empty evaluations rejected", "[harness]") {
    AcgModel acg(bench_acg_config(), 3);
    FlatBaseline base(bench_flat_config(), 4);
    Adam a1, a2;
    Rng rng(5);
    auto corpus = make_toy_corpus(3, 11, 2, 3);
    std::vector<TokenMatrix> pieces;
    for (auto& r : corpus) pieces.push_back(encode(r));
    acg.train_step({pieces[0]}, a1);
    base.train_step({pieces[0]}, a2, rng);

    SamplerConfig sampler;
    DriftCurve curve = drift_experiment(acg, base, pieces, 6, 2, sampler);  // needs >= 8 blocks
    CHECK(curve.pieces_used + curve.pieces_filtered == 3);
    CHECK(curve.pieces_used > 0);

    CHECK_THROWS_AS(drift_experiment(acg, base, pieces, 200, 2, sampler), ValueError);
}

TEST_CASE("instrumented counts match the closed forms exactly", "[harness]") {
    AcgModel acg(bench_acg_config(), 1);
    FlatBaseline base(bench_flat_config(), 2);
    SamplerConfig sampler;
    sampler.seed = 9;

    ComplexityReport report = complexity_bench(acg, base, {64, 128, 256}, sampler);
    REQUIRE(report.rows.size() == 3);
    for (const auto& row : report.rows) {
        CHECK(row.baseline_count == row.baseline_expected);
        CHECK(row.acg_count == row.acg_expected);
    }
    CHECK(report.baseline_slope > 1.5);

    CHECK_THROWS_AS(complexity_bench(acg, base, {64, 128}, sampler), ValueError);
}

TEST_CASE("a single block costs one semantic step plus one reconstruction pass", "[harness]") {
    AcgModel acg(bench_acg_config(), 1);
    SamplerConfig sampler;
    uint64_t mults = 0;
    Condition cond;
    cond.target_blocks = 1;
    acg.generate(cond, sampler, &mults);
    const auto& cfg = acg.config();
    uint64_t n = cfg.block_len();
    uint64_t expected = static_cast<uint64_t>(cfg.sem_layers) * cfg.hidden_dim * 1 +
                        static_cast<uint64_t>(cfg.rec_layers) * cfg.hidden_dim * (n * (n + 1) / 2);
    CHECK(mults == expected);
    CHECK(mults == expected_acg_count(cfg, 1));
}

TEST_CASE("ablation sweep emits one row per grid cell", "[harness]") {
    auto corpus = make_toy_corpus(4, 77, 2, 3);
    AblationOptions opt;
    opt.hidden_dim = 32;
    opt.heads = 2;
    opt.train_steps = 2;
    opt.gen_pieces = 1;
    opt.gen_blocks = 4;
    opt.seed = 5;
    std::vector<PatchConfig> patches{{1, 4}, {2, 4}, {3, 4}, {5, 4}};  // last is infeasible
    auto table = ablation_sweep(corpus, default_ablation_sizes(), patches, opt);
    REQUIRE(table.size() == 12);
    int skipped = 0;
    for (const auto& cell : table) {
        if (cell.skipped) {
            ++skipped;
            continue;
        }
        CHECK(cell.vocab == cell.patch.vocab());
        CHECK(cell.final_loss > 0.0);
    }
    CHECK(skipped == 3);  // the 2^20-vocabulary patch in each size row

    // vocabulary column: 2^(d*t)
    CHECK(table[0].vocab == 16);
    CHECK(table[1].vocab == 256);
    CHECK(table[2].vocab == 4096);

    auto again = ablation_sweep(corpus, default_ablation_sizes(), patches, opt);
    for (size_t i = 0; i < table.size(); ++i) {
        CHECK(table[i].final_loss == again[i].final_loss);
        CHECK(table[i].pitch == again[i].pitch);
    }
}

TEST_CASE("manifests capture seed, config hash, and file hashes", "[harness]") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "hiacg_manifest_test";
    fs::create_directories(dir);
    fs::path data = dir / "input.bin";
    {
        std::ofstream os(data, std::ios::binary);
        os << "payload";
    }
    RunManifest manifest;
    manifest.command = "drift";
    manifest.seed = 1234;
    manifest.config["steps"] = "50";
    manifest.add_input_file("corpus", data.string());
    fs::path out = dir / "run.manifest.json";
    manifest.write(out.string());

    std::ifstream is(out);
    nlohmann::json j = nlohmann::json::parse(is);
    CHECK(j["command"] == "drift");
    CHECK(j["seed"] == 1234);
    CHECK(j["config"]["steps"] == "50");
    CHECK(j["inputs"]["corpus"] == hash_file_hex(data.string()));
    CHECK(j["config_hash"].get<std::string>().size() == 16);
    fs::remove_all(dir);
}

TEST_CASE("corpus directories round trip", "[harness]") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "hiacg_corpus_test";
    fs::remove_all(dir);
    auto corpus = make_toy_corpus(3, 21, 2, 3);
    save_corpus_dir(corpus, dir.string(), /*also_midi=*/true);
    auto back = load_roll_dir(dir.string());
    REQUIRE(back.size() == 6);  // .hprl + .mid per piece
    // the .hprl copies are exact
    int exact = 0;
    for (const auto& roll : back)
        for (const auto& orig : corpus)
            if (roll == orig) {
                ++exact;
                break;
            }
    CHECK(exact >= 3);
    fs::remove_all(dir);
    CHECK_THROWS_AS(load_roll_dir(dir.string()), std::exception);
}
