// hiacg: piano-token symbolic music toolkit.
//
// Subcommands cover the full pipeline: corpus preparation, MIDI/token
// conversion, training the ACG stack (plain, sketch, refinement) and the
// flat autoregressive baseline, hierarchical generation, objective
// evaluation, and the drift / complexity / ablation experiments.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>

#include "json.hpp"

#include "hiacg/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hiacg;

namespace {

struct CommonOpts {
    uint64_t seed = 1;
    std::string config_file;
};

struct TrainOpts {
    std::string corpus_dir;
    std::string out_path;
    int steps = 2000;
    int hidden = 128;
    int heads = 4;
    int sem_layers = 12;
    int rec_layers = 6;
    int reemb_layers = 3;
    int max_blocks = 256;
    double lr = 1e-3;
    int batch = 1;
    int baseline_layers = 0;     // 0 = derive from --match
    std::string match_ckpt;      // ACG checkpoint to parameter-match
    int crop_blocks = 24;        // baseline context crop
};

double cosine_lr(double peak, double floor_lr, int step, int total) {
    return floor_lr + 0.5 * (peak - floor_lr) * (1.0 + std::cos(M_PI * step / total));
}

std::vector<TokenMatrix> encode_corpus(const std::vector<PianoRoll>& rolls, PatchConfig patch,
                                       int max_blocks, bool sketch) {
    std::vector<TokenMatrix> out;
    for (const auto& roll : rolls) {
        if (roll.steps() % patch.t != 0) continue;
        TokenMatrix m = sketch ? sketch_tokens(roll, patch) : encode(roll, patch);
        if (m.n_cols >= 1 && m.n_cols <= max_blocks) out.push_back(std::move(m));
    }
    if (out.empty()) throw ValueError("no corpus piece fits the model capacity");
    return out;
}

void add_manifest(const std::string& command, uint64_t seed,
                  const std::map<std::string, std::string>& config, const std::string& out_path) {
    RunManifest manifest;
    manifest.command = command;
    manifest.seed = seed;
    manifest.config = config;
    if (fs::exists(out_path)) manifest.add_output_file("out", out_path);
    manifest.write(out_path + ".manifest.json");
}

json report_to_json(const MetricReport& r) {
    json j;
    j["pitch_entropy"] = r.pitch_entropy;
    j["rhythm_entropy"] = r.rhythm_entropy;
    j["harmonic_consistency"] = r.harmonic_consistency;
    if (r.melodic_smoothness)
        j["melodic_smoothness"] = *r.melodic_smoothness;
    else
        j["melodic_smoothness"] = nullptr;
    j["key"] = {{"tonic", r.key.tonic}, {"mode", r.key.major ? "major" : "minor"}};
    return j;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"piano-token symbolic music generation toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key-value config file; flags override it");

    CommonOpts common;
    app.add_option("--seed", common.seed, "global RNG seed")->capture_default_str()
        ->configurable(true);

    // --- encode / decode -----------------------------------------------------
    std::string in_path, out_path;
    int patch_d = 2, patch_t = 4;
    double tempo = 120.0;

    auto* cmd_encode = app.add_subcommand("encode", "MIDI or roll file -> token file");
    cmd_encode->add_option("--in", in_path, "input .mid or .hprl")->required();
    cmd_encode->add_option("--out", out_path, "output .htok")->required();
    cmd_encode->add_option("--d", patch_d, "patch pitch rows")->capture_default_str();
    cmd_encode->add_option("--t", patch_t, "patch time steps")->capture_default_str();

    auto* cmd_decode = app.add_subcommand("decode", "token file -> MIDI (or roll) file");
    cmd_decode->add_option("--in", in_path, "input .htok")->required();
    cmd_decode->add_option("--out", out_path, "output .mid or .hprl")->required();
    cmd_decode->add_option("--tempo", tempo, "tempo for MIDI export")->capture_default_str();

    // --- corpus ---------------------------------------------------------------
    std::string dir;
    int count = 200;
    bool corpus_midi = false;
    auto* cmd_corpus = app.add_subcommand("make-corpus", "generate the procedural toy corpus");
    cmd_corpus->add_option("--out", dir, "output directory")->required();
    cmd_corpus->add_option("--count", count, "number of pieces")->capture_default_str();
    cmd_corpus->add_flag("--midi", corpus_midi, "also write .mid files");

    // --- training -------------------------------------------------------------
    TrainOpts train;
    auto add_train_opts = [&](CLI::App* cmd, bool model_shape = true) {
        cmd->add_option("--corpus", train.corpus_dir, "directory of .hprl/.mid files")->required();
        cmd->add_option("--out", train.out_path, "checkpoint path")->required();
        cmd->add_option("--steps", train.steps)->capture_default_str();
        cmd->add_option("--lr", train.lr)->capture_default_str();
        cmd->add_option("--batch", train.batch)->capture_default_str();
        cmd->add_option("--hidden", train.hidden)->capture_default_str();
        cmd->add_option("--heads", train.heads)->capture_default_str();
        cmd->add_option("--max-blocks", train.max_blocks)->capture_default_str();
        cmd->add_option("--d", patch_d, "patch pitch rows")->capture_default_str();
        cmd->add_option("--t", patch_t, "patch time steps")->capture_default_str();
        if (model_shape) {
            cmd->add_option("--sem-layers", train.sem_layers)->capture_default_str();
            cmd->add_option("--rec-layers", train.rec_layers)->capture_default_str();
            cmd->add_option("--reemb-layers", train.reemb_layers)->capture_default_str();
        }
    };
    auto* cmd_train_acg = app.add_subcommand("train-acg", "train a plain ACG stack");
    add_train_opts(cmd_train_acg);
    auto* cmd_train_sketch = app.add_subcommand("train-sketch", "train the sketch-loop ACG stack");
    add_train_opts(cmd_train_sketch);
    auto* cmd_train_refine = app.add_subcommand("train-refine", "train the refinement-loop ACG stack");
    add_train_opts(cmd_train_refine);
    auto* cmd_train_base = app.add_subcommand("train-baseline", "train the flat autoregressive baseline");
    add_train_opts(cmd_train_base, false);
    cmd_train_base->add_option("--layers", train.baseline_layers,
                               "decoder layers (0 = match --match checkpoint)");
    cmd_train_base->add_option("--match", train.match_ckpt,
                               "ACG checkpoint to parameter-match within 10%");
    cmd_train_base->add_option("--crop-blocks", train.crop_blocks,
                               "training context crop, 0 = full pieces")->capture_default_str();

    // --- generation -------------------------------------------------------------
    std::string sketch_ckpt, refine_ckpt, prompt_path;
    double minutes = 0, bpm = 120.0;
    int measures = 0;
    bool greedy = false;
    auto* cmd_generate = app.add_subcommand("generate", "hierarchical sketch+refine generation");
    cmd_generate->add_option("--sketch-ckpt", sketch_ckpt)->required();
    cmd_generate->add_option("--refine-ckpt", refine_ckpt)->required();
    cmd_generate->add_option("--measures", measures, "duration in 4/4 measures");
    cmd_generate->add_option("--minutes", minutes, "duration in minutes (uses --bpm)");
    cmd_generate->add_option("--bpm", bpm)->capture_default_str();
    cmd_generate->add_option("--prompt", prompt_path, "optional opening MIDI/roll");
    cmd_generate->add_option("--out", out_path, "output .mid or .hprl")->required();
    cmd_generate->add_flag("--greedy", greedy, "deterministic argmax sampling");

    // --- evaluation -------------------------------------------------------------
    auto* cmd_evaluate = app.add_subcommand("evaluate", "objective metrics for a directory");
    cmd_evaluate->add_option("--in", dir, "directory of .mid/.hprl files")->required();
    cmd_evaluate->add_option("--out", out_path, "report JSON path")->required();

    // --- experiments -------------------------------------------------------------
    std::string acg_ckpt, base_ckpt;
    int drift_steps = 50, prompt_blocks = 4;
    auto* cmd_drift = app.add_subcommand("drift", "anchoring vs baseline feature drift");
    cmd_drift->add_option("--acg", acg_ckpt)->required();
    cmd_drift->add_option("--baseline", base_ckpt)->required();
    cmd_drift->add_option("--corpus", dir, "evaluation pieces")->required();
    cmd_drift->add_option("--steps", drift_steps)->capture_default_str();
    cmd_drift->add_option("--prompt-blocks", prompt_blocks)->capture_default_str();
    cmd_drift->add_option("--out", out_path, "curve JSON path")->required();

    std::vector<int64_t> lengths{256, 512, 1024, 2048};
    int bench_hidden = 64, bench_sem = 4, bench_rec = 2;
    auto* cmd_bench = app.add_subcommand("bench", "attention-multiply complexity benchmark");
    cmd_bench->add_option("--lengths", lengths, "token lengths")->capture_default_str();
    cmd_bench->add_option("--hidden", bench_hidden)->capture_default_str();
    cmd_bench->add_option("--sem-layers", bench_sem)->capture_default_str();
    cmd_bench->add_option("--rec-layers", bench_rec)->capture_default_str();
    cmd_bench->add_option("--out", out_path, "report JSON path")->required();

    int ablate_steps = 50, ablate_hidden = 64;
    auto* cmd_ablate = app.add_subcommand("ablate", "model-size x patch-config sweep");
    cmd_ablate->add_option("--corpus", dir)->required();
    cmd_ablate->add_option("--steps", ablate_steps)->capture_default_str();
    cmd_ablate->add_option("--hidden", ablate_hidden)->capture_default_str();
    cmd_ablate->add_option("--out", out_path, "table JSON path")->required();

    for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
        sub->fallthrough();
    CLI11_PARSE(app, argc, argv);
    PatchConfig patch{patch_d, patch_t};

    if (cmd_encode->parsed()) {
        PianoRoll roll = fs::path(in_path).extension() == ".hprl"
                             ? load_roll_file(in_path)
                             : midi_to_pianoroll(read_file_bytes(in_path));
        roll.pad_to_multiple(patch.t);
        save_tokens_file(encode(roll, patch), out_path);
        std::cout << "encoded " << in_path << " -> " << out_path << "\n";
        return 0;
    }
    if (cmd_decode->parsed()) {
        TokenMatrix toks = load_tokens_file(in_path);
        PianoRoll roll = decode(toks);
        roll.set_tempo_bpm(tempo);
        if (fs::path(out_path).extension() == ".hprl") {
            save_roll_file(roll, out_path);
        } else {
            write_file_bytes(out_path, events_to_midi(pianoroll_to_events(roll), tempo));
        }
        std::cout << "decoded " << in_path << " -> " << out_path << "\n";
        return 0;
    }
    if (cmd_corpus->parsed()) {
        auto corpus = make_toy_corpus(count, common.seed);
        save_corpus_dir(corpus, dir, corpus_midi);
        RunManifest manifest;
        manifest.command = "make-corpus";
        manifest.seed = common.seed;
        manifest.config = {{"count", std::to_string(count)}};
        manifest.write((fs::path(dir) / "corpus.manifest.json").string());
        std::cout << "wrote " << count << " pieces to " << dir << "\n";
        return 0;
    }

    bool is_acg_train = cmd_train_acg->parsed() || cmd_train_sketch->parsed() ||
                        cmd_train_refine->parsed();
    if (is_acg_train) {
        auto rolls = load_roll_dir(train.corpus_dir);
        AcgConfig cfg;
        cfg.patch = patch;
        cfg.hidden_dim = train.hidden;
        cfg.heads = train.heads;
        cfg.sem_layers = train.sem_layers;
        cfg.rec_layers = train.rec_layers;
        cfg.reemb_layers = train.reemb_layers;
        cfg.max_blocks = train.max_blocks;
        AcgModel model(cfg, common.seed);
        Adam opt;
        std::string role = cmd_train_sketch->parsed() ? "sketch"
                           : cmd_train_refine->parsed() ? "refine"
                                                        : "acg";
        float loss = 0;
        if (cmd_train_refine->parsed()) {
            std::vector<AcgModel::RefineExample> examples;
            for (const auto& roll : rolls) {
                PianoRoll padded = roll;
                padded.pad_to_multiple(std::lcm<int64_t>(32, 8 * patch.t));
                auto ex = refine_examples(padded, patch);
                examples.insert(examples.end(), ex.begin(), ex.end());
            }
            if (examples.empty()) throw ValueError("no refine examples from this corpus");
            Rng shuffle(common.seed);
            for (int s = 0; s < train.steps; ++s) {
                opt.lr = cosine_lr(train.lr, train.lr / 10, s, train.steps);
                std::vector<AcgModel::RefineExample> batch;
                for (int b = 0; b < train.batch; ++b)
                    batch.push_back(examples[shuffle.uniform_int(0, examples.size() - 1)]);
                loss = model.train_step_refine(batch, opt);
                if ((s + 1) % 100 == 0)
                    std::cout << "step " << s + 1 << "/" << train.steps << " loss " << loss << "\n";
            }
        } else {
            auto pieces = encode_corpus(rolls, patch, cfg.max_blocks, cmd_train_sketch->parsed());
            Rng shuffle(common.seed);
            for (int s = 0; s < train.steps; ++s) {
                opt.lr = cosine_lr(train.lr, train.lr / 10, s, train.steps);
                std::vector<TokenMatrix> batch;
                for (int b = 0; b < train.batch; ++b)
                    batch.push_back(pieces[shuffle.uniform_int(0, pieces.size() - 1)]);
                loss = model.train_step(batch, opt);
                if ((s + 1) % 100 == 0)
                    std::cout << "step " << s + 1 << "/" << train.steps << " loss " << loss << "\n";
            }
        }
        model.save(train.out_path, role);
        add_manifest(role == "acg" ? "train-acg" : "train-" + role, common.seed,
                     {{"steps", std::to_string(train.steps)},
                      {"hidden", std::to_string(train.hidden)},
                      {"corpus", train.corpus_dir},
                      {"final_loss", std::to_string(loss)}},
                     train.out_path);
        std::cout << "saved " << role << " checkpoint to " << train.out_path << " (loss " << loss
                  << ")\n";
        return 0;
    }

    if (cmd_train_base->parsed()) {
        auto rolls = load_roll_dir(train.corpus_dir);
        FlatBaselineConfig cfg;
        cfg.patch = patch;
        cfg.hidden_dim = train.hidden;
        cfg.heads = train.heads;
        cfg.max_blocks = train.max_blocks;
        if (train.baseline_layers > 0) {
            cfg.layers = train.baseline_layers;
        } else if (!train.match_ckpt.empty()) {
            AcgModel acg = AcgModel::load(train.match_ckpt);
            cfg.layers = matched_baseline_layers(acg.param_count(), cfg);
            std::cout << "matched " << cfg.layers << " layers against " << train.match_ckpt << "\n";
        } else {
            throw ValueError("train-baseline needs --layers or --match");
        }
        FlatBaseline model(cfg, common.seed);
        auto pieces = encode_corpus(rolls, patch, cfg.max_blocks, false);
        Adam opt;
        Rng rng(common.seed);
        float loss = 0;
        for (int s = 0; s < train.steps; ++s) {
            opt.lr = cosine_lr(train.lr, train.lr / 10, s, train.steps);
            std::vector<TokenMatrix> batch;
            for (int b = 0; b < train.batch; ++b)
                batch.push_back(pieces[rng.uniform_int(0, pieces.size() - 1)]);
            loss = model.train_step(batch, opt, rng, train.crop_blocks);
            if ((s + 1) % 100 == 0)
                std::cout << "step " << s + 1 << "/" << train.steps << " loss " << loss << "\n";
        }
        model.save(train.out_path);
        add_manifest("train-baseline", common.seed,
                     {{"steps", std::to_string(train.steps)},
                      {"layers", std::to_string(cfg.layers)},
                      {"corpus", train.corpus_dir},
                      {"final_loss", std::to_string(loss)}},
                     train.out_path);
        std::cout << "saved baseline checkpoint to " << train.out_path << " (loss " << loss << ")\n";
        return 0;
    }

    if (cmd_generate->parsed()) {
        AcgModel sketch_model = AcgModel::load(sketch_ckpt);
        AcgModel refine_model = AcgModel::load(refine_ckpt);
        GeneratePieceOptions opt;
        opt.sampler.seed = common.seed;
        opt.sampler.greedy = greedy;
        PianoRoll prompt(16);
        if (!prompt_path.empty()) {
            prompt = fs::path(prompt_path).extension() == ".hprl"
                         ? load_roll_file(prompt_path)
                         : midi_to_pianoroll(read_file_bytes(prompt_path));
            opt.prompt = &prompt;
            if (prompt.tempo_bpm() > 0) bpm = prompt.tempo_bpm();
        }
        if (measures > 0)
            opt.measures = measures;
        else if (minutes > 0)
            opt.measures = measures_for_seconds(minutes * 60.0, bpm);
        else
            throw ValueError("generate needs --measures or --minutes");
        PianoRoll piece = generate_piece(sketch_model, refine_model, opt);
        piece.set_tempo_bpm(bpm);
        if (fs::path(out_path).extension() == ".hprl")
            save_roll_file(piece, out_path);
        else
            write_file_bytes(out_path, events_to_midi(pianoroll_to_events(piece), bpm));
        add_manifest("generate", common.seed,
                     {{"measures", std::to_string(opt.measures)},
                      {"sketch_ckpt", hash_file_hex(sketch_ckpt)},
                      {"refine_ckpt", hash_file_hex(refine_ckpt)},
                      {"greedy", greedy ? "1" : "0"}},
                     out_path);
        std::cout << "generated " << opt.measures << " measures (" << piece.steps()
                  << " steps) -> " << out_path << "\n";
        return 0;
    }

    if (cmd_evaluate->parsed()) {
        auto rolls = load_roll_dir(dir);
        json per_piece = json::array();
        double pe = 0, re = 0, hc = 0, ms = 0;
        int n = 0, ms_n = 0;
        for (size_t i = 0; i < rolls.size(); ++i) {
            try {
                MetricReport r = evaluate(rolls[i]);
                json j = report_to_json(r);
                j["piece"] = i;
                per_piece.push_back(j);
                pe += r.pitch_entropy;
                re += r.rhythm_entropy;
                hc += r.harmonic_consistency;
                if (r.melodic_smoothness) {
                    ms += *r.melodic_smoothness;
                    ++ms_n;
                }
                ++n;
            } catch (const ValueError& e) {
                per_piece.push_back({{"piece", i}, {"error", e.what()}});
            }
        }
        if (n == 0) throw ValueError("no piece in " + dir + " could be evaluated");
        json out;
        out["pieces"] = per_piece;
        out["mean"] = {{"pitch_entropy", pe / n},
                       {"rhythm_entropy", re / n},
                       {"harmonic_consistency", hc / n},
                       {"melodic_smoothness", ms_n ? json(ms / ms_n) : json(nullptr)},
                       {"evaluated", n}};
        std::ofstream os(out_path);
        if (!os) throw ValueError("cannot open " + out_path + " for writing");
        os << out.dump(2) << "\n";
        std::cout << "evaluated " << n << " pieces -> " << out_path << "\n";
        return 0;
    }

    if (cmd_drift->parsed()) {
        AcgModel acg = AcgModel::load(acg_ckpt);
        FlatBaseline base = FlatBaseline::load(base_ckpt);
        auto rolls = load_roll_dir(dir);
        auto pieces = encode_corpus(rolls, acg.config().patch, acg.config().max_blocks, false);
        SamplerConfig sampler;
        sampler.seed = common.seed;
        DriftCurve curve = drift_experiment(acg, base, pieces, drift_steps, prompt_blocks, sampler);
        if (curve.pieces_filtered > 0)
            std::cerr << "warning: " << curve.pieces_filtered << " pieces shorter than "
                      << prompt_blocks + drift_steps << " blocks were skipped\n";
        json out;
        out["steps"] = drift_steps;
        out["prompt_blocks"] = prompt_blocks;
        out["acg"] = curve.acg;
        out["baseline"] = curve.baseline;
        out["mean_acg"] = curve.mean_acg;
        out["mean_baseline"] = curve.mean_baseline;
        out["mean_reduction"] = curve.mean_reduction;
        out["pieces_used"] = curve.pieces_used;
        out["pieces_filtered"] = curve.pieces_filtered;
        std::ofstream os(out_path);
        os << out.dump(2) << "\n";
        add_manifest("drift", common.seed,
                     {{"steps", std::to_string(drift_steps)},
                      {"acg_ckpt", hash_file_hex(acg_ckpt)},
                      {"baseline_ckpt", hash_file_hex(base_ckpt)}},
                     out_path);
        std::cout << "mean drift: acg " << curve.mean_acg << " baseline " << curve.mean_baseline
                  << " reduction " << curve.mean_reduction * 100 << "% -> " << out_path << "\n";
        return 0;
    }

    if (cmd_bench->parsed()) {
        AcgConfig acfg;
        acfg.patch = patch;
        acfg.hidden_dim = bench_hidden;
        acfg.heads = 4;
        acfg.sem_layers = bench_sem;
        acfg.rec_layers = bench_rec;
        int max_blocks = 0;
        for (int64_t len : lengths)
            max_blocks = std::max<int>(max_blocks,
                                       static_cast<int>((len + acfg.block_len() - 1) / acfg.block_len()));
        acfg.max_blocks = std::max(64, max_blocks + 1);
        AcgModel acg(acfg, common.seed);
        FlatBaselineConfig bcfg;
        bcfg.patch = patch;
        bcfg.hidden_dim = bench_hidden;
        bcfg.heads = 4;
        bcfg.max_blocks = acfg.max_blocks;
        bcfg.layers = matched_baseline_layers(acg.param_count(), bcfg);
        FlatBaseline base(bcfg, common.seed + 1);
        SamplerConfig sampler;
        sampler.seed = common.seed;
        ComplexityReport report = complexity_bench(acg, base, lengths, sampler);
        json rows = json::array();
        for (const auto& r : report.rows)
            rows.push_back({{"tokens", r.tokens},
                            {"blocks", r.blocks},
                            {"baseline_count", r.baseline_count},
                            {"baseline_expected", r.baseline_expected},
                            {"acg_count", r.acg_count},
                            {"acg_expected", r.acg_expected},
                            {"speedup", double(r.baseline_count) / double(r.acg_count)},
                            {"baseline_ms", r.baseline_ms},
                            {"acg_ms", r.acg_ms}});
        json out;
        out["rows"] = rows;
        out["baseline_slope"] = report.baseline_slope;
        out["acg_slope"] = report.acg_slope;
        out["baseline_layers"] = bcfg.layers;
        std::ofstream os(out_path);
        os << out.dump(2) << "\n";
        add_manifest("bench", common.seed, {{"hidden", std::to_string(bench_hidden)}}, out_path);
        std::cout << "baseline slope " << report.baseline_slope << ", acg slope "
                  << report.acg_slope << " -> " << out_path << "\n";
        return 0;
    }

    if (cmd_ablate->parsed()) {
        auto corpus = load_roll_dir(dir);
        AblationOptions opt;
        opt.hidden_dim = ablate_hidden;
        opt.train_steps = ablate_steps;
        opt.seed = common.seed;
        auto table = ablation_sweep(corpus, default_ablation_sizes(),
                                    {{1, 4}, {2, 4}, {3, 4}}, opt);
        json rows = json::array();
        for (const auto& cell : table) {
            json j;
            j["size"] = cell.size_name;
            j["patch"] = {{"d", cell.patch.d}, {"t", cell.patch.t}};
            j["vocab"] = cell.vocab;
            if (cell.skipped) {
                j["skipped"] = cell.skip_reason;
            } else {
                j["final_loss"] = cell.final_loss;
                j["pitch"] = cell.pitch;
                j["rhythm"] = cell.rhythm;
                j["harmony"] = cell.harmony;
                j["melody"] = cell.melody;
            }
            rows.push_back(j);
        }
        std::ofstream os(out_path);
        os << json{{"rows", rows}}.dump(2) << "\n";
        add_manifest("ablate", common.seed,
                     {{"steps", std::to_string(ablate_steps)},
                      {"hidden", std::to_string(ablate_hidden)}},
                     out_path);
        std::cout << "ablation table (" << table.size() << " cells) -> " << out_path << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const hiacg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
