#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "hiacg/acg.hpp"
#include "hiacg/errors.hpp"
#include "hiacg/pianoroll.hpp"
#include "hiacg/token_codec.hpp"

namespace hiacg {

// Detail blocks per sketch block: a sketch block spans t sketch steps = t/2
// measures = t*8 full-resolution steps = 8 detail blocks (for any t).
constexpr int kDetailPerSketch = 8;

// Two samplings per measure: each half measure collapses to the union of
// its active pitches, giving an 88 x (T/8) sketch.
inline PianoRoll resample_sketch(const PianoRoll& roll) {
    if (roll.steps() % PianoRoll::kStepsPerMeasure != 0)
        throw ShapeError("sketch resampling needs T divisible by 16, got " +
                         std::to_string(roll.steps()));
    PianoRoll sketch(roll.steps() / 8, roll.tempo_bpm());
    for (int64_t col = 0; col < sketch.steps(); ++col) {
        int64_t lo = col * 8;
        for (int r = 0; r < PianoRoll::kPitches; ++r) {
            uint8_t any = 0;
            for (int64_t s = lo; s < lo + 8 && !any; ++s) any = roll.at(r, s);
            if (any) sketch.set(r, col, 1);
        }
    }
    return sketch;
}

// Sketch roll padded so its length divides the patch width, then encoded.
inline TokenMatrix sketch_tokens(const PianoRoll& roll, PatchConfig config = {}) {
    PianoRoll sketch = resample_sketch(roll);
    sketch.pad_to_multiple(config.t);
    return encode(sketch, config);
}

// One sketch block paired with the detail blocks covering the same span.
struct RefinePair {
    Block sketch_block;
    std::vector<Block> detail_blocks;
};

// Chronological, lossless partition of a piece into (sketch block, 8 detail
// blocks) pairs. Requires 2-measure alignment so the two levels line up.
inline std::vector<RefinePair> build_refine_pairs(const PianoRoll& roll, PatchConfig config = {}) {
    if (roll.steps() % (2 * PianoRoll::kStepsPerMeasure) != 0)
        throw ShapeError("refine pairs need T divisible by 32, got " +
                         std::to_string(roll.steps()));
    if ((roll.steps() / 8) % config.t != 0)
        throw ShapeError("sketch length T/8 not divisible by patch t=" +
                         std::to_string(config.t));
    TokenMatrix sketch = sketch_tokens(roll, config);
    TokenMatrix detail = encode(roll, config);
    auto sketch_blocks = split_blocks(sketch);
    auto detail_blocks = split_blocks(detail);
    std::vector<RefinePair> pairs;
    for (size_t i = 0; i < sketch_blocks.size(); ++i) {
        RefinePair p;
        p.sketch_block = sketch_blocks[i];
        for (int j = 0; j < kDetailPerSketch; ++j)
            p.detail_blocks.push_back(detail_blocks[i * kDetailPerSketch + j]);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// Builds refinement training examples from a piece: pair i conditions on
// sketch block i, with the last `context_blocks` detail blocks before it as
// rolling context.
inline std::vector<AcgModel::RefineExample> refine_examples(const PianoRoll& roll,
                                                            PatchConfig config = {},
                                                            int context_blocks = kDetailPerSketch) {
    auto pairs = build_refine_pairs(roll, config);
    std::vector<AcgModel::RefineExample> out;
    std::vector<Block> history;
    for (const auto& p : pairs) {
        AcgModel::RefineExample ex;
        ex.sketch = p.sketch_block;
        int ctx = std::min<int>(context_blocks, static_cast<int>(history.size()));
        ex.context.assign(history.end() - ctx, history.end());
        ex.targets = p.detail_blocks;
        out.push_back(ex);
        history.insert(history.end(), p.detail_blocks.begin(), p.detail_blocks.end());
    }
    return out;
}

struct GeneratePieceOptions {
    int measures = 0;                  // requested new measures, >= 1
    const PianoRoll* prompt = nullptr; // optional opening, padded to 2 measures
    SamplerConfig sampler;
    int context_blocks = kDetailPerSketch;
};

inline int measures_for_seconds(double seconds, double bpm) {
    if (seconds <= 0 || bpm <= 0) throw ValueError("duration and tempo must be positive");
    return std::max(1, static_cast<int>(std::llround(seconds * bpm / 60.0 / 4.0)));
}

// Whole-piece generation: the sketch loop plans ceil(M/2) sketch blocks,
// the refinement loop expands each into 8 detail blocks with rolling
// context, and the assembled roll is trimmed to exactly 16*M steps
// (plus the prompt).
inline PianoRoll generate_piece(const AcgModel& sketch_model, const AcgModel& refine_model,
                                const GeneratePieceOptions& opt) {
    if (opt.measures < 1) throw ValueError("duration must be at least one measure");
    if (sketch_model.trained_steps() == 0 || refine_model.trained_steps() == 0)
        throw StateError("generate_piece requires trained sketch and refinement checkpoints");
    PatchConfig patch = sketch_model.config().patch;
    if (refine_model.config().patch != patch)
        throw ConfigError("sketch and refinement models use different patch configs");

    PianoRoll prompt_roll(1);
    bool have_prompt = opt.prompt != nullptr;
    std::vector<Block> prompt_sketch, prompt_detail;
    if (have_prompt) {
        prompt_roll = *opt.prompt;
        prompt_roll.pad_to_multiple(std::lcm<int64_t>(2 * PianoRoll::kStepsPerMeasure, 8 * patch.t));
        prompt_sketch = split_blocks(sketch_tokens(prompt_roll, patch));
        prompt_detail = split_blocks(encode(prompt_roll, patch));
    }

    // one sketch block = t sketch steps = t/2 measures
    int new_sketch_blocks = (2 * opt.measures + patch.t - 1) / patch.t;
    Condition cond;
    cond.target_blocks = new_sketch_blocks;
    cond.prompt = prompt_sketch;

    TokenMatrix sketch = sketch_model.generate(cond, opt.sampler);
    auto sketch_blocks = split_blocks(sketch);

    Rng rng(opt.sampler.seed ^ 0x5e7c11f00dull);
    std::vector<Block> detail = prompt_detail;
    for (size_t i = prompt_sketch.size(); i < sketch_blocks.size(); ++i) {
        int ctx = std::min<int>(opt.context_blocks, static_cast<int>(detail.size()));
        std::vector<Block> context(detail.end() - ctx, detail.end());
        auto refined = refine_model.refine_generate(sketch_blocks[i], context, kDetailPerSketch,
                                                    opt.sampler, rng);
        detail.insert(detail.end(), refined.begin(), refined.end());
    }

    PianoRoll out = decode(join_blocks(detail, patch));
    int64_t want = (have_prompt ? prompt_roll.steps() : 0) +
                   static_cast<int64_t>(opt.measures) * PianoRoll::kStepsPerMeasure;
    // the last sketch block may overshoot by one measure; trim exactly
    PianoRoll trimmed(want, have_prompt ? prompt_roll.tempo_bpm() : 120.0);
    for (int r = 0; r < PianoRoll::kPitches; ++r)
        for (int64_t s = 0; s < want && s < out.steps(); ++s)
            if (out.at(r, s)) trimmed.set(r, s, 1);
    return trimmed;
}

}  // namespace hiacg
