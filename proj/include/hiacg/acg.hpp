#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <string>
#include <vector>

#include "hiacg/checkpoint.hpp"
#include "hiacg/errors.hpp"
#include "hiacg/nn.hpp"
#include "hiacg/rng.hpp"
#include "hiacg/token_codec.hpp"

namespace hiacg {

struct SamplerConfig {
    double temperature = 1.0;
    int top_k = 16;       // <= 0 means full vocabulary
    bool greedy = false;  // argmax, ignores temperature/top_k
    uint64_t seed = 0;
};

// Draws a token id from raw logits.
inline int sample_logits(const std::vector<float>& logits, const SamplerConfig& cfg, Rng& rng) {
    if (cfg.greedy) {
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    if (cfg.temperature <= 0) throw ValueError("sampler temperature must be positive");
    int v = static_cast<int>(logits.size());
    int k = cfg.top_k > 0 ? std::min(cfg.top_k, v) : v;
    std::vector<int> idx(v);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                      [&](int a, int b) { return logits[a] > logits[b]; });
    double mx = logits[idx[0]];
    std::vector<double> w(k);
    for (int i = 0; i < k; ++i) w[i] = std::exp((logits[idx[i]] - mx) / cfg.temperature);
    return idx[rng.categorical(w)];
}

struct AcgConfig {
    PatchConfig patch;
    int hidden_dim = 128;
    int heads = 4;
    int sem_layers = 12;
    int rec_layers = 6;
    int reemb_layers = 3;
    int max_blocks = 256;
    int cond_buckets = 32;

    int vocab() const { return patch.vocab(); }
    int block_len() const { return patch.rows(); }  // n, tokens per block

    void validate() const {
        patch.validate();
        if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0)
            throw ConfigError("heads must divide hidden_dim");
        if (sem_layers < 1 || rec_layers < 1 || reemb_layers < 1)
            throw ConfigError("layer counts must be >= 1");
        if (max_blocks < 1 || cond_buckets < 1) throw ConfigError("bad capacity config");
    }
};

// Generation request: how many new blocks to emit, optionally after a
// confirmed prompt.
struct Condition {
    int target_blocks = 0;
    std::vector<Block> prompt;
};

namespace detail_model {

inline void check_finite(const std::vector<float>& v, const char* what) {
    for (float x : v)
        if (!std::isfinite(x)) throw ValueError(std::string(what) + " produced non-finite values");
}

}  // namespace detail_model

// The ACG stack: a semantic prediction decoder over anchor features, an
// autoregressive reconstruction decoder emitting one block of piano tokens
// per semantic feature, and a fully connected re-embedding network that maps
// confirmed blocks back into anchor features. All three are trained jointly
// from token cross entropy.
class AcgModel {
public:
    AcgModel(AcgConfig cfg, uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(init_seed);
        int d = cfg_.hidden_dim;
        tok_emb_ = store_.add("tok_emb", Tensor::randn({cfg_.vocab(), d}, rng, 0.02));
        pos_sem_ = store_.add("pos_sem", Tensor::randn({cfg_.max_blocks, d}, rng, 0.02));
        pos_rec_ = store_.add("pos_rec", Tensor::randn({cfg_.block_len(), d}, rng, 0.02));
        cond_table_ = store_.add("cond", Tensor::randn({cfg_.cond_buckets, d}, rng, 0.02));
        start_emb_ = store_.add("start", Tensor::randn({1, d}, rng, 0.02));
        sem_.init(store_, "sem.", cfg_.sem_layers, d, cfg_.heads, rng);
        rec_.init(store_, "rec.", cfg_.rec_layers, d, cfg_.heads, rng);
        std::vector<int64_t> dims{static_cast<int64_t>(cfg_.block_len()) * d};
        for (int i = 0; i < cfg_.reemb_layers; ++i) dims.push_back(d);
        reemb_.init(store_, "reemb.", dims, rng);
        head_w_ = store_.add("head_w", Tensor::randn({d, cfg_.vocab()}, rng, 0.02));
        head_b_ = store_.add("head_b", Tensor::zeros({cfg_.vocab()}));
    }

    const AcgConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    int64_t param_count() const { return store_.scalar_count(); }
    int64_t trained_steps() const { return trained_steps_; }
    void mark_trained(int64_t steps) { trained_steps_ = steps; }

    int bucket_of(int total_blocks) const {
        if (total_blocks < 1 || total_blocks > cfg_.max_blocks)
            throw ConfigError("block count " + std::to_string(total_blocks) + " outside 1.." +
                              std::to_string(cfg_.max_blocks));
        return (total_blocks - 1) * cfg_.cond_buckets / cfg_.max_blocks;
    }

    // -- joint teacher-forced training ---------------------------------------

    // Teacher forcing at both levels: anchors come from re-embedded ground
    // truth blocks, the reconstruction decoder sees ground-truth inner
    // prefixes, and the loss is mean token cross entropy. One optimizer step.
    float train_step(const std::vector<TokenMatrix>& batch, Adam& opt) {
        auto losses = build_losses(batch);
        Tensor loss = batch_mean(losses);
        store_.zero_grads();
        backward(loss);
        opt.step(store_);
        ++trained_steps_;
        return loss.item();
    }

    // Loss only, no update. Used by tests and evaluation.
    float eval_loss(const std::vector<TokenMatrix>& batch) const {
        NoGradGuard ng;
        return batch_mean(build_losses(batch)).item();
    }

    // Refinement example: expand one sketch block into `targets`, seeded
    // with the re-embedded tail of already-refined blocks.
    struct RefineExample {
        Block sketch;
        std::vector<Block> context;
        std::vector<Block> targets;
    };

    float train_step_refine(const std::vector<RefineExample>& batch, Adam& opt) {
        if (batch.empty()) throw ValueError("empty refine batch");
        std::vector<Tensor> losses;
        for (const auto& ex : batch) losses.push_back(refine_loss(ex));
        Tensor loss = batch_mean(losses);
        store_.zero_grads();
        backward(loss);
        opt.step(store_);
        ++trained_steps_;
        return loss.item();
    }

    // -- the specced single-step operations ----------------------------------

    // Semantic feature for `step` given the anchors confirmed so far
    // (step == anchors.size() + 1). Recomputes from scratch; the generation
    // loop uses an equivalent incremental path.
    std::vector<float> predict_semantic(const std::vector<std::vector<float>>& anchors,
                                        const Condition& cond, int step) const {
        if (step != static_cast<int>(anchors.size()) + 1)
            throw StateError("step " + std::to_string(step) + " does not match " +
                             std::to_string(anchors.size()) + " anchors");
        int total = cond.target_blocks + static_cast<int>(cond.prompt.size());
        if (step > total || step > cfg_.max_blocks)
            throw StateError("step beyond the conditioned length");
        NoGradGuard ng;
        std::vector<Tensor> rows{cond_row(total)};
        for (const auto& a : anchors) {
            if (static_cast<int>(a.size()) != cfg_.hidden_dim)
                throw ShapeError("anchor feature has wrong dimension");
            rows.push_back(Tensor::from_values({1, cfg_.hidden_dim}, a));
        }
        Tensor seq = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
        Tensor h = sem_.forward(ops::add(seq, ops::slice_rows(pos_sem_, 0, seq.rows())));
        std::vector<float> z(h.data() + (h.rows() - 1) * cfg_.hidden_dim,
                             h.data() + h.rows() * cfg_.hidden_dim);
        detail_model::check_finite(z, "semantic prediction");
        return z;
    }

    // Autoregressively emits the n tokens of one block from a semantic
    // feature, lowest pitch patch first.
    Block reconstruct_block(const std::vector<float>& z, const SamplerConfig& sampler) const {
        Rng rng(sampler.seed);
        return reconstruct_block(z, sampler, rng, nullptr);
    }

    // Deterministic map from a confirmed block to its anchor feature.
    std::vector<float> reembed(const Block& block) const {
        if (static_cast<int>(block.size()) != cfg_.block_len())
            throw ShapeError("block length " + std::to_string(block.size()) + ", expected " +
                             std::to_string(cfg_.block_len()));
        int d = cfg_.hidden_dim;
        std::vector<float> flat(static_cast<size_t>(cfg_.block_len()) * d);
        for (int i = 0; i < cfg_.block_len(); ++i) {
            if (block[i] >= cfg_.vocab())
                throw ValueError("block token " + std::to_string(block[i]) + " out of vocabulary");
            std::copy_n(tok_emb_.data() + static_cast<int64_t>(block[i]) * d, d,
                        flat.begin() + static_cast<int64_t>(i) * d);
        }
        return reemb_.forward_vec(flat);
    }

    // -- cyclic generation ----------------------------------------------------

    // The ACG loop: predict a semantic feature, reconstruct a block, re-embed
    // it as the next anchor. Prompt blocks are re-embedded up front as
    // confirmed anchors. Returns prompt + target_blocks columns, always.
    TokenMatrix generate(const Condition& cond, const SamplerConfig& sampler,
                         uint64_t* score_mults = nullptr) const {
        if (cond.target_blocks < 1) throw ConfigError("target block count must be >= 1");
        int total = cond.target_blocks + static_cast<int>(cond.prompt.size());
        if (total > cfg_.max_blocks)
            throw ConfigError("requested " + std::to_string(total) + " blocks exceeds max_blocks " +
                              std::to_string(cfg_.max_blocks));
        Rng rng(sampler.seed);
        KvCache sem_cache;
        std::vector<float> z = feed_sem(sem_cache, cond_vec(total), 0, score_mults);
        std::vector<Block> out = cond.prompt;
        int pos = 1;
        for (const auto& b : cond.prompt)
            z = feed_sem(sem_cache, reembed(b), pos++, score_mults);
        for (int t = 0; t < cond.target_blocks; ++t) {
            detail_model::check_finite(z, "semantic prediction");
            Block b = reconstruct_block(z, sampler, rng, score_mults);
            out.push_back(b);
            if (pos < total) z = feed_sem(sem_cache, reembed(b), pos++, score_mults);
        }
        return join_blocks(out, cfg_.patch);
    }

    // -- drift-experiment hooks ------------------------------------------------

    // Fully teacher-forced semantic features h_1..h_B for a ground-truth
    // piece: every anchor comes from the true blocks.
    std::vector<std::vector<float>> teacher_features(const TokenMatrix& truth) const {
        require_trained("teacher features");
        check_matrix(truth);
        auto blocks = split_blocks(truth);
        int total = static_cast<int>(blocks.size());
        KvCache cache;
        std::vector<std::vector<float>> feats;
        std::vector<float> z = feed_sem(cache, cond_vec(total), 0, nullptr);
        feats.push_back(z);
        for (int t = 0; t + 1 < total; ++t)
            feats.push_back(feed_sem(cache, reembed(blocks[t]), t + 1, nullptr));
        return feats;
    }

    // The "optimal feature" h_t (1-indexed).
    std::vector<float> semantic_target(const TokenMatrix& truth, int step) const {
        if (step < 1 || step > truth.n_cols)
            throw ValueError("semantic_target step out of range");
        return teacher_features(truth)[step - 1];
    }

    // Free-running semantic features: blocks after the prompt are sampled
    // from the model itself, as in generation.
    std::vector<std::vector<float>> free_run_features(const TokenMatrix& truth, int prompt_blocks,
                                                      int steps, const SamplerConfig& sampler) const {
        require_trained("free-running features");
        check_matrix(truth);
        if (prompt_blocks + steps > truth.n_cols)
            throw ValueError("piece shorter than prompt + steps");
        auto blocks = split_blocks(truth);
        int total = static_cast<int>(blocks.size());
        Rng rng(sampler.seed);
        KvCache cache;
        std::vector<float> z = feed_sem(cache, cond_vec(total), 0, nullptr);
        for (int t = 0; t < prompt_blocks; ++t) z = feed_sem(cache, reembed(blocks[t]), t + 1, nullptr);
        std::vector<std::vector<float>> feats;
        for (int s = 0; s < steps; ++s) {
            feats.push_back(z);
            Block b = reconstruct_block(z, sampler, rng, nullptr);
            if (prompt_blocks + s + 1 < total)
                z = feed_sem(cache, reembed(b), prompt_blocks + s + 1, nullptr);
        }
        return feats;
    }

    // -- refinement-side generation -------------------------------------------

    // One refinement expansion: condition on a re-embedded sketch block,
    // seed anchors from the tail of already-refined output, emit `n_out`
    // detail blocks.
    std::vector<Block> refine_generate(const Block& sketch, const std::vector<Block>& context,
                                       int n_out, const SamplerConfig& sampler, Rng& rng) const {
        require_trained("refinement");
        if (1 + static_cast<int>(context.size()) + n_out > cfg_.max_blocks)
            throw ConfigError("refinement context too long for max_blocks");
        KvCache cache;
        std::vector<float> cv = cond_vec_from_feature(reembed(sketch));
        std::vector<float> z = feed_sem(cache, cv, 0, nullptr);
        int pos = 1;
        for (const auto& b : context) z = feed_sem(cache, reembed(b), pos++, nullptr);
        std::vector<Block> out;
        for (int t = 0; t < n_out; ++t) {
            detail_model::check_finite(z, "semantic prediction");
            Block b = reconstruct_block(z, sampler, rng, nullptr);
            out.push_back(b);
            if (t + 1 < n_out) z = feed_sem(cache, reembed(b), pos++, nullptr);
        }
        return out;
    }

    // -- persistence -----------------------------------------------------------

    Checkpoint to_checkpoint(const std::string& role = "acg") const {
        Checkpoint ckpt;
        ckpt.meta["kind"] = "acg";
        ckpt.meta["role"] = role;
        ckpt.meta["components"] = "sem,rec,reemb";
        ckpt.meta["patch_d"] = std::to_string(cfg_.patch.d);
        ckpt.meta["patch_t"] = std::to_string(cfg_.patch.t);
        ckpt.meta["hidden_dim"] = std::to_string(cfg_.hidden_dim);
        ckpt.meta["heads"] = std::to_string(cfg_.heads);
        ckpt.meta["sem_layers"] = std::to_string(cfg_.sem_layers);
        ckpt.meta["rec_layers"] = std::to_string(cfg_.rec_layers);
        ckpt.meta["reemb_layers"] = std::to_string(cfg_.reemb_layers);
        ckpt.meta["max_blocks"] = std::to_string(cfg_.max_blocks);
        ckpt.meta["cond_buckets"] = std::to_string(cfg_.cond_buckets);
        ckpt.meta["trained_steps"] = std::to_string(trained_steps_);
        store_params(ckpt, store_);
        return ckpt;
    }

    static AcgModel from_checkpoint(const Checkpoint& ckpt) {
        if (ckpt.meta_str("kind") != "acg") throw ParseError("checkpoint is not an ACG model", 0);
        AcgConfig cfg;
        cfg.patch.d = static_cast<int>(ckpt.meta_i64("patch_d", 2));
        cfg.patch.t = static_cast<int>(ckpt.meta_i64("patch_t", 4));
        cfg.hidden_dim = static_cast<int>(ckpt.meta_i64("hidden_dim", 128));
        cfg.heads = static_cast<int>(ckpt.meta_i64("heads", 4));
        cfg.sem_layers = static_cast<int>(ckpt.meta_i64("sem_layers", 12));
        cfg.rec_layers = static_cast<int>(ckpt.meta_i64("rec_layers", 6));
        cfg.reemb_layers = static_cast<int>(ckpt.meta_i64("reemb_layers", 3));
        cfg.max_blocks = static_cast<int>(ckpt.meta_i64("max_blocks", 256));
        cfg.cond_buckets = static_cast<int>(ckpt.meta_i64("cond_buckets", 32));
        AcgModel model(cfg, /*init_seed=*/0);
        restore_params(ckpt, model.store_);
        model.trained_steps_ = ckpt.meta_i64("trained_steps", 0);
        return model;
    }

    void save(const std::string& path, const std::string& role = "acg") const {
        save_checkpoint_file(to_checkpoint(role), path);
    }
    static AcgModel load(const std::string& path) {
        return from_checkpoint(load_checkpoint_file(path));
    }

private:
    // ---- graph-side builders ----

    Tensor cond_row(int total_blocks) const {
        return ops::add(start_emb_,
                        ops::embedding_lookup(cond_table_, {bucket_of(total_blocks)}));
    }

    // (count, n*d) -> reemb MLP -> (count, d)
    Tensor reemb_rows(const std::vector<Block>& blocks, int from, int count) const {
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(count) * cfg_.block_len());
        for (int b = from; b < from + count; ++b)
            for (uint16_t tok : blocks[b]) ids.push_back(tok);
        Tensor emb = ops::embedding_lookup(tok_emb_, ids);
        Tensor flat = ops::reshape(emb, {count, static_cast<int64_t>(cfg_.block_len()) * cfg_.hidden_dim});
        return reemb_.forward(flat);
    }

    // Teacher-forced reconstruction loss for `count` blocks at once: the
    // inner sequences [z_t, emb(s^t_1..s^t_{n-1})] are stacked into one
    // block-locally masked decoder pass, so the loss is the mean cross
    // entropy over every (block, inner position) pair.
    Tensor rec_blocks_loss(const Tensor& z_rows, const std::vector<Block>& blocks, int from,
                           int count) const {
        int n = cfg_.block_len();
        std::vector<Tensor> rows;
        std::vector<int> targets;
        std::vector<int> pos_ids;
        targets.reserve(static_cast<size_t>(count) * n);
        for (int t = 0; t < count; ++t) {
            const Block& blk = blocks[from + t];
            rows.push_back(ops::slice_rows(z_rows, t, 1));
            if (n > 1) {
                std::vector<int> prefix(blk.begin(), blk.end() - 1);
                rows.push_back(ops::embedding_lookup(tok_emb_, prefix));
            }
            for (uint16_t tok : blk) targets.push_back(tok);
            for (int k = 0; k < n; ++k) pos_ids.push_back(k);
        }
        Tensor inner = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
        inner = ops::add(inner, ops::embedding_lookup(pos_rec_, pos_ids));
        Tensor h = rec_.forward(inner, /*block_size=*/n);
        Tensor logits = linear(h, head_w_, head_b_);
        return ops::cross_entropy(logits, targets);
    }

    std::vector<Tensor> build_losses(const std::vector<TokenMatrix>& batch) const {
        if (batch.empty()) throw ValueError("empty training batch");
        std::vector<Tensor> losses;
        for (const auto& m : batch) {
            check_matrix(m);
            if (m.n_cols > cfg_.max_blocks)
                throw ValueError("piece of " + std::to_string(m.n_cols) +
                                 " blocks exceeds max_blocks");
            auto blocks = split_blocks(m);
            int b = static_cast<int>(blocks.size());
            std::vector<Tensor> rows{cond_row(b)};
            if (b > 1) rows.push_back(reemb_rows(blocks, 0, b - 1));
            Tensor seq = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
            Tensor sem_out = sem_.forward(ops::add(seq, ops::slice_rows(pos_sem_, 0, b)));
            losses.push_back(rec_blocks_loss(sem_out, blocks, 0, b));
        }
        return losses;
    }

    Tensor refine_loss(const RefineExample& ex) const {
        int c = static_cast<int>(ex.context.size());
        int m = static_cast<int>(ex.targets.size());
        if (m < 1) throw ValueError("refine example has no target blocks");
        std::vector<Block> all;
        all.push_back(ex.sketch);
        all.insert(all.end(), ex.context.begin(), ex.context.end());
        all.insert(all.end(), ex.targets.begin(), ex.targets.end());
        for (const auto& b : all)
            if (static_cast<int>(b.size()) != cfg_.block_len())
                throw ShapeError("refine example block length mismatch");
        // rows: [cond(sketch), ctx_1..ctx_c, tgt_1..tgt_{m-1}]
        Tensor cond = ops::add(start_emb_, reemb_rows(all, 0, 1));
        std::vector<Tensor> rows{cond};
        if (c + m - 1 > 0) rows.push_back(reemb_rows(all, 1, c + m - 1));
        Tensor seq = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
        Tensor sem_out = sem_.forward(ops::add(seq, ops::slice_rows(pos_sem_, 0, seq.rows())));
        // z rows for the m target blocks sit at positions c .. c+m-1
        Tensor z_rows = ops::slice_rows(sem_out, c, m);
        std::vector<Block> targets(ex.targets.begin(), ex.targets.end());
        return rec_blocks_loss(z_rows, targets, 0, m);
    }

    static Tensor batch_mean(const std::vector<Tensor>& parts) {
        Tensor acc = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) acc = ops::add(acc, parts[i]);
        return ops::scale(acc, 1.0f / static_cast<float>(parts.size()));
    }

    // ---- inference-side helpers ----

    std::vector<float> cond_vec(int total_blocks) const {
        int bucket = bucket_of(total_blocks);
        std::vector<float> v(start_emb_.data(), start_emb_.data() + cfg_.hidden_dim);
        const float* c = cond_table_.data() + static_cast<int64_t>(bucket) * cfg_.hidden_dim;
        for (int i = 0; i < cfg_.hidden_dim; ++i) v[i] += c[i];
        return v;
    }

    std::vector<float> cond_vec_from_feature(const std::vector<float>& feat) const {
        std::vector<float> v(start_emb_.data(), start_emb_.data() + cfg_.hidden_dim);
        for (int i = 0; i < cfg_.hidden_dim; ++i) v[i] += feat[i];
        return v;
    }

    // Adds the positional embedding and advances the semantic decoder one
    // position; returns the hidden state (the next semantic feature).
    std::vector<float> feed_sem(KvCache& cache, std::vector<float> row, int pos,
                                uint64_t* score_mults) const {
        if (pos >= cfg_.max_blocks) throw ConfigError("semantic position beyond max_blocks");
        const float* pe = pos_sem_.data() + static_cast<int64_t>(pos) * cfg_.hidden_dim;
        for (int i = 0; i < cfg_.hidden_dim; ++i) row[i] += pe[i];
        return sem_.infer_step(cache, row, score_mults);
    }

    Block reconstruct_block(const std::vector<float>& z, const SamplerConfig& sampler, Rng& rng,
                            uint64_t* score_mults) const {
        if (static_cast<int>(z.size()) != cfg_.hidden_dim)
            throw ShapeError("semantic feature has wrong dimension");
        detail_model::check_finite(z, "semantic feature");
        KvCache cache;
        Block block;
        std::vector<float> x = z;
        const int d = cfg_.hidden_dim;
        for (int k = 0; k < cfg_.block_len(); ++k) {
            const float* pe = pos_rec_.data() + static_cast<int64_t>(k) * d;
            for (int i = 0; i < d; ++i) x[i] += pe[i];
            std::vector<float> h = rec_.infer_step(cache, x, score_mults);
            std::vector<float> logits(cfg_.vocab());
            for (int vjd = 0; vjd < cfg_.vocab(); ++vjd) logits[vjd] = head_b_.data()[vjd];
            for (int i = 0; i < d; ++i) {
                float hv = h[i];
                if (hv == 0.0f) continue;
                const float* wrow = head_w_.data() + static_cast<int64_t>(i) * cfg_.vocab();
                for (int vj = 0; vj < cfg_.vocab(); ++vj) logits[vj] += hv * wrow[vj];
            }
            int tok = sample_logits(logits, sampler, rng);
            if (tok < 0 || tok >= cfg_.vocab())
                throw Error("sampler produced an out-of-vocabulary token");  // unreachable
            block.push_back(static_cast<uint16_t>(tok));
            if (k + 1 < cfg_.block_len())
                x.assign(tok_emb_.data() + static_cast<int64_t>(tok) * d,
                         tok_emb_.data() + static_cast<int64_t>(tok + 1) * d);
        }
        return block;
    }

    void check_matrix(const TokenMatrix& m) const {
        if (m.config != cfg_.patch)
            throw ConfigError("token matrix patch config does not match the model");
        if (m.n_cols < 1) throw ValueError("empty token matrix");
    }

    void require_trained(const char* what) const {
        if (trained_steps_ == 0)
            throw StateError(std::string(what) + " requires a trained model");
    }

    AcgConfig cfg_;
    ParamStore store_;
    DecoderStack sem_, rec_;
    Mlp reemb_;
    Tensor tok_emb_, pos_sem_, pos_rec_, cond_table_, start_emb_, head_w_, head_b_;
    int64_t trained_steps_ = 0;
};

// Conventional flat autoregressive baseline over the same token stream
// (block-major, lowest pitch patch first), used for the drift comparison and
// the complexity benchmark.
struct FlatBaselineConfig {
    PatchConfig patch;
    int hidden_dim = 128;
    int heads = 4;
    int layers = 22;
    int max_blocks = 256;
    int cond_buckets = 32;

    int vocab() const { return patch.vocab(); }
    int block_len() const { return patch.rows(); }
    int64_t max_positions() const {
        return static_cast<int64_t>(max_blocks) * block_len() + 1;
    }

    void validate() const {
        patch.validate();
        if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0)
            throw ConfigError("heads must divide hidden_dim");
        if (layers < 1 || max_blocks < 1 || cond_buckets < 1) throw ConfigError("bad config");
    }
};

// Parameter count of a flat baseline before building it, for matching the
// baseline size to an ACG stack.
inline int64_t flat_baseline_param_count(const FlatBaselineConfig& cfg) {
    int64_t d = cfg.hidden_dim;
    int64_t per_layer = 12 * d * d + 13 * d;
    return cfg.layers * per_layer + 2 * d                          // final norm
           + static_cast<int64_t>(cfg.vocab()) * d                 // token embedding
           + cfg.max_positions() * d                               // positions
           + static_cast<int64_t>(cfg.cond_buckets) * d + d        // condition + start
           + d * cfg.vocab() + cfg.vocab();                        // head
}

inline int matched_baseline_layers(int64_t acg_params, const FlatBaselineConfig& proto) {
    FlatBaselineConfig c = proto;
    int best = 1;
    int64_t best_diff = INT64_MAX;
    for (int l = 1; l <= 64; ++l) {
        c.layers = l;
        int64_t diff = std::abs(flat_baseline_param_count(c) - acg_params);
        if (diff < best_diff) {
            best_diff = diff;
            best = l;
        }
    }
    return best;
}

class FlatBaseline {
public:
    FlatBaseline(FlatBaselineConfig cfg, uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(init_seed);
        int d = cfg_.hidden_dim;
        tok_emb_ = store_.add("tok_emb", Tensor::randn({cfg_.vocab(), d}, rng, 0.02));
        pos_ = store_.add("pos", Tensor::randn({cfg_.max_positions(), d}, rng, 0.02));
        cond_table_ = store_.add("cond", Tensor::randn({cfg_.cond_buckets, d}, rng, 0.02));
        start_emb_ = store_.add("start", Tensor::randn({1, d}, rng, 0.02));
        dec_.init(store_, "dec.", cfg_.layers, d, cfg_.heads, rng);
        head_w_ = store_.add("head_w", Tensor::randn({d, cfg_.vocab()}, rng, 0.02));
        head_b_ = store_.add("head_b", Tensor::zeros({cfg_.vocab()}));
    }

    const FlatBaselineConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    int64_t param_count() const { return store_.scalar_count(); }
    int64_t trained_steps() const { return trained_steps_; }
    void mark_trained(int64_t steps) { trained_steps_ = steps; }

    int bucket_of(int total_blocks) const {
        if (total_blocks < 1 || total_blocks > cfg_.max_blocks)
            throw ConfigError("block count outside 1..max_blocks");
        return (total_blocks - 1) * cfg_.cond_buckets / cfg_.max_blocks;
    }

    // One optimizer step of next-token cross entropy over the flattened
    // stream. When crop_blocks > 0 and the piece is longer, a random
    // block-aligned span is used (absolute positions preserved) to bound the
    // quadratic attention cost of long pieces.
    float train_step(const std::vector<TokenMatrix>& batch, Adam& opt, Rng& rng,
                     int crop_blocks = 0) {
        if (batch.empty()) throw ValueError("empty training batch");
        std::vector<Tensor> losses;
        for (const auto& m : batch) {
            check_matrix(m);
            std::vector<int> flat = flatten(m);
            int n = cfg_.block_len();
            int64_t start = 0, count = static_cast<int64_t>(flat.size());
            if (crop_blocks > 0 && m.n_cols > crop_blocks) {
                int64_t c = rng.uniform_int(0, m.n_cols - crop_blocks);
                start = c * n;
                count = static_cast<int64_t>(crop_blocks) * n;
            }
            losses.push_back(span_loss(flat, static_cast<int>(m.n_cols), start, count));
        }
        Tensor total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
        total = ops::scale(total, 1.0f / static_cast<float>(losses.size()));
        store_.zero_grads();
        backward(total);
        opt.step(store_);
        ++trained_steps_;
        return total.item();
    }

    float eval_loss(const TokenMatrix& m) const {
        NoGradGuard ng;
        std::vector<int> flat = flatten(m);
        return span_loss(flat, static_cast<int>(m.n_cols), 0,
                         static_cast<int64_t>(flat.size()))
            .item();
    }

    // Emits target_blocks * n tokens and reshapes them into a TokenMatrix;
    // prompt blocks (if any) are consumed first.
    TokenMatrix generate(const Condition& cond, const SamplerConfig& sampler,
                         uint64_t* score_mults = nullptr) const {
        if (cond.target_blocks < 1) throw ConfigError("target block count must be >= 1");
        int total = cond.target_blocks + static_cast<int>(cond.prompt.size());
        if (total > cfg_.max_blocks) throw ConfigError("request exceeds max_blocks");
        Rng rng(sampler.seed);
        KvCache cache;
        int n = cfg_.block_len();
        std::vector<int> toks;
        for (const auto& b : cond.prompt) {
            if (static_cast<int>(b.size()) != n) throw ShapeError("prompt block length mismatch");
            for (uint16_t t : b) toks.push_back(t);
        }
        std::vector<float> h = feed(cache, cond_vec(total), 0, score_mults);
        for (size_t i = 0; i < toks.size(); ++i)
            h = feed(cache, emb_vec(toks[i]), static_cast<int64_t>(i) + 1, score_mults);
        int64_t want = static_cast<int64_t>(total) * n;
        while (static_cast<int64_t>(toks.size()) < want) {
            int tok = sample_logits(logits_of(h), sampler, rng);
            toks.push_back(tok);
            if (static_cast<int64_t>(toks.size()) < want)
                h = feed(cache, emb_vec(tok), static_cast<int64_t>(toks.size()), score_mults);
        }
        TokenMatrix out(cfg_.patch, total);
        for (int64_t i = 0; i < want; ++i) out.tokens[i] = static_cast<uint16_t>(toks[i]);
        return out;
    }

    // Emits exactly `count` tokens (not necessarily whole blocks). Used by
    // the complexity benchmark, which measures at exact token lengths.
    std::vector<int> generate_tokens(int64_t count, const SamplerConfig& sampler,
                                     uint64_t* score_mults = nullptr) const {
        if (count < 1) throw ValueError("token count must be >= 1");
        int blocks = static_cast<int>((count + cfg_.block_len() - 1) / cfg_.block_len());
        if (blocks > cfg_.max_blocks) throw ConfigError("request exceeds max_blocks");
        Rng rng(sampler.seed);
        KvCache cache;
        std::vector<int> toks;
        std::vector<float> h = feed(cache, cond_vec(blocks), 0, score_mults);
        while (static_cast<int64_t>(toks.size()) < count) {
            int tok = sample_logits(logits_of(h), sampler, rng);
            toks.push_back(tok);
            if (static_cast<int64_t>(toks.size()) < count)
                h = feed(cache, emb_vec(tok), static_cast<int64_t>(toks.size()), score_mults);
        }
        return toks;
    }

    // Hidden state from which block t's first token is predicted, with all
    // earlier tokens taken from ground truth. The teacher-forced analogue of
    // the ACG semantic feature.
    std::vector<std::vector<float>> teacher_features(const TokenMatrix& truth) const {
        require_trained("teacher features");
        check_matrix(truth);
        std::vector<int> flat = flatten(truth);
        int n = cfg_.block_len();
        KvCache cache;
        std::vector<std::vector<float>> feats;
        std::vector<float> h = feed(cache, cond_vec(static_cast<int>(truth.n_cols)), 0, nullptr);
        feats.push_back(h);  // block 1 feature: position 0 (condition)
        for (int64_t i = 0; static_cast<int64_t>(feats.size()) < truth.n_cols; ++i) {
            h = feed(cache, emb_vec(flat[i]), i + 1, nullptr);
            if ((i + 1) % n == 0) feats.push_back(h);
        }
        return feats;
    }

    std::vector<std::vector<float>> free_run_features(const TokenMatrix& truth, int prompt_blocks,
                                                      int steps, const SamplerConfig& sampler) const {
        require_trained("free-running features");
        check_matrix(truth);
        if (prompt_blocks + steps > truth.n_cols)
            throw ValueError("piece shorter than prompt + steps");
        std::vector<int> flat = flatten(truth);
        int n = cfg_.block_len();
        Rng rng(sampler.seed);
        KvCache cache;
        std::vector<float> h = feed(cache, cond_vec(static_cast<int>(truth.n_cols)), 0, nullptr);
        int64_t pos = 1;
        for (int64_t i = 0; i < static_cast<int64_t>(prompt_blocks) * n; ++i)
            h = feed(cache, emb_vec(flat[i]), pos++, nullptr);
        std::vector<std::vector<float>> feats;
        for (int s = 0; s < steps; ++s) {
            feats.push_back(h);
            for (int k = 0; k < n; ++k) {
                int tok = sample_logits(logits_of(h), sampler, rng);
                bool last = s + 1 == steps && k + 1 == n;
                if (!last) h = feed(cache, emb_vec(tok), pos++, nullptr);
            }
        }
        return feats;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        ckpt.meta["kind"] = "flat_ar";
        ckpt.meta["components"] = "dec";
        ckpt.meta["patch_d"] = std::to_string(cfg_.patch.d);
        ckpt.meta["patch_t"] = std::to_string(cfg_.patch.t);
        ckpt.meta["hidden_dim"] = std::to_string(cfg_.hidden_dim);
        ckpt.meta["heads"] = std::to_string(cfg_.heads);
        ckpt.meta["layers"] = std::to_string(cfg_.layers);
        ckpt.meta["max_blocks"] = std::to_string(cfg_.max_blocks);
        ckpt.meta["cond_buckets"] = std::to_string(cfg_.cond_buckets);
        ckpt.meta["trained_steps"] = std::to_string(trained_steps_);
        store_params(ckpt, store_);
        return ckpt;
    }

    static FlatBaseline from_checkpoint(const Checkpoint& ckpt) {
        if (ckpt.meta_str("kind") != "flat_ar")
            throw ParseError("checkpoint is not a flat baseline", 0);
        FlatBaselineConfig cfg;
        cfg.patch.d = static_cast<int>(ckpt.meta_i64("patch_d", 2));
        cfg.patch.t = static_cast<int>(ckpt.meta_i64("patch_t", 4));
        cfg.hidden_dim = static_cast<int>(ckpt.meta_i64("hidden_dim", 128));
        cfg.heads = static_cast<int>(ckpt.meta_i64("heads", 4));
        cfg.layers = static_cast<int>(ckpt.meta_i64("layers", 22));
        cfg.max_blocks = static_cast<int>(ckpt.meta_i64("max_blocks", 256));
        cfg.cond_buckets = static_cast<int>(ckpt.meta_i64("cond_buckets", 32));
        FlatBaseline model(cfg, 0);
        restore_params(ckpt, model.store_);
        model.trained_steps_ = ckpt.meta_i64("trained_steps", 0);
        return model;
    }

    void save(const std::string& path) const { save_checkpoint_file(to_checkpoint(), path); }
    static FlatBaseline load(const std::string& path) {
        return from_checkpoint(load_checkpoint_file(path));
    }

    static std::vector<int> flatten(const TokenMatrix& m) {
        return std::vector<int>(m.tokens.begin(), m.tokens.end());
    }

    static TokenMatrix unflatten(const std::vector<int>& toks, PatchConfig patch) {
        int n = patch.rows();
        if (toks.empty() || static_cast<int64_t>(toks.size()) % n != 0)
            throw ShapeError("token count not a multiple of the block length");
        TokenMatrix m(patch, static_cast<int64_t>(toks.size()) / n);
        for (size_t i = 0; i < toks.size(); ++i) m.tokens[i] = static_cast<uint16_t>(toks[i]);
        return m;
    }

private:
    // Cross entropy of positions [start, start+count) of the flattened
    // stream. Position 0 is the condition row; position p > 0 holds token
    // p-1 and predicts token p.
    Tensor span_loss(const std::vector<int>& flat, int total_blocks, int64_t start,
                     int64_t count) const {
        std::vector<Tensor> rows;
        std::vector<int> inputs;
        if (start == 0) {
            rows.push_back(ops::add(start_emb_,
                                    ops::embedding_lookup(cond_table_, {bucket_of(total_blocks)})));
            for (int64_t p = 1; p < count; ++p) inputs.push_back(flat[p - 1]);
        } else {
            for (int64_t p = start; p < start + count; ++p) inputs.push_back(flat[p - 1]);
        }
        if (!inputs.empty()) rows.push_back(ops::embedding_lookup(tok_emb_, inputs));
        Tensor seq = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
        seq = ops::add(seq, ops::slice_rows(pos_, start, count));
        Tensor h = dec_.forward(seq);
        Tensor logits = linear(h, head_w_, head_b_);
        std::vector<int> targets(flat.begin() + start, flat.begin() + start + count);
        return ops::cross_entropy(logits, targets);
    }

    std::vector<float> cond_vec(int total_blocks) const {
        int bucket = bucket_of(total_blocks);
        std::vector<float> v(start_emb_.data(), start_emb_.data() + cfg_.hidden_dim);
        const float* c = cond_table_.data() + static_cast<int64_t>(bucket) * cfg_.hidden_dim;
        for (int i = 0; i < cfg_.hidden_dim; ++i) v[i] += c[i];
        return v;
    }

    std::vector<float> emb_vec(int tok) const {
        if (tok < 0 || tok >= cfg_.vocab()) throw ValueError("token out of vocabulary");
        return std::vector<float>(tok_emb_.data() + static_cast<int64_t>(tok) * cfg_.hidden_dim,
                                  tok_emb_.data() + static_cast<int64_t>(tok + 1) * cfg_.hidden_dim);
    }

    std::vector<float> feed(KvCache& cache, std::vector<float> row, int64_t pos,
                            uint64_t* score_mults) const {
        if (pos >= cfg_.max_positions()) throw ConfigError("position beyond trained range");
        const float* pe = pos_.data() + pos * cfg_.hidden_dim;
        for (int i = 0; i < cfg_.hidden_dim; ++i) row[i] += pe[i];
        return dec_.infer_step(cache, row, score_mults);
    }

    std::vector<float> logits_of(const std::vector<float>& h) const {
        std::vector<float> logits(head_b_.data(), head_b_.data() + cfg_.vocab());
        for (int i = 0; i < cfg_.hidden_dim; ++i) {
            float hv = h[i];
            if (hv == 0.0f) continue;
            const float* wrow = head_w_.data() + static_cast<int64_t>(i) * cfg_.vocab();
            for (int vj = 0; vj < cfg_.vocab(); ++vj) logits[vj] += hv * wrow[vj];
        }
        return logits;
    }

    void check_matrix(const TokenMatrix& m) const {
        if (m.config != cfg_.patch)
            throw ConfigError("token matrix patch config does not match the model");
        if (m.n_cols < 1) throw ValueError("empty token matrix");
        if (m.n_cols > cfg_.max_blocks) throw ValueError("piece exceeds max_blocks");
    }

    void require_trained(const char* what) const {
        if (trained_steps_ == 0)
            throw StateError(std::string(what) + " requires a trained model");
    }

    FlatBaselineConfig cfg_;
    ParamStore store_;
    DecoderStack dec_;
    Tensor tok_emb_, pos_, cond_table_, start_emb_, head_w_, head_b_;
    int64_t trained_steps_ = 0;
};

}  // namespace hiacg
