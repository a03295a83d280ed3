#include <catch2/catch_amalgamated.hpp>

#include "hiacg/checkpoint.hpp"
#include "hiacg/nn.hpp"

#include <cmath>
#include <sstream>

using namespace hiacg;

TEST_CASE("adam leaves parameters alone under zero gradients", "[nn]") {
    ParamStore store;
    Rng rng(1);
    auto p = store.add("p", Tensor::randn({4}, rng, 1.0));
    std::vector<float> before = p.values();
    store.zero_grads();
    Adam opt;
    opt.step(store);
    CHECK(p.values() == before);
}

TEST_CASE("one bias-corrected step moves by about lr", "[nn]") {
    ParamStore store;
    auto p = store.add("p", Tensor::from_values({1}, {1.0f}));
    p.zero_grad();
    backward(ops::scale(ops::sum(p), 3.0f));  // constant gradient 3
    Adam opt;
    opt.lr = 0.01;
    opt.step(store);
    // bias-corrected first step: lr * g / (|g| + eps) = lr
    CHECK(std::abs(1.0f - p.data()[0]) == Catch::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("adam drives a quadratic bowl to zero", "[nn]") {
    ParamStore store;
    auto w = store.add("w", Tensor::from_values({1}, {2.0f}));
    Adam opt;
    opt.lr = 0.05;
    for (int i = 0; i < 200; ++i) {
        store.zero_grads();
        backward(ops::mul(w, w));
        opt.step(store);
    }
    CHECK(std::abs(w.data()[0]) < 0.01);
}

TEST_CASE("adam without a backward pass is a state error", "[nn]") {
    ParamStore store;
    store.add("p", Tensor::zeros({3}));
    Adam opt;
    CHECK_THROWS_AS(opt.step(store), StateError);
}

TEST_CASE("single position attention returns the value row", "[nn]") {
    Rng rng(3);
    auto q = Tensor::randn({1, 8}, rng, 1.0);
    auto k = Tensor::randn({1, 8}, rng, 1.0);
    auto v = Tensor::randn({1, 8}, rng, 1.0);
    auto out = ops::multihead_attention(q, k, v, 1, true);
    for (int i = 0; i < 8; ++i) CHECK(out.data()[i] == v.data()[i]);
}

TEST_CASE("head count must divide the model dim", "[nn]") {
    Rng rng(3);
    auto x = Tensor::randn({2, 6}, rng, 1.0);
    CHECK_THROWS_AS(ops::multihead_attention(x, x, x, 4, true), ConfigError);
    ParamStore store;
    DecoderLayerT<float> layer;
    CHECK_THROWS_AS(layer.init(store, "l.", 6, 4, rng), ConfigError);
}

TEST_CASE("causal mask: late perturbations cannot reach earlier outputs", "[nn]") {
    Rng rng(17);
    ParamStore store;
    DecoderStack stack;
    stack.init(store, "d.", 2, 16, 4, rng);
    auto x = Tensor::randn({6, 16}, rng, 1.0);
    auto base = stack.forward(x);
    auto x2 = Tensor::from_values({6, 16}, x.values());
    for (int j = 0; j < 16; ++j) x2.data()[5 * 16 + j] += 10.0f;
    auto bumped = stack.forward(x2);
    for (int i = 0; i < 5 * 16; ++i) CHECK(base.data()[i] == bumped.data()[i]);  // bitwise
    bool last_changed = false;
    for (int j = 0; j < 16; ++j) last_changed |= base.data()[5 * 16 + j] != bumped.data()[5 * 16 + j];
    CHECK(last_changed);
}

TEST_CASE("incremental decoding matches the full-sequence graph", "[nn]") {
    Rng rng(23);
    ParamStore store;
    DecoderStack stack;
    stack.init(store, "d.", 3, 32, 4, rng);
    auto x = Tensor::randn({7, 32}, rng, 1.0);
    auto graph_out = stack.forward(x);
    KvCache cache;
    for (int i = 0; i < 7; ++i) {
        std::vector<float> row(x.data() + i * 32, x.data() + (i + 1) * 32);
        auto h = stack.infer_step(cache, row);
        for (int j = 0; j < 32; ++j)
            CHECK(h[j] == Catch::Approx(graph_out.data()[i * 32 + j]).margin(1e-5));
    }
}

TEST_CASE("gradient check through a full decoder layer", "[nn]") {
    Rng rng(31);
    ParamStoreT<double> store;
    DecoderLayerT<double> layer;
    layer.init(store, "l.", 12, 3, rng);
    auto x = TensorT<double>::param(TensorT<double>::randn({4, 12}, rng, 1.0));
    auto w = TensorT<double>::randn({4, 12}, rng, 1.0);
    auto loss_fn = [&] { return ops::sum(ops::mul(layer.forward(x), w)); };
    std::vector<TensorT<double>> params{x};
    for (auto& [n, t] : store.entries) params.push_back(t);
    for (auto& p : params) p.zero_grad();
    backward(loss_fn());
    double worst = 0;
    for (auto& p : params) {
        auto analytic = p.grad();
        for (int64_t i = 0; i < p.numel(); ++i) {
            double orig = p.data()[i], eps = 1e-4;
            p.data()[i] = orig + eps;
            double up = loss_fn().item();
            p.data()[i] = orig - eps;
            double dn = loss_fn().item();
            p.data()[i] = orig;
            double fd = (up - dn) / (2 * eps);
            worst = std::max(worst,
                             std::abs(fd - analytic[i]) / std::max({1.0, std::abs(fd), std::abs(analytic[i])}));
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("checkpoint container round-trips parameters and metadata", "[nn]") {
    Rng rng(8);
    ParamStore store;
    DecoderStack stack;
    stack.init(store, "d.", 1, 8, 2, rng);
    Checkpoint ckpt;
    ckpt.meta["kind"] = "test";
    ckpt.meta["steps"] = "12";
    store_params(ckpt, store);
    std::stringstream ss;
    save_checkpoint(ckpt, ss);
    Checkpoint back = load_checkpoint(ss);
    CHECK(back.meta_str("kind") == "test");
    CHECK(back.meta_i64("steps", 0) == 12);
    REQUIRE(back.params.size() == store.entries.size());
    for (size_t i = 0; i < back.params.size(); ++i) {
        CHECK(back.params[i].first == store.entries[i].first);
        CHECK(back.params[i].second.second == store.entries[i].second.values());
    }
    ParamStore store2;
    DecoderStack stack2;
    Rng rng2(999);
    stack2.init(store2, "d.", 1, 8, 2, rng2);
    restore_params(back, store2);
    CHECK(store2.entries[0].second.values() == store.entries[0].second.values());

    std::stringstream bad("not a checkpoint");
    CHECK_THROWS_AS(load_checkpoint(bad), ParseError);
}
