#include <catch2/catch_amalgamated.hpp>

#include "hiacg/nn.hpp"
#include "hiacg/tensor.hpp"

#include <cmath>

using namespace hiacg;
using DT = TensorT<double>;

namespace {

// Central finite differences against the analytic gradient, in double.
template <typename LossFn>
double worst_grad_error(std::vector<DT> params, LossFn loss_fn, double eps = 1e-4) {
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
            double err = std::abs(fd - analytic[i]) / std::max({1.0, std::abs(fd), std::abs(analytic[i])});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// fixed weights so the probed loss is the same function at every call
struct WeightedSum {
    DT w;
    WeightedSum(std::vector<int64_t> shape, Rng& rng) : w(DT::randn(std::move(shape), rng, 1.0)) {}
    DT operator()(const DT& x) const { return ops::sum(ops::mul(x, w)); }
};

}  // namespace

TEST_CASE("matmul against identity", "[tensor]") {
    auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    auto a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    auto out = ops::matmul(eye, a);
    for (int i = 0; i < 6; ++i) CHECK(out.data()[i] == a.data()[i]);

    auto bad = Tensor::zeros({3, 3});
    CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
    CHECK_THROWS_AS(ops::add(a, bad), ShapeError);
}

TEST_CASE("softmax of equal logits splits evenly", "[tensor]") {
    auto x = Tensor::from_values({1, 2}, {0.0f, 0.0f});
    auto y = ops::softmax_rows(x);
    CHECK(y.data()[0] == Catch::Approx(0.5));
    CHECK(y.data()[1] == Catch::Approx(0.5));
}

TEST_CASE("cross entropy of uniform logits is ln 2", "[tensor]") {
    auto logits = Tensor::from_values({1, 2}, {0.0f, 0.0f});
    CHECK(ops::cross_entropy(logits, {0}).item() == Catch::Approx(std::log(2.0)).epsilon(1e-5));
    CHECK_THROWS_AS(ops::cross_entropy(logits, {2}), ValueError);
    CHECK_THROWS_AS(ops::cross_entropy(logits, std::vector<int>{0, 1}), ShapeError);
}

TEST_CASE("backward fills expected leaf gradients", "[tensor]") {
    auto x = Tensor::param(Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}));
    backward(ops::sum(x));
    for (auto g : x.grad()) CHECK(g == 1.0f);

    auto a = Tensor::param(Tensor::from_values({1}, {3.0f}));
    auto b = Tensor::param(Tensor::from_values({1}, {5.0f}));
    backward(ops::sum(ops::mul(a, b)));
    CHECK(a.grad()[0] == 5.0f);
    CHECK(b.grad()[0] == 3.0f);

    CHECK_THROWS_AS(backward(x), ShapeError);  // non-scalar loss
}

TEST_CASE("finite differences agree for every op", "[tensor]") {
    Rng rng(2024);
    SECTION("matmul") {
        auto a = DT::param(DT::randn({3, 4}, rng, 1.0));
        auto b = DT::param(DT::randn({4, 5}, rng, 1.0));
        WeightedSum ws({3, 5}, rng);
        CHECK(worst_grad_error({a, b}, [&] { return ws(ops::matmul(a, b)); }) < 1e-6);
    }
    SECTION("add with bias broadcast") {
        auto a = DT::param(DT::randn({3, 4}, rng, 1.0));
        auto b = DT::param(DT::randn({4}, rng, 1.0));
        WeightedSum ws({3, 4}, rng);
        CHECK(worst_grad_error({a, b}, [&] { return ws(ops::add(a, b)); }) < 1e-6);
    }
    SECTION("scale, gelu, softmax") {
        auto x = DT::param(DT::randn({4, 4}, rng, 1.0));
        WeightedSum ws({4, 4}, rng);
        CHECK(worst_grad_error({x}, [&] { return ws(ops::scale(x, 1.7)); }) < 1e-6);
        CHECK(worst_grad_error({x}, [&] { return ws(ops::gelu(x)); }) < 1e-6);
        CHECK(worst_grad_error({x}, [&] { return ws(ops::softmax_rows(x, true)); }) < 1e-6);
    }
    SECTION("layer_norm") {
        auto x = DT::param(DT::randn({3, 8}, rng, 1.0));
        auto g = DT::param(DT::randn({8}, rng, 0.3));
        auto b = DT::param(DT::randn({8}, rng, 0.3));
        WeightedSum ws({3, 8}, rng);
        CHECK(worst_grad_error({x, g, b}, [&] { return ws(ops::layer_norm(x, g, b)); }) < 1e-5);
    }
    SECTION("embedding, concat, slice, reshape") {
        auto tbl = DT::param(DT::randn({6, 4}, rng, 1.0));
        std::vector<int> ids{0, 5, 5, 2};
        WeightedSum ws({3, 8}, rng);
        CHECK(worst_grad_error({tbl}, [&] {
                  auto e = ops::embedding_lookup(tbl, ids);
                  auto c = ops::concat_rows<double>({e, ops::slice_rows(e, 1, 2)});
                  return ws(ops::reshape(c, {3, 8}));
              }) < 1e-6);
    }
    SECTION("cross entropy") {
        auto logits = DT::param(DT::randn({5, 7}, rng, 1.0));
        std::vector<int> t{0, 3, 6, 3, 1};
        CHECK(worst_grad_error({logits}, [&] { return ops::cross_entropy(logits, t); }) < 1e-6);
    }
    SECTION("attention, causal and block-local") {
        auto q = DT::param(DT::randn({6, 8}, rng, 1.0));
        auto k = DT::param(DT::randn({6, 8}, rng, 1.0));
        auto v = DT::param(DT::randn({6, 8}, rng, 1.0));
        WeightedSum ws({6, 8}, rng);
        CHECK(worst_grad_error({q, k, v}, [&] {
                  return ws(ops::multihead_attention(q, k, v, 2, true));
              }) < 1e-5);
        CHECK(worst_grad_error({q, k, v}, [&] {
                  return ws(ops::multihead_attention(q, k, v, 2, true, 3));
              }) < 1e-5);
    }
}

TEST_CASE("block-local attention equals independent per-block attention", "[tensor]") {
    Rng rng(5);
    auto q = Tensor::randn({8, 8}, rng, 1.0);
    auto k = Tensor::randn({8, 8}, rng, 1.0);
    auto v = Tensor::randn({8, 8}, rng, 1.0);
    auto joint = ops::multihead_attention(q, k, v, 2, true, 4);
    for (int blk = 0; blk < 2; ++blk) {
        auto qs = ops::slice_rows(q, blk * 4, 4);
        auto ks = ops::slice_rows(k, blk * 4, 4);
        auto vs = ops::slice_rows(v, blk * 4, 4);
        auto solo = ops::multihead_attention(qs, ks, vs, 2, true);
        for (int i = 0; i < solo.numel(); ++i)
            CHECK(solo.data()[i] == Catch::Approx(joint.data()[blk * 4 * 8 + i]).margin(1e-6));
    }
}

TEST_CASE("fixed construction is deterministic", "[tensor]") {
    auto run = [] {
        Rng rng(99);
        auto x = Tensor::param(Tensor::randn({4, 8}, rng, 1.0));
        auto w = Tensor::param(Tensor::randn({8, 8}, rng, 0.5));
        auto loss = ops::cross_entropy(ops::matmul(ops::gelu(ops::matmul(x, w)), w), {1, 2, 3, 4});
        backward(loss);
        return std::make_pair(loss.item(), x.grad());
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2);  // bitwise
    CHECK(g1 == g2);
}
