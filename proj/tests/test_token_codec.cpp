#include <catch2/catch_amalgamated.hpp>

#include "hiacg/rng.hpp"
#include "hiacg/token_codec.hpp"

#include <sstream>

using namespace hiacg;

namespace {

PianoRoll random_roll(Rng& rng, int64_t steps, double density = 0.1) {
    PianoRoll roll(steps);
    for (int r = 0; r < 88; ++r)
        for (int64_t s = 0; s < steps; ++s)
            if (rng.uniform() < density) roll.set(r, s, 1);
    return roll;
}

}  // namespace

TEST_CASE("zero and all-one rolls map to token extremes", "[token_codec]") {
    PianoRoll zero(16);
    TokenMatrix toks = encode(zero);
    CHECK(toks.n_cols == 4);
    CHECK(toks.n_rows == 44);
    for (auto t : toks.tokens) CHECK(t == 0);

    PianoRoll ones(16);
    for (int r = 0; r < 88; ++r)
        for (int64_t s = 0; s < 16; ++s) ones.set(r, s, 1);
    for (auto t : encode(ones).tokens) CHECK(t == 255);
}

TEST_CASE("bit packing is MSB-first row-major", "[token_codec]") {
    // patch rows [[1,0,0,0],[0,0,0,1]] -> 0b10000001 = 129
    PianoRoll roll(16);
    roll.set(0, 0, 1);
    roll.set(1, 3, 1);
    CHECK(encode(roll).at(0, 0) == 129);

    // and the inverse: token 129 lights cells (0,0) and (1,3) of the patch
    TokenMatrix m(PatchConfig{}, 1);
    m.at(0, 0) = 129;
    PianoRoll back = decode(m);
    CHECK(back.at(0, 0) == 1);
    CHECK(back.at(1, 3) == 1);
    int64_t active = 0;
    for (int r = 0; r < 88; ++r)
        for (int64_t s = 0; s < 4; ++s) active += back.at(r, s);
    CHECK(active == 2);
}

TEST_CASE("decode is the exact inverse of encode", "[token_codec]") {
    Rng rng(42);
    for (PatchConfig cfg : {PatchConfig{1, 4}, PatchConfig{2, 4}, PatchConfig{3, 4}}) {
        for (int trial = 0; trial < 25; ++trial) {
            PianoRoll roll = random_roll(rng, 64);
            CHECK(decode(encode(roll, cfg)) == roll);
        }
    }
}

TEST_CASE("single-patch exhaustive round trip", "[token_codec]") {
    for (PatchConfig cfg : {PatchConfig{1, 4}, PatchConfig{2, 4}, PatchConfig{3, 4}}) {
        for (int tok = 0; tok < cfg.vocab(); ++tok) {
            TokenMatrix m(cfg, 1);
            m.at(0, 0) = static_cast<uint16_t>(tok);
            CHECK(encode(decode(m), cfg).at(0, 0) == tok);
        }
    }
}

TEST_CASE("flipping one cell changes exactly one token", "[token_codec]") {
    Rng rng(7);
    PianoRoll roll = random_roll(rng, 32);
    TokenMatrix base = encode(roll);
    for (int trial = 0; trial < 50; ++trial) {
        int r = static_cast<int>(rng.uniform_int(0, 87));
        int64_t s = rng.uniform_int(0, 31);
        PianoRoll flipped = roll;
        flipped.set(r, s, !roll.at(r, s));
        TokenMatrix changed = encode(flipped);
        int64_t diffs = 0;
        for (size_t i = 0; i < base.tokens.size(); ++i) diffs += base.tokens[i] != changed.tokens[i];
        CHECK(diffs == 1);
    }
}

TEST_CASE("encoded length is linear in duration", "[token_codec]") {
    for (int64_t t : {16, 64, 960}) CHECK(encode(PianoRoll(t)).n_cols == t / 4);
}

TEST_CASE("shape and value violations are named", "[token_codec]") {
    PianoRoll odd(16);
    CHECK_THROWS_AS(encode(odd, PatchConfig{2, 5}), ShapeError);

    TokenMatrix m(PatchConfig{1, 4}, 2);
    m.at(1, 3) = 300;  // vocab is 16
    try {
        decode(m);
        FAIL("expected ValueError");
    } catch (const ValueError& e) {
        std::string msg = e.what();
        CHECK(msg.find("300") != std::string::npos);
        CHECK(msg.find("(1,3)") != std::string::npos);
    }

    CHECK_THROWS_AS((PatchConfig{5, 4}.validate()), ConfigError);  // 2^20 vocabulary
    CHECK_THROWS_AS((PatchConfig{0, 4}.validate()), ConfigError);
}

TEST_CASE("d=3 pads the pitch rows and drops pad bits on decode", "[token_codec]") {
    PatchConfig cfg{3, 4};
    CHECK(cfg.rows() == 30);
    CHECK(cfg.padded_pitches() == 90);
    // token in the last patch row with bits in the pad rows only
    TokenMatrix m(cfg, 1);
    m.at(0, 29) = 0x00f;  // row 89 (pad), steps 0-3... decodes to nothing
    PianoRoll back = decode(m);
    CHECK_FALSE(back.any_active());
}

TEST_CASE("split and join blocks preserve order", "[token_codec]") {
    Rng rng(3);
    TokenMatrix m = encode(random_roll(rng, 16));
    auto blocks = split_blocks(m);
    REQUIRE(blocks.size() == 4);
    for (auto& b : blocks) CHECK(b.size() == 44);
    CHECK(join_blocks(blocks, m.config) == m);

    CHECK(split_blocks(TokenMatrix(PatchConfig{}, 0)).empty());

    blocks[2].pop_back();
    CHECK_THROWS_AS(join_blocks(blocks, m.config), ShapeError);
}

TEST_CASE("token container round-trips and rejects bad headers", "[token_codec]") {
    Rng rng(11);
    TokenMatrix m = encode(random_roll(rng, 48), PatchConfig{3, 4});
    std::stringstream ss;
    save_tokens(m, ss);
    TokenMatrix back = load_tokens(ss);
    CHECK(back == m);

    std::stringstream bad("NOPEnope");
    CHECK_THROWS_AS(load_tokens(bad), ParseError);
}
