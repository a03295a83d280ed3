#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hiacg/errors.hpp"
#include "hiacg/pianoroll.hpp"

namespace hiacg {

// Patch geometry for the piano-token encoding: each token packs a d x t
// patch of roll cells into one integer, MSB-first in row-major flatten
// order. Vocabulary size is 2^(d*t).
struct PatchConfig {
    int d = 2;  // pitch rows per patch
    int t = 4;  // time steps per patch

    void validate() const {
        if (d < 1 || t < 1) throw ConfigError("patch dims must be >= 1");
        if (d * t > 16)
            throw ConfigError("patch " + std::to_string(d) + "x" + std::to_string(t) +
                              " exceeds the 2^16 vocabulary ceiling");
    }

    int vocab() const { return 1 << (d * t); }

    // 88 rows zero-padded up to a multiple of d (e.g. 90 for d=3).
    int padded_pitches() const { return (PianoRoll::kPitches + d - 1) / d * d; }
    int rows() const { return padded_pitches() / d; }  // N_r

    bool operator==(const PatchConfig& o) const { return d == o.d && t == o.t; }
    bool operator!=(const PatchConfig& o) const { return !(*this == o); }
};

// One token-matrix column: all patches covering the same t time steps.
using Block = std::vector<uint16_t>;

// N_c x N_r grid of patch tokens; column j (a Block) covers time steps
// [j*t, (j+1)*t).
struct TokenMatrix {
    PatchConfig config;
    int64_t n_cols = 0;  // N_c = T/t
    int n_rows = 0;      // N_r = padded_pitches/d
    std::vector<uint16_t> tokens;  // block-major: tokens[j*n_rows + i]

    TokenMatrix() = default;
    TokenMatrix(PatchConfig cfg, int64_t cols)
        : config(cfg), n_cols(cols), n_rows(cfg.rows()), tokens(cols * cfg.rows(), 0) {
        cfg.validate();
    }

    uint16_t at(int64_t col, int row) const { return tokens[col * n_rows + row]; }
    uint16_t& at(int64_t col, int row) { return tokens[col * n_rows + row]; }
    int64_t total_tokens() const { return n_cols * static_cast<int64_t>(n_rows); }

    bool operator==(const TokenMatrix& o) const {
        return config == o.config && n_cols == o.n_cols && n_rows == o.n_rows &&
               tokens == o.tokens;
    }
    bool operator!=(const TokenMatrix& o) const { return !(*this == o); }
};

inline TokenMatrix encode(const PianoRoll& roll, PatchConfig config = {}) {
    config.validate();
    if (roll.steps() % config.t != 0)
        throw ShapeError("roll T=" + std::to_string(roll.steps()) +
                         " not divisible by patch t=" + std::to_string(config.t));
    TokenMatrix out(config, roll.steps() / config.t);
    for (int64_t j = 0; j < out.n_cols; ++j) {
        for (int i = 0; i < out.n_rows; ++i) {
            uint32_t token = 0;
            for (int dr = 0; dr < config.d; ++dr) {
                int row = i * config.d + dr;
                for (int dt = 0; dt < config.t; ++dt) {
                    uint32_t bit =
                        row < PianoRoll::kPitches ? roll.at(row, j * config.t + dt) : 0;
                    token = token << 1 | bit;
                }
            }
            out.at(j, i) = static_cast<uint16_t>(token);
        }
    }
    return out;
}

// Exact inverse of encode on valid rolls. Bits that fall in the zero-padded
// pitch rows (d not dividing 88) are discarded.
inline PianoRoll decode(const TokenMatrix& tokens) {
    tokens.config.validate();
    if (tokens.n_rows != tokens.config.rows())
        throw ShapeError("token matrix row count does not match its patch config");
    if (tokens.n_cols < 1) throw ShapeError("token matrix has no columns");
    const int d = tokens.config.d, t = tokens.config.t;
    const uint32_t vocab = static_cast<uint32_t>(tokens.config.vocab());
    PianoRoll roll(tokens.n_cols * t);
    for (int64_t j = 0; j < tokens.n_cols; ++j) {
        for (int i = 0; i < tokens.n_rows; ++i) {
            uint32_t token = tokens.at(j, i);
            if (token >= vocab)
                throw ValueError("token value " + std::to_string(token) + " at (" +
                                 std::to_string(j) + "," + std::to_string(i) +
                                 ") exceeds vocabulary " + std::to_string(vocab));
            for (int k = 0; k < d * t; ++k) {
                int row = i * d + k / t;
                int64_t step = j * t + k % t;
                uint32_t bit = token >> (d * t - 1 - k) & 1u;
                if (bit && row < PianoRoll::kPitches) roll.set(row, step, 1);
            }
        }
    }
    return roll;
}

inline std::vector<Block> split_blocks(const TokenMatrix& m) {
    std::vector<Block> blocks(m.n_cols);
    for (int64_t j = 0; j < m.n_cols; ++j)
        blocks[j] = Block(m.tokens.begin() + j * m.n_rows, m.tokens.begin() + (j + 1) * m.n_rows);
    return blocks;
}

inline TokenMatrix join_blocks(const std::vector<Block>& blocks, PatchConfig config = {}) {
    config.validate();
    TokenMatrix m(config, static_cast<int64_t>(blocks.size()));
    for (int64_t j = 0; j < m.n_cols; ++j) {
        if (static_cast<int>(blocks[j].size()) != m.n_rows)
            throw ShapeError("block " + std::to_string(j) + " has length " +
                             std::to_string(blocks[j].size()) + ", expected " +
                             std::to_string(m.n_rows));
        std::copy(blocks[j].begin(), blocks[j].end(), m.tokens.begin() + j * m.n_rows);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Token container: "HTOK", u32 version, u16 d, u16 t, u32 N_c, u32 N_r,
// then N_c*N_r little-endian u16 tokens in block-major order.
// ---------------------------------------------------------------------------

inline void save_tokens(const TokenMatrix& m, std::ostream& os) {
    os.write("HTOK", 4);
    detail::write_u32(os, 1);
    unsigned char dt[4] = {static_cast<unsigned char>(m.config.d),
                           static_cast<unsigned char>(m.config.d >> 8),
                           static_cast<unsigned char>(m.config.t),
                           static_cast<unsigned char>(m.config.t >> 8)};
    os.write(reinterpret_cast<const char*>(dt), 4);
    detail::write_u32(os, static_cast<uint32_t>(m.n_cols));
    detail::write_u32(os, static_cast<uint32_t>(m.n_rows));
    for (uint16_t tok : m.tokens) {
        unsigned char b[2] = {static_cast<unsigned char>(tok), static_cast<unsigned char>(tok >> 8)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
}

inline TokenMatrix load_tokens(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "HTOK")
        throw ParseError("bad token-file magic", 0);
    uint32_t version = detail::read_u32(is, "token version");
    if (version != 1) throw ParseError("unsupported token-file version", 4);
    unsigned char dt[4];
    if (!is.read(reinterpret_cast<char*>(dt), 4)) throw ParseError("truncated patch config", 8);
    PatchConfig cfg{dt[0] | dt[1] << 8, dt[2] | dt[3] << 8};
    cfg.validate();
    uint32_t n_cols = detail::read_u32(is, "token N_c");
    uint32_t n_rows = detail::read_u32(is, "token N_r");
    if (static_cast<int>(n_rows) != cfg.rows())
        throw ParseError("token N_r inconsistent with patch config", 16);
    TokenMatrix m(cfg, n_cols);
    for (auto& tok : m.tokens) {
        unsigned char b[2];
        if (!is.read(reinterpret_cast<char*>(b), 2))
            throw ParseError("truncated token data", static_cast<size_t>(is.tellg()));
        tok = static_cast<uint16_t>(b[0] | b[1] << 8);
    }
    return m;
}

inline void save_tokens_file(const TokenMatrix& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("cannot open " + path + " for writing");
    save_tokens(m, os);
}

inline TokenMatrix load_tokens_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open " + path);
    return load_tokens(is);
}

}  // namespace hiacg
