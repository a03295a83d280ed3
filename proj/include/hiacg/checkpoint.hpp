#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hiacg/errors.hpp"
#include "hiacg/nn.hpp"
#include "hiacg/pianoroll.hpp"  // little-endian read/write helpers

namespace hiacg {

// Checkpoint container: "HCKP", u32 version, a string->string metadata map
// (model kind, architecture fields, component manifest, trained step count),
// then a named parameter table (name, dims, raw little-endian f32 data).
struct Checkpoint {
    std::map<std::string, std::string> meta;
    // name -> (shape, values)
    std::vector<std::pair<std::string, std::pair<std::vector<int64_t>, std::vector<float>>>> params;

    int64_t meta_i64(const std::string& key, int64_t fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : std::stoll(it->second);
    }
    const std::string& meta_str(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw ParseError("checkpoint missing field " + key, 0);
        return it->second;
    }
};

namespace detail {

inline void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is, const char* what) {
    uint32_t len = read_u32(is, what);
    std::string s(len, '\0');
    if (!is.read(s.data(), len)) throw ParseError(std::string("truncated ") + what,
                                                  static_cast<size_t>(is.tellg()));
    return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, std::ostream& os) {
    os.write("HCKP", 4);
    detail::write_u32(os, 1);
    detail::write_u32(os, static_cast<uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        detail::write_str(os, k);
        detail::write_str(os, v);
    }
    detail::write_u32(os, static_cast<uint32_t>(ckpt.params.size()));
    for (const auto& [name, sv] : ckpt.params) {
        detail::write_str(os, name);
        detail::write_u32(os, static_cast<uint32_t>(sv.first.size()));
        for (int64_t d : sv.first) detail::write_u64(os, static_cast<uint64_t>(d));
        for (float f : sv.second) {
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::write_u32(os, bits);
        }
    }
}

inline Checkpoint load_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "HCKP")
        throw ParseError("bad checkpoint magic", 0);
    uint32_t version = detail::read_u32(is, "checkpoint version");
    if (version != 1) throw ParseError("unsupported checkpoint version", 4);
    Checkpoint ckpt;
    uint32_t n_meta = detail::read_u32(is, "meta count");
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = detail::read_str(is, "meta key");
        ckpt.meta[k] = detail::read_str(is, "meta value");
    }
    uint32_t n_params = detail::read_u32(is, "param count");
    for (uint32_t i = 0; i < n_params; ++i) {
        std::string name = detail::read_str(is, "param name");
        uint32_t ndim = detail::read_u32(is, "param rank");
        std::vector<int64_t> shape(ndim);
        int64_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<int64_t>(detail::read_u64(is, "param dim"));
            numel *= d;
        }
        std::vector<float> data(numel);
        for (auto& f : data) {
            uint32_t bits = detail::read_u32(is, "param data");
            std::memcpy(&f, &bits, 4);
        }
        ckpt.params.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }
    return ckpt;
}

inline void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("cannot open " + path + " for writing");
    save_checkpoint(ckpt, os);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open " + path);
    return load_checkpoint(is);
}

// Copies a parameter store into / out of a checkpoint.
inline void store_params(Checkpoint& ckpt, const ParamStore& store) {
    for (const auto& [name, t] : store.entries)
        ckpt.params.emplace_back(name, std::make_pair(t.shape(), t.values()));
}

inline void restore_params(const Checkpoint& ckpt, ParamStore& store) {
    if (ckpt.params.size() != store.entries.size())
        throw ParseError("checkpoint parameter count " + std::to_string(ckpt.params.size()) +
                             " does not match model (" + std::to_string(store.entries.size()) + ")",
                         0);
    for (size_t i = 0; i < store.entries.size(); ++i) {
        auto& [name, t] = store.entries[i];
        const auto& [ck_name, sv] = ckpt.params[i];
        if (ck_name != name)
            throw ParseError("checkpoint parameter " + ck_name + " where " + name + " expected", 0);
        if (sv.first != t.shape())
            throw ParseError("checkpoint parameter " + name + " has wrong shape", 0);
        t.values() = sv.second;
    }
}

}  // namespace hiacg
