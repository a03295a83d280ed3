#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hiacg/errors.hpp"

namespace hiacg {

// 88-key binary piano roll. Row 0 is MIDI pitch 21 (A0), row 87 is pitch 108
// (C8). Columns are 1/16-beat steps (4 per quarter note).
class PianoRoll {
public:
    static constexpr int kPitches = 88;
    static constexpr int kLowestPitch = 21;
    static constexpr int kHighestPitch = 108;
    static constexpr int kStepsPerQuarter = 4;
    static constexpr int kStepsPerMeasure = 16;  // 4/4 only

    PianoRoll() = default;
    explicit PianoRoll(int64_t steps, double tempo_bpm = 120.0)
        : steps_(steps), tempo_bpm_(tempo_bpm), grid_(kPitches * steps, 0) {
        if (steps < 1) throw ValueError("PianoRoll needs at least one time step");
        if (tempo_bpm <= 0) throw ValueError("tempo must be positive");
    }

    int64_t steps() const { return steps_; }
    double tempo_bpm() const { return tempo_bpm_; }
    void set_tempo_bpm(double bpm) {
        if (bpm <= 0) throw ValueError("tempo must be positive");
        tempo_bpm_ = bpm;
    }

    uint8_t at(int row, int64_t step) const { return grid_[row * steps_ + step]; }
    void set(int row, int64_t step, uint8_t v) { grid_[row * steps_ + step] = v ? 1 : 0; }

    const std::vector<uint8_t>& grid() const { return grid_; }

    bool any_active() const {
        return std::any_of(grid_.begin(), grid_.end(), [](uint8_t v) { return v != 0; });
    }

    int64_t last_active_step() const {  // -1 if silent
        for (int64_t s = steps_ - 1; s >= 0; --s)
            for (int r = 0; r < kPitches; ++r)
                if (at(r, s)) return s;
        return -1;
    }

    // Extends with zero columns so steps() is a multiple of `multiple`.
    void pad_to_multiple(int64_t multiple) {
        int64_t target = ((steps_ + multiple - 1) / multiple) * multiple;
        if (target == steps_) return;
        std::vector<uint8_t> g(kPitches * target, 0);
        for (int r = 0; r < kPitches; ++r)
            std::copy_n(grid_.begin() + r * steps_, steps_, g.begin() + r * target);
        grid_ = std::move(g);
        steps_ = target;
    }

    bool operator==(const PianoRoll& o) const {
        return steps_ == o.steps_ && grid_ == o.grid_;
    }
    bool operator!=(const PianoRoll& o) const { return !(*this == o); }

private:
    int64_t steps_ = 0;
    double tempo_bpm_ = 120.0;
    std::vector<uint8_t> grid_;  // row-major, kPitches x steps_
};

// One note: a maximal horizontal run of active cells in a pitch row.
struct NoteEvent {
    int pitch;         // MIDI number, 21..108
    int64_t onset;     // step index
    int64_t duration;  // steps, >= 1
};

inline bool operator==(const NoteEvent& a, const NoteEvent& b) {
    return a.pitch == b.pitch && a.onset == b.onset && a.duration == b.duration;
}

// Decomposes the roll into maximal runs, sorted by (onset, pitch).
inline std::vector<NoteEvent> pianoroll_to_events(const PianoRoll& roll) {
    std::vector<NoteEvent> events;
    for (int r = 0; r < PianoRoll::kPitches; ++r) {
        int64_t run_start = -1;
        for (int64_t s = 0; s <= roll.steps(); ++s) {
            bool on = s < roll.steps() && roll.at(r, s);
            if (on && run_start < 0) {
                run_start = s;
            } else if (!on && run_start >= 0) {
                events.push_back({r + PianoRoll::kLowestPitch, run_start, s - run_start});
                run_start = -1;
            }
        }
    }
    std::sort(events.begin(), events.end(), [](const NoteEvent& a, const NoteEvent& b) {
        return a.onset != b.onset ? a.onset < b.onset : a.pitch < b.pitch;
    });
    return events;
}

// Builds a roll from events. T is the last note end padded up to a full
// measure (or `min_steps` if that is longer).
inline PianoRoll events_to_pianoroll(const std::vector<NoteEvent>& events,
                                     double tempo_bpm = 120.0, int64_t min_steps = 0) {
    if (events.empty()) throw EmptyContentError("no events to place on a roll");
    int64_t end = min_steps;
    for (const auto& e : events) {
        if (e.pitch < PianoRoll::kLowestPitch || e.pitch > PianoRoll::kHighestPitch)
            throw ValueError("event pitch " + std::to_string(e.pitch) + " outside 21..108");
        if (e.duration < 1) throw ValueError("event duration must be >= 1 step");
        if (e.onset < 0) throw ValueError("event onset must be >= 0");
        end = std::max(end, e.onset + e.duration);
    }
    PianoRoll roll(((end + 15) / 16) * 16, tempo_bpm);
    for (const auto& e : events)
        for (int64_t s = e.onset; s < e.onset + e.duration; ++s)
            roll.set(e.pitch - PianoRoll::kLowestPitch, s, 1);
    return roll;
}

// Equality up to trailing silent padding.
inline bool rolls_equal_padded(const PianoRoll& a, const PianoRoll& b) {
    int64_t lo = std::min(a.steps(), b.steps());
    for (int r = 0; r < PianoRoll::kPitches; ++r) {
        for (int64_t s = 0; s < lo; ++s)
            if (a.at(r, s) != b.at(r, s)) return false;
        for (int64_t s = lo; s < a.steps(); ++s)
            if (a.at(r, s)) return false;
        for (int64_t s = lo; s < b.steps(); ++s)
            if (b.at(r, s)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Roll container: "HPRL", u32 version, u32 D, u64 T, then D rows of
// ceil(T/8) bytes each, bits MSB-first within a byte.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void write_u64(std::ostream& os, uint64_t v) {
    write_u32(os, static_cast<uint32_t>(v));
    write_u32(os, static_cast<uint32_t>(v >> 32));
}
inline uint32_t read_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw ParseError(std::string("truncated ") + what, static_cast<size_t>(is.tellg()));
    return b[0] | b[1] << 8 | b[2] << 16 | uint32_t(b[3]) << 24;
}
inline uint64_t read_u64(std::istream& is, const char* what) {
    uint64_t lo = read_u32(is, what);
    uint64_t hi = read_u32(is, what);
    return lo | hi << 32;
}

}  // namespace detail

inline void save_roll(const PianoRoll& roll, std::ostream& os) {
    os.write("HPRL", 4);
    detail::write_u32(os, 1);  // version
    detail::write_u32(os, PianoRoll::kPitches);
    detail::write_u64(os, static_cast<uint64_t>(roll.steps()));
    int64_t row_bytes = (roll.steps() + 7) / 8;
    std::vector<unsigned char> buf(row_bytes);
    for (int r = 0; r < PianoRoll::kPitches; ++r) {
        std::fill(buf.begin(), buf.end(), 0);
        for (int64_t s = 0; s < roll.steps(); ++s)
            if (roll.at(r, s)) buf[s / 8] |= static_cast<unsigned char>(0x80u >> (s % 8));
        os.write(reinterpret_cast<const char*>(buf.data()), row_bytes);
    }
}

inline PianoRoll load_roll(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "HPRL")
        throw ParseError("bad roll magic", 0);
    uint32_t version = detail::read_u32(is, "roll version");
    if (version != 1) throw ParseError("unsupported roll version " + std::to_string(version), 4);
    uint32_t d = detail::read_u32(is, "roll D");
    if (d != PianoRoll::kPitches) throw ParseError("roll D must be 88", 8);
    uint64_t t = detail::read_u64(is, "roll T");
    if (t < 1) throw ParseError("roll T must be >= 1", 12);
    PianoRoll roll(static_cast<int64_t>(t));
    int64_t row_bytes = (static_cast<int64_t>(t) + 7) / 8;
    std::vector<unsigned char> buf(row_bytes);
    for (int r = 0; r < PianoRoll::kPitches; ++r) {
        if (!is.read(reinterpret_cast<char*>(buf.data()), row_bytes))
            throw ParseError("truncated roll grid", static_cast<size_t>(is.tellg()));
        for (int64_t s = 0; s < static_cast<int64_t>(t); ++s)
            if (buf[s / 8] & (0x80u >> (s % 8))) roll.set(r, s, 1);
    }
    return roll;
}

inline void save_roll_file(const PianoRoll& roll, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("cannot open " + path + " for writing");
    save_roll(roll, os);
}

inline PianoRoll load_roll_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open " + path);
    return load_roll(is);
}

}  // namespace hiacg
