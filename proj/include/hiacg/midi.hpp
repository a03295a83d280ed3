#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hiacg/errors.hpp"
#include "hiacg/pianoroll.hpp"

namespace hiacg {

struct MidiIngestStats {
    int64_t notes_kept = 0;
    int64_t notes_dropped_out_of_range = 0;  // pitch outside 21..108
};

namespace midi_detail {

struct Reader {
    const uint8_t* p;
    size_t size;
    size_t pos = 0;

    uint8_t u8(const char* what) {
        if (pos >= size) throw ParseError(std::string("truncated ") + what, pos);
        return p[pos++];
    }
    uint16_t u16(const char* what) {
        uint16_t hi = u8(what), lo = u8(what);
        return static_cast<uint16_t>(hi << 8 | lo);
    }
    uint32_t u32(const char* what) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = v << 8 | u8(what);
        return v;
    }
    // Variable-length quantity, at most 4 bytes per the SMF spec.
    uint32_t vlq(const char* what) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            uint8_t b = u8(what);
            v = v << 7 | (b & 0x7f);
            if (!(b & 0x80)) return v;
        }
        throw ParseError(std::string("overlong varint in ") + what, pos);
    }
    void skip(size_t n, const char* what) {
        if (pos + n > size) throw ParseError(std::string("truncated ") + what, pos);
        pos += n;
    }
};

struct RawNote {
    int pitch;
    int64_t on_tick;
    int64_t off_tick;
};

}  // namespace midi_detail

// Parses an SMF (format 0 or 1) into a quantized binary roll. All tracks and
// channels are merged. Notes outside the 88-key range are dropped and
// counted in `stats`. T is the last active step + 1, padded to a full
// measure.
inline PianoRoll midi_to_pianoroll(const std::vector<uint8_t>& bytes,
                                   int steps_per_quarter = PianoRoll::kStepsPerQuarter,
                                   MidiIngestStats* stats = nullptr) {
    using midi_detail::RawNote;
    midi_detail::Reader r{bytes.data(), bytes.size()};

    if (bytes.size() < 14 || std::string(reinterpret_cast<const char*>(bytes.data()), 4) != "MThd")
        throw ParseError("missing MThd header", 0);
    r.pos = 4;
    uint32_t hdr_len = r.u32("header length");
    if (hdr_len < 6) throw ParseError("MThd length must be >= 6", 4);
    uint16_t format = r.u16("format");
    uint16_t ntracks = r.u16("track count");
    uint16_t division = r.u16("division");
    if (format > 1) throw ParseError("unsupported SMF format " + std::to_string(format), 8);
    if (division & 0x8000) throw ParseError("SMPTE time division not supported", 12);
    if (division == 0) throw ParseError("zero ticks-per-quarter division", 12);
    r.skip(hdr_len - 6, "header");

    std::vector<RawNote> notes;
    double tempo_bpm = 0.0;  // first tempo event wins

    for (int track = 0; track < ntracks; ++track) {
        if (r.pos + 8 > r.size) throw ParseError("missing MTrk chunk", r.pos);
        if (std::string(reinterpret_cast<const char*>(bytes.data() + r.pos), 4) != "MTrk")
            throw ParseError("expected MTrk chunk", r.pos);
        r.pos += 4;
        uint32_t track_len = r.u32("track length");
        size_t track_end = r.pos + track_len;
        if (track_end > r.size) throw ParseError("track length overruns file", r.pos - 4);

        int64_t tick = 0;
        uint8_t running_status = 0;
        // key: channel<<8 | pitch, value: stack of open note-on ticks
        std::map<int, std::vector<int64_t>> open;

        while (r.pos < track_end) {
            tick += r.vlq("delta time");
            uint8_t b = r.u8("event status");
            uint8_t status;
            uint8_t data0;
            if (b & 0x80) {
                status = b;
                if (status < 0xf0) running_status = status;
                data0 = 0;  // set below where needed
            } else {
                if (running_status == 0) throw ParseError("data byte without running status", r.pos - 1);
                status = running_status;
                data0 = b;
            }

            auto read_d0 = [&](const char* what) { return (b & 0x80) ? r.u8(what) : data0; };

            switch (status & 0xf0) {
                case 0x80: {  // note off
                    uint8_t key = read_d0("note-off key");
                    r.u8("note-off velocity");
                    auto& stack = open[(status & 0x0f) << 8 | key];
                    if (!stack.empty()) {
                        notes.push_back({key, stack.back(), tick});
                        stack.pop_back();
                    }
                    break;
                }
                case 0x90: {  // note on (velocity 0 acts as note off)
                    uint8_t key = read_d0("note-on key");
                    uint8_t vel = r.u8("note-on velocity");
                    auto& stack = open[(status & 0x0f) << 8 | key];
                    if (vel == 0) {
                        if (!stack.empty()) {
                            notes.push_back({key, stack.back(), tick});
                            stack.pop_back();
                        }
                    } else {
                        stack.push_back(tick);
                    }
                    break;
                }
                case 0xa0:  // aftertouch
                case 0xb0:  // controller
                case 0xe0:  // pitch bend
                    read_d0("event data");
                    r.u8("event data");
                    break;
                case 0xc0:  // program change
                case 0xd0:  // channel aftertouch
                    read_d0("event data");
                    break;
                case 0xf0: {
                    if (status == 0xff) {  // meta
                        uint8_t type = r.u8("meta type");
                        uint32_t len = r.vlq("meta length");
                        if (type == 0x51 && len == 3) {
                            uint32_t usec = 0;
                            for (int i = 0; i < 3; ++i) usec = usec << 8 | r.u8("tempo");
                            if (usec > 0 && tempo_bpm == 0.0) tempo_bpm = 60000000.0 / usec;
                        } else {
                            r.skip(len, "meta event");
                        }
                        if (type == 0x2f) r.pos = track_end;  // end of track
                    } else if (status == 0xf0 || status == 0xf7) {  // sysex
                        uint32_t len = r.vlq("sysex length");
                        r.skip(len, "sysex");
                    } else {
                        throw ParseError("unexpected system event", r.pos - 1);
                    }
                    break;
                }
                default:
                    throw ParseError("unknown event status", r.pos - 1);
            }
        }
        // Unterminated notes end at the last tick seen on the track.
        for (auto& [key, stack] : open)
            for (int64_t on_tick : stack)
                if (tick > on_tick) notes.push_back({key & 0xff, on_tick, tick});
        r.pos = track_end;
    }

    MidiIngestStats local;
    std::vector<NoteEvent> events;
    double ticks_per_step = static_cast<double>(division) / steps_per_quarter;
    for (const auto& n : notes) {
        if (n.pitch < PianoRoll::kLowestPitch || n.pitch > PianoRoll::kHighestPitch) {
            ++local.notes_dropped_out_of_range;
            continue;
        }
        int64_t onset = std::llround(n.on_tick / ticks_per_step);
        int64_t dur = std::llround((n.off_tick - n.on_tick) / ticks_per_step);
        events.push_back({n.pitch, onset, std::max<int64_t>(1, dur)});
        ++local.notes_kept;
    }
    if (stats) *stats = local;
    if (events.empty())
        throw EmptyContentError("MIDI file has no notes in the 88-key range");

    PianoRoll roll = events_to_pianoroll(events, tempo_bpm > 0 ? tempo_bpm : 120.0);
    // events_to_pianoroll already pads to a full measure; trim nothing.
    return roll;
}

// Writes a format-0 SMF with one tempo meta-event, 480 ticks per quarter.
inline std::vector<uint8_t> events_to_midi(const std::vector<NoteEvent>& events,
                                           double tempo_bpm = 120.0) {
    if (events.empty()) throw EmptyContentError("no events to write");
    if (tempo_bpm <= 0) throw ValueError("tempo must be positive");
    constexpr int kDivision = 480;
    constexpr int kTicksPerStep = kDivision / PianoRoll::kStepsPerQuarter;

    struct Edge {
        int64_t tick;
        int order;  // offs before ons at the same tick
        uint8_t status;
        uint8_t key;
        uint8_t vel;
    };
    std::vector<Edge> edges;
    for (const auto& e : events) {
        if (e.pitch < 0 || e.pitch > 127) throw ValueError("pitch out of MIDI range");
        if (e.duration < 1) throw ValueError("duration must be >= 1 step");
        edges.push_back({e.onset * kTicksPerStep, 1, 0x90, static_cast<uint8_t>(e.pitch), 80});
        edges.push_back({(e.onset + e.duration) * kTicksPerStep, 0, 0x80,
                         static_cast<uint8_t>(e.pitch), 0});
    }
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        if (a.tick != b.tick) return a.tick < b.tick;
        if (a.order != b.order) return a.order < b.order;
        return a.key < b.key;
    });

    std::vector<uint8_t> track;
    auto vlq = [&track](int64_t v) {
        uint8_t tmp[4];
        int n = 0;
        do {
            tmp[n++] = static_cast<uint8_t>(v & 0x7f);
            v >>= 7;
        } while (v && n < 4);
        for (int i = n - 1; i >= 0; --i)
            track.push_back(i == 0 ? tmp[i] : static_cast<uint8_t>(tmp[i] | 0x80));
    };

    // tempo meta at tick 0
    int64_t usec_per_quarter = std::llround(60000000.0 / tempo_bpm);
    vlq(0);
    track.push_back(0xff);
    track.push_back(0x51);
    track.push_back(0x03);
    track.push_back(static_cast<uint8_t>(usec_per_quarter >> 16));
    track.push_back(static_cast<uint8_t>(usec_per_quarter >> 8));
    track.push_back(static_cast<uint8_t>(usec_per_quarter));

    int64_t last_tick = 0;
    for (const auto& e : edges) {
        vlq(e.tick - last_tick);
        last_tick = e.tick;
        track.push_back(e.status);  // channel 0
        track.push_back(e.key);
        track.push_back(e.vel);
    }
    vlq(0);
    track.push_back(0xff);
    track.push_back(0x2f);
    track.push_back(0x00);

    std::vector<uint8_t> out;
    auto be16 = [&out](uint16_t v) {
        out.push_back(static_cast<uint8_t>(v >> 8));
        out.push_back(static_cast<uint8_t>(v));
    };
    auto be32 = [&out](uint32_t v) {
        for (int i = 3; i >= 0; --i) out.push_back(static_cast<uint8_t>(v >> 8 * i));
    };
    out.insert(out.end(), {'M', 'T', 'h', 'd'});
    be32(6);
    be16(0);  // format 0
    be16(1);  // one track
    be16(kDivision);
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    be32(static_cast<uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("cannot open " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(is), {});
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace hiacg
