#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "hiacg/errors.hpp"
#include "hiacg/pianoroll.hpp"

namespace hiacg {

struct KeyEstimate {
    int tonic = 0;       // pitch class 0..11 (0 = C)
    bool major = true;
    double correlation = 0.0;
};

struct MetricReport {
    double pitch_entropy = 0.0;              // bits
    double rhythm_entropy = 0.0;             // bits
    double harmonic_consistency = 0.0;       // in [0,1]
    std::optional<double> melodic_smoothness;  // large-leap ratio; absent if <2 melody notes
    KeyEstimate key;
};

namespace metrics_detail {

inline double entropy_bits(const std::map<int64_t, int64_t>& counts) {
    int64_t total = 0;
    for (auto& [k, c] : counts) total += c;
    double h = 0.0;
    for (auto& [k, c] : counts) {
        if (c == 0) continue;  // 0 log 0 := 0
        double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log2(p);
    }
    return h;
}

// Krumhansl-Kessler probe-tone profiles.
inline const std::array<double, 12>& major_profile() {
    static const std::array<double, 12> p = {6.35, 2.23, 3.48, 2.33, 4.38, 4.09,
                                             2.52, 5.19, 2.39, 3.66, 2.29, 2.88};
    return p;
}
inline const std::array<double, 12>& minor_profile() {
    static const std::array<double, 12> p = {6.33, 2.68, 3.52, 5.38, 2.60, 3.53,
                                             2.54, 4.75, 3.98, 2.69, 3.34, 3.17};
    return p;
}

inline double pearson(const std::array<double, 12>& x, const std::array<double, 12>& y) {
    double mx = 0, my = 0;
    for (int i = 0; i < 12; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= 12;
    my /= 12;
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 12; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0 || syy <= 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

inline bool in_scale(int pitch_class, const KeyEstimate& key) {
    static const int major_steps[7] = {0, 2, 4, 5, 7, 9, 11};
    static const int minor_steps[7] = {0, 2, 3, 5, 7, 8, 10};  // natural minor
    const int* steps = key.major ? major_steps : minor_steps;
    int rel = ((pitch_class - key.tonic) % 12 + 12) % 12;
    for (int i = 0; i < 7; ++i)
        if (steps[i] == rel) return true;
    return false;
}

}  // namespace metrics_detail

// Entropy over note occurrences per MIDI pitch, in bits.
inline double pitch_entropy(const std::vector<NoteEvent>& events) {
    if (events.empty()) throw ValueError("pitch entropy of an empty piece");
    std::map<int64_t, int64_t> counts;
    for (const auto& e : events) ++counts[e.pitch];
    return metrics_detail::entropy_bits(counts);
}

// Entropy over duration types (distinct step lengths), in bits.
inline double rhythm_entropy(const std::vector<NoteEvent>& events) {
    if (events.empty()) throw ValueError("rhythm entropy of an empty piece");
    std::map<int64_t, int64_t> counts;
    for (const auto& e : events) ++counts[e.duration];
    return metrics_detail::entropy_bits(counts);
}

// Krumhansl-Schmuckler key finding over a duration-weighted pitch-class
// histogram. Ties break toward major.
inline KeyEstimate detect_key(const std::vector<NoteEvent>& events) {
    if (events.empty()) throw ValueError("key detection on an empty piece");
    std::array<double, 12> hist{};
    for (const auto& e : events) hist[e.pitch % 12] += static_cast<double>(e.duration);
    KeyEstimate best;
    best.correlation = -2.0;
    for (int mode = 0; mode < 2; ++mode) {  // majors first so ties keep major
        const auto& profile =
            mode == 0 ? metrics_detail::major_profile() : metrics_detail::minor_profile();
        for (int tonic = 0; tonic < 12; ++tonic) {
            std::array<double, 12> rotated;
            for (int pc = 0; pc < 12; ++pc) rotated[pc] = profile[((pc - tonic) % 12 + 12) % 12];
            double r = metrics_detail::pearson(hist, rotated);
            if (r > best.correlation) {
                best = {tonic, mode == 0, r};
            }
        }
    }
    return best;
}

// Fraction of notes whose pitch class lies in the detected key's diatonic
// scale.
inline double harmonic_consistency(const std::vector<NoteEvent>& events) {
    if (events.empty()) throw ValueError("harmonic consistency of an empty piece");
    KeyEstimate key = detect_key(events);
    int64_t in = 0;
    for (const auto& e : events)
        if (metrics_detail::in_scale(e.pitch % 12, key)) ++in;
    return static_cast<double>(in) / static_cast<double>(events.size());
}

// Skyline melody: the highest sounding pitch at each distinct onset time.
inline std::vector<int> skyline_melody(const std::vector<NoteEvent>& events) {
    std::map<int64_t, int> best;  // onset -> highest pitch sounding there
    for (const auto& e : events) {
        auto it = best.find(e.onset);
        if (it == best.end() || e.pitch > it->second) best[e.onset] = e.pitch;
    }
    // a held note can still be the top voice at later onsets
    std::vector<int> melody;
    for (auto& [onset, pitch] : best) {
        int top = pitch;
        for (const auto& e : events)
            if (e.onset <= onset && onset < e.onset + e.duration) top = std::max(top, e.pitch);
        melody.push_back(top);
    }
    return melody;
}

// Large-leap ratio of the skyline melody: intervals strictly greater than a
// perfect fourth (5 semitones) count as leaps.
inline double melodic_smoothness(const std::vector<NoteEvent>& events) {
    std::vector<int> melody = skyline_melody(events);
    if (melody.size() < 2) throw ValueError("melodic smoothness needs at least two melody notes");
    int64_t leaps = 0;
    for (size_t i = 0; i + 1 < melody.size(); ++i)
        if (std::abs(melody[i + 1] - melody[i]) > 5) ++leaps;
    return static_cast<double>(leaps) / static_cast<double>(melody.size() - 1);
}

// All four objective metrics plus the detected key for one roll.
inline MetricReport evaluate(const PianoRoll& roll) {
    std::vector<NoteEvent> events = pianoroll_to_events(roll);
    if (events.empty()) throw ValueError("cannot evaluate a silent roll");
    MetricReport report;
    report.pitch_entropy = pitch_entropy(events);
    report.rhythm_entropy = rhythm_entropy(events);
    report.key = detect_key(events);
    report.harmonic_consistency = harmonic_consistency(events);
    if (skyline_melody(events).size() >= 2)
        report.melodic_smoothness = melodic_smoothness(events);
    return report;
}

}  // namespace hiacg
