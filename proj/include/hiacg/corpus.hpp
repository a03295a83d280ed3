#pragma once

#include <vector>

#include "hiacg/metrics.hpp"
#include "hiacg/pianoroll.hpp"
#include "hiacg/rng.hpp"

namespace hiacg {

namespace corpus_detail {

inline PianoRoll draw_piece(Rng& rng, int min_measures, int max_measures) {
    static const int major_steps[7] = {0, 2, 4, 5, 7, 9, 11};
    static const int minor_steps[7] = {0, 2, 3, 5, 7, 8, 10};
    int tonic = static_cast<int>(rng.uniform_int(0, 11));
    bool major = rng.uniform() < 0.7;
    const int* scale = major ? major_steps : minor_steps;
    int measures = static_cast<int>(rng.uniform_int(min_measures, max_measures));

    auto scale_pitch = [&](int degree, int base_octave) {
        int oct = base_octave + degree / 7;
        int pitch = 12 * oct + tonic + scale[((degree % 7) + 7) % 7];
        while (pitch < PianoRoll::kLowestPitch) pitch += 12;
        while (pitch > PianoRoll::kHighestPitch) pitch -= 12;
        return pitch;
    };

    std::vector<NoteEvent> events;
    // chord per measure; four-bar phrases anchored on I and a final cadence
    static const int pool[8] = {0, 0, 3, 4, 5, 0, 3, 4};  // I I IV V vi I IV V
    int melody_degree = 7;  // tonic an octave up
    for (int m = 0; m < measures; ++m) {
        int chord = (m % 4 == 0 || m == measures - 1) ? 0 : pool[rng.uniform_int(0, 7)];
        int64_t bar = static_cast<int64_t>(m) * PianoRoll::kStepsPerMeasure;
        // bass root, half notes
        events.push_back({scale_pitch(chord, 3), bar, 8});
        events.push_back({scale_pitch(chord, 3), bar + 8, 8});
        // triad in the middle register, whole measure
        for (int third = 0; third < 3; ++third)
            events.push_back({scale_pitch(chord + 2 * third, 4), bar, 16});
        // melody: fill 16 steps with scale steps around the octave
        int64_t t = 0;
        while (t < PianoRoll::kStepsPerMeasure) {
            int64_t dur = rng.uniform() < 0.6 ? 2 : 4;
            if (t + dur > PianoRoll::kStepsPerMeasure) dur = PianoRoll::kStepsPerMeasure - t;
            events.push_back({scale_pitch(melody_degree, 5), bar + t, dur});
            t += dur;
            double move = rng.uniform();
            if (move < 0.4)
                melody_degree += 1;
            else if (move < 0.8)
                melody_degree -= 1;
            else
                melody_degree += static_cast<int>(rng.uniform_int(-3, 3));
            melody_degree = std::max(3, std::min(11, melody_degree));
        }
        // cadence: land on a chord tone at the bar end
        if (m == measures - 1) melody_degree = 7;
    }
    return events_to_pianoroll(events, 120.0,
                               static_cast<int64_t>(measures) * PianoRoll::kStepsPerMeasure);
}

}  // namespace corpus_detail

// Procedural stand-in corpus: diatonic chord progressions with a stepwise
// melody on top, 4-16 measures per piece. Deterministic per seed. Redraws
// the rare piece whose duration mass tilts the detected key off the true
// tonic, so harmonic consistency stays high by construction.
inline PianoRoll make_toy_piece(Rng& rng, int min_measures = 4, int max_measures = 16) {
    PianoRoll best(16);
    double best_consistency = -1.0;
    for (int attempt = 0; attempt < 16; ++attempt) {
        PianoRoll roll = corpus_detail::draw_piece(rng, min_measures, max_measures);
        double hc = harmonic_consistency(pianoroll_to_events(roll));
        if (hc > best_consistency) {
            best_consistency = hc;
            best = roll;
        }
        if (hc >= 0.95) break;
    }
    return best;
}

inline std::vector<PianoRoll> make_toy_corpus(int n_pieces, uint64_t seed, int min_measures = 4,
                                              int max_measures = 16) {
    if (n_pieces < 1) throw ValueError("corpus needs at least one piece");
    Rng rng(seed);
    std::vector<PianoRoll> out;
    out.reserve(n_pieces);
    for (int i = 0; i < n_pieces; ++i) {
        Rng piece_rng = rng.fork();
        out.push_back(make_toy_piece(piece_rng, min_measures, max_measures));
    }
    return out;
}

}  // namespace hiacg
