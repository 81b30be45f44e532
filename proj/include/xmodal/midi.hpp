#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmodal/audio.hpp"

namespace xmodal {

struct NoteEvent {
    int pitch = 60;        // 0..127
    int velocity = 64;     // 0..127
    double duration_s = 0.25;
    double onset_s = 0.0;
};

struct MidiSegment {
    std::vector<NoteEvent> events; // onset-ordered
    int max_notes = 2048;
    std::vector<char> valid;       // per-event validity; empty means all valid

    bool empty() const { return events.empty(); }
    int size() const { return static_cast<int>(events.size()); }
    bool is_valid(int i) const { return valid.empty() || valid[static_cast<std::size_t>(i)] != 0; }
    int valid_count() const;
    std::vector<int> pitches() const;
};

/// Eq.-style local interval features, one row per note:
/// [prev/24, next/24, clamp(prev/12, -2, 2)/2, clamp(next/12, -2, 2)/2]
/// with zero-padded neighbors at the boundaries.
std::vector<double> d4_rows(const std::vector<int>& pitches);
DescriptorTensor d4_descriptor(const MidiSegment& segment);

/// 32 log-spaced duration buckets over [0.05 s, 4 s], clamped at the ends.
int bucket_duration(double duration_s);

MidiSegment transpose(const MidiSegment& segment, int semitones);
MidiSegment scale_velocity(const MidiSegment& segment, double factor);

struct SynthParams {
    int n_harmonics = 8;
    double rolloff_exp = 1.0;   // harmonic h scaled by h^-rolloff
    double decay_s = 0.35;      // amplitude envelope time constant
    double velocity_exp = 1.2;  // amplitude = (v/127)^velocity_exp
    double attack_s = 0.002;
};

/// Additive synthesis of the segment: per-note harmonic stacks with an
/// exponential decay envelope, peak-normalized to 0.9. Harmonics above
/// 0.95 * Nyquist are dropped. Samples are rounded to float32 values so
/// the raw-PCM corpus files round-trip exactly.
AudioSegment render_audio(const MidiSegment& segment, const SynthParams& params, int sample_rate,
                          double duration_s);

struct CorpusItem {
    int piece_id = 0;
    int composer_id = 0;
    int segment_index = 0;
    AudioSegment audio;
    MidiSegment midi;
};

/// Shift audio relative to MIDI by the given sample count (positive delays
/// the audio), zero-filling the exposed edge.
CorpusItem temporal_shift(const CorpusItem& item, int shift_samples);

struct CorpusConfig {
    int n_pieces = 12;
    int n_composers = 4;       // pieces are assigned to composers in contiguous blocks
    int segments_per_piece = 12;
    double segment_seconds = 0.5;
    int sample_rate = 4000;
    int max_notes = 64;
    double hop_fraction = 1.0; // segment window hop as a fraction of segment length
    SpectralConfig spectral{256, 64};
    SynthParams synth{};
};

struct Corpus {
    CorpusConfig config;
    std::vector<CorpusItem> items;
};

/// Deterministic synthetic matched-pair corpus. Each piece carries a motif
/// and rhythm profile drawn from its composer, so same-piece segments are
/// spectrally closer than cross-piece ones.
Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed);

/// Corpus on-disk form: manifest.jsonl (one item per line) plus a raw
/// float32 little-endian PCM blob with a JSON sidecar.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

} // namespace xmodal
