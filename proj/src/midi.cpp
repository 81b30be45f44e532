#include "xmodal/midi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

int clamp_pitch(int p) { return std::clamp(p, 0, 127); }

} // namespace

std::vector<int> MidiSegment::pitches() const {
    std::vector<int> p;
    p.reserve(events.size());
    for (const auto& e : events) p.push_back(e.pitch);
    return p;
}

int MidiSegment::valid_count() const {
    if (valid.empty()) return size();
    int n = 0;
    for (char v : valid) n += v != 0;
    return n;
}

std::vector<double> d4_rows(const std::vector<int>& pitches) {
    require(!pitches.empty(), "d4: empty pitch sequence");
    const int n = static_cast<int>(pitches.size());
    std::vector<double> rows(static_cast<std::size_t>(n) * 4, 0.0);
    for (int i = 0; i < n; ++i) {
        const double prev = i > 0 ? static_cast<double>(pitches[i] - pitches[i - 1]) : 0.0;
        const double next = i + 1 < n ? static_cast<double>(pitches[i + 1] - pitches[i]) : 0.0;
        double* r = &rows[static_cast<std::size_t>(i) * 4];
        r[0] = prev / 24.0;
        r[1] = next / 24.0;
        r[2] = std::clamp(prev / 12.0, -2.0, 2.0) / 2.0;
        r[3] = std::clamp(next / 12.0, -2.0, 2.0) / 2.0;
    }
    return rows;
}

DescriptorTensor d4_descriptor(const MidiSegment& segment) {
    DescriptorTensor out;
    out.kind = DescriptorKind::D4;
    out.frames = segment.size();
    out.dims = 4;
    out.values = d4_rows(segment.pitches());
    return out;
}

int bucket_duration(double duration_s) {
    require(duration_s > 0.0, "bucket_duration: duration must be positive");
    constexpr double kLo = 0.05, kHi = 4.0;
    constexpr int kEdges = 32; // edges 0..31, log-spaced
    if (duration_s <= kLo) return 0;
    if (duration_s >= kHi) return kEdges - 1;
    const double t = std::log(duration_s / kLo) / std::log(kHi / kLo);
    const int b = static_cast<int>(std::floor(t * (kEdges - 1)));
    return std::clamp(b, 0, kEdges - 1);
}

MidiSegment transpose(const MidiSegment& segment, int semitones) {
    require(std::abs(semitones) <= 24, "transpose: |semitones| must be <= 24");
    MidiSegment out = segment;
    for (auto& e : out.events) e.pitch = clamp_pitch(e.pitch + semitones);
    return out;
}

MidiSegment scale_velocity(const MidiSegment& segment, double factor) {
    require(factor > 0.0, "scale_velocity: factor must be positive");
    MidiSegment out = segment;
    for (auto& e : out.events)
        e.velocity = std::clamp(static_cast<int>(std::lround(e.velocity * factor)), 0, 127);
    return out;
}

AudioSegment render_audio(const MidiSegment& segment, const SynthParams& params, int sample_rate,
                          double duration_s) {
    require(params.n_harmonics >= 1, "render_audio: need at least one harmonic");
    const int n = static_cast<int>(std::llround(duration_s * sample_rate));
    AudioSegment out;
    out.sample_rate_hz = sample_rate;
    out.samples.assign(static_cast<std::size_t>(n), 0.0);
    const double nyquist_cap = 0.95 * 0.5 * sample_rate;

    for (const auto& e : segment.events) {
        require(e.onset_s < duration_s, "render_audio: onset " + std::to_string(e.onset_s) +
                                            " beyond segment duration");
        const double f0 = 440.0 * std::pow(2.0, (e.pitch - 69) / 12.0);
        const double amp = std::pow(e.velocity / 127.0, params.velocity_exp);
        const int i0 = static_cast<int>(std::llround(e.onset_s * sample_rate));
        const int i1 = std::min(
            n, static_cast<int>(std::llround((e.onset_s + e.duration_s) * sample_rate)));
        for (int h = 1; h <= params.n_harmonics; ++h) {
            const double fh = f0 * h;
            if (fh >= nyquist_cap) break;
            const double ah = amp * std::pow(static_cast<double>(h), -params.rolloff_exp);
            const double w = 2.0 * 3.14159265358979323846 * fh / sample_rate;
            for (int i = std::max(0, i0); i < i1; ++i) {
                const double t_rel = static_cast<double>(i - i0) / sample_rate;
                double env = std::exp(-t_rel / params.decay_s);
                if (t_rel < params.attack_s) env *= t_rel / params.attack_s;
                out.samples[static_cast<std::size_t>(i)] +=
                    ah * env * std::sin(w * (i - i0));
            }
        }
    }

    double peak = 0.0;
    for (double s : out.samples) peak = std::max(peak, std::fabs(s));
    if (peak > 0.0) {
        const double g = 0.9 / peak;
        for (auto& s : out.samples) s *= g;
    }
    // snap to float32 so PCM files reproduce the in-memory corpus exactly
    for (auto& s : out.samples) s = static_cast<double>(static_cast<float>(s));
    return out;
}

CorpusItem temporal_shift(const CorpusItem& item, int shift_samples) {
    const int n = static_cast<int>(item.audio.samples.size());
    require(std::abs(shift_samples) < n, "temporal_shift: shift exceeds audio length");
    CorpusItem out = item;
    std::vector<double>& s = out.audio.samples;
    s.assign(static_cast<std::size_t>(n), 0.0);
    if (shift_samples >= 0) {
        for (int i = shift_samples; i < n; ++i)
            s[static_cast<std::size_t>(i)] =
                item.audio.samples[static_cast<std::size_t>(i - shift_samples)];
    } else {
        for (int i = 0; i < n + shift_samples; ++i)
            s[static_cast<std::size_t>(i)] =
                item.audio.samples[static_cast<std::size_t>(i - shift_samples)];
    }
    return out;
}

namespace {

struct ComposerProfile {
    int register_center;  // mean pitch
    int register_spread;
    int base_velocity;
    double note_rate_hz;  // notes per second
    int motif_len;
};

ComposerProfile composer_profile(int composer_id, std::uint64_t corpus_seed) {
    Rng rng(sub_seed(corpus_seed, "composer", static_cast<std::uint64_t>(composer_id)));
    ComposerProfile p;
    p.register_center = rng.range_int(48, 68);
    // octave-spanning motifs: note identity stays visible at band resolution
    p.register_spread = rng.range_int(9, 16);
    p.base_velocity = rng.range_int(56, 96);
    p.note_rate_hz = rng.uniform(8.0, 14.0);
    p.motif_len = rng.range_int(4, 7);
    return p;
}

// Per-segment renderer variation: every segment "performance" differs in
// brightness and decay, the way recordings differ in instrument and room.
SynthParams jitter_synth(const SynthParams& base, Rng& rng) {
    SynthParams p = base;
    p.rolloff_exp = base.rolloff_exp * rng.uniform(0.5, 2.0);
    p.decay_s = base.decay_s * rng.uniform(0.5, 2.0);
    p.n_harmonics = std::max(1, base.n_harmonics + rng.range_int(-3, 3));
    p.velocity_exp = base.velocity_exp;
    return p;
}

} // namespace

Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
    require(config.n_pieces > 0 && config.segments_per_piece > 0 && config.n_composers > 0,
            "generate_corpus: config would produce zero items");
    require(config.n_composers <= config.n_pieces,
            "generate_corpus: more composers than pieces");

    Corpus corpus;
    corpus.config = config;
    const double seg_len = config.segment_seconds;
    const double hop = seg_len * config.hop_fraction;
    const int pieces_per_composer =
        (config.n_pieces + config.n_composers - 1) / config.n_composers;

    for (int piece = 0; piece < config.n_pieces; ++piece) {
        const int composer = std::min(piece / pieces_per_composer, config.n_composers - 1);
        const ComposerProfile prof = composer_profile(composer, seed);
        Rng rng(sub_seed(seed, "piece", static_cast<std::uint64_t>(piece)));

        // piece identity = a motif pitch set in the composer register; the
        // score walks over the motif with free per-note gaps, so windows of
        // the same piece share the pitch set (spectrally close negatives)
        // while differing in note order and timing
        const int base = std::clamp(prof.register_center + rng.range_int(-6, 6), 24, 100);
        std::vector<int> motif(static_cast<std::size_t>(prof.motif_len));
        for (auto& m : motif) m = base + rng.range_int(-prof.register_spread, prof.register_spread);

        const double piece_dur = (config.segments_per_piece - 1) * hop + seg_len;
        const double mean_gap = 1.0 / prof.note_rate_hz;
        std::vector<NoteEvent> score;
        double t = rng.uniform(0.0, mean_gap);
        std::size_t idx = rng.below(motif.size());
        while (t < piece_dur) {
            NoteEvent e;
            e.onset_s = t;
            e.pitch = clamp_pitch(motif[idx]);
            e.velocity = std::clamp(prof.base_velocity + rng.range_int(-12, 12), 1, 127);
            e.duration_s = std::clamp(mean_gap * rng.uniform(0.8, 2.2), 0.05, 0.45);
            score.push_back(e);
            t += mean_gap * rng.uniform(0.5, 1.7);
            // random walk over the motif
            idx = (idx + static_cast<std::size_t>(rng.range_int(1, static_cast<int>(motif.size()) - 1))) %
                  motif.size();
        }

        for (int s = 0; s < config.segments_per_piece; ++s) {
            const double w0 = s * hop;
            MidiSegment seg;
            seg.max_notes = config.max_notes;
            for (const auto& e : score) {
                if (e.onset_s < w0 || e.onset_s >= w0 + seg_len) continue;
                if (seg.size() >= config.max_notes) break;
                NoteEvent local = e;
                local.onset_s = e.onset_s - w0;
                local.duration_s = std::min(e.duration_s, seg_len - local.onset_s);
                seg.events.push_back(local);
            }
            if (seg.empty()) {
                // never emit silent items; drop in a single filler note
                NoteEvent e;
                e.onset_s = seg_len * 0.25;
                e.pitch = base;
                e.velocity = prof.base_velocity;
                e.duration_s = seg_len * 0.5;
                seg.events.push_back(e);
            }
            CorpusItem item;
            item.piece_id = piece;
            item.composer_id = composer;
            item.segment_index = s;
            item.midi = seg;
            Rng synth_rng(sub_seed(seed, "synth", static_cast<std::uint64_t>(piece) * 10007 +
                                                      static_cast<std::uint64_t>(s)));
            item.audio = render_audio(seg, jitter_synth(config.synth, synth_rng),
                                      config.sample_rate, seg_len);
            corpus.items.push_back(std::move(item));
        }
    }
    require(!corpus.items.empty(), "generate_corpus: produced zero items");
    return corpus;
}

// ---- corpus persistence -----------------------------------------------------

namespace {

using nlohmann::json;

void write_f32_block(std::ofstream& os, const std::vector<double>& samples) {
    for (double d : samples) {
        const float f = static_cast<float>(d);
        os.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
}

} // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string pcm_path = dir + "/audio.f32";
    std::ofstream pcm(pcm_path, std::ios::binary);
    if (!pcm) throw std::runtime_error("save_corpus: cannot open " + pcm_path);
    std::ofstream manifest(dir + "/manifest.jsonl");
    if (!manifest) throw std::runtime_error("save_corpus: cannot open manifest");

    std::uint64_t offset = 0;
    for (const auto& item : corpus.items) {
        json events = json::array();
        for (const auto& e : item.midi.events)
            events.push_back({e.pitch, e.velocity, e.duration_s, e.onset_s});
        json line = {{"piece_id", item.piece_id},
                     {"composer_id", item.composer_id},
                     {"segment_index", item.segment_index},
                     {"audio_offset", offset},
                     {"audio_len", item.audio.samples.size()},
                     {"midi", events}};
        manifest << line.dump() << "\n";
        write_f32_block(pcm, item.audio.samples);
        offset += item.audio.samples.size();
    }

    json cfg = {{"sample_rate", corpus.config.sample_rate},
                {"length", offset},
                {"segment_seconds", corpus.config.segment_seconds},
                {"n_pieces", corpus.config.n_pieces},
                {"n_composers", corpus.config.n_composers},
                {"segments_per_piece", corpus.config.segments_per_piece},
                {"max_notes", corpus.config.max_notes},
                {"hop_fraction", corpus.config.hop_fraction},
                {"nfft", corpus.config.spectral.nfft},
                {"hop", corpus.config.spectral.hop},
                {"synth",
                 {{"n_harmonics", corpus.config.synth.n_harmonics},
                  {"rolloff_exp", corpus.config.synth.rolloff_exp},
                  {"decay_s", corpus.config.synth.decay_s},
                  {"velocity_exp", corpus.config.synth.velocity_exp},
                  {"attack_s", corpus.config.synth.attack_s}}}};
    std::ofstream sidecar(dir + "/audio.f32.json");
    sidecar << cfg.dump(2) << "\n";
}

Corpus load_corpus(const std::string& dir) {
    std::ifstream sidecar(dir + "/audio.f32.json");
    if (!sidecar) throw std::runtime_error("load_corpus: missing sidecar in " + dir);
    json cfg = json::parse(sidecar);

    Corpus corpus;
    corpus.config.sample_rate = cfg.at("sample_rate").get<int>();
    corpus.config.segment_seconds = cfg.at("segment_seconds").get<double>();
    corpus.config.n_pieces = cfg.at("n_pieces").get<int>();
    corpus.config.n_composers = cfg.at("n_composers").get<int>();
    corpus.config.segments_per_piece = cfg.at("segments_per_piece").get<int>();
    corpus.config.max_notes = cfg.at("max_notes").get<int>();
    corpus.config.hop_fraction = cfg.at("hop_fraction").get<double>();
    corpus.config.spectral.nfft = cfg.at("nfft").get<int>();
    corpus.config.spectral.hop = cfg.at("hop").get<int>();
    const json& sy = cfg.at("synth");
    corpus.config.synth.n_harmonics = sy.at("n_harmonics").get<int>();
    corpus.config.synth.rolloff_exp = sy.at("rolloff_exp").get<double>();
    corpus.config.synth.decay_s = sy.at("decay_s").get<double>();
    corpus.config.synth.velocity_exp = sy.at("velocity_exp").get<double>();
    corpus.config.synth.attack_s = sy.at("attack_s").get<double>();

    std::ifstream pcm(dir + "/audio.f32", std::ios::binary);
    if (!pcm) throw std::runtime_error("load_corpus: missing audio.f32 in " + dir);
    std::ifstream manifest(dir + "/manifest.jsonl");
    if (!manifest) throw std::runtime_error("load_corpus: missing manifest.jsonl in " + dir);

    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        CorpusItem item;
        item.piece_id = j.at("piece_id").get<int>();
        item.composer_id = j.at("composer_id").get<int>();
        item.segment_index = j.at("segment_index").get<int>();
        item.midi.max_notes = corpus.config.max_notes;
        for (const auto& e : j.at("midi")) {
            NoteEvent n;
            n.pitch = e.at(0).get<int>();
            n.velocity = e.at(1).get<int>();
            n.duration_s = e.at(2).get<double>();
            n.onset_s = e.at(3).get<double>();
            item.midi.events.push_back(n);
        }
        const std::uint64_t off = j.at("audio_offset").get<std::uint64_t>();
        const std::uint64_t len = j.at("audio_len").get<std::uint64_t>();
        item.audio.sample_rate_hz = corpus.config.sample_rate;
        item.audio.samples.resize(len);
        pcm.seekg(static_cast<std::streamoff>(off * sizeof(float)));
        for (std::uint64_t i = 0; i < len; ++i) {
            float f;
            pcm.read(reinterpret_cast<char*>(&f), sizeof(float));
            item.audio.samples[i] = static_cast<double>(f);
        }
        if (!pcm) throw std::runtime_error("load_corpus: truncated audio blob");
        corpus.items.push_back(std::move(item));
    }
    return corpus;
}

} // namespace xmodal
