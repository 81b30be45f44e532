#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "xmodal/midi.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

MidiSegment seg_from_pitches(const std::vector<int>& pitches) {
    MidiSegment s;
    double t = 0.0;
    for (int p : pitches) {
        NoteEvent e;
        e.pitch = p;
        e.onset_s = t;
        e.duration_s = 0.1;
        t += 0.05;
        s.events.push_back(e);
    }
    return s;
}

} // namespace

TEST_CASE("d4: canonical middle-row example") {
    auto rows = d4_rows({60, 64, 67});
    // middle note: prev interval 4, next interval 3
    CHECK(rows[4] == doctest::Approx(4.0 / 24.0));
    CHECK(rows[5] == doctest::Approx(3.0 / 24.0));
    CHECK(rows[6] == doctest::Approx((4.0 / 12.0) / 2.0));
    CHECK(rows[7] == doctest::Approx((3.0 / 12.0) / 2.0));
}

TEST_CASE("d4: single note row is all zeros (zero-padded neighbors)") {
    auto rows = d4_rows({72});
    for (double v : rows) CHECK(v == 0.0);
}

TEST_CASE("d4: clamp branch engages beyond two octaves") {
    auto rows = d4_rows({40, 70}); // +30 semitones
    CHECK(rows[1] == doctest::Approx(30.0 / 24.0)); // raw feature unclamped
    CHECK(rows[3] == doctest::Approx(1.0));         // clamp(30/12, -2, 2)/2 = 1
}

TEST_CASE("d4 matches the direct oracle on random sequences") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> pitches(static_cast<std::size_t>(rng.range_int(1, 20)));
        for (auto& p : pitches) p = rng.range_int(0, 127);
        auto got = d4_rows(pitches);
        auto ref = oracle::d4(pitches);
        REQUIRE(got.size() == ref.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("d4 is exactly invariant under clamp-free transposition") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> pitches(static_cast<std::size_t>(rng.range_int(2, 16)));
        for (auto& p : pitches) p = rng.range_int(30, 90); // clamp-free margin
        MidiSegment s = seg_from_pitches(pitches);
        for (int k = -6; k <= 6; ++k) {
            auto t = transpose(s, k);
            CHECK(d4_descriptor(t).values == d4_descriptor(s).values);
        }
    }
}

TEST_CASE("bucket_duration: edges, midpoint tie and monotonicity") {
    CHECK(bucket_duration(0.05) == 0);
    CHECK(bucket_duration(4.0) == 31);
    CHECK(bucket_duration(0.01) == 0);   // below range clamps down
    CHECK(bucket_duration(10.0) == 31);  // above range clamps up
    CHECK(bucket_duration(std::sqrt(0.05 * 4.0)) == 15); // midpoint, tie broken downward

    int prev = 0;
    for (double d = 0.02; d < 5.0; d *= 1.03) {
        const int b = bucket_duration(d);
        CHECK(b >= prev);
        prev = b;
    }
    CHECK_THROWS_AS(bucket_duration(0.0), std::invalid_argument);
}

TEST_CASE("transpose: identity, shift, clamping") {
    auto s = seg_from_pitches({60, 64, 67});
    CHECK(transpose(s, 0).pitches() == s.pitches());
    CHECK(transpose(s, 3).pitches() == std::vector<int>{63, 67, 70});
    auto hi = seg_from_pitches({126});
    CHECK(transpose(hi, 6).pitches() == std::vector<int>{127});
    CHECK_THROWS_AS(transpose(s, 25), std::invalid_argument);
    // velocities and onsets untouched
    auto t = transpose(s, 3);
    for (int i = 0; i < s.size(); ++i) {
        CHECK(t.events[static_cast<std::size_t>(i)].velocity ==
              s.events[static_cast<std::size_t>(i)].velocity);
        CHECK(t.events[static_cast<std::size_t>(i)].onset_s ==
              s.events[static_cast<std::size_t>(i)].onset_s);
    }
}

TEST_CASE("scale_velocity: identity, saturation, arithmetic") {
    auto s = seg_from_pitches({60});
    s.events[0].velocity = 100;
    CHECK(scale_velocity(s, 1.0).events[0].velocity == 100);
    CHECK(scale_velocity(s, 1.5).events[0].velocity == 127);
    s.events[0].velocity = 64;
    CHECK(scale_velocity(s, 0.5).events[0].velocity == 32);
    CHECK_THROWS_AS(scale_velocity(s, 0.0), std::invalid_argument);
}

TEST_CASE("temporal_shift: identity, roundtrip up to zero borders") {
    CorpusItem item;
    item.audio.sample_rate_hz = 4000;
    item.audio.samples = {1, 2, 3, 4, 5, 6, 7, 8};
    CHECK(temporal_shift(item, 0).audio.samples == item.audio.samples);

    auto fwd = temporal_shift(item, 3);
    CHECK(fwd.audio.samples[0] == 0.0);
    CHECK(fwd.audio.samples[3] == 1.0);
    auto back = temporal_shift(fwd, -3);
    for (int i = 0; i < 8 - 3; ++i)
        CHECK(back.audio.samples[static_cast<std::size_t>(i)] ==
              item.audio.samples[static_cast<std::size_t>(i)]);
    CHECK_THROWS_AS(temporal_shift(item, 8), std::invalid_argument);
    // MIDI side untouched
    CHECK(fwd.midi.size() == item.midi.size());
}

TEST_CASE("render_audio: empty segment is silence") {
    MidiSegment s;
    auto a = render_audio(s, SynthParams{}, 4000, 0.5);
    CHECK(a.samples.size() == 2000);
    for (double v : a.samples) CHECK(v == 0.0);
}

TEST_CASE("render_audio: pitch 69 puts the dominant spectral peak at 440 Hz") {
    MidiSegment s;
    NoteEvent e;
    e.pitch = 69;
    e.velocity = 100;
    e.onset_s = 0.0;
    e.duration_s = 0.5;
    s.events.push_back(e);
    auto a = render_audio(s, SynthParams{}, 4000, 0.5);
    auto spec = stft_magnitude(a, 256, 64);
    const double df = 4000.0 / 256.0;
    int arg = 0;
    for (int k = 1; k < spec.bins; ++k)
        if (spec.at(10, k) > spec.at(10, arg)) arg = k;
    CHECK(std::fabs(arg * df - 440.0) <= df);
}

TEST_CASE("render_audio: louder note has the larger fundamental magnitude") {
    auto make = [](int velocity, int pitch) {
        MidiSegment s;
        NoteEvent e;
        e.pitch = pitch;
        e.velocity = velocity;
        e.onset_s = 0.0;
        e.duration_s = 0.5;
        s.events.push_back(e);
        return s;
    };
    MidiSegment both = make(64, 60);
    NoteEvent loud;
    loud.pitch = 72;
    loud.velocity = 127;
    loud.onset_s = 0.0;
    loud.duration_s = 0.5;
    both.events.push_back(loud);
    auto a = render_audio(both, SynthParams{}, 4000, 0.5);
    auto spec = stft_magnitude(a, 256, 64);
    const double df = 4000.0 / 256.0;
    const int bin60 = static_cast<int>(std::round(261.63 / df));
    const int bin72 = static_cast<int>(std::round(523.25 / df));
    CHECK(spec.at(8, bin72) > spec.at(8, bin60));
}

TEST_CASE("render_audio is deterministic and linear in per-note amplitude pre-normalization") {
    MidiSegment s = seg_from_pitches({60, 64});
    s.events[0].velocity = 80;
    s.events[1].velocity = 90;
    auto a = render_audio(s, SynthParams{}, 4000, 0.5);
    auto b = render_audio(s, SynthParams{}, 4000, 0.5);
    CHECK(a.samples == b.samples);

    // peak normalization makes a single-note render invariant to velocity
    // scale (amplitude enters linearly and is normalized away)
    MidiSegment quiet, loud2;
    quiet.events.push_back(s.events[0]);
    loud2.events.push_back(s.events[0]);
    loud2.events[0].velocity = 127;
    SynthParams p;
    auto rq = render_audio(quiet, p, 4000, 0.5);
    auto rl = render_audio(loud2, p, 4000, 0.5);
    for (std::size_t i = 0; i < rq.samples.size(); ++i)
        CHECK(rq.samples[i] == doctest::Approx(rl.samples[i]).epsilon(1e-6));

    // additivity: the joint render is a positive linear combination of the
    // single-note renders (each normalized by its own peak)
    MidiSegment s0, s1;
    s0.events.push_back(s.events[0]);
    s1.events.push_back(s.events[1]);
    auto r01 = render_audio(s, p, 4000, 0.5);
    auto r0 = render_audio(s0, p, 4000, 0.5);
    auto r1 = render_audio(s1, p, 4000, 0.5);
    double a00 = 0, a01 = 0, a11 = 0, b0 = 0, b1 = 0;
    for (std::size_t i = 0; i < r01.samples.size(); ++i) {
        a00 += r0.samples[i] * r0.samples[i];
        a01 += r0.samples[i] * r1.samples[i];
        a11 += r1.samples[i] * r1.samples[i];
        b0 += r0.samples[i] * r01.samples[i];
        b1 += r1.samples[i] * r01.samples[i];
    }
    const double det = a00 * a11 - a01 * a01;
    const double alpha = (b0 * a11 - b1 * a01) / det;
    const double beta = (a00 * b1 - a01 * b0) / det;
    CHECK(alpha > 0.0);
    CHECK(beta > 0.0);
    double err = 0, ref = 0;
    for (std::size_t i = 0; i < r01.samples.size(); ++i) {
        const double mix = alpha * r0.samples[i] + beta * r1.samples[i];
        err += (mix - r01.samples[i]) * (mix - r01.samples[i]);
        ref += r01.samples[i] * r01.samples[i];
    }
    CHECK(err / ref < 1e-9);
}

TEST_CASE("generate_corpus: determinism and item count") {
    CorpusConfig cfg;
    cfg.n_pieces = 8;
    cfg.n_composers = 4;
    cfg.segments_per_piece = 10;
    auto c1 = generate_corpus(cfg, 42);
    auto c2 = generate_corpus(cfg, 42);
    CHECK(c1.items.size() == 80);
    REQUIRE(c1.items.size() == c2.items.size());
    for (std::size_t i = 0; i < c1.items.size(); ++i) {
        CHECK(c1.items[i].audio.samples == c2.items[i].audio.samples);
        CHECK(c1.items[i].midi.size() == c2.items[i].midi.size());
        CHECK(c1.items[i].piece_id == c2.items[i].piece_id);
    }
    auto c3 = generate_corpus(cfg, 43);
    bool differs = false;
    for (std::size_t i = 0; i < c1.items.size() && !differs; ++i)
        differs = c1.items[i].audio.samples != c3.items[i].audio.samples;
    CHECK(differs);

    CorpusConfig bad;
    bad.n_pieces = 0;
    CHECK_THROWS_AS(generate_corpus(bad, 1), std::invalid_argument);
}

TEST_CASE("generate_corpus: within-piece spectral correlation beats cross-piece") {
    CorpusConfig cfg;
    cfg.n_pieces = 6;
    cfg.n_composers = 3;
    cfg.segments_per_piece = 6;
    auto corpus = generate_corpus(cfg, 7);

    // mean magnitude spectrum per item
    auto mean_spec = [&](const CorpusItem& item) {
        auto s = stft_magnitude(item.audio, cfg.spectral.nfft, cfg.spectral.hop);
        std::vector<double> m(static_cast<std::size_t>(s.bins), 0.0);
        for (int t = 0; t < s.frames; ++t)
            for (int k = 0; k < s.bins; ++k) m[static_cast<std::size_t>(k)] += s.at(t, k);
        return m;
    };
    auto corr = [](const std::vector<double>& a, const std::vector<double>& b) {
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            ma += a[i];
            mb += b[i];
        }
        ma /= a.size();
        mb /= b.size();
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
        return sab / std::sqrt(saa * sbb + 1e-12);
    };

    std::vector<std::vector<double>> specs;
    for (const auto& item : corpus.items) specs.push_back(mean_spec(item));
    double within = 0, cross = 0;
    int nw = 0, nc = 0;
    for (std::size_t i = 0; i < corpus.items.size(); ++i)
        for (std::size_t j = i + 1; j < corpus.items.size(); ++j) {
            const double c = corr(specs[i], specs[j]);
            if (corpus.items[i].piece_id == corpus.items[j].piece_id) {
                within += c;
                nw++;
            } else {
                cross += c;
                nc++;
            }
        }
    within /= nw;
    cross /= nc;
    CHECK(within > cross);
}

TEST_CASE("corpus round-trips through the manifest + PCM blob exactly") {
    CorpusConfig cfg;
    cfg.n_pieces = 4;
    cfg.n_composers = 2;
    cfg.segments_per_piece = 3;
    auto corpus = generate_corpus(cfg, 11);
    const std::string dir = "test_corpus_tmp";
    save_corpus(corpus, dir);
    auto loaded = load_corpus(dir);
    REQUIRE(loaded.items.size() == corpus.items.size());
    for (std::size_t i = 0; i < corpus.items.size(); ++i) {
        CHECK(loaded.items[i].audio.samples == corpus.items[i].audio.samples);
        CHECK(loaded.items[i].piece_id == corpus.items[i].piece_id);
        CHECK(loaded.items[i].composer_id == corpus.items[i].composer_id);
        REQUIRE(loaded.items[i].midi.size() == corpus.items[i].midi.size());
        for (int e = 0; e < corpus.items[i].midi.size(); ++e) {
            CHECK(loaded.items[i].midi.events[static_cast<std::size_t>(e)].pitch ==
                  corpus.items[i].midi.events[static_cast<std::size_t>(e)].pitch);
            CHECK(loaded.items[i].midi.events[static_cast<std::size_t>(e)].onset_s ==
                  corpus.items[i].midi.events[static_cast<std::size_t>(e)].onset_s);
        }
    }
}
