#include "xmodal/audio.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

} // namespace

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const std::size_t n = re.size();
    if (n <= 1) return;
    // bit reversal
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

Spectrogram stft_magnitude(const AudioSegment& audio, int nfft, int hop) {
    const int len = static_cast<int>(audio.samples.size());
    require(len > 0, "stft: empty audio");
    require(is_pow2(nfft), "stft: nfft must be a power of two, got " + std::to_string(nfft));
    require(hop > 0, "stft: hop must be positive");
    const int pad = nfft / 2;
    require(pad < len, "stft: nfft " + std::to_string(nfft) +
                           " too large for input of length " + std::to_string(len) +
                           " (reflect padding needs nfft/2 < length)");

    // reflect padding without edge duplication
    std::vector<double> padded(static_cast<std::size_t>(len) + 2 * pad);
    for (int i = 0; i < pad; ++i) padded[i] = audio.samples[static_cast<std::size_t>(pad - i)];
    std::copy(audio.samples.begin(), audio.samples.end(), padded.begin() + pad);
    for (int i = 0; i < pad; ++i)
        padded[static_cast<std::size_t>(pad + len + i)] =
            audio.samples[static_cast<std::size_t>(len - 2 - i)];

    std::vector<double> window(nfft);
    for (int i = 0; i < nfft; ++i) window[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / nfft));

    Spectrogram spec;
    spec.nfft = nfft;
    spec.hop = hop;
    spec.frames = len / hop + 1;
    spec.bins = nfft / 2 + 1;
    spec.mags.assign(static_cast<std::size_t>(spec.frames) * spec.bins, 0.0);

    std::vector<double> re(nfft), im(nfft);
    for (int t = 0; t < spec.frames; ++t) {
        const int start = t * hop;
        for (int i = 0; i < nfft; ++i) {
            re[i] = padded[static_cast<std::size_t>(start + i)] * window[i];
            im[i] = 0.0;
        }
        fft_radix2(re, im);
        for (int k = 0; k < spec.bins; ++k)
            spec.mags[static_cast<std::size_t>(t) * spec.bins + k] =
                std::sqrt(re[k] * re[k] + im[k] * im[k]);
    }
    return spec;
}

std::string descriptor_kind_name(DescriptorKind k) {
    switch (k) {
        case DescriptorKind::A4: return "A4";
        case DescriptorKind::A7: return "A7";
        case DescriptorKind::A8: return "A8";
        case DescriptorKind::A9: return "A9";
        case DescriptorKind::D4: return "D4";
    }
    return "?";
}

DescriptorKind descriptor_kind_from(const std::string& s) {
    if (s == "A4" || s == "a4") return DescriptorKind::A4;
    if (s == "A7" || s == "a7") return DescriptorKind::A7;
    if (s == "A8" || s == "a8") return DescriptorKind::A8;
    if (s == "A9" || s == "a9") return DescriptorKind::A9;
    if (s == "D4" || s == "d4") return DescriptorKind::D4;
    throw std::invalid_argument("unknown descriptor kind: " + s);
}

int descriptor_dims(DescriptorKind k) {
    switch (k) {
        case DescriptorKind::A4: return 8;
        case DescriptorKind::D4: return 4;
        default: return 12;
    }
}

BandTable make_band_table(int sample_rate_hz, int nfft) {
    static const double kLimits[9] = {47, 94, 188, 375, 750, 1500, 3000, 6000, 12000};
    const int bins = nfft / 2 + 1;
    const double df = static_cast<double>(sample_rate_hz) / nfft;
    BandTable t;
    for (int b = 0; b < 8; ++b) {
        BandEdges e;
        e.lo_hz = kLimits[b];
        e.hi_hz = kLimits[b + 1];
        e.bin_lo = std::min(static_cast<int>(std::floor(e.lo_hz / df)), bins);
        e.bin_hi = std::min(static_cast<int>(std::floor(e.hi_hz / df)), bins);
        if (b == 7) e.bin_hi = bins; // top band runs to Nyquist inclusive
        t.bands[b] = e;
    }
    return t;
}

BandEdges band_edges(int band_index, int sample_rate_hz, int nfft) {
    require(band_index >= 0 && band_index <= 7,
            "band_edges: index " + std::to_string(band_index) + " out of range 0..7");
    return make_band_table(sample_rate_hz, nfft).bands[static_cast<std::size_t>(band_index)];
}

DescriptorTensor a4_descriptor(const AudioSegment& audio, const SpectralConfig& cfg) {
    const Spectrogram spec = stft_magnitude(audio, cfg.nfft, cfg.hop);
    const BandTable table = make_band_table(audio.sample_rate_hz, cfg.nfft);
    const int t_frames = spec.frames;
    constexpr int kBands = 8;
    constexpr double kEps = 1e-5;

    // per-band mean of log1p magnitude
    std::vector<double> band_mean(static_cast<std::size_t>(t_frames) * kBands, 0.0);
    for (int b = 0; b < kBands; ++b) {
        const auto& e = table.bands[b];
        const int width = e.bin_hi - e.bin_lo;
        if (width <= 0) continue; // band above Nyquist at this sample rate
        for (int t = 0; t < t_frames; ++t) {
            double acc = 0.0;
            for (int k = e.bin_lo; k < e.bin_hi; ++k) acc += std::log1p(spec.at(t, k));
            band_mean[static_cast<std::size_t>(t) * kBands + b] = acc / width;
        }
    }

    // temporal delta, trailing frame zero-padded to keep the frame count
    std::vector<double> delta(static_cast<std::size_t>(t_frames) * kBands, 0.0);
    for (int t = 0; t + 1 < t_frames; ++t)
        for (int b = 0; b < kBands; ++b)
            delta[static_cast<std::size_t>(t) * kBands + b] =
                band_mean[static_cast<std::size_t>(t + 1) * kBands + b] -
                band_mean[static_cast<std::size_t>(t) * kBands + b];

    DescriptorTensor out;
    out.kind = DescriptorKind::A4;
    out.frames = t_frames;
    out.dims = kBands;
    out.values.assign(delta.size(), 0.0);
    for (int b = 0; b < kBands; ++b) {
        double mu = 0.0;
        for (int t = 0; t < t_frames; ++t) mu += delta[static_cast<std::size_t>(t) * kBands + b];
        mu /= t_frames;
        double var = 0.0;
        for (int t = 0; t < t_frames; ++t) {
            const double v = delta[static_cast<std::size_t>(t) * kBands + b] - mu;
            var += v * v;
        }
        const double sigma = std::sqrt(var / t_frames);
        if (sigma == 0.0) {
            // constant band (silence or empty bin range): emit zeros
            out.degenerate_dims.push_back(b);
            continue;
        }
        if (sigma < 1e-8) out.degenerate_dims.push_back(b);
        for (int t = 0; t < t_frames; ++t)
            out.at(t, b) = (delta[static_cast<std::size_t>(t) * kBands + b] - mu) / (sigma + kEps);
    }
    return out;
}

const std::array<Attractor, 12>& attractor_table() {
    static const std::array<Attractor, 12> table = [] {
        std::array<Attractor, 12> t{{{1, 1, 0, 0},
                                     {16, 15, 0, 0},
                                     {9, 8, 0, 0},
                                     {6, 5, 0, 0},
                                     {5, 4, 0, 0},
                                     {4, 3, 0, 0},
                                     {7, 5, 0, 0},
                                     {3, 2, 0, 0},
                                     {8, 5, 0, 0},
                                     {5, 3, 0, 0},
                                     {7, 4, 0, 0},
                                     {15, 8, 0, 0}}};
        for (auto& a : t) {
            double v = std::log2(static_cast<double>(a.num) / a.den);
            v -= std::floor(v); // fold into [0, 1)
            a.log2_value = v;
            a.cents = 1200.0 * v;
        }
        return t;
    }();
    return table;
}

namespace {

// Local spectral maxima above min_hz, strongest first, at most k of them.
// A relative floor (5% of the frame's strongest eligible bin) keeps window
// sidelobes from counting as peaks. Returns bin indices.
std::vector<int> top_peaks(const Spectrogram& spec, int frame, int k, double min_hz,
                           int sample_rate_hz) {
    const double df = static_cast<double>(sample_rate_hz) / spec.nfft;
    double frame_max = 0.0;
    for (int b = 1; b + 1 < spec.bins; ++b)
        if (b * df > min_hz) frame_max = std::max(frame_max, spec.at(frame, b));
    const double floor_mag = 0.05 * frame_max;
    std::vector<std::pair<double, int>> peaks;
    for (int b = 1; b + 1 < spec.bins; ++b) {
        if (b * df <= min_hz) continue;
        const double m = spec.at(frame, b);
        if (m > spec.at(frame, b - 1) && m > spec.at(frame, b + 1) && m > 0.0 && m >= floor_mag)
            peaks.push_back({m, b});
    }
    std::sort(peaks.begin(), peaks.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (static_cast<int>(peaks.size()) > k) peaks.resize(static_cast<std::size_t>(k));
    std::vector<int> bins;
    bins.reserve(peaks.size());
    for (const auto& p : peaks) bins.push_back(p.second);
    return bins;
}

// Raw (unnormalized) attractor activations per frame; rows with fewer than
// two peaks are left all-zero and reported through `degenerate`.
std::vector<double> a7_raw(const AudioSegment& audio, const SpectralConfig& cfg, int& frames_out,
                           std::vector<char>* degenerate) {
    const Spectrogram spec = stft_magnitude(audio, cfg.nfft, cfg.hop);
    const auto& attractors = attractor_table();
    constexpr int kTopPeaks = 8;
    constexpr double kMinHz = 50.0;
    constexpr double kSigma = 0.02;
    frames_out = spec.frames;
    std::vector<double> raw(static_cast<std::size_t>(spec.frames) * 12, 0.0);
    if (degenerate) degenerate->assign(static_cast<std::size_t>(spec.frames), 0);
    for (int t = 0; t < spec.frames; ++t) {
        const auto bins = top_peaks(spec, t, kTopPeaks, kMinHz, audio.sample_rate_hz);
        if (bins.size() < 2) {
            if (degenerate) (*degenerate)[static_cast<std::size_t>(t)] = 1;
            continue;
        }
        for (std::size_t i = 0; i < bins.size(); ++i) {
            for (std::size_t j = i + 1; j < bins.size(); ++j) {
                const int lo_bin = std::min(bins[i], bins[j]);
                const int hi_bin = std::max(bins[i], bins[j]);
                double r = std::log2(static_cast<double>(hi_bin) / lo_bin);
                r -= std::floor(r);
                const double w_mag = std::sqrt(spec.at(t, bins[i]) * spec.at(t, bins[j]));
                for (int c = 0; c < 12; ++c) {
                    const double d = r - attractors[static_cast<std::size_t>(c)].log2_value;
                    raw[static_cast<std::size_t>(t) * 12 + c] +=
                        w_mag * std::exp(-d * d / (2.0 * kSigma * kSigma));
                }
            }
        }
    }
    return raw;
}

} // namespace

DescriptorTensor a7_descriptor(const AudioSegment& audio, const SpectralConfig& cfg) {
    int frames = 0;
    std::vector<char> degenerate;
    auto raw = a7_raw(audio, cfg, frames, &degenerate);
    DescriptorTensor out;
    out.kind = DescriptorKind::A7;
    out.frames = frames;
    out.dims = 12;
    out.values.assign(raw.size(), 0.0);
    constexpr double kEps = 1e-8;
    for (int t = 0; t < frames; ++t) {
        if (degenerate[static_cast<std::size_t>(t)]) {
            for (int c = 0; c < 12; ++c) out.at(t, c) = 1.0 / 12.0;
            continue;
        }
        double sum = 0.0;
        for (int c = 0; c < 12; ++c) sum += raw[static_cast<std::size_t>(t) * 12 + c];
        for (int c = 0; c < 12; ++c)
            out.at(t, c) = raw[static_cast<std::size_t>(t) * 12 + c] / (sum + kEps);
    }
    return out;
}

namespace {

// pc(k) = floor(12 log2(f_k / f_ref)) mod 12 with f_ref = 32.7 Hz (C1).
int pitch_class_of_bin(int bin, int sample_rate_hz, int nfft) {
    const double f = static_cast<double>(bin) * sample_rate_hz / nfft;
    if (f <= 0.0) return -1;
    const double v = std::floor(12.0 * std::log2(f / 32.7));
    int pc = static_cast<int>(std::fmod(v, 12.0));
    if (pc < 0) pc += 12;
    return pc;
}

// frames x 12 pitch-class energies plus per-frame spectral flux
void chroma_energy_and_flux(const AudioSegment& audio, const SpectralConfig& cfg,
                            std::vector<double>& energy, std::vector<double>& flux,
                            int& frames_out) {
    const Spectrogram spec = stft_magnitude(audio, cfg.nfft, cfg.hop);
    frames_out = spec.frames;
    energy.assign(static_cast<std::size_t>(spec.frames) * 12, 0.0);
    flux.assign(static_cast<std::size_t>(spec.frames), 0.0);
    std::vector<int> pc(static_cast<std::size_t>(spec.bins));
    for (int k = 0; k < spec.bins; ++k)
        pc[static_cast<std::size_t>(k)] = pitch_class_of_bin(k, audio.sample_rate_hz, cfg.nfft);
    for (int t = 0; t < spec.frames; ++t) {
        for (int k = 0; k < spec.bins; ++k) {
            const double m = spec.at(t, k);
            const double prev = t > 0 ? spec.at(t - 1, k) : 0.0;
            flux[static_cast<std::size_t>(t)] += std::max(0.0, m - prev);
            const int c = pc[static_cast<std::size_t>(k)];
            if (c < 0) continue;
            energy[static_cast<std::size_t>(t) * 12 + c] += m * m;
        }
    }
}

} // namespace

DescriptorTensor a8_descriptor(const AudioSegment& audio, const SpectralConfig& cfg) {
    std::vector<double> energy, flux;
    int frames = 0;
    chroma_energy_and_flux(audio, cfg, energy, flux, frames);
    const double max_flux = *std::max_element(flux.begin(), flux.end());

    DescriptorTensor out;
    out.kind = DescriptorKind::A8;
    out.frames = frames;
    out.dims = 12;
    out.values.assign(energy.size(), 0.0);
    if (max_flux <= 0.0) return out; // zero-flux signal: all-zero rows, by contract

    // The chroma row is normalized to a distribution before gating so the
    // flux gate survives the final normalization; otherwise renormalizing
    // would undo it and steady frames would not sit near zero.
    constexpr double kEps = 1e-2;
    for (int t = 0; t < frames; ++t) {
        double esum = 0.0;
        for (int c = 0; c < 12; ++c) esum += energy[static_cast<std::size_t>(t) * 12 + c];
        if (esum <= 0.0) continue;
        const double gate = flux[static_cast<std::size_t>(t)] / max_flux;
        for (int c = 0; c < 12; ++c)
            out.at(t, c) = (energy[static_cast<std::size_t>(t) * 12 + c] / esum) * gate;
        double gsum = 0.0;
        for (int c = 0; c < 12; ++c) gsum += out.at(t, c);
        for (int c = 0; c < 12; ++c) out.at(t, c) /= (gsum + kEps);
    }
    return out;
}

DescriptorTensor a9_descriptor(const AudioSegment& audio, const SpectralConfig& cfg) {
    int frames = 0;
    std::vector<char> degenerate;
    auto raw = a7_raw(audio, cfg, frames, &degenerate);

    // document frequency over raw activations, then clamped idf
    constexpr double kTau = 0.05;
    double idf[12];
    for (int c = 0; c < 12; ++c) {
        int active = 0;
        for (int t = 0; t < frames; ++t)
            if (raw[static_cast<std::size_t>(t) * 12 + c] > kTau) active++;
        const double df = static_cast<double>(active) / frames;
        idf[c] = std::clamp(std::log(1.0 / (df + 1e-3)), 0.0, 5.0);
    }

    DescriptorTensor out;
    out.kind = DescriptorKind::A9;
    out.frames = frames;
    out.dims = 12;
    out.values.assign(raw.size(), 0.0);
    constexpr double kEps = 1e-8;
    for (int t = 0; t < frames; ++t) {
        if (degenerate[static_cast<std::size_t>(t)]) {
            for (int c = 0; c < 12; ++c) out.at(t, c) = 1.0 / 12.0;
            continue;
        }
        double sum = 0.0;
        for (int c = 0; c < 12; ++c) sum += raw[static_cast<std::size_t>(t) * 12 + c] * idf[c];
        if (sum <= 0.0) continue; // all active mass suppressed: zero row
        for (int c = 0; c < 12; ++c)
            out.at(t, c) = raw[static_cast<std::size_t>(t) * 12 + c] * idf[c] / (sum + kEps);
    }
    return out;
}

std::vector<double> chroma(const AudioSegment& audio, const SpectralConfig& cfg, int& frames_out) {
    std::vector<double> energy, flux;
    chroma_energy_and_flux(audio, cfg, energy, flux, frames_out);
    constexpr double kEps = 1e-12;
    for (int t = 0; t < frames_out; ++t) {
        double sum = 0.0;
        for (int c = 0; c < 12; ++c) sum += energy[static_cast<std::size_t>(t) * 12 + c];
        if (sum <= 0.0) continue; // silence stays all-zero
        for (int c = 0; c < 12; ++c) energy[static_cast<std::size_t>(t) * 12 + c] /= (sum + kEps);
    }
    return energy;
}

double signal_power(const std::vector<double>& samples) {
    double p = 0.0;
    for (double s : samples) p += s * s;
    return samples.empty() ? 0.0 : p / static_cast<double>(samples.size());
}

AudioSegment add_noise_snr(const AudioSegment& audio, double snr_db, std::uint64_t seed) {
    if (std::isinf(snr_db)) return audio; // "clean" sentinel
    const double p_signal = signal_power(audio.samples);
    require(p_signal > 0.0, "add_noise_snr: silent input, SNR undefined");

    Rng rng(seed);
    std::vector<double> noise(audio.samples.size());
    for (auto& n : noise) n = rng.normal();
    const double p_noise_raw = signal_power(noise);
    const double target = p_signal / std::pow(10.0, snr_db / 10.0);
    const double scale = std::sqrt(target / p_noise_raw);

    AudioSegment out = audio;
    for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] += noise[i] * scale;
    return out;
}

std::vector<double> interpolate_rows(const std::vector<double>& values, int frames, int dims,
                                     int new_frames) {
    require(frames > 0 && new_frames > 0, "interpolate_rows: empty input or target");
    require(static_cast<std::size_t>(frames) * dims == values.size(),
            "interpolate_rows: size mismatch");
    if (frames == new_frames) return values;
    std::vector<double> out(static_cast<std::size_t>(new_frames) * dims);
    for (int i = 0; i < new_frames; ++i) {
        double pos = frames == 1 ? 0.0
                                 : static_cast<double>(i) * (frames - 1) /
                                       std::max(1, new_frames - 1);
        const int lo = static_cast<int>(std::floor(pos));
        const int hi = std::min(lo + 1, frames - 1);
        const double w = pos - lo;
        for (int d = 0; d < dims; ++d)
            out[static_cast<std::size_t>(i) * dims + d] =
                (1.0 - w) * values[static_cast<std::size_t>(lo) * dims + d] +
                w * values[static_cast<std::size_t>(hi) * dims + d];
    }
    return out;
}

} // namespace xmodal
