#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace xmodal {

struct AudioSegment {
    std::vector<double> samples;
    int sample_rate_hz = 24000;

    double duration_s() const {
        return static_cast<double>(samples.size()) / sample_rate_hz;
    }
};

struct Spectrogram {
    std::vector<double> mags; // frames x bins, row-major
    int frames = 0;
    int bins = 0;
    int nfft = 0;
    int hop = 0;

    double at(int t, int k) const { return mags[static_cast<std::size_t>(t) * bins + k]; }
};

/// Hann-windowed magnitude STFT with reflect center padding, so
/// frames = floor(len / hop) + 1 (96000 @ hop 512 gives 188).
Spectrogram stft_magnitude(const AudioSegment& audio, int nfft, int hop);

/// In-place iterative radix-2 FFT over interleaved complex data.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

enum class DescriptorKind { A4, A7, A8, A9, D4 };
std::string descriptor_kind_name(DescriptorKind k);
DescriptorKind descriptor_kind_from(const std::string& s);
int descriptor_dims(DescriptorKind k);

struct DescriptorTensor {
    DescriptorKind kind = DescriptorKind::A4;
    std::vector<double> values; // frames x dims
    int frames = 0;
    int dims = 0;
    std::vector<int> degenerate_dims; // bands/columns flagged near-zero-variance

    double at(int t, int d) const { return values[static_cast<std::size_t>(t) * dims + d]; }
    double& at(int t, int d) { return values[static_cast<std::size_t>(t) * dims + d]; }
};

struct BandEdges {
    double lo_hz, hi_hz;
    int bin_lo, bin_hi; // half-open [bin_lo, bin_hi)
};

/// The 8 octave bands. Hz ranges are fixed; bins are recomputed from the
/// sample rate and FFT size, the top band extending to the bin count.
struct BandTable {
    std::array<BandEdges, 8> bands;
};
BandTable make_band_table(int sample_rate_hz, int nfft);
BandEdges band_edges(int band_index, int sample_rate_hz = 24000, int nfft = 2048);

/// 12 just-intonation ratio attractors with octave-folded log2 values.
struct Attractor {
    int num, den;
    double log2_value;
    double cents;
};
const std::array<Attractor, 12>& attractor_table();

struct SpectralConfig {
    int nfft = 2048;
    int hop = 512;
};

/// Octave-band energy dynamics: log1p magnitude -> per-band mean ->
/// temporal delta (zero-padded last frame) -> per-band z-score.
DescriptorTensor a4_descriptor(const AudioSegment& audio, const SpectralConfig& cfg = {});

/// Just-intonation ratio attractor activations from pairwise spectral-peak
/// ratios. Frames with fewer than two peaks emit uniform rows.
DescriptorTensor a7_descriptor(const AudioSegment& audio, const SpectralConfig& cfg = {});

/// Onset-gated chroma. Rows carry pitch-class distributions scaled toward
/// zero where spectral flux is weak.
DescriptorTensor a8_descriptor(const AudioSegment& audio, const SpectralConfig& cfg = {});

/// A7 activations reweighted by clamped inverse document frequency.
DescriptorTensor a9_descriptor(const AudioSegment& audio, const SpectralConfig& cfg = {});

/// Ungated pitch-class energy distribution per frame (probe target).
std::vector<double> chroma(const AudioSegment& audio, const SpectralConfig& cfg, int& frames_out);

/// Gaussian noise at the requested SNR; the realized power ratio is exact.
/// An infinite snr_db is the "clean" sentinel and returns the input.
AudioSegment add_noise_snr(const AudioSegment& audio, double snr_db, std::uint64_t seed);

/// Endpoint-aligned linear interpolation of a frames x dims matrix to a new
/// frame count (descriptor time-base alignment).
std::vector<double> interpolate_rows(const std::vector<double>& values, int frames, int dims,
                                     int new_frames);

double signal_power(const std::vector<double>& samples);

} // namespace xmodal
