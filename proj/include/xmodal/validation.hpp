#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xmodal/config.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/retrieval.hpp"

namespace xmodal {

// ---- Test 01: causal ablation ------------------------------------------------

enum class AblationSide { Audio, Midi };
enum class AblationMode { Zero, Noise, Shuffle };
std::string ablation_mode_name(AblationMode m);
std::string ablation_side_name(AblationSide s);

struct AblationSpec {
    AblationSide side = AblationSide::Audio;
    AblationMode mode = AblationMode::Zero;
    std::uint64_t seed = 0;
};

struct AblationResult {
    double s_normal = 0;
    double s_ablated = 0;
    double delta = 0; // s_ablated - s_normal
};

/// Replaces the targeted descriptor stream at inference only. Rejects arms
/// without an injection path on the targeted side.
AblationResult ablate(Model& model, const Corpus& corpus, const PoolStructure& pool,
                      const AblationSpec& spec);

// ---- Test 02: parameter-matched controls --------------------------------------

/// Training-time control variants of a descriptor arm; identical
/// architecture, descriptor content replaced per control kind. Rejects
/// descriptor-free arms.
std::vector<DescriptorControl> param_matched_controls(const ArmConfig& arm);

// ---- Test 04: transposition sweep ---------------------------------------------

struct TranspositionResult {
    std::vector<int> ks;
    std::vector<double> s_values;
    double retention = -1; // mean S(|k|=3) / S(0) when both shifts present
};
TranspositionResult transposition_sweep(Model& model, const Corpus& corpus,
                                        const PoolStructure& pool, const std::vector<int>& ks);

// ---- Test 06: CKA / RSA --------------------------------------------------------

/// Linear CKA of two activation matrices [n, p], [n, q]; columns are
/// centered internally. Rejects matrices without any variance.
double cka(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y);

/// Pearson correlation of the upper-triangle pairwise Euclidean distances.
double rsa(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y);

struct CkaReport {
    int audio_layers = 0;
    int midi_layers = 0;
    std::vector<double> matrix;     // audio_layers x midi_layers
    std::vector<double> rsa_matrix; // same shape
    double cka_mean = 0;
    double rsa_mean = 0;
    double at(int a, int m) const { return matrix[static_cast<std::size_t>(a) * midi_layers + m]; }
};

/// Mean CKA/RSA across all audio x MIDI layer pairs on mean-pooled
/// per-layer activations of matched samples.
CkaReport cka_matrix(Model& model, const Corpus& corpus, const std::vector<int>& item_indices);

// ---- Test 08: band sensitivity --------------------------------------------------

struct BandSensitivity {
    double eps = 0.1;
    std::vector<double> delta_pos;  // mean ||dz||2 per band, +eps
    std::vector<double> delta_neg;  // -eps companion sweep
    std::vector<double> max_abs_r;  // max |pearson r| between band value and any output dim
};
/// Requires an A4 path on the audio side.
BandSensitivity band_sensitivity(Model& model, const Corpus& corpus,
                                 const std::vector<int>& item_indices, double eps);

// ---- Test 03: linear probes ------------------------------------------------------

struct ProbeResult {
    double r2 = 0;
    std::vector<int> excluded_dims; // zero-variance target dims left out
};
/// Closed-form ridge regression on an 80/20 split; R^2 averaged over
/// non-degenerate target dimensions on the held-out fifth.
ProbeResult linear_probe(const std::vector<std::vector<double>>& embeddings,
                         const std::vector<std::vector<double>>& targets, double lambda);

enum class ProbeSource { AudioEmbedding, MidiEmbedding };
enum class ProbeTarget { PitchHistogram, IntervalHistogram, Chroma, Centroid };
std::string probe_target_name(ProbeTarget t);
int probe_target_dims(ProbeTarget t);

std::vector<double> probe_target_values(const CorpusItem& item, ProbeTarget target,
                                        const SpectralConfig& spectral);
ProbeResult run_probe(Model& model, const Corpus& corpus, const std::vector<int>& item_indices,
                      ProbeSource source, ProbeTarget target, double lambda);

// ---- Test 09: invariance suite ----------------------------------------------------

struct InvarianceRow {
    std::string perturbation;
    std::string level;
    double s = 0;
};
/// Worst-case-direction S per perturbation level; the clean row reproduces
/// the canonical scoreboard S exactly.
std::vector<InvarianceRow> invariance_suite(Model& model, const Corpus& corpus,
                                            const PoolStructure& pool, std::uint64_t seed);

// ---- Test 10: cosine alignment + export --------------------------------------------

struct CosineAlignment {
    double mean = 0;
    double std = 0;
    std::vector<long long> histogram; // 50 bins over [-1, 1]
};
CosineAlignment cosine_alignment(Model& model, const Corpus& corpus,
                                 const std::vector<int>& item_indices);

/// CSV rows (modality, piece_id, segment_index, embedding floats) for the
/// first n corpus items, both modalities; floats are round-trip exact.
void export_embeddings(Model& model, const Corpus& corpus, int n, const std::string& path);

// ---- effect sizes -------------------------------------------------------------------

struct EffectSize {
    double cohen_d = 0;
    double welch_t = 0;
    double dof = 0;
    double p = 1;
};
EffectSize effect_size(double mean_a, double sd_a, int n_a, double mean_b, double sd_b, int n_b);

/// Two-sided p-value of a t statistic (regularized incomplete beta).
double student_t_two_sided_p(double t, double dof);

} // namespace xmodal
