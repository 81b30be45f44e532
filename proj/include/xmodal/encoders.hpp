#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmodal/audio.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/midi.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

enum class Mechanism { None, Concat, CrossAttention, ReverseCrossAttention, Film };
std::string mechanism_name(Mechanism m);

struct SideInjection {
    Mechanism mech = Mechanism::None;
    std::optional<DescriptorKind> desc;
};

struct MoeSpec {
    bool audio = false;
    bool midi = false;
    int n_experts = 4;
    int top_k = 2;
    double aux_coef = 0.01; // applied to both balance and entropy terms
};

struct ThirdTowerSpec {
    bool enabled = false;
    double alpha = 0.5;
    double beta = 0.5;
    bool include_main = true; // false for the anchor variant
    DescriptorKind desc = DescriptorKind::A4;
    int d_model = 32;
    int heads = 4;
    int layers = 1;
    int d_ff = 64;
};

struct AudioDims {
    std::vector<int> cnn_channels{16, 16, 16, 64}; // last one must equal d_model
    int gn_groups = 4;
    int d_model = 64;
    int heads = 4;
    int layers = 2;
    int d_ff = 128;
    int pos_max = 512;
};

struct MidiDims {
    int d_model = 32;
    int heads = 4;
    int layers = 2;
    int d_ff = 64;
    int pos_max = 256;
    int duration_buckets = 32;
};

struct ArmConfig {
    std::string name = "d0";
    SideInjection audio_inject;
    SideInjection midi_inject;
    MoeSpec moe;
    ThirdTowerSpec t3;
    AudioDims audio;
    MidiDims midi;
    int embed_dim = 32;
    double dropout = 0.0;
    int film_hidden = 32;
};

/// All constructible arms (screening catalog, combined arms, and the
/// FiLM / MoE / Third-Tower families).
const std::vector<std::string>& arm_names();
bool is_known_arm(const std::string& name);
/// Arm at default desk-scale dimensions; throws for unknown names.
ArmConfig make_toy_arm(const std::string& name);
/// Arm at full-paper dimensions (used for parameter accounting).
ArmConfig make_paper_arm(const std::string& name);

/// Speedup of running the downstream self-attention stack on T_D descriptor
/// tokens instead of T_F frame tokens.
double attention_cost_ratio(double t_frames, double t_desc);

/// Closed-form parameter counts per component for a config, without
/// materializing the model. `stft_frames` sizes the reverse-cross-attention
/// descriptor position table (188 at the full scale).
std::map<std::string, long long> param_count(const ArmConfig& cfg, int stft_frames);
long long param_count_total(const ArmConfig& cfg, int stft_frames);

// ---- layers ----------------------------------------------------------------

struct LinearLayer {
    TensorPtr w, b; // w is [out, in]
};
struct NormLayer {
    TensorPtr gain, bias;
};
struct ConvLayer {
    TensorPtr w, b;
    NormLayer gn;
    int kernel, stride, padding, groups;
};
struct AttentionWeights {
    LinearLayer q, k, v, o;
};
struct MoeLayer {
    LinearLayer gate;
    std::vector<std::pair<LinearLayer, LinearLayer>> experts;
    int top_k = 2;
};
struct TransformerBlock {
    NormLayer ln1, ln2;
    AttentionWeights attn;
    LinearLayer ff1, ff2;
    bool use_moe = false;
    MoeLayer moe;
};
struct ProjectionHead {
    LinearLayer l1, l2, l3;
    NormLayer bn1, bn2;
    BatchNormBuffers bn1_buf, bn2_buf;
};
struct ConcatInjection {
    LinearLayer proj;
    NormLayer ln;
};
struct CrossAttnInjection {
    LinearLayer desc_proj;
    AttentionWeights attn;
    NormLayer ln_q, ln_kv;
    TensorPtr desc_pos; // reverse direction only
};
struct FilmHead {
    LinearLayer l1, l2; // l2 zero-initialized so conditioning starts as identity
};
struct ThirdTower {
    LinearLayer in_proj;
    std::vector<TransformerBlock> blocks;
    LinearLayer out_proj;
};

/// moe_ffn building block: renormalized top-k gating over expert FFNs.
/// Returns the mixed output and the auxiliary balance + entropy loss.
struct MoeOut {
    TensorPtr y;
    TensorPtr balance_loss;
};
MoeOut moe_ffn(const TensorPtr& x, MoeLayer& layer);

/// (1 + gamma) * F + beta with [gamma, beta] from a 2-layer MLP applied to
/// the time-pooled descriptor.
TensorPtr film_modulate(const TensorPtr& features, const TensorPtr& descriptor, FilmHead& head);

TensorPtr inject_concat(const TensorPtr& features, const TensorPtr& descriptor,
                        ConcatInjection& inj);
TensorPtr inject_xattn(const TensorPtr& features, const TensorPtr& descriptor,
                       CrossAttnInjection& inj, int heads,
                       const std::vector<double>* key_mask = nullptr);
TensorPtr inject_reverse_xattn(const TensorPtr& descriptor, const TensorPtr& features,
                               CrossAttnInjection& inj, int heads,
                               const std::vector<double>* key_mask = nullptr);

/// Residual pre-norm multi-head attention primitive used by the encoders.
TensorPtr multihead_attention(const TensorPtr& x_q, const TensorPtr& x_kv, AttentionWeights& w,
                              int heads, const std::vector<double>* key_mask = nullptr);

// ---- model ------------------------------------------------------------------

struct EncodeResult {
    TensorPtr pooled;
    std::vector<TensorPtr> taps; // one post-block output per transformer layer
    TensorPtr aux;               // MoE auxiliary loss when present
};

struct ItemDescriptors {
    std::optional<DescriptorTensor> audio;
    std::optional<DescriptorTensor> midi;
    std::optional<DescriptorTensor> t3;
};

class Model {
public:
    Model(const ArmConfig& cfg, const SpectralConfig& spectral, int sample_rate,
          int segment_samples, std::uint64_t init_seed);

    const ArmConfig& config() const { return cfg_; }
    const SpectralConfig& spectral() const { return spectral_; }
    int sample_rate() const { return sample_rate_; }

    /// Descriptors this arm consumes for one item, already on the right
    /// time base for the mechanism.
    ItemDescriptors compute_descriptors(const CorpusItem& item) const;

    EncodeResult encode_audio(const AudioSegment& audio, const DescriptorTensor* descriptor,
                              bool train, Rng* dropout_rng = nullptr);
    EncodeResult encode_midi(const MidiSegment& segment, const DescriptorTensor* descriptor,
                             bool train, Rng* dropout_rng = nullptr);
    EncodeResult encode_third_tower(const DescriptorTensor& descriptor, bool train,
                                    Rng* dropout_rng = nullptr);

    /// Projection heads over a stacked batch of pooled encoder outputs.
    TensorPtr project_audio(const TensorPtr& pooled_batch, bool train);
    TensorPtr project_midi(const TensorPtr& pooled_batch, bool train);
    TensorPtr project_t3(const TensorPtr& pooled_batch, bool train);

    /// Eval-mode embeddings (no graph, BatchNorm running stats).
    std::vector<double> embed_audio_eval(const AudioSegment& audio,
                                         const DescriptorTensor* descriptor);
    std::vector<double> embed_midi_eval(const MidiSegment& segment,
                                        const DescriptorTensor* descriptor);

    /// Eval-mode per-layer taps, mean-pooled over tokens: layers x d_model.
    std::vector<std::vector<double>> audio_layer_taps_eval(const AudioSegment& audio,
                                                           const DescriptorTensor* descriptor);
    std::vector<std::vector<double>> midi_layer_taps_eval(const MidiSegment& segment,
                                                          const DescriptorTensor* descriptor);

    std::vector<TensorPtr>& parameters() { return param_list_; }
    const std::vector<std::pair<std::string, TensorPtr>>& named_parameters() const {
        return named_params_;
    }
    std::map<std::string, long long> param_count_by_component() const;
    long long param_count_total() const;

    /// Round every parameter and buffer to its float32 value so that a
    /// following save/load is lossless.
    void snap_to_f32();

    Checkpoint to_checkpoint(std::uint64_t config_hash, const std::string& config_json) const;
    void load_from_checkpoint(const Checkpoint& ckpt);

    int audio_frames() const;      // CNN output length for the configured scale
    int descriptor_frames() const; // STFT frame count for the configured scale
    int segment_samples() const { return segment_samples_; }

private:
    friend struct ModelBuilder;

    TensorPtr add_param(const std::string& name, TensorPtr t);
    void add_buffer(const std::string& name, BatchNormBuffers* buf);
    TensorPtr transformer_stack(TensorPtr x, std::vector<TransformerBlock>& blocks, int heads,
                                const std::vector<double>* key_mask, bool train, Rng* rng,
                                std::vector<TensorPtr>* taps, TensorPtr* aux,
                                std::vector<FilmHead>* film, const TensorPtr& film_desc);

    ArmConfig cfg_;
    SpectralConfig spectral_;
    int sample_rate_ = 4000;
    int segment_samples_ = 2000;

    std::vector<ConvLayer> cnn_;
    TensorPtr audio_pos_;
    std::vector<TransformerBlock> audio_tf_;
    ProjectionHead audio_head_;

    TensorPtr pitch_emb_, vel_emb_, dur_emb_;
    LinearLayer midi_in_proj_;
    NormLayer midi_in_ln_;
    std::vector<TransformerBlock> midi_tf_;
    NormLayer midi_out_ln_;
    ProjectionHead midi_head_;

    std::optional<ConcatInjection> audio_concat_, midi_concat_;
    std::optional<CrossAttnInjection> audio_xattn_, midi_xattn_;
    std::vector<FilmHead> audio_film_, midi_film_;
    std::optional<ThirdTower> t3_;
    ProjectionHead t3_head_;

    std::vector<TensorPtr> param_list_;
    std::vector<std::pair<std::string, TensorPtr>> named_params_;
    std::vector<std::pair<std::string, BatchNormBuffers*>> buffers_;
};

/// Sinusoidal position table as a constant tensor [len, dim].
TensorPtr sinusoidal_positions(int len, int dim);

} // namespace xmodal
