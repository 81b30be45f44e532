#include "xmodal/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xmodal {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

constexpr double kInitStd = 0.02;

// the 4-layer CNN geometry is fixed: 40x total downsampling
struct ConvGeom {
    int kernel, stride, padding;
};
constexpr ConvGeom kCnnGeom[4] = {{10, 5, 0}, {3, 2, 1}, {3, 2, 1}, {3, 2, 1}};

} // namespace

std::string mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::None: return "none";
        case Mechanism::Concat: return "concat";
        case Mechanism::CrossAttention: return "xattn";
        case Mechanism::ReverseCrossAttention: return "reverse_xattn";
        case Mechanism::Film: return "film";
    }
    return "?";
}

double attention_cost_ratio(double t_frames, double t_desc) {
    require(t_frames > 0 && t_desc > 0, "attention_cost_ratio: token counts must be positive");
    return (t_frames * t_frames) / (t_desc * t_desc);
}

const std::vector<std::string>& arm_names() {
    static const std::vector<std::string> names = {
        "d0",      "d4",        "a4",        "a7",        "a8",        "a9",      "d4x",
        "a4x",     "a7x",       "d4r",       "a4r",       "d4a4",      "d4a4cm",  "d4-a4r",
        "film-a4", "film-d4",   "film-dual", "moe-a4",    "moe-dual",  "moe-a4-v2",
        "moe-a4-v3", "moe-a4-v4", "t3-wt",   "t3-tri",    "t3-anc"};
    return names;
}

bool is_known_arm(const std::string& name) {
    const std::string n = lower(name);
    for (const auto& a : arm_names())
        if (a == n) return true;
    return false;
}

namespace {

ArmConfig arm_from_name(const std::string& raw) {
    const std::string n = lower(raw);
    ArmConfig c;
    c.name = n;
    auto audio = [&](Mechanism m, DescriptorKind k) { c.audio_inject = {m, k}; };
    auto midi = [&](Mechanism m, DescriptorKind k) { c.midi_inject = {m, k}; };

    if (n == "d0") {
    } else if (n == "d4") {
        midi(Mechanism::Concat, DescriptorKind::D4);
    } else if (n == "a4") {
        audio(Mechanism::Concat, DescriptorKind::A4);
    } else if (n == "a7") {
        audio(Mechanism::Concat, DescriptorKind::A7);
    } else if (n == "a8") {
        audio(Mechanism::Concat, DescriptorKind::A8);
    } else if (n == "a9") {
        audio(Mechanism::Concat, DescriptorKind::A9);
    } else if (n == "d4x") {
        midi(Mechanism::CrossAttention, DescriptorKind::D4);
    } else if (n == "a4x") {
        audio(Mechanism::CrossAttention, DescriptorKind::A4);
    } else if (n == "a7x") {
        audio(Mechanism::CrossAttention, DescriptorKind::A7);
    } else if (n == "d4r") {
        midi(Mechanism::ReverseCrossAttention, DescriptorKind::D4);
    } else if (n == "a4r") {
        audio(Mechanism::ReverseCrossAttention, DescriptorKind::A4);
    } else if (n == "d4a4") {
        midi(Mechanism::Concat, DescriptorKind::D4);
        audio(Mechanism::Concat, DescriptorKind::A4);
    } else if (n == "d4a4cm") {
        // cross-modal: each descriptor feeds the other side's encoder
        midi(Mechanism::Concat, DescriptorKind::A4);
        audio(Mechanism::Concat, DescriptorKind::D4);
    } else if (n == "d4-a4r") {
        midi(Mechanism::Concat, DescriptorKind::D4);
        audio(Mechanism::ReverseCrossAttention, DescriptorKind::A4);
    } else if (n == "film-a4") {
        audio(Mechanism::Film, DescriptorKind::A4);
    } else if (n == "film-d4") {
        midi(Mechanism::Film, DescriptorKind::D4);
    } else if (n == "film-dual") {
        audio(Mechanism::Film, DescriptorKind::A4);
        midi(Mechanism::Film, DescriptorKind::D4);
    } else if (n == "moe-a4" || n == "moe-a4-v2" || n == "moe-a4-v3" || n == "moe-a4-v4") {
        audio(Mechanism::Concat, DescriptorKind::A4);
        c.moe.audio = true;
        if (n == "moe-a4") {
            c.moe.n_experts = 4;
            c.moe.top_k = 2;
        } else if (n == "moe-a4-v2") {
            c.moe.n_experts = 8;
            c.moe.top_k = 2;
        } else if (n == "moe-a4-v3") {
            c.moe.n_experts = 4;
            c.moe.top_k = 1;
        } else {
            c.moe.n_experts = 8;
            c.moe.top_k = 4;
        }
    } else if (n == "moe-dual") {
        audio(Mechanism::Concat, DescriptorKind::A4);
        midi(Mechanism::Concat, DescriptorKind::D4);
        c.moe.audio = true;
        c.moe.midi = true;
    } else if (n == "t3-wt") {
        c.t3.enabled = true;
        c.t3.alpha = 0.5;
        c.t3.beta = 0.5;
    } else if (n == "t3-tri") {
        c.t3.enabled = true;
        c.t3.alpha = 1.0;
        c.t3.beta = 1.0;
    } else if (n == "t3-anc") {
        c.t3.enabled = true;
        c.t3.alpha = 1.0;
        c.t3.beta = 1.0;
        c.t3.include_main = false;
    } else {
        throw std::invalid_argument("unknown arm: " + raw);
    }
    return c;
}

} // namespace

ArmConfig make_toy_arm(const std::string& name) { return arm_from_name(name); }

ArmConfig make_paper_arm(const std::string& name) {
    ArmConfig c = arm_from_name(name);
    c.audio.cnn_channels = {512, 512, 512, 1024};
    c.audio.gn_groups = 32;
    c.audio.d_model = 1024;
    c.audio.heads = 8;
    c.audio.layers = 4;
    c.audio.d_ff = 4096;
    c.audio.pos_max = 6000;
    c.midi.d_model = 512;
    c.midi.heads = 8;
    c.midi.layers = 4;
    c.midi.d_ff = 2048;
    c.midi.pos_max = 2048;
    c.embed_dim = 256;
    c.dropout = 0.1;
    c.t3.d_model = 256;
    c.t3.heads = 8;
    c.t3.layers = 2;
    c.t3.d_ff = 1024;
    return c;
}

std::map<std::string, long long> param_count(const ArmConfig& cfg, int stft_frames) {
    std::map<std::string, long long> out;
    auto lin = [](long long o, long long i) { return o * i + o; };
    auto norm = [](long long d) { return 2 * d; };

    const long long da = cfg.audio.d_model, dm = cfg.midi.d_model, dd = cfg.embed_dim;
    long long cnn = 0;
    long long in_ch = 1;
    const int kernels[4] = {10, 3, 3, 3};
    for (int i = 0; i < 4; ++i) {
        const long long oc = cfg.audio.cnn_channels[static_cast<std::size_t>(i)];
        cnn += oc * in_ch * kernels[i] + oc + norm(oc);
        in_ch = oc;
    }
    out["audio_cnn"] = cnn;
    out["audio_pos"] = static_cast<long long>(cfg.audio.pos_max) * da;
    // plain transformer vs MoE params land in separate buckets
    long long audio_tf = 0, moe = 0;
    for (int i = 0; i < cfg.audio.layers; ++i) {
        const bool is_moe = cfg.moe.audio && i == cfg.audio.layers - 1;
        const long long plain = 4 * lin(da, da) + 2 * norm(da);
        audio_tf += plain;
        if (is_moe)
            moe += lin(cfg.moe.n_experts, da) +
                   cfg.moe.n_experts * (lin(cfg.audio.d_ff, da) + lin(da, cfg.audio.d_ff));
        else
            audio_tf += lin(cfg.audio.d_ff, da) + lin(da, cfg.audio.d_ff);
    }
    out["audio_transformer"] = audio_tf;

    const long long ha = da / 2;
    out["audio_projection"] = lin(ha, da) + norm(ha) + lin(ha, ha) + norm(ha) + lin(dd, ha);

    out["midi_embeddings"] =
        128 * (dm / 2) + 128 * (dm / 4) +
        static_cast<long long>(cfg.midi.duration_buckets) * (dm / 4) + lin(dm, dm) + norm(dm);
    long long midi_tf = 0;
    for (int i = 0; i < cfg.midi.layers; ++i) {
        const bool is_moe = cfg.moe.midi && i == cfg.midi.layers - 1;
        midi_tf += 4 * lin(dm, dm) + 2 * norm(dm);
        if (is_moe)
            moe += lin(cfg.moe.n_experts, dm) +
                   cfg.moe.n_experts * (lin(cfg.midi.d_ff, dm) + lin(dm, cfg.midi.d_ff));
        else
            midi_tf += lin(cfg.midi.d_ff, dm) + lin(dm, cfg.midi.d_ff);
    }
    midi_tf += norm(dm); // output LayerNorm
    out["midi_transformer"] = midi_tf;
    out["midi_projection"] = lin(dm, dm) + norm(dm) + lin(dm, dm) + norm(dm) + lin(dd, dm);
    if (moe > 0) out["moe"] = moe;

    auto inject_count = [&](const SideInjection& inj, long long d, long long pos_len) {
        if (inj.mech == Mechanism::None || inj.mech == Mechanism::Film) return 0LL;
        const long long k = descriptor_dims(*inj.desc);
        if (inj.mech == Mechanism::Concat) return lin(d, d + k) + norm(d);
        long long n = lin(d, k) + 4 * lin(d, d) + 2 * norm(d);
        if (inj.mech == Mechanism::ReverseCrossAttention) n += pos_len * d;
        return n;
    };
    const long long ia = inject_count(cfg.audio_inject, da, stft_frames);
    const long long im = inject_count(cfg.midi_inject, dm, cfg.midi.pos_max);
    if (ia > 0) out["injection_audio"] = ia;
    if (im > 0) out["injection_midi"] = im;

    long long film = 0;
    if (cfg.audio_inject.mech == Mechanism::Film) {
        const long long k = descriptor_dims(*cfg.audio_inject.desc);
        film += cfg.audio.layers * (lin(cfg.film_hidden, k) + lin(2 * da, cfg.film_hidden));
    }
    if (cfg.midi_inject.mech == Mechanism::Film) {
        const long long k = descriptor_dims(*cfg.midi_inject.desc);
        film += cfg.midi.layers * (lin(cfg.film_hidden, k) + lin(2 * dm, cfg.film_hidden));
    }
    if (film > 0) out["film"] = film;

    if (cfg.t3.enabled) {
        const long long k = descriptor_dims(cfg.t3.desc);
        const long long d3 = cfg.t3.d_model;
        long long t3 = lin(d3, k) + lin(dd, d3);
        for (int i = 0; i < cfg.t3.layers; ++i)
            t3 += 4 * lin(d3, d3) + 2 * norm(d3) + lin(cfg.t3.d_ff, d3) + lin(d3, cfg.t3.d_ff);
        out["third_tower"] = t3;
    }
    return out;
}

long long param_count_total(const ArmConfig& cfg, int stft_frames) {
    long long total = 0;
    for (const auto& [k, v] : param_count(cfg, stft_frames)) total += v;
    return total;
}

TensorPtr sinusoidal_positions(int len, int dim) {
    std::vector<double> d(static_cast<std::size_t>(len) * dim);
    for (int p = 0; p < len; ++p)
        for (int i = 0; i < dim; ++i) {
            const double angle = p / std::pow(10000.0, 2.0 * (i / 2) / dim);
            d[static_cast<std::size_t>(p) * dim + i] = (i % 2 == 0) ? std::sin(angle)
                                                                    : std::cos(angle);
        }
    return make_tensor(std::move(d), {len, dim}, false);
}

// ---- injection building blocks ----------------------------------------------

TensorPtr multihead_attention(const TensorPtr& x_q, const TensorPtr& x_kv, AttentionWeights& w,
                              int heads, const std::vector<double>* key_mask) {
    auto q = linear(x_q, w.q.w, w.q.b);
    auto k = linear(x_kv, w.k.w, w.k.b);
    auto v = linear(x_kv, w.v.w, w.v.b);
    const int d = q->shape[1];
    require(d % heads == 0, "attention: d_model " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) + " heads");
    const int dk = d / heads;
    TensorPtr cat;
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dk, (h + 1) * dk);
        auto kh = slice_cols(k, h * dk, (h + 1) * dk);
        auto vh = slice_cols(v, h * dk, (h + 1) * dk);
        auto oh = scaled_dot_attention(qh, kh, vh, key_mask);
        cat = cat ? concat_cols(cat, oh) : oh;
    }
    return linear(cat, w.o.w, w.o.b);
}

TensorPtr inject_concat(const TensorPtr& features, const TensorPtr& descriptor,
                        ConcatInjection& inj) {
    if (features->shape[0] != descriptor->shape[0])
        throw std::invalid_argument("inject_concat: feature rows " + shape_str(features->shape) +
                                    " vs descriptor rows " + shape_str(descriptor->shape) +
                                    " (descriptor must be aligned first)");
    auto cat = concat_cols(features, descriptor);
    auto proj = linear(cat, inj.proj.w, inj.proj.b);
    return layer_norm(proj, inj.ln.gain, inj.ln.bias);
}

TensorPtr inject_xattn(const TensorPtr& features, const TensorPtr& descriptor,
                       CrossAttnInjection& inj, int heads, const std::vector<double>* key_mask) {
    auto dp = linear(descriptor, inj.desc_proj.w, inj.desc_proj.b);
    auto qn = layer_norm(features, inj.ln_q.gain, inj.ln_q.bias);
    auto kvn = layer_norm(dp, inj.ln_kv.gain, inj.ln_kv.bias);
    auto attn = multihead_attention(qn, kvn, inj.attn, heads, key_mask);
    return add(features, attn);
}

TensorPtr inject_reverse_xattn(const TensorPtr& descriptor, const TensorPtr& features,
                               CrossAttnInjection& inj, int heads,
                               const std::vector<double>* key_mask) {
    auto dp = linear(descriptor, inj.desc_proj.w, inj.desc_proj.b);
    const int t_d = dp->shape[0];
    require(inj.desc_pos != nullptr, "inject_reverse_xattn: missing descriptor positions");
    require(t_d <= inj.desc_pos->shape[0],
            "inject_reverse_xattn: " + std::to_string(t_d) + " descriptor tokens exceed table " +
                shape_str(inj.desc_pos->shape));
    auto q0 = add(dp, slice_rows(inj.desc_pos, 0, t_d));
    auto qn = layer_norm(q0, inj.ln_q.gain, inj.ln_q.bias);
    auto kvn = layer_norm(features, inj.ln_kv.gain, inj.ln_kv.bias);
    auto attn = multihead_attention(qn, kvn, inj.attn, heads, key_mask);
    return add(q0, attn);
}

TensorPtr film_modulate(const TensorPtr& features, const TensorPtr& descriptor, FilmHead& head) {
    const int d = features->shape[1];
    auto pooled = reshape(mean_axis0(descriptor), {1, descriptor->shape[1]});
    auto h = relu(linear(pooled, head.l1.w, head.l1.b));
    auto gb = linear(h, head.l2.w, head.l2.b);
    require(gb->shape[1] == 2 * d, "film: head emits " + shape_str(gb->shape) + ", expected 2x" +
                                       std::to_string(d));
    auto gamma = slice_cols(gb, 0, d);
    auto beta = slice_cols(gb, d, 2 * d);
    return add_row_broadcast(mul_row_broadcast(features, add_scalar(gamma, 1.0)), beta);
}

MoeOut moe_ffn(const TensorPtr& x, MoeLayer& layer) {
    const int t = x->shape[0];
    const int n_experts = static_cast<int>(layer.experts.size());
    require(layer.top_k >= 1 && layer.top_k <= n_experts,
            "moe_ffn: top_k " + std::to_string(layer.top_k) + " out of range for " +
                std::to_string(n_experts) + " experts");
    auto logits = linear(x, layer.gate.w, layer.gate.b); // [T, E]
    auto probs = softmax_rows(logits);

    // top-k per row on gate probabilities; ties keep the lower index
    std::vector<double> drop_mask(static_cast<std::size_t>(t) * n_experts, 0.0);
    std::vector<double> importance(static_cast<std::size_t>(n_experts), 0.0);
    std::vector<int> order(static_cast<std::size_t>(n_experts));
    for (int i = 0; i < t; ++i) {
        const double* p = &probs->data[static_cast<std::size_t>(i) * n_experts];
        for (int e = 0; e < n_experts; ++e) order[static_cast<std::size_t>(e)] = e;
        std::stable_sort(order.begin(), order.end(),
                         [p](int a, int b) { return p[a] > p[b]; });
        for (int r = layer.top_k; r < n_experts; ++r)
            drop_mask[static_cast<std::size_t>(i) * n_experts + order[static_cast<std::size_t>(r)]] =
                -1e30;
        for (int r = 0; r < layer.top_k; ++r)
            importance[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] += 1.0;
    }
    for (auto& f : importance) f /= t;

    // renormalized gates: softmax over the surviving logits
    auto gates = softmax_rows(add(logits, make_tensor(drop_mask, {t, n_experts}, false)));

    TensorPtr y;
    for (int e = 0; e < n_experts; ++e) {
        auto& ex = layer.experts[static_cast<std::size_t>(e)];
        auto fe = linear(gelu(linear(x, ex.first.w, ex.first.b)), ex.second.w, ex.second.b);
        auto ge = slice_cols(gates, e, e + 1);
        auto contrib = mul_col_broadcast(fe, ge);
        y = y ? add(y, contrib) : contrib;
    }

    // importance-weighted load balance plus an entropy term pushing the mean
    // gate distribution toward uniform
    auto mean_probs = mean_axis0(probs);
    auto bal = scale(sum_all(mul(mean_probs, make_tensor(importance, {n_experts}, false))),
                     static_cast<double>(n_experts));
    auto ent = add_scalar(sum_all(mul(mean_probs, log_op(mean_probs))),
                          std::log(static_cast<double>(n_experts)));
    return {y, add(bal, ent)};
}

// ---- model -------------------------------------------------------------------

Model::Model(const ArmConfig& cfg, const SpectralConfig& spectral, int sample_rate,
             int segment_samples, std::uint64_t init_seed)
    : cfg_(cfg), spectral_(spectral), sample_rate_(sample_rate),
      segment_samples_(segment_samples) {
    require(cfg_.audio.cnn_channels.size() == 4, "model: CNN must have 4 layers");
    require(cfg_.audio.cnn_channels.back() == cfg_.audio.d_model,
            "model: last CNN channel count must equal audio d_model");
    Rng rng(init_seed);

    auto init_linear = [&](const std::string& name, int out, int in, bool zero = false) {
        LinearLayer l;
        l.w = add_param(name + ".w", zero ? zeros({out, in}, true)
                                          : truncated_normal({out, in}, rng, kInitStd));
        l.b = add_param(name + ".b", zeros({out}, true));
        return l;
    };
    auto init_norm = [&](const std::string& name, int dim) {
        NormLayer n;
        n.gain = add_param(name + ".gain", full({dim}, 1.0, true));
        n.bias = add_param(name + ".bias", zeros({dim}, true));
        return n;
    };
    auto init_attn = [&](const std::string& name, int d) {
        AttentionWeights a;
        a.q = init_linear(name + ".q", d, d);
        a.k = init_linear(name + ".k", d, d);
        a.v = init_linear(name + ".v", d, d);
        a.o = init_linear(name + ".o", d, d);
        return a;
    };
    auto init_block = [&](const std::string& name, int d, int d_ff, bool use_moe) {
        TransformerBlock b;
        b.ln1 = init_norm(name + ".ln1", d);
        b.attn = init_attn(name + ".attn", d);
        b.ln2 = init_norm(name + ".ln2", d);
        if (use_moe) {
            b.use_moe = true;
            b.moe.top_k = cfg_.moe.top_k;
            b.moe.gate = init_linear(name + ".moe.gate", cfg_.moe.n_experts, d);
            for (int e = 0; e < cfg_.moe.n_experts; ++e)
                b.moe.experts.push_back(
                    {init_linear(name + ".moe.expert" + std::to_string(e) + ".ff1", d_ff, d),
                     init_linear(name + ".moe.expert" + std::to_string(e) + ".ff2", d, d_ff)});
        } else {
            b.ff1 = init_linear(name + ".ff1", d_ff, d);
            b.ff2 = init_linear(name + ".ff2", d, d_ff);
        }
        return b;
    };
    auto init_head = [&](const std::string& name, int in, int hidden, int out) {
        ProjectionHead h;
        h.l1 = init_linear(name + ".l1", hidden, in);
        h.bn1 = init_norm(name + ".bn1", hidden);
        h.l2 = init_linear(name + ".l2", hidden, hidden);
        h.bn2 = init_norm(name + ".bn2", hidden);
        h.l3 = init_linear(name + ".l3", out, hidden);
        return h;
    };
    // learnable positional tables start at the sinusoidal pattern; a
    // trunc-normal start is ~2% of the feature scale and leaves the
    // encoders position-blind for most of a short run
    auto init_pos_table = [&](const std::string& name, int len, int d) {
        auto base = sinusoidal_positions(len, d);
        return add_param(name, make_tensor(base->data, {len, d}, true));
    };
    auto init_xattn_inj = [&](const std::string& name, int d, int k, bool reverse, int pos_len) {
        CrossAttnInjection inj;
        inj.desc_proj = init_linear(name + ".desc_proj", d, k);
        inj.attn = init_attn(name + ".attn", d);
        inj.ln_q = init_norm(name + ".ln_q", d);
        inj.ln_kv = init_norm(name + ".ln_kv", d);
        if (reverse) inj.desc_pos = init_pos_table(name + ".desc_pos", pos_len, d);
        return inj;
    };

    const int da = cfg_.audio.d_model;
    const int dm = cfg_.midi.d_model;

    // audio encoder
    int in_ch = 1;
    for (int i = 0; i < 4; ++i) {
        ConvLayer c;
        const int out_ch = cfg_.audio.cnn_channels[static_cast<std::size_t>(i)];
        c.kernel = kCnnGeom[i].kernel;
        c.stride = kCnnGeom[i].stride;
        c.padding = kCnnGeom[i].padding;
        c.groups = cfg_.audio.gn_groups;
        require(out_ch % c.groups == 0, "model: GroupNorm groups must divide CNN channels");
        const std::string name = "audio.cnn." + std::to_string(i);
        c.w = add_param(name + ".w", truncated_normal({out_ch, in_ch, c.kernel}, rng, kInitStd));
        c.b = add_param(name + ".b", zeros({out_ch}, true));
        c.gn = init_norm(name + ".gn", out_ch);
        cnn_.push_back(c);
        in_ch = out_ch;
    }
    audio_pos_ = init_pos_table("audio.pos", cfg_.audio.pos_max, da);

    if (cfg_.audio_inject.mech == Mechanism::Concat) {
        ConcatInjection inj;
        const int k = descriptor_dims(*cfg_.audio_inject.desc);
        inj.proj = init_linear("inject.audio.concat.proj", da, da + k);
        inj.ln = init_norm("inject.audio.concat.ln", da);
        audio_concat_ = inj;
    } else if (cfg_.audio_inject.mech == Mechanism::CrossAttention) {
        audio_xattn_ = init_xattn_inj("inject.audio.xattn", da,
                                      descriptor_dims(*cfg_.audio_inject.desc), false, 0);
    } else if (cfg_.audio_inject.mech == Mechanism::ReverseCrossAttention) {
        audio_xattn_ = init_xattn_inj("inject.audio.rev", da,
                                      descriptor_dims(*cfg_.audio_inject.desc), true,
                                      descriptor_frames());
    }

    for (int i = 0; i < cfg_.audio.layers; ++i)
        audio_tf_.push_back(init_block("audio.tf." + std::to_string(i), da, cfg_.audio.d_ff,
                                       cfg_.moe.audio && i == cfg_.audio.layers - 1));
    if (cfg_.audio_inject.mech == Mechanism::Film) {
        const int k = descriptor_dims(*cfg_.audio_inject.desc);
        for (int i = 0; i < cfg_.audio.layers; ++i) {
            FilmHead f;
            f.l1 = init_linear("film.audio." + std::to_string(i) + ".l1", cfg_.film_hidden, k);
            f.l2 = init_linear("film.audio." + std::to_string(i) + ".l2", 2 * da,
                               cfg_.film_hidden, /*zero=*/true);
            audio_film_.push_back(f);
        }
    }
    audio_head_ = init_head("audio.head", da, da / 2, cfg_.embed_dim);
    add_buffer("audio.head.bn1", &audio_head_.bn1_buf);
    add_buffer("audio.head.bn2", &audio_head_.bn2_buf);

    // midi encoder
    require(dm % 4 == 0, "model: MIDI d_model must be divisible by 4");
    pitch_emb_ = add_param("midi.emb.pitch", truncated_normal({128, dm / 2}, rng, kInitStd));
    vel_emb_ = add_param("midi.emb.vel", truncated_normal({128, dm / 4}, rng, kInitStd));
    dur_emb_ = add_param("midi.emb.dur",
                         truncated_normal({cfg_.midi.duration_buckets, dm / 4}, rng, kInitStd));
    midi_in_proj_ = init_linear("midi.emb.proj", dm, dm);
    midi_in_ln_ = init_norm("midi.emb.ln", dm);

    if (cfg_.midi_inject.mech == Mechanism::Concat) {
        ConcatInjection inj;
        const int k = descriptor_dims(*cfg_.midi_inject.desc);
        inj.proj = init_linear("inject.midi.concat.proj", dm, dm + k);
        inj.ln = init_norm("inject.midi.concat.ln", dm);
        midi_concat_ = inj;
    } else if (cfg_.midi_inject.mech == Mechanism::CrossAttention) {
        midi_xattn_ = init_xattn_inj("inject.midi.xattn", dm,
                                     descriptor_dims(*cfg_.midi_inject.desc), false, 0);
    } else if (cfg_.midi_inject.mech == Mechanism::ReverseCrossAttention) {
        midi_xattn_ = init_xattn_inj("inject.midi.rev", dm,
                                     descriptor_dims(*cfg_.midi_inject.desc), true,
                                     cfg_.midi.pos_max);
    }

    for (int i = 0; i < cfg_.midi.layers; ++i)
        midi_tf_.push_back(init_block("midi.tf." + std::to_string(i), dm, cfg_.midi.d_ff,
                                      cfg_.moe.midi && i == cfg_.midi.layers - 1));
    if (cfg_.midi_inject.mech == Mechanism::Film) {
        const int k = descriptor_dims(*cfg_.midi_inject.desc);
        for (int i = 0; i < cfg_.midi.layers; ++i) {
            FilmHead f;
            f.l1 = init_linear("film.midi." + std::to_string(i) + ".l1", cfg_.film_hidden, k);
            f.l2 = init_linear("film.midi." + std::to_string(i) + ".l2", 2 * dm, cfg_.film_hidden,
                               /*zero=*/true);
            midi_film_.push_back(f);
        }
    }
    midi_out_ln_ = init_norm("midi.out_ln", dm);
    midi_head_ = init_head("midi.head", dm, dm, cfg_.embed_dim);
    add_buffer("midi.head.bn1", &midi_head_.bn1_buf);
    add_buffer("midi.head.bn2", &midi_head_.bn2_buf);

    if (cfg_.t3.enabled) {
        ThirdTower t;
        const int k = descriptor_dims(cfg_.t3.desc);
        t.in_proj = init_linear("t3.in_proj", cfg_.t3.d_model, k);
        for (int i = 0; i < cfg_.t3.layers; ++i)
            t.blocks.push_back(
                init_block("t3.tf." + std::to_string(i), cfg_.t3.d_model, cfg_.t3.d_ff, false));
        t.out_proj = init_linear("t3.out_proj", cfg_.embed_dim, cfg_.t3.d_model);
        t3_ = std::move(t);
    }

    require(audio_frames() <= cfg_.audio.pos_max,
            "model: audio position table too small for segment length");
}

TensorPtr Model::add_param(const std::string& name, TensorPtr t) {
    t->requires_grad = true;
    param_list_.push_back(t);
    named_params_.push_back({name, t});
    return t;
}

void Model::add_buffer(const std::string& name, BatchNormBuffers* buf) {
    buffers_.push_back({name, buf});
}

int Model::audio_frames() const {
    int t = segment_samples_;
    for (const auto& g : kCnnGeom) t = conv1d_out_len(t, g.kernel, g.stride, g.padding);
    return t;
}

int Model::descriptor_frames() const { return segment_samples_ / spectral_.hop + 1; }

ItemDescriptors Model::compute_descriptors(const CorpusItem& item) const {
    ItemDescriptors out;
    auto compute = [&](DescriptorKind kind) -> DescriptorTensor {
        switch (kind) {
            case DescriptorKind::A4: return a4_descriptor(item.audio, spectral_);
            case DescriptorKind::A7: return a7_descriptor(item.audio, spectral_);
            case DescriptorKind::A8: return a8_descriptor(item.audio, spectral_);
            case DescriptorKind::A9: return a9_descriptor(item.audio, spectral_);
            case DescriptorKind::D4: {
                // D4 over valid events only; padded rows stay zero
                std::vector<int> pitches;
                for (int i = 0; i < item.midi.size(); ++i)
                    if (item.midi.is_valid(i)) pitches.push_back(item.midi.events[i].pitch);
                DescriptorTensor d;
                d.kind = DescriptorKind::D4;
                d.dims = 4;
                d.frames = item.midi.size();
                d.values.assign(static_cast<std::size_t>(d.frames) * 4, 0.0);
                if (!pitches.empty()) {
                    auto rows = d4_rows(pitches);
                    int vi = 0;
                    for (int i = 0; i < item.midi.size(); ++i) {
                        if (!item.midi.is_valid(i)) continue;
                        for (int j = 0; j < 4; ++j)
                            d.at(i, j) = rows[static_cast<std::size_t>(vi) * 4 + j];
                        ++vi;
                    }
                }
                return d;
            }
        }
        throw std::logic_error("unreachable descriptor kind");
    };
    if (cfg_.audio_inject.mech != Mechanism::None) out.audio = compute(*cfg_.audio_inject.desc);
    if (cfg_.midi_inject.mech != Mechanism::None) out.midi = compute(*cfg_.midi_inject.desc);
    if (cfg_.t3.enabled) out.t3 = compute(cfg_.t3.desc);
    return out;
}

TensorPtr Model::transformer_stack(TensorPtr x, std::vector<TransformerBlock>& blocks, int heads,
                                   const std::vector<double>* key_mask, bool train, Rng* rng,
                                   std::vector<TensorPtr>* taps, TensorPtr* aux,
                                   std::vector<FilmHead>* film, const TensorPtr& film_desc) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        auto& blk = blocks[i];
        auto n1 = layer_norm(x, blk.ln1.gain, blk.ln1.bias);
        auto attn = multihead_attention(n1, n1, blk.attn, heads, key_mask);
        if (cfg_.dropout > 0.0 && rng) attn = dropout(attn, cfg_.dropout, *rng, train);
        x = add(x, attn);
        auto n2 = layer_norm(x, blk.ln2.gain, blk.ln2.bias);
        TensorPtr ff;
        if (blk.use_moe) {
            auto mo = moe_ffn(n2, blk.moe);
            ff = mo.y;
            if (aux) *aux = *aux ? add(*aux, mo.balance_loss) : mo.balance_loss;
        } else {
            ff = linear(gelu(linear(n2, blk.ff1.w, blk.ff1.b)), blk.ff2.w, blk.ff2.b);
        }
        if (cfg_.dropout > 0.0 && rng) ff = dropout(ff, cfg_.dropout, *rng, train);
        x = add(x, ff);
        if (film && !film->empty()) x = film_modulate(x, film_desc, (*film)[i]);
        if (taps) taps->push_back(x);
    }
    return x;
}

namespace {

TensorPtr descriptor_to_tensor(const DescriptorTensor& d) {
    return make_tensor(d.values, {d.frames, d.dims}, false);
}

TensorPtr head_forward(ProjectionHead& h, const TensorPtr& x, bool train) {
    auto a = relu(batch_norm(linear(x, h.l1.w, h.l1.b), h.bn1.gain, h.bn1.bias, h.bn1_buf, train));
    auto b = relu(batch_norm(linear(a, h.l2.w, h.l2.b), h.bn2.gain, h.bn2.bias, h.bn2_buf, train));
    return linear(b, h.l3.w, h.l3.b);
}

} // namespace

EncodeResult Model::encode_audio(const AudioSegment& audio, const DescriptorTensor* descriptor,
                                 bool train, Rng* dropout_rng) {
    const bool needs_desc = cfg_.audio_inject.mech != Mechanism::None;
    if (needs_desc && !descriptor)
        throw std::invalid_argument("encode_audio: arm " + cfg_.name + " needs a " +
                                    descriptor_kind_name(*cfg_.audio_inject.desc) +
                                    " descriptor");
    if (!needs_desc && descriptor)
        throw std::invalid_argument("encode_audio: arm " + cfg_.name +
                                    " takes no audio-side descriptor");
    if (needs_desc && descriptor->dims != descriptor_dims(*cfg_.audio_inject.desc))
        throw std::invalid_argument(
            "encode_audio: descriptor dims " + std::to_string(descriptor->dims) + ", expected " +
            std::to_string(descriptor_dims(*cfg_.audio_inject.desc)));

    auto x = make_tensor(audio.samples, {static_cast<int>(audio.samples.size()), 1}, false);
    for (auto& c : cnn_)
        x = gelu(group_norm(conv1d(x, c.w, c.b, c.stride, c.padding), c.groups, c.gn.gain,
                            c.gn.bias));
    const int t_f = x->shape[0];

    EncodeResult res;
    TensorPtr film_desc;
    bool reverse = false;
    if (cfg_.audio_inject.mech == Mechanism::Concat) {
        DescriptorTensor aligned = *descriptor;
        aligned.values = interpolate_rows(descriptor->values, descriptor->frames,
                                          descriptor->dims, t_f);
        aligned.frames = t_f;
        x = inject_concat(x, descriptor_to_tensor(aligned), *audio_concat_);
    } else if (cfg_.audio_inject.mech == Mechanism::CrossAttention) {
        x = inject_xattn(x, descriptor_to_tensor(*descriptor), *audio_xattn_, cfg_.audio.heads);
    } else if (cfg_.audio_inject.mech == Mechanism::ReverseCrossAttention) {
        reverse = true;
        auto f_pos = add(x, slice_rows(audio_pos_, 0, t_f));
        x = inject_reverse_xattn(descriptor_to_tensor(*descriptor), f_pos, *audio_xattn_,
                                 cfg_.audio.heads);
    } else if (cfg_.audio_inject.mech == Mechanism::Film) {
        film_desc = descriptor_to_tensor(*descriptor);
    }

    if (!reverse) x = add(x, slice_rows(audio_pos_, 0, t_f));
    x = transformer_stack(x, audio_tf_, cfg_.audio.heads, nullptr, train, dropout_rng, &res.taps,
                          &res.aux, audio_film_.empty() ? nullptr : &audio_film_, film_desc);
    res.pooled = mean_pool_rows(x);
    return res;
}

EncodeResult Model::encode_midi(const MidiSegment& segment, const DescriptorTensor* descriptor,
                                bool train, Rng* dropout_rng) {
    const bool needs_desc = cfg_.midi_inject.mech != Mechanism::None;
    if (needs_desc && !descriptor)
        throw std::invalid_argument("encode_midi: arm " + cfg_.name + " needs a " +
                                    descriptor_kind_name(*cfg_.midi_inject.desc) + " descriptor");
    if (!needs_desc && descriptor)
        throw std::invalid_argument("encode_midi: arm " + cfg_.name +
                                    " takes no midi-side descriptor");
    require(!segment.empty(), "encode_midi: empty segment");
    require(segment.valid_count() > 0, "encode_midi: all events masked out");

    const int n = segment.size();
    std::vector<int> pitch_idx(static_cast<std::size_t>(n)), vel_idx(static_cast<std::size_t>(n)),
        dur_idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& e = segment.events[static_cast<std::size_t>(i)];
        pitch_idx[static_cast<std::size_t>(i)] = e.pitch;
        vel_idx[static_cast<std::size_t>(i)] = e.velocity;
        dur_idx[static_cast<std::size_t>(i)] = bucket_duration(e.duration_s);
    }
    std::vector<double> valid(static_cast<std::size_t>(n), 1.0);
    std::vector<double> key_mask(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        if (!segment.is_valid(i)) {
            valid[static_cast<std::size_t>(i)] = 0.0;
            key_mask[static_cast<std::size_t>(i)] = -1e30;
        }

    auto emb = concat_cols(concat_cols(embedding(pitch_emb_, pitch_idx),
                                       embedding(vel_emb_, vel_idx)),
                           embedding(dur_emb_, dur_idx));
    auto x = layer_norm(linear(emb, midi_in_proj_.w, midi_in_proj_.b), midi_in_ln_.gain,
                        midi_in_ln_.bias);
    require(n <= cfg_.midi.pos_max, "encode_midi: segment longer than position table");
    auto pos = sinusoidal_positions(n, cfg_.midi.d_model);

    EncodeResult res;
    TensorPtr film_desc;
    bool reverse = false;
    std::vector<double> pool_mask = valid;
    if (cfg_.midi_inject.mech == Mechanism::Concat) {
        DescriptorTensor aligned = *descriptor;
        if (descriptor->frames != n) {
            aligned.values =
                interpolate_rows(descriptor->values, descriptor->frames, descriptor->dims, n);
            aligned.frames = n;
        }
        x = inject_concat(x, descriptor_to_tensor(aligned), *midi_concat_);
    } else if (cfg_.midi_inject.mech == Mechanism::CrossAttention) {
        x = inject_xattn(x, descriptor_to_tensor(*descriptor), *midi_xattn_, cfg_.midi.heads);
    } else if (cfg_.midi_inject.mech == Mechanism::ReverseCrossAttention) {
        reverse = true;
        auto f_pos = add(x, pos);
        x = inject_reverse_xattn(descriptor_to_tensor(*descriptor), f_pos, *midi_xattn_,
                                 cfg_.midi.heads, &key_mask);
        if (descriptor->frames != n) pool_mask.assign(static_cast<std::size_t>(descriptor->frames), 1.0);
    } else if (cfg_.midi_inject.mech == Mechanism::Film) {
        film_desc = descriptor_to_tensor(*descriptor);
    }

    if (!reverse) x = add(x, pos);
    const std::vector<double>* stack_mask = reverse
                                                ? (descriptor->frames == n ? &key_mask : nullptr)
                                                : &key_mask;
    x = transformer_stack(x, midi_tf_, cfg_.midi.heads, stack_mask, train, dropout_rng, &res.taps,
                          &res.aux, midi_film_.empty() ? nullptr : &midi_film_, film_desc);
    auto pooled = masked_mean_pool(x, pool_mask);
    auto normed = layer_norm(reshape(pooled, {1, cfg_.midi.d_model}), midi_out_ln_.gain,
                             midi_out_ln_.bias);
    res.pooled = reshape(normed, {cfg_.midi.d_model});
    return res;
}

EncodeResult Model::encode_third_tower(const DescriptorTensor& descriptor, bool train,
                                       Rng* dropout_rng) {
    require(t3_.has_value(), "encode_third_tower: arm has no third tower");
    auto x = linear(descriptor_to_tensor(descriptor), t3_->in_proj.w, t3_->in_proj.b);
    x = add(x, sinusoidal_positions(descriptor.frames, cfg_.t3.d_model));
    EncodeResult res;
    x = transformer_stack(x, t3_->blocks, cfg_.t3.heads, nullptr, train, dropout_rng, &res.taps,
                          nullptr, nullptr, nullptr);
    res.pooled = mean_pool_rows(x);
    return res;
}

TensorPtr Model::project_audio(const TensorPtr& pooled_batch, bool train) {
    return head_forward(audio_head_, pooled_batch, train);
}
TensorPtr Model::project_midi(const TensorPtr& pooled_batch, bool train) {
    return head_forward(midi_head_, pooled_batch, train);
}
TensorPtr Model::project_t3(const TensorPtr& pooled_batch, bool /*train*/) {
    require(t3_.has_value(), "project_t3: arm has no third tower");
    return linear(pooled_batch, t3_->out_proj.w, t3_->out_proj.b);
}

std::vector<double> Model::embed_audio_eval(const AudioSegment& audio,
                                            const DescriptorTensor* descriptor) {
    NoGradGuard ng;
    auto enc = encode_audio(audio, descriptor, false);
    auto z = project_audio(reshape(enc.pooled, {1, cfg_.audio.d_model}), false);
    return z->data;
}

std::vector<double> Model::embed_midi_eval(const MidiSegment& segment,
                                           const DescriptorTensor* descriptor) {
    NoGradGuard ng;
    auto enc = encode_midi(segment, descriptor, false);
    auto z = project_midi(reshape(enc.pooled, {1, cfg_.midi.d_model}), false);
    return z->data;
}

namespace {

std::vector<std::vector<double>> pool_taps(const std::vector<TensorPtr>& taps) {
    std::vector<std::vector<double>> out;
    for (const auto& t : taps) {
        const int rows = t->shape[0], cols = t->shape[1];
        std::vector<double> m(static_cast<std::size_t>(cols), 0.0);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j)
                m[static_cast<std::size_t>(j)] += t->data[static_cast<std::size_t>(i) * cols + j];
        for (auto& v : m) v /= rows;
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace

std::vector<std::vector<double>> Model::audio_layer_taps_eval(const AudioSegment& audio,
                                                              const DescriptorTensor* descriptor) {
    NoGradGuard ng;
    return pool_taps(encode_audio(audio, descriptor, false).taps);
}

std::vector<std::vector<double>> Model::midi_layer_taps_eval(const MidiSegment& segment,
                                                             const DescriptorTensor* descriptor) {
    NoGradGuard ng;
    return pool_taps(encode_midi(segment, descriptor, false).taps);
}

std::map<std::string, long long> Model::param_count_by_component() const {
    auto component_of = [](const std::string& name) -> std::string {
        if (name.rfind("audio.cnn.", 0) == 0) return "audio_cnn";
        if (name.rfind("audio.pos", 0) == 0) return "audio_pos";
        if (name.rfind("audio.tf.", 0) == 0)
            return name.find(".moe.") != std::string::npos ? "moe" : "audio_transformer";
        if (name.rfind("audio.head.", 0) == 0) return "audio_projection";
        if (name.rfind("midi.emb.", 0) == 0) return "midi_embeddings";
        if (name.rfind("midi.tf.", 0) == 0)
            return name.find(".moe.") != std::string::npos ? "moe" : "midi_transformer";
        if (name.rfind("midi.out_ln", 0) == 0) return "midi_transformer";
        if (name.rfind("midi.head.", 0) == 0) return "midi_projection";
        if (name.rfind("inject.audio.", 0) == 0) return "injection_audio";
        if (name.rfind("inject.midi.", 0) == 0) return "injection_midi";
        if (name.rfind("film.", 0) == 0) return "film";
        if (name.rfind("t3.", 0) == 0) return "third_tower";
        return "other";
    };
    std::map<std::string, long long> counts;
    for (const auto& [name, t] : named_params_)
        counts[component_of(name)] += static_cast<long long>(t->size());
    return counts;
}

long long Model::param_count_total() const {
    long long total = 0;
    for (const auto& [name, t] : named_params_) total += static_cast<long long>(t->size());
    return total;
}

void Model::snap_to_f32() {
    for (auto& p : param_list_)
        for (auto& v : p->data) v = static_cast<double>(static_cast<float>(v));
    for (auto& [name, buf] : buffers_) {
        for (auto& v : buf->running_mean) v = static_cast<double>(static_cast<float>(v));
        for (auto& v : buf->running_var) v = static_cast<double>(static_cast<float>(v));
    }
}

Checkpoint Model::to_checkpoint(std::uint64_t config_hash, const std::string& config_json) const {
    Checkpoint ckpt;
    ckpt.config_hash = config_hash;
    ckpt.config_json = config_json;
    for (const auto& [name, t] : named_params_) ckpt.add(name, t->shape, t->data);
    for (const auto& [name, buf] : buffers_) {
        ckpt.add("buffer:" + name + ".mean", {static_cast<int>(buf->running_mean.size())},
                 buf->running_mean);
        ckpt.add("buffer:" + name + ".var", {static_cast<int>(buf->running_var.size())},
                 buf->running_var);
    }
    return ckpt;
}

void Model::load_from_checkpoint(const Checkpoint& ckpt) {
    for (auto& [name, t] : named_params_) {
        const auto* b = ckpt.find(name);
        if (!b) throw std::runtime_error("checkpoint missing parameter " + name);
        if (b->shape != t->shape)
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                                     shape_str(b->shape) + " vs " + shape_str(t->shape));
        for (std::size_t i = 0; i < t->data.size(); ++i)
            t->data[i] = static_cast<double>(b->values[i]);
    }
    for (auto& [name, buf] : buffers_) {
        const auto* bm = ckpt.find("buffer:" + name + ".mean");
        const auto* bv = ckpt.find("buffer:" + name + ".var");
        if (!bm || !bv) throw std::runtime_error("checkpoint missing buffers for " + name);
        buf->running_mean.assign(bm->values.begin(), bm->values.end());
        buf->running_var.assign(bv->values.begin(), bv->values.end());
    }
}

} // namespace xmodal
