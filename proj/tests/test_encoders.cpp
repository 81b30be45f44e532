#include <doctest.h>

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/midi.hpp"

using namespace xmodal;

namespace {

// small corpus shared across encoder tests
const Corpus& tiny_corpus() {
    static const Corpus c = [] {
        CorpusConfig cfg;
        cfg.n_pieces = 4;
        cfg.n_composers = 2;
        cfg.segments_per_piece = 4;
        return generate_corpus(cfg, 99);
    }();
    return c;
}

Model make_model(const std::string& arm, std::uint64_t seed = 1) {
    const auto& cfg = tiny_corpus().config;
    return Model(make_toy_arm(arm), cfg.spectral, cfg.sample_rate, 2000, seed);
}

} // namespace

TEST_CASE("attention_cost_ratio: canonical speedup and trivial cases") {
    CHECK(attention_cost_ratio(2400, 188) == doctest::Approx(5760000.0 / 35344.0).epsilon(1e-12));
    CHECK(attention_cost_ratio(2400, 188) >= 162.9);
    CHECK(attention_cost_ratio(2400, 188) <= 163.0);
    CHECK(attention_cost_ratio(7, 7) == doctest::Approx(1.0));
    CHECK(attention_cost_ratio(100, 10) == doctest::Approx(100.0));
    CHECK_THROWS_AS(attention_cost_ratio(0, 1), std::invalid_argument);
}

TEST_CASE("every catalog arm constructs and completes forward + backward at toy scale") {
    const auto& corpus = tiny_corpus();
    for (const auto& name : arm_names()) {
        CAPTURE(name);
        Model m = make_model(name);
        std::vector<TensorPtr> pooled_a, pooled_m, pooled_d;
        TensorPtr aux;
        for (int i = 0; i < 2; ++i) {
            const auto& item = corpus.items[static_cast<std::size_t>(i * 5)];
            auto descs = m.compute_descriptors(item);
            auto ea = m.encode_audio(item.audio, descs.audio ? &*descs.audio : nullptr, true);
            auto em = m.encode_midi(item.midi, descs.midi ? &*descs.midi : nullptr, true);
            pooled_a.push_back(ea.pooled);
            pooled_m.push_back(em.pooled);
            if (ea.aux) aux = aux ? add(aux, ea.aux) : ea.aux;
            if (em.aux) aux = aux ? add(aux, em.aux) : em.aux;
            if (descs.t3) pooled_d.push_back(m.encode_third_tower(*descs.t3, true).pooled);
            // taps exist for every transformer layer, shaped tokens x d_model
            CHECK(static_cast<int>(ea.taps.size()) == m.config().audio.layers);
            CHECK(static_cast<int>(em.taps.size()) == m.config().midi.layers);
            for (const auto& t : ea.taps) CHECK(t->shape[1] == m.config().audio.d_model);
        }
        auto za = m.project_audio(stack_rows(pooled_a), true);
        auto zm = m.project_midi(stack_rows(pooled_m), true);
        CHECK(za->shape == Shape{2, m.config().embed_dim});
        LossBreakdown loss;
        if (m.config().t3.enabled) {
            auto zd = m.project_t3(stack_rows(pooled_d), true);
            loss = third_tower_loss(za, zm, zd, m.config().t3.alpha, m.config().t3.beta, {},
                                    m.config().t3.include_main);
        } else {
            loss = vicreg(za, zm);
        }
        if (aux) loss = with_auxiliary(loss, scale(aux, 0.01));
        for (auto& p : m.parameters()) p->zero_grad();
        backward(loss.total);
        CHECK(std::isfinite(loss.total_value()));
        // at least one parameter received a non-zero gradient
        double gsum = 0;
        for (auto& p : m.parameters())
            for (double g : p->grad) gsum += std::fabs(g);
        CHECK(gsum > 0.0);
    }
}

TEST_CASE("unknown arm names are rejected") {
    CHECK_THROWS_AS(make_toy_arm("a5"), std::invalid_argument);
    CHECK(is_known_arm("D4A4"));
    CHECK_FALSE(is_known_arm("banana"));
}

TEST_CASE("d0 output dims follow the shape contract; descriptors are rejected") {
    const auto& item = tiny_corpus().items[0];
    Model m = make_model("d0");
    auto enc = m.encode_audio(item.audio, nullptr, false);
    CHECK(enc.pooled->shape == Shape{m.config().audio.d_model});
    auto a4 = a4_descriptor(item.audio, m.spectral());
    CHECK_THROWS_AS(m.encode_audio(item.audio, &a4, false), std::invalid_argument);
    Model ma4 = make_model("a4");
    CHECK_THROWS_AS(ma4.encode_audio(item.audio, nullptr, false), std::invalid_argument);
    // descriptor dim mismatch reported
    auto d4 = d4_descriptor(item.midi);
    CHECK_THROWS_AS(ma4.encode_audio(item.audio, &d4, false), std::invalid_argument);
}

TEST_CASE("reverse cross-attention emits exactly T_D downstream tokens") {
    const auto& item = tiny_corpus().items[1];
    Model m = make_model("a4r");
    auto descs = m.compute_descriptors(item);
    REQUIRE(descs.audio.has_value());
    auto enc = m.encode_audio(item.audio, &*descs.audio, false);
    // sequence length equals the descriptor frame count, not the CNN frame count
    CHECK(enc.taps[0]->shape[0] == descs.audio->frames);
    CHECK(descs.audio->frames == m.descriptor_frames());
    CHECK(enc.taps[0]->shape[0] != m.audio_frames());

    Model mc = make_model("a4");
    auto descs_c = mc.compute_descriptors(item);
    auto enc2 = mc.encode_audio(item.audio, &*descs_c.audio, false);
    CHECK(enc2.taps[0]->shape[0] == mc.audio_frames());
}

TEST_CASE("inject_xattn with a single descriptor token reproduces its value row") {
    // T_D = 1: softmax over one key gives weight 1, so the pre-residual
    // attention output equals V of that token for every query position
    Rng rng(3);
    auto q = randn({5, 8}, rng);
    auto kv = randn({1, 8}, rng);
    auto attn = scaled_dot_attention(q, kv, kv);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 8; ++j)
            CHECK(attn->data[static_cast<std::size_t>(i) * 8 + j] ==
                  doctest::Approx(kv->data[static_cast<std::size_t>(j)]));
}

TEST_CASE("reverse xattn on uniform features yields identical output rows") {
    // all feature rows equal -> any convex combination of values is the same
    Rng rng(4);
    auto one_row = randn({1, 8}, rng);
    auto features = zeros({6, 8});
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 8; ++j)
            features->data[static_cast<std::size_t>(i) * 8 + j] = one_row->data[static_cast<std::size_t>(j)];
    auto queries = randn({3, 8}, rng);
    auto attn = scaled_dot_attention(queries, features, features);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 8; ++j)
            CHECK(attn->data[static_cast<std::size_t>(i) * 8 + j] ==
                  doctest::Approx(attn->data[static_cast<std::size_t>(j)]).epsilon(1e-9));
}

TEST_CASE("inject_concat with identity-on-h block and zero descriptor is LayerNorm(h)") {
    const int d = 6, k = 3, t = 4;
    ConcatInjection inj;
    auto w = zeros({d, d + k}, true);
    for (int i = 0; i < d; ++i) w->data[static_cast<std::size_t>(i) * (d + k) + i] = 1.0;
    inj.proj = {w, zeros({d}, true)};
    inj.ln = {full({d}, 1.0, true), zeros({d}, true)};
    Rng rng(5);
    auto h = randn({t, d}, rng);
    auto desc = zeros({t, k});
    auto out = inject_concat(h, desc, inj);
    auto ref = layer_norm(h, inj.ln.gain, inj.ln.bias);
    for (std::size_t i = 0; i < out->data.size(); ++i)
        CHECK(out->data[i] == doctest::Approx(ref->data[i]).epsilon(1e-12));
}

TEST_CASE("film: zero-initialized output layer is the identity; beta shifts uniformly") {
    const int d = 6, k = 4, hidden = 8;
    Rng rng(6);
    FilmHead head;
    head.l1 = {randn({hidden, k}, rng, 0.3, true), zeros({hidden}, true)};
    head.l2 = {zeros({2 * d, hidden}, true), zeros({2 * d}, true)};
    auto features = randn({5, d}, rng);
    auto desc = randn({7, k}, rng);
    auto out = film_modulate(features, desc, head);
    for (std::size_t i = 0; i < out->data.size(); ++i)
        CHECK(out->data[i] == doctest::Approx(features->data[i]).epsilon(1e-12));

    // non-zero beta bias shifts every time step by the same offset
    head.l2.b->data[static_cast<std::size_t>(d)] = 0.5; // beta dim 0
    auto out2 = film_modulate(features, desc, head);
    for (int i = 0; i < 5; ++i)
        CHECK(out2->data[static_cast<std::size_t>(i) * d] -
                  features->data[static_cast<std::size_t>(i) * d] ==
              doctest::Approx(0.5));
}

TEST_CASE("film: gradient flows to the descriptor through gamma and beta") {
    const int d = 4, k = 3, hidden = 6;
    Rng rng(7);
    FilmHead head;
    head.l1 = {randn({hidden, k}, rng, 0.4, true), randn({hidden}, rng, 0.1, true)};
    head.l2 = {randn({2 * d, hidden}, rng, 0.4, true), randn({2 * d}, rng, 0.1, true)};
    auto features = randn({5, d}, rng);
    auto desc = randn({6, k}, rng);
    desc->requires_grad = true;
    auto make_loss = [&] { return mean_all(square(film_modulate(features, desc, head))); };
    CHECK(oracle::max_rel_fd_error({desc}, make_loss) < 1e-4);
}

TEST_CASE("moe_ffn: top-k gate support, dense degeneracy, identical experts") {
    const int d = 6, ff = 8, t = 5;
    auto build_moe = [&](int n_experts, int top_k, bool identical) {
        Rng rng(8);
        MoeLayer layer;
        layer.top_k = top_k;
        layer.gate = {randn({n_experts, d}, rng, 0.5, true), zeros({n_experts}, true)};
        LinearLayer first = {randn({ff, d}, rng, 0.4, true), randn({ff}, rng, 0.1, true)};
        LinearLayer second = {randn({d, ff}, rng, 0.4, true), randn({d}, rng, 0.1, true)};
        for (int e = 0; e < n_experts; ++e) {
            if (identical) {
                layer.experts.push_back({first, second});
            } else {
                layer.experts.push_back(
                    {{randn({ff, d}, rng, 0.4, true), randn({ff}, rng, 0.1, true)},
                     {randn({d, ff}, rng, 0.4, true), randn({d}, rng, 0.1, true)}});
            }
        }
        return layer;
    };
    Rng xr(9);
    auto x = randn({t, d}, xr);

    // identical experts: output must not depend on which experts the gate picks
    auto same = build_moe(4, 2, true);
    auto out_same = moe_ffn(x, same);
    auto ffn_ref = linear(gelu(linear(x, same.experts[0].first.w, same.experts[0].first.b)),
                          same.experts[0].second.w, same.experts[0].second.b);
    for (std::size_t i = 0; i < out_same.y->data.size(); ++i)
        CHECK(out_same.y->data[i] == doctest::Approx(ffn_ref->data[i]).epsilon(1e-9));

    // k = E degenerates to the dense softmax mixture
    auto dense = build_moe(3, 3, false);
    auto out_dense = moe_ffn(x, dense);
    auto logits = linear(x, dense.gate.w, dense.gate.b);
    auto probs = softmax_rows(logits);
    TensorPtr ref;
    for (int e = 0; e < 3; ++e) {
        auto fe = linear(gelu(linear(x, dense.experts[static_cast<std::size_t>(e)].first.w,
                                     dense.experts[static_cast<std::size_t>(e)].first.b)),
                         dense.experts[static_cast<std::size_t>(e)].second.w,
                         dense.experts[static_cast<std::size_t>(e)].second.b);
        auto contrib = mul_col_broadcast(fe, slice_cols(probs, e, e + 1));
        ref = ref ? add(ref, contrib) : contrib;
    }
    for (std::size_t i = 0; i < out_dense.y->data.size(); ++i)
        CHECK(out_dense.y->data[i] == doctest::Approx(ref->data[i]).epsilon(1e-9));

    CHECK(out_dense.balance_loss != nullptr);
    auto bad = build_moe(4, 5, false);
    CHECK_THROWS_AS(moe_ffn(x, bad), std::invalid_argument);
}

TEST_CASE("third tower encodes to the shared dimension deterministically") {
    const auto& item = tiny_corpus().items[2];
    Model m = make_model("t3-wt");
    auto descs = m.compute_descriptors(item);
    REQUIRE(descs.t3.has_value());
    auto e1 = m.encode_third_tower(*descs.t3, false);
    auto e2 = m.encode_third_tower(*descs.t3, false);
    CHECK(e1.pooled->data == e2.pooled->data);
    auto zd = m.project_t3(reshape(e1.pooled, {1, m.config().t3.d_model}), false);
    CHECK(zd->shape == Shape{1, m.config().embed_dim});
    CHECK(m.config().t3.alpha == doctest::Approx(0.5));
    CHECK(m.config().t3.beta == doctest::Approx(0.5));
}

TEST_CASE("midi embedding splits d_model as d/2 + d/4 + d/4") {
    Model m = make_model("d0");
    const auto& counts = m.named_parameters();
    long long pitch = 0, vel = 0, dur = 0;
    for (const auto& [name, t] : counts) {
        if (name == "midi.emb.pitch") pitch = static_cast<long long>(t->size());
        if (name == "midi.emb.vel") vel = static_cast<long long>(t->size());
        if (name == "midi.emb.dur") dur = static_cast<long long>(t->size());
    }
    const int d = m.config().midi.d_model;
    CHECK(pitch == 128 * (d / 2));
    CHECK(vel == 128 * (d / 4));
    CHECK(dur == 32 * (d / 4));
}

TEST_CASE("masked pooling: padded events never affect the output") {
    const auto& item = tiny_corpus().items[3];
    Model m = make_model("d4a4");
    auto descs = m.compute_descriptors(item);
    auto base = m.encode_midi(item.midi, &*descs.midi, false);

    // pad with garbage events masked out
    CorpusItem padded_item = item;
    MidiSegment& padded = padded_item.midi;
    padded.valid.assign(static_cast<std::size_t>(padded.size()), 1);
    for (int i = 0; i < 5; ++i) {
        NoteEvent junk;
        junk.pitch = 13 + 7 * i;
        junk.velocity = 99;
        junk.duration_s = 0.2;
        junk.onset_s = 0.4;
        padded.events.push_back(junk);
        padded.valid.push_back(0);
    }
    auto descs_padded = m.compute_descriptors(padded_item);
    auto enc_padded = m.encode_midi(padded, &*descs_padded.midi, false);
    for (std::size_t i = 0; i < base.pooled->data.size(); ++i)
        CHECK(enc_padded.pooled->data[i] == doctest::Approx(base.pooled->data[i]).epsilon(1e-9));

    // permuting only the padded tail leaves the output untouched
    std::swap(padded.events[static_cast<std::size_t>(padded.size() - 1)],
              padded.events[static_cast<std::size_t>(padded.size() - 3)]);
    auto descs_perm = m.compute_descriptors(padded_item);
    auto enc_perm = m.encode_midi(padded, &*descs_perm.midi, false);
    CHECK(enc_perm.pooled->data == enc_padded.pooled->data);

    // all-masked input rejected
    MidiSegment all_masked = item.midi;
    all_masked.valid.assign(static_cast<std::size_t>(all_masked.size()), 0);
    CHECK_THROWS_AS(m.encode_midi(all_masked, &*descs.midi, false), std::invalid_argument);
    MidiSegment empty;
    CHECK_THROWS_AS(m.encode_midi(empty, nullptr, false), std::invalid_argument);
}

TEST_CASE("zero-initialized weights make the pooled audio output the positional mean") {
    const auto& item = tiny_corpus().items[0];
    Model m = make_model("a4");
    // zero every linear/conv weight and bias, keep norm gains at one
    for (auto& [name, t] : m.named_parameters()) {
        const bool is_gain = name.size() > 5 && name.substr(name.size() - 5) == ".gain";
        if (is_gain) continue;
        if (name == "audio.pos") continue;
        for (auto& v : t->data) v = 0.0;
    }
    auto descs = m.compute_descriptors(item);
    auto enc = m.encode_audio(item.audio, &*descs.audio, false);
    // expected: mean over rows of the positional table slice
    const int t_f = m.audio_frames();
    const int d = m.config().audio.d_model;
    const TensorPtr pos = [&] {
        for (auto& [name, t] : m.named_parameters())
            if (name == "audio.pos") return t;
        return TensorPtr{};
    }();
    for (int j = 0; j < d; ++j) {
        double mean = 0;
        for (int i = 0; i < t_f; ++i) mean += pos->data[static_cast<std::size_t>(i) * d + j];
        mean /= t_f;
        CHECK(enc.pooled->data[static_cast<std::size_t>(j)] ==
              doctest::Approx(mean).epsilon(1e-9));
    }
}

TEST_CASE("parameter count formula matches the constructed model on toy arms") {
    for (const auto& name :
         {"d0", "d4a4", "a4r", "d4-a4r", "film-dual", "moe-a4", "t3-wt", "d4a4cm", "a7x"}) {
        Model m = make_model(name);
        const long long from_model = m.param_count_total();
        const long long from_formula =
            param_count_total(m.config(), m.descriptor_frames());
        CAPTURE(name);
        CHECK(from_model == from_formula);
        // per-component buckets agree too
        auto a = m.param_count_by_component();
        auto b = param_count(m.config(), m.descriptor_frames());
        for (const auto& [k, v] : b) {
            CAPTURE(k);
            CHECK(a[k] == v);
        }
    }
}

TEST_CASE("paper-scale parameter totals reproduce the published magnitudes") {
    // 188 STFT frames at the full 24 kHz / nfft 2048 scale
    const long long d0 = param_count_total(make_paper_arm("d0"), 188);
    const long long d4a4 = param_count_total(make_paper_arm("d4a4"), 188);
    const long long a4r = param_count_total(make_paper_arm("a4r"), 188);
    const long long d4a4r = param_count_total(make_paper_arm("d4-a4r"), 188);
    CHECK(std::fabs(d0 / 1e6 - 74.2) / 74.2 < 0.01);
    CHECK(std::fabs(d4a4 / 1e6 - 75.5) / 75.5 < 0.01);
    CHECK(std::fabs(a4r / 1e6 - 78.6) / 78.6 < 0.01);
    CHECK(std::fabs(d4a4r / 1e6 - 78.9) / 78.9 < 0.01);
    // the reverse cross-attention block accounts for ~4.2M of the a4r delta
    auto parts = param_count(make_paper_arm("a4r"), 188);
    CHECK(parts["injection_audio"] / 1e6 == doctest::Approx(4.4).epsilon(0.05));
    // controls keep the architecture: identical counts by construction
    CHECK(param_count_total(make_paper_arm("d4a4"), 188) == d4a4);
}

TEST_CASE("checkpoint round-trip: save, load, forward is bit-identical") {
    const auto& item = tiny_corpus().items[1];
    Model m = make_model("d4a4", 77);
    auto ck = m.to_checkpoint(123, "{}");
    save_checkpoint(ck, "test_ckpt_tmp.bin");
    auto loaded = load_checkpoint("test_ckpt_tmp.bin");
    CHECK(loaded.config_hash == 123);

    Model m1 = make_model("d4a4", 1);
    Model m2 = make_model("d4a4", 2);
    m1.load_from_checkpoint(loaded);
    m2.load_from_checkpoint(loaded);
    auto descs = m1.compute_descriptors(item);
    auto z1 = m1.embed_audio_eval(item.audio, &*descs.audio);
    auto z2 = m2.embed_audio_eval(item.audio, &*descs.audio);
    CHECK(z1 == z2);

    // save(load(save)) produces identical bytes
    Model m3 = make_model("d4a4", 3);
    m3.load_from_checkpoint(loaded);
    save_checkpoint(m3.to_checkpoint(123, "{}"), "test_ckpt_tmp2.bin");
    std::ifstream f1("test_ckpt_tmp.bin", std::ios::binary);
    std::ifstream f2("test_ckpt_tmp2.bin", std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}
