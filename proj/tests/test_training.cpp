#include <doctest.h>

#include <cmath>
#include <fstream>

#include "xmodal/training.hpp"

using namespace xmodal;

namespace {

// small-but-real training config; a few seconds per run. The held-out
// quarter is the last composer block (two pieces), so the validation pool
// can satisfy both negative quotas.
TrainConfig quick_config(const std::string& arm, int epochs) {
    TrainConfig c;
    c.arm = arm;
    c.epochs = epochs;
    c.batch_size = 4;
    c.base_lr = 3e-4;
    c.eval_every_epochs = 2;
    c.corpus.n_pieces = 6;
    c.corpus.n_composers = 3;
    c.corpus.segments_per_piece = 6;
    c.val_piece_fraction = 0.25;
    c.pool = PoolSpec{10, 12, 2, 2};
    c.seed = 11;
    c.schedule.warmup_steps = 5;
    c.schedule.ref_epochs = epochs;
    return c;
}

std::string ckpt_bytes(const Checkpoint& c) {
    save_checkpoint(c, "test_train_ckpt.bin");
    std::ifstream f("test_train_ckpt.bin", std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("train/val split holds out whole tail pieces") {
    auto corpus = generate_corpus(quick_config("d0", 1).corpus, 3);
    auto tr = train_item_indices(corpus, 0.25);
    auto va = val_item_indices(corpus, 0.25);
    CHECK(tr.size() + va.size() == corpus.items.size());
    int max_train_piece = -1, min_val_piece = 1 << 20;
    for (int i : tr) max_train_piece = std::max(max_train_piece, corpus.items[static_cast<std::size_t>(i)].piece_id);
    for (int i : va) min_val_piece = std::min(min_val_piece, corpus.items[static_cast<std::size_t>(i)].piece_id);
    CHECK(max_train_piece < min_val_piece);
}

TEST_CASE("zero epochs: checkpoint equals initialization") {
    auto cfg = quick_config("d0", 0);
    auto res = train(cfg);
    Model init(cfg.resolved_arm(), cfg.corpus.spectral, cfg.corpus.sample_rate,
               cfg.segment_samples(), sub_seed(cfg.seed, "init"));
    auto init_ckpt = init.to_checkpoint(config_hash(cfg), train_config_to_json(cfg));
    REQUIRE(res.last.blocks.size() == init_ckpt.blocks.size());
    for (std::size_t i = 0; i < res.last.blocks.size(); ++i) {
        CHECK(res.last.blocks[i].name == init_ckpt.blocks[i].name);
        CHECK(res.last.blocks[i].values == init_ckpt.blocks[i].values);
    }
    CHECK(res.history.epochs.empty());
}

TEST_CASE("identical config and seed give bit-identical histories and checkpoints") {
    auto cfg = quick_config("d4", 3);
    auto r1 = train(cfg);
    auto r2 = train(cfg);
    CHECK(r1.history.to_jsonl() == r2.history.to_jsonl());
    CHECK(ckpt_bytes(r1.last) == ckpt_bytes(r2.last));
    CHECK(ckpt_bytes(r1.best) == ckpt_bytes(r2.best));

    // corpora bit-identical too
    REQUIRE(r1.corpus.items.size() == r2.corpus.items.size());
    for (std::size_t i = 0; i < r1.corpus.items.size(); ++i)
        CHECK(r1.corpus.items[i].audio.samples == r2.corpus.items[i].audio.samples);

    // a different seed changes the outcome
    auto cfg2 = cfg;
    cfg2.seed = 12;
    auto r3 = train(cfg2);
    CHECK(ckpt_bytes(r3.last) != ckpt_bytes(r1.last));
}

TEST_CASE("training loss decreases over the first epochs of a toy run") {
    auto cfg = quick_config("d0", 6);
    auto res = train(cfg);
    REQUIRE(static_cast<int>(res.history.epochs.size()) == 6);
    // strictly decreasing total over the first 5 epochs
    for (int e = 1; e < 5; ++e)
        CHECK(res.history.epochs[static_cast<std::size_t>(e)].total <
              res.history.epochs[static_cast<std::size_t>(e - 1)].total);
    CHECK_FALSE(res.history.aborted);
    CHECK(res.history.best_s >= 0.0);
}

TEST_CASE("history lr_mult matches lr_at for the recorded step") {
    auto cfg = quick_config("d0", 3);
    auto res = train(cfg);
    const int spe = static_cast<int>(train_item_indices(res.corpus, cfg.val_piece_fraction).size()) /
                    cfg.batch_size;
    for (int e = 0; e < 3; ++e) {
        const long long last_step = static_cast<long long>(e + 1) * spe - 1;
        CHECK(res.history.epochs[static_cast<std::size_t>(e)].lr_mult ==
              doctest::Approx(lr_at(cfg.schedule, last_step, spe, cfg.epochs)));
    }
}

TEST_CASE("checkpoint round-trip through training: load twice, embeddings identical") {
    auto cfg = quick_config("d4a4", 2);
    auto res = train(cfg);
    save_checkpoint(res.best, "test_roundtrip.ckpt");
    auto loaded = load_checkpoint("test_roundtrip.ckpt");

    Model m1(cfg.resolved_arm(), cfg.corpus.spectral, cfg.corpus.sample_rate,
             cfg.segment_samples(), 1);
    Model m2(cfg.resolved_arm(), cfg.corpus.spectral, cfg.corpus.sample_rate,
             cfg.segment_samples(), 2);
    m1.load_from_checkpoint(loaded);
    m2.load_from_checkpoint(loaded);
    const auto& item = res.corpus.items[0];
    auto d1 = m1.compute_descriptors(item);
    auto d2 = m2.compute_descriptors(item);
    CHECK(m1.embed_audio_eval(item.audio, d1.audio ? &*d1.audio : nullptr) ==
          m2.embed_audio_eval(item.audio, d2.audio ? &*d2.audio : nullptr));
    CHECK(m1.embed_midi_eval(item.midi, d1.midi ? &*d1.midi : nullptr) ==
          m2.embed_midi_eval(item.midi, d2.midi ? &*d2.midi : nullptr));
}

TEST_CASE("a non-finite loss aborts with the last-good checkpoint retained") {
    auto cfg = quick_config("d0", 4);
    cfg.base_lr = 1e18; // guaranteed blow-up
    cfg.schedule.warmup_steps = 0;
    auto res = train(cfg);
    CHECK(res.history.aborted);
    CHECK_FALSE(res.history.abort_reason.empty());
    CHECK_FALSE(res.last.blocks.empty());
}

TEST_CASE("config schema: grad clipping has no field and unknown keys are rejected") {
    CHECK_THROWS_WITH_AS(
        train_config_from_json(R"({"schema_version":1,"arm":"d0","grad_clip":1.0})"),
        doctest::Contains("grad_clip"), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(R"({"arm":"d0"})"), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(R"({"schema_version":1,"batch_size":1})"),
                    std::invalid_argument);
    auto cfg = train_config_from_json(R"({"schema_version":1,"arm":"a4r","epochs":7})");
    CHECK(cfg.arm == "a4r");
    CHECK(cfg.epochs == 7);
    // round trip
    auto again = train_config_from_json(train_config_to_json(cfg));
    CHECK(config_hash(again) == config_hash(cfg));
}

TEST_CASE("summary statistics: hand-checked values") {
    double mean = 0, sd = 0, lo = 0, hi = 0;
    summary_stats({1, 2, 3, 4, 5}, mean, sd, lo, hi);
    CHECK(mean == doctest::Approx(3.0));
    CHECK(sd == doctest::Approx(1.5811).epsilon(1e-3));
    CHECK(lo == 1.0);
    CHECK(hi == 5.0);

    summary_stats({2.5, 2.5, 2.5}, mean, sd, lo, hi);
    CHECK(sd == doctest::Approx(0.0));
}

TEST_CASE("multi_seed runs per-seed training and reports sample statistics") {
    auto cfg = quick_config("d0", 1);
    cfg.eval_every_epochs = 1;
    auto summary = multi_seed(cfg, {1, 2});
    CHECK(summary.best_s.size() == 2);
    CHECK(summary.min <= summary.mean);
    CHECK(summary.mean <= summary.max);
    CHECK_THROWS_AS(multi_seed(cfg, {1}), std::invalid_argument);
}

TEST_CASE("preloaded corpus from disk gives the same training result") {
    auto cfg = quick_config("d0", 2);
    auto direct = train(cfg);
    auto corpus = generate_corpus(cfg.corpus, sub_seed(cfg.seed, "corpus"));
    save_corpus(corpus, "test_train_corpus");
    auto loaded = load_corpus("test_train_corpus");
    auto via_disk = train(cfg, &loaded);
    CHECK(direct.history.to_jsonl() == via_disk.history.to_jsonl());
    CHECK(ckpt_bytes(direct.last) == ckpt_bytes(via_disk.last));
}
