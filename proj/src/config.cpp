#include "xmodal/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "xmodal/rng.hpp"

namespace xmodal {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("config: unknown field \"" + it.key() + "\" in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

std::string descriptor_control_name(DescriptorControl c) {
    switch (c) {
        case DescriptorControl::None: return "none";
        case DescriptorControl::Zero: return "zero";
        case DescriptorControl::Random: return "random";
        case DescriptorControl::Shuffle: return "shuffle";
    }
    return "?";
}

DescriptorControl descriptor_control_from(const std::string& s) {
    if (s == "none") return DescriptorControl::None;
    if (s == "zero") return DescriptorControl::Zero;
    if (s == "random") return DescriptorControl::Random;
    if (s == "shuffle") return DescriptorControl::Shuffle;
    throw std::invalid_argument("unknown descriptor control: " + s);
}

ArmConfig TrainConfig::resolved_arm() const {
    ArmConfig a = make_toy_arm(arm);
    if (has_overrides) {
        a.audio = arm_overrides.audio;
        a.midi = arm_overrides.midi;
        a.embed_dim = arm_overrides.embed_dim;
        a.dropout = arm_overrides.dropout;
        a.film_hidden = arm_overrides.film_hidden;
        a.t3.d_model = arm_overrides.t3.d_model;
        a.t3.heads = arm_overrides.t3.heads;
        a.t3.layers = arm_overrides.t3.layers;
        a.t3.d_ff = arm_overrides.t3.d_ff;
    }
    return a;
}

TrainConfig train_config_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    check_keys(j, {"schema_version", "arm", "seed", "epochs", "batch_size", "base_lr",
                   "weight_decay", "schedule", "eval_every_epochs", "val_piece_fraction",
                   "vicreg", "corpus", "pool", "descriptor_control", "model"},
               "top level");
    if (!j.contains("schema_version"))
        throw std::invalid_argument("config: missing schema_version");
    if (j.at("schema_version").get<int>() != 1)
        throw std::invalid_argument("config: unsupported schema_version");

    TrainConfig c;
    maybe(j, "arm", c.arm);
    if (!is_known_arm(c.arm)) throw std::invalid_argument("config: unknown arm " + c.arm);
    maybe(j, "seed", c.seed);
    maybe(j, "epochs", c.epochs);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "base_lr", c.base_lr);
    maybe(j, "weight_decay", c.weight_decay);
    maybe(j, "eval_every_epochs", c.eval_every_epochs);
    maybe(j, "val_piece_fraction", c.val_piece_fraction);
    if (c.batch_size < 2)
        throw std::invalid_argument("config: batch_size must be >= 2 (VICReg precondition)");
    if (c.epochs < 0) throw std::invalid_argument("config: negative epochs");

    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        check_keys(s, {"kind", "warmup_steps", "ref_epochs", "floor_frac", "tail_frac",
                       "hold_frac"},
                   "schedule");
        std::string kind = schedule_kind_name(c.schedule.kind);
        maybe(s, "kind", kind);
        c.schedule.kind = schedule_kind_from(kind);
        maybe(s, "warmup_steps", c.schedule.warmup_steps);
        maybe(s, "ref_epochs", c.schedule.ref_epochs);
        maybe(s, "floor_frac", c.schedule.floor_frac);
        maybe(s, "tail_frac", c.schedule.tail_frac);
        maybe(s, "hold_frac", c.schedule.hold_frac);
        if (!(0.0 <= c.schedule.tail_frac && c.schedule.tail_frac <= c.schedule.floor_frac &&
              c.schedule.floor_frac <= 1.0))
            throw std::invalid_argument("config: need 0 <= tail_frac <= floor_frac <= 1");
    }
    if (j.contains("vicreg")) {
        const json& v = j.at("vicreg");
        check_keys(v, {"lambda_inv", "lambda_var", "lambda_cov"}, "vicreg");
        maybe(v, "lambda_inv", c.vicreg.lambda_inv);
        maybe(v, "lambda_var", c.vicreg.lambda_var);
        maybe(v, "lambda_cov", c.vicreg.lambda_cov);
    }
    if (j.contains("corpus")) {
        const json& k = j.at("corpus");
        check_keys(k, {"n_pieces", "n_composers", "segments_per_piece", "segment_seconds",
                       "sample_rate", "max_notes", "hop_fraction", "nfft", "hop", "synth"},
                   "corpus");
        maybe(k, "n_pieces", c.corpus.n_pieces);
        maybe(k, "n_composers", c.corpus.n_composers);
        maybe(k, "segments_per_piece", c.corpus.segments_per_piece);
        maybe(k, "segment_seconds", c.corpus.segment_seconds);
        maybe(k, "sample_rate", c.corpus.sample_rate);
        maybe(k, "max_notes", c.corpus.max_notes);
        maybe(k, "hop_fraction", c.corpus.hop_fraction);
        maybe(k, "nfft", c.corpus.spectral.nfft);
        maybe(k, "hop", c.corpus.spectral.hop);
        if (k.contains("synth")) {
            const json& s = k.at("synth");
            check_keys(s, {"n_harmonics", "rolloff_exp", "decay_s", "velocity_exp", "attack_s"},
                       "synth");
            maybe(s, "n_harmonics", c.corpus.synth.n_harmonics);
            maybe(s, "rolloff_exp", c.corpus.synth.rolloff_exp);
            maybe(s, "decay_s", c.corpus.synth.decay_s);
            maybe(s, "velocity_exp", c.corpus.synth.velocity_exp);
            maybe(s, "attack_s", c.corpus.synth.attack_s);
        }
    }
    if (j.contains("pool")) {
        const json& p = j.at("pool");
        check_keys(p, {"size", "n_queries", "n_hard", "n_semihard"}, "pool");
        maybe(p, "size", c.pool.size);
        maybe(p, "n_queries", c.pool.n_queries);
        maybe(p, "n_hard", c.pool.n_hard);
        maybe(p, "n_semihard", c.pool.n_semihard);
    }
    if (j.contains("descriptor_control"))
        c.descriptor_control = descriptor_control_from(j.at("descriptor_control").get<std::string>());
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, {"audio_d_model", "audio_heads", "audio_layers", "audio_d_ff",
                       "audio_cnn_channels", "audio_gn_groups", "audio_pos_max", "midi_d_model",
                       "midi_heads", "midi_layers", "midi_d_ff", "midi_pos_max", "embed_dim",
                       "dropout", "film_hidden", "t3_d_model", "t3_heads", "t3_layers", "t3_d_ff"},
                   "model");
        ArmConfig base = make_toy_arm(c.arm);
        c.arm_overrides = base;
        c.has_overrides = true;
        maybe(m, "audio_d_model", c.arm_overrides.audio.d_model);
        maybe(m, "audio_heads", c.arm_overrides.audio.heads);
        maybe(m, "audio_layers", c.arm_overrides.audio.layers);
        maybe(m, "audio_d_ff", c.arm_overrides.audio.d_ff);
        maybe(m, "audio_cnn_channels", c.arm_overrides.audio.cnn_channels);
        maybe(m, "audio_gn_groups", c.arm_overrides.audio.gn_groups);
        maybe(m, "audio_pos_max", c.arm_overrides.audio.pos_max);
        maybe(m, "midi_d_model", c.arm_overrides.midi.d_model);
        maybe(m, "midi_heads", c.arm_overrides.midi.heads);
        maybe(m, "midi_layers", c.arm_overrides.midi.layers);
        maybe(m, "midi_d_ff", c.arm_overrides.midi.d_ff);
        maybe(m, "midi_pos_max", c.arm_overrides.midi.pos_max);
        maybe(m, "embed_dim", c.arm_overrides.embed_dim);
        maybe(m, "dropout", c.arm_overrides.dropout);
        maybe(m, "film_hidden", c.arm_overrides.film_hidden);
        maybe(m, "t3_d_model", c.arm_overrides.t3.d_model);
        maybe(m, "t3_heads", c.arm_overrides.t3.heads);
        maybe(m, "t3_layers", c.arm_overrides.t3.layers);
        maybe(m, "t3_d_ff", c.arm_overrides.t3.d_ff);
    }
    return c;
}

std::string train_config_to_json(const TrainConfig& c) {
    json j;
    j["schema_version"] = 1;
    j["arm"] = c.arm;
    j["seed"] = c.seed;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["base_lr"] = c.base_lr;
    j["weight_decay"] = c.weight_decay;
    j["eval_every_epochs"] = c.eval_every_epochs;
    j["val_piece_fraction"] = c.val_piece_fraction;
    j["schedule"] = {{"kind", schedule_kind_name(c.schedule.kind)},
                     {"warmup_steps", c.schedule.warmup_steps},
                     {"ref_epochs", c.schedule.ref_epochs},
                     {"floor_frac", c.schedule.floor_frac},
                     {"tail_frac", c.schedule.tail_frac},
                     {"hold_frac", c.schedule.hold_frac}};
    j["vicreg"] = {{"lambda_inv", c.vicreg.lambda_inv},
                   {"lambda_var", c.vicreg.lambda_var},
                   {"lambda_cov", c.vicreg.lambda_cov}};
    j["corpus"] = {{"n_pieces", c.corpus.n_pieces},
                   {"n_composers", c.corpus.n_composers},
                   {"segments_per_piece", c.corpus.segments_per_piece},
                   {"segment_seconds", c.corpus.segment_seconds},
                   {"sample_rate", c.corpus.sample_rate},
                   {"max_notes", c.corpus.max_notes},
                   {"hop_fraction", c.corpus.hop_fraction},
                   {"nfft", c.corpus.spectral.nfft},
                   {"hop", c.corpus.spectral.hop},
                   {"synth",
                    {{"n_harmonics", c.corpus.synth.n_harmonics},
                     {"rolloff_exp", c.corpus.synth.rolloff_exp},
                     {"decay_s", c.corpus.synth.decay_s},
                     {"velocity_exp", c.corpus.synth.velocity_exp},
                     {"attack_s", c.corpus.synth.attack_s}}}};
    j["pool"] = {{"size", c.pool.size},
                 {"n_queries", c.pool.n_queries},
                 {"n_hard", c.pool.n_hard},
                 {"n_semihard", c.pool.n_semihard}};
    j["descriptor_control"] = descriptor_control_name(c.descriptor_control);
    const ArmConfig a = c.resolved_arm();
    j["model"] = {{"audio_d_model", a.audio.d_model},
                  {"audio_heads", a.audio.heads},
                  {"audio_layers", a.audio.layers},
                  {"audio_d_ff", a.audio.d_ff},
                  {"audio_cnn_channels", a.audio.cnn_channels},
                  {"audio_gn_groups", a.audio.gn_groups},
                  {"audio_pos_max", a.audio.pos_max},
                  {"midi_d_model", a.midi.d_model},
                  {"midi_heads", a.midi.heads},
                  {"midi_layers", a.midi.layers},
                  {"midi_d_ff", a.midi.d_ff},
                  {"midi_pos_max", a.midi.pos_max},
                  {"embed_dim", a.embed_dim},
                  {"dropout", a.dropout},
                  {"film_hidden", a.film_hidden},
                  {"t3_d_model", a.t3.d_model},
                  {"t3_heads", a.t3.heads},
                  {"t3_layers", a.t3.layers},
                  {"t3_d_ff", a.t3.d_ff}};
    return j.dump(2);
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return train_config_from_json(ss.str());
}

PoolSpec pool_spec_from_json(const std::string& json_text, std::uint64_t* seed_out) {
    json j = json::parse(json_text);
    check_keys(j, {"schema_version", "size", "n_queries", "n_hard", "n_semihard", "seed"},
               "pool config");
    PoolSpec p;
    maybe(j, "size", p.size);
    maybe(j, "n_queries", p.n_queries);
    maybe(j, "n_hard", p.n_hard);
    maybe(j, "n_semihard", p.n_semihard);
    if (seed_out && j.contains("seed")) *seed_out = j.at("seed").get<std::uint64_t>();
    return p;
}

std::uint64_t config_hash(const TrainConfig& cfg) { return fnv1a64(train_config_to_json(cfg)); }

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace xmodal
