// xmodal: corpus generation, training, retrieval evaluation, validation
// battery, and report rendering for the cross-modal audio-MIDI lab.
//
// Exit codes: 0 success, 2 config/usage error, 3 I/O error, 4 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "xmodal/config.hpp"
#include "xmodal/retrieval.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/training.hpp"
#include "xmodal/validation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xmodal;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string git_describe() {
    FILE* p = ::popen("git describe --always --dirty 2>/dev/null", "r");
    if (!p) return "unknown";
    char buf[128] = {0};
    std::string out;
    if (std::fgets(buf, sizeof(buf), p)) out = buf;
    ::pclose(p);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

struct Manifest {
    std::string command;
    std::string config_path;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string started_at;
    std::vector<std::string> outputs;

    void write(const std::string& out_dir) const {
        json j = {{"command", command},
                  {"config_path", config_path},
                  {"config_hash", config_hash},
                  {"seed", seed},
                  {"git_describe", git_describe()},
                  {"started_at", started_at},
                  {"finished_at", now_iso()},
                  {"outputs", outputs}};
        std::ofstream os(out_dir + "/manifest_" + command + ".json");
        os << j.dump(2) << "\n";
    }
};

void write_text(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed for " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

TrainConfig load_config_or_die(const std::string& path) {
    if (!fs::exists(path)) throw std::invalid_argument("config path does not exist: " + path);
    return train_config_from_json(read_text(path));
}

struct LoadedCheckpoint {
    Checkpoint ckpt;
    TrainConfig config;
    std::shared_ptr<Model> model;
    Corpus corpus;
};

LoadedCheckpoint load_model_from_checkpoint(const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("checkpoint does not exist: " + path);
    LoadedCheckpoint out;
    out.ckpt = load_checkpoint(path);
    out.config = train_config_from_json(out.ckpt.config_json);
    out.corpus = generate_corpus(out.config.corpus, sub_seed(out.config.seed, "corpus"));
    out.model = std::make_shared<Model>(out.config.resolved_arm(), out.config.corpus.spectral,
                                        out.config.corpus.sample_rate,
                                        out.config.segment_samples(),
                                        sub_seed(out.config.seed, "init"));
    out.model->load_from_checkpoint(out.ckpt);
    return out;
}

// ---- gen-data ----------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, std::uint64_t seed_override, bool has_seed,
                 const std::string& out_dir) {
    TrainConfig cfg = load_config_or_die(config_path);
    if (has_seed) cfg.seed = seed_override;
    Manifest m{"gen-data", config_path, hash_hex(config_hash(cfg)), cfg.seed, now_iso(), {}};
    fs::create_directories(out_dir);
    Corpus corpus = generate_corpus(cfg.corpus, sub_seed(cfg.seed, "corpus"));
    const std::string corpus_dir = out_dir + "/corpus";
    save_corpus(corpus, corpus_dir);
    m.outputs = {corpus_dir + "/manifest.jsonl", corpus_dir + "/audio.f32",
                 corpus_dir + "/audio.f32.json"};
    m.write(out_dir);
    std::cout << "generated " << corpus.items.size() << " items (" << cfg.corpus.n_pieces
              << " pieces x " << cfg.corpus.segments_per_piece << " segments) -> " << corpus_dir
              << "\n";
    return kExitOk;
}

// ---- train --------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& arm_override,
              std::uint64_t seed_override, bool has_seed, const std::string& out_dir,
              const std::string& corpus_dir) {
    TrainConfig cfg = load_config_or_die(config_path);
    if (!arm_override.empty()) {
        if (!is_known_arm(arm_override)) {
            std::cerr << "unknown arm \"" << arm_override << "\"; valid arms:";
            for (const auto& a : arm_names()) std::cerr << " " << a;
            std::cerr << "\n";
            return kExitConfig;
        }
        cfg.arm = arm_override;
    }
    if (has_seed) cfg.seed = seed_override;

    Manifest m{"train", config_path, hash_hex(config_hash(cfg)), cfg.seed, now_iso(), {}};
    fs::create_directories(out_dir + "/ckpt");
    fs::create_directories(out_dir + "/reports");

    Corpus preloaded;
    const Corpus* preloaded_ptr = nullptr;
    if (!corpus_dir.empty()) {
        preloaded = load_corpus(corpus_dir);
        preloaded_ptr = &preloaded;
    }

    TrainResult res = train(cfg, preloaded_ptr);
    const std::string tag = cfg.arm + "_seed" + std::to_string(cfg.seed);
    const std::string best_path = out_dir + "/ckpt/" + tag + "_best.ckpt";
    const std::string last_path = out_dir + "/ckpt/" + tag + "_last.ckpt";
    save_checkpoint(res.best, best_path);
    save_checkpoint(res.last, last_path);
    const std::string hist_path = out_dir + "/reports/train_history_" + tag + ".jsonl";
    write_text(hist_path, res.history.to_jsonl());
    m.outputs = {best_path, last_path, hist_path};
    m.write(out_dir);

    if (res.history.aborted) {
        std::cerr << "training aborted: " << res.history.abort_reason
                  << " (last good checkpoint retained)\n";
        return kExitNumeric;
    }
    std::printf("arm %s seed %llu: best S %.1f%% at epoch %d\n", cfg.arm.c_str(),
                static_cast<unsigned long long>(cfg.seed), 100.0 * res.history.best_s,
                res.history.best_epoch);
    return kExitOk;
}

// ---- eval ----------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& pool_config_path,
             std::uint64_t seed_override, bool has_seed, const std::string& out_dir) {
    auto loaded = load_model_from_checkpoint(ckpt_path);
    PoolSpec spec = loaded.config.pool;
    std::uint64_t pool_seed = 42; // canonical pinned protocol
    if (!pool_config_path.empty())
        spec = pool_spec_from_json(read_text(pool_config_path), &pool_seed);
    if (has_seed) pool_seed = seed_override;

    Manifest m{"eval", pool_config_path, hash_hex(loaded.ckpt.config_hash), pool_seed, now_iso(),
               {}};
    const auto val_idx = val_item_indices(loaded.corpus, loaded.config.val_piece_fraction);
    auto pool = build_pool_structure(loaded.corpus, val_idx, spec, pool_seed);
    RetrievalReport rep = scoreboard(*loaded.model, loaded.corpus, pool);
    rep.arm = loaded.config.arm;
    rep.seed = pool_seed;
    rep.config_hash = hash_hex(loaded.ckpt.config_hash);

    fs::create_directories(out_dir + "/reports");
    const std::string path = out_dir + "/reports/retrieval_" + loaded.config.arm + "_seed" +
                             std::to_string(pool_seed) + ".json";
    write_text(path, rep.to_json() + "\n");
    m.outputs = {path};
    m.write(out_dir);
    std::cout << rep.to_json() << "\n";
    return kExitOk;
}

// ---- validate -------------------------------------------------------------------

json not_applicable(const std::string& reason) {
    return {{"status", "not_applicable"}, {"reason", reason}};
}

int cmd_validate(const std::string& ckpt_path, std::string tests_csv, std::uint64_t seed,
                 const std::string& out_dir) {
    auto loaded = load_model_from_checkpoint(ckpt_path);
    Model& model = *loaded.model;
    const Corpus& corpus = loaded.corpus;
    const auto val_idx = val_item_indices(corpus, loaded.config.val_piece_fraction);
    auto pool = build_pool_structure(corpus, val_idx, loaded.config.pool, sub_seed(seed, "pool"));

    std::vector<std::string> tests;
    if (tests_csv.empty()) tests_csv = "t01,t02,t03,t04,t06,t08,t09,t10";
    std::stringstream ss(tests_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) tests.push_back(tok);

    fs::create_directories(out_dir + "/reports");
    Manifest m{"validate", ckpt_path, hash_hex(loaded.ckpt.config_hash), seed, now_iso(), {}};
    json dashboard = {{"arm", loaded.config.arm},
                      {"config_hash", hash_hex(loaded.ckpt.config_hash)},
                      {"seed", seed},
                      {"tests", json::object()}};

    const auto& arm = model.config();
    for (const auto& test : tests) {
        json rep = {{"test", test},
                    {"arm", loaded.config.arm},
                    {"seed", seed},
                    {"config_hash", hash_hex(loaded.ckpt.config_hash)}};
        if (test == "t01") {
            if (arm.audio_inject.mech == Mechanism::None &&
                arm.midi_inject.mech == Mechanism::None) {
                rep["result"] = not_applicable("arm has no descriptors to ablate");
            } else {
                json sides = json::object();
                for (auto side : {AblationSide::Audio, AblationSide::Midi}) {
                    const auto& inj =
                        side == AblationSide::Audio ? arm.audio_inject : arm.midi_inject;
                    if (inj.mech == Mechanism::None) {
                        sides[ablation_side_name(side)] =
                            not_applicable("no descriptor path on this side");
                        continue;
                    }
                    json modes = json::object();
                    for (auto mode :
                         {AblationMode::Zero, AblationMode::Noise, AblationMode::Shuffle}) {
                        auto r = ablate(model, corpus, pool, {side, mode, seed});
                        modes[ablation_mode_name(mode)] = {{"s_normal", r.s_normal},
                                                           {"s_ablated", r.s_ablated},
                                                           {"delta", r.delta}};
                    }
                    sides[ablation_side_name(side)] = modes;
                }
                rep["result"] = sides;
            }
        } else if (test == "t02") {
            if (arm.audio_inject.mech == Mechanism::None &&
                arm.midi_inject.mech == Mechanism::None && !arm.t3.enabled) {
                rep["result"] = not_applicable("arm has no descriptor path");
            } else {
                json controls = json::array();
                for (auto c : param_matched_controls(arm)) {
                    TrainConfig ctl = loaded.config;
                    ctl.descriptor_control = c;
                    controls.push_back({{"control", descriptor_control_name(c)},
                                        {"config_hash", hash_hex(config_hash(ctl))},
                                        {"param_count", model.param_count_total()}});
                }
                rep["result"] = {{"real_param_count", model.param_count_total()},
                                 {"controls", controls}};
            }
        } else if (test == "t03") {
            json probes = json::object();
            const double lambda = 1e-2;
            auto run = [&](ProbeSource src, ProbeTarget tgt) {
                auto r = run_probe(model, corpus, val_idx, src, tgt, lambda);
                json jr = {{"r2", r.r2}};
                if (!r.excluded_dims.empty()) jr["excluded_dims"] = r.excluded_dims;
                return jr;
            };
            probes["audio_to_pitch_histogram"] =
                run(ProbeSource::AudioEmbedding, ProbeTarget::PitchHistogram);
            probes["audio_to_interval_histogram"] =
                run(ProbeSource::AudioEmbedding, ProbeTarget::IntervalHistogram);
            probes["midi_to_chroma"] = run(ProbeSource::MidiEmbedding, ProbeTarget::Chroma);
            probes["midi_to_centroid"] = run(ProbeSource::MidiEmbedding, ProbeTarget::Centroid);
            probes["audio_to_chroma"] = run(ProbeSource::AudioEmbedding, ProbeTarget::Chroma);
            probes["midi_to_pitch_histogram"] =
                run(ProbeSource::MidiEmbedding, ProbeTarget::PitchHistogram);
            rep["result"] = {{"ridge_lambda", lambda}, {"probes", probes}};
        } else if (test == "t04") {
            auto r = transposition_sweep(model, corpus, pool, {-6, -3, -1, 0, 1, 3, 6});
            json s_per_k = json::object();
            for (std::size_t i = 0; i < r.ks.size(); ++i)
                s_per_k[std::to_string(r.ks[i])] = r.s_values[i];
            rep["result"] = {{"s_per_k", s_per_k}, {"retention", r.retention}};
        } else if (test == "t06") {
            auto r = cka_matrix(model, corpus, val_idx);
            rep["result"] = {{"audio_layers", r.audio_layers},
                             {"midi_layers", r.midi_layers},
                             {"cka_matrix", r.matrix},
                             {"rsa_matrix", r.rsa_matrix},
                             {"cka_mean", r.cka_mean},
                             {"rsa_mean", r.rsa_mean},
                             {"rsa_metric", "pearson_on_euclidean_distances"}};
        } else if (test == "t08") {
            if (arm.audio_inject.mech == Mechanism::None ||
                *arm.audio_inject.desc != DescriptorKind::A4) {
                rep["result"] = not_applicable("arm has no A4 audio path");
            } else {
                auto r = band_sensitivity(model, corpus, val_idx, 0.1);
                rep["result"] = {{"eps", r.eps},
                                 {"delta_pos", r.delta_pos},
                                 {"delta_neg", r.delta_neg},
                                 {"max_abs_pearson_r", r.max_abs_r}};
            }
        } else if (test == "t09") {
            json rows = json::array();
            for (const auto& row : invariance_suite(model, corpus, pool, seed))
                rows.push_back(
                    {{"perturbation", row.perturbation}, {"level", row.level}, {"s", row.s}});
            rep["result"] = rows;
        } else if (test == "t10") {
            auto r = cosine_alignment(model, corpus, val_idx);
            const int n_export = std::min<int>(200, static_cast<int>(corpus.items.size()));
            const std::string emb_path =
                out_dir + "/reports/embeddings_" + loaded.config.arm + ".csv";
            export_embeddings(model, corpus, n_export, emb_path);
            m.outputs.push_back(emb_path);
            rep["result"] = {{"mean", r.mean},
                             {"std", r.std},
                             {"histogram_bins", 50},
                             {"histogram", r.histogram},
                             {"embeddings_csv", emb_path},
                             {"n_exported_items", n_export}};
        } else {
            std::cerr << "unknown test id: " << test << " (valid: t01..t04, t06, t08..t10)\n";
            return kExitConfig;
        }
        const std::string path = out_dir + "/reports/" + loaded.config.arm + "_" + test + ".json";
        write_text(path, rep.dump(2) + "\n");
        m.outputs.push_back(path);
        dashboard["tests"][test] = rep.contains("result") ? rep["result"] : json();
        std::cout << "wrote " << path << "\n";
    }
    const std::string dash_path = out_dir + "/reports/dashboard_" + loaded.config.arm + ".json";
    write_text(dash_path, dashboard.dump(2) + "\n");
    m.outputs.push_back(dash_path);
    m.write(out_dir);
    return kExitOk;
}

// ---- report ---------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& inputs, const std::string& format) {
    std::vector<RetrievalReport> reports;
    for (const auto& path : inputs) {
        if (!fs::exists(path)) {
            std::cerr << "input does not exist: " << path << "\n";
            return kExitIo;
        }
        try {
            reports.push_back(RetrievalReport::from_json(read_text(path)));
        } catch (const std::exception& e) {
            std::cerr << "schema mismatch in " << path << ": " << e.what() << "\n";
            return kExitConfig;
        }
    }
    if (format == "json") {
        json arr = json::array();
        for (const auto& r : reports) arr.push_back(json::parse(r.to_json()));
        std::cout << arr.dump(2) << "\n";
    } else if (format == "markdown-table") {
        std::printf("| %-10s | %6s | %7s | %8s | %7s | %8s | %7s | %9s |\n", "Arm", "S (%)",
                    "R@1 a>m", "R@10 a>m", "MRR a>m", "R@10 m>a", "MRR m>a", "Hard neg%");
        std::printf("|%s|%s|%s|%s|%s|%s|%s|%s|\n", "------------", "--------", "---------",
                    "----------", "---------", "----------", "---------", "-----------");
        for (const auto& r : reports)
            std::printf("| %-10s | %6.1f | %7.1f | %8.1f | %7.3f | %8.1f | %7.3f | %9.1f |\n",
                        r.arm.c_str(), 100 * r.s, 100 * r.r1_am, 100 * r.r10_am, r.mrr_am,
                        100 * r.r10_ma, r.mrr_ma, 100 * r.hardneg);
    } else {
        std::cerr << "unknown format: " << format << " (use json or markdown-table)\n";
        return kExitConfig;
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal audio-MIDI descriptor-injection lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", arm, corpus_dir, ckpt_path, pool_config, tests_csv;
    std::string format = "markdown-table";
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic matched-pair corpus");
    gen->add_option("--config", config_path, "train config JSON")->required();
    auto* gen_seed = gen->add_option("--seed", seed, "seed override");
    gen->add_option("--out", out_dir, "output directory");

    auto* tr = app.add_subcommand("train", "train one arm");
    tr->add_option("--config", config_path, "train config JSON")->required();
    tr->add_option("--arm", arm, "arm name override");
    auto* tr_seed = tr->add_option("--seed", seed, "seed override");
    tr->add_option("--out", out_dir, "output directory");
    tr->add_option("--corpus", corpus_dir, "pre-generated corpus directory (gen-data output)");

    auto* ev = app.add_subcommand("eval", "canonical retrieval scoreboard");
    ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    ev->add_option("--pool-config", pool_config, "pool config JSON");
    auto* ev_seed = ev->add_option("--seed", seed, "pool seed (default 42)");
    ev->add_option("--out", out_dir, "output directory");

    auto* va = app.add_subcommand("validate", "scientific validation battery");
    va->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    va->add_option("--tests", tests_csv, "comma-separated test ids (default: all)");
    va->add_option("--seed", seed, "battery seed")->default_val(42);
    va->add_option("--out", out_dir, "output directory");

    auto* re = app.add_subcommand("report", "merge retrieval reports into a table");
    re->add_option("--inputs", inputs, "report JSON files")->required();
    re->add_option("--format", format, "json or markdown-table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help and friends
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, seed, !gen_seed->empty(), out_dir);
        if (tr->parsed())
            return cmd_train(config_path, arm, seed, !tr_seed->empty(), out_dir, corpus_dir);
        if (ev->parsed()) return cmd_eval(ckpt_path, pool_config, seed, !ev_seed->empty(), out_dir);
        if (va->parsed()) return cmd_validate(ckpt_path, tests_csv, seed, out_dir);
        if (re->parsed()) return cmd_report(inputs, format);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitConfig;
}
