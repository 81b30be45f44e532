#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int exit_code;
    std::string output; // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(XMODAL_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    std::string out;
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), p)) out += buf.data();
    const int status = ::pclose(p);
    return {WEXITSTATUS(status), out};
}

std::string write_quick_config(const std::string& path, const std::string& arm, int epochs) {
    json j = {{"schema_version", 1},
              {"arm", arm},
              {"seed", 5},
              {"epochs", epochs},
              {"batch_size", 4},
              {"eval_every_epochs", 1},
              {"val_piece_fraction", 0.25},
              {"schedule", {{"kind", "cosine"}, {"warmup_steps", 4}, {"ref_epochs", epochs}}},
              {"corpus",
               {{"n_pieces", 6},
                {"n_composers", 3},
                {"segments_per_piece", 6},
                {"segment_seconds", 0.5},
                {"sample_rate", 4000}}},
              {"pool", {{"size", 10}, {"n_queries", 12}, {"n_hard", 2}, {"n_semihard", 2}}}};
    std::ofstream os(path);
    os << j.dump(2);
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

const std::string kDir = "cli_test_out";

} // namespace

TEST_CASE("cli: gen-data produces a corpus, reruns are byte-identical") {
    fs::remove_all(kDir);
    write_quick_config("cli_cfg.json", "d0", 1);
    auto r = run_cli("gen-data --config cli_cfg.json --out " + kDir + "/gen");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("generated 36 items") != std::string::npos);
    CHECK(fs::exists(kDir + "/gen/corpus/manifest.jsonl"));
    CHECK(fs::exists(kDir + "/gen/corpus/audio.f32"));

    const std::string manifest1 = slurp(kDir + "/gen/corpus/manifest.jsonl");
    auto r2 = run_cli("gen-data --config cli_cfg.json --out " + kDir + "/gen");
    CHECK(r2.exit_code == 0);
    CHECK(slurp(kDir + "/gen/corpus/manifest.jsonl") == manifest1);

    // a different seed changes the corpus bytes
    auto r3 = run_cli("gen-data --config cli_cfg.json --seed 99 --out " + kDir + "/gen2");
    CHECK(r3.exit_code == 0);
    CHECK(slurp(kDir + "/gen2/corpus/manifest.jsonl") != manifest1);
}

TEST_CASE("cli: bad config path exits 2 and names the path") {
    auto r = run_cli("gen-data --config no_such_config.json --out " + kDir + "/x");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("no_such_config.json") != std::string::npos);
}

TEST_CASE("cli: unknown arm exits 2 and lists the valid arms") {
    write_quick_config("cli_cfg.json", "d0", 1);
    auto r = run_cli("train --config cli_cfg.json --arm nonsense --out " + kDir + "/t");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("d4a4") != std::string::npos);
    CHECK(r.output.find("a4r") != std::string::npos);
    CHECK(r.output.find("t3-wt") != std::string::npos);
}

TEST_CASE("cli: config with unknown fields is rejected fail-closed") {
    std::ofstream os("cli_bad.json");
    os << R"({"schema_version":1,"arm":"d0","lr_clip":0.5})";
    os.close();
    auto r = run_cli("gen-data --config cli_bad.json --out " + kDir + "/b");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("lr_clip") != std::string::npos);
}

TEST_CASE("cli: train -> eval -> validate -> report pipeline") {
    write_quick_config("cli_cfg.json", "d4a4", 2);
    auto tr = run_cli("train --config cli_cfg.json --out " + kDir + "/run");
    CHECK(tr.exit_code == 0);
    CHECK(tr.output.find("best S") != std::string::npos);
    const std::string ckpt = kDir + "/run/ckpt/d4a4_seed5_best.ckpt";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(kDir + "/run/reports/train_history_d4a4_seed5.jsonl"));
    CHECK(fs::exists(kDir + "/run/manifest_train.json"));

    // eval: prints a schema-valid report with S = min(R@10, R@10)
    auto ev = run_cli("eval --checkpoint " + ckpt + " --out " + kDir + "/run");
    CHECK(ev.exit_code == 0);
    const auto open = ev.output.find('{');
    REQUIRE(open != std::string::npos);
    json rep = json::parse(ev.output.substr(open));
    CHECK(rep.at("arm") == "d4a4");
    CHECK(rep.at("metrics").at("s").get<double>() ==
          doctest::Approx(std::min(rep.at("metrics").at("r10_am").get<double>(),
                                   rep.at("metrics").at("r10_ma").get<double>())));
    CHECK(rep.at("seed") == 42); // canonical default pool seed

    // unreadable checkpoint -> exit 3
    auto bad = run_cli("eval --checkpoint missing.ckpt --out " + kDir + "/run");
    CHECK(bad.exit_code == 3);

    // validate a subset of tests, then the full battery output shape
    auto va = run_cli("validate --checkpoint " + ckpt + " --tests t06 --out " + kDir + "/run");
    CHECK(va.exit_code == 0);
    json t06 = json::parse(slurp(kDir + "/run/reports/d4a4_t06.json"));
    CHECK(t06.at("result").contains("cka_matrix"));
    CHECK(t06.at("result").at("cka_mean").get<double>() >= 0.0);

    auto va2 = run_cli("validate --checkpoint " + ckpt + " --tests t01,t08 --out " + kDir + "/run");
    CHECK(va2.exit_code == 0);
    json t01 = json::parse(slurp(kDir + "/run/reports/d4a4_t01.json"));
    CHECK(t01.at("result").contains("audio"));
    CHECK(t01.at("result").at("audio").contains("zero"));

    // report merging
    const std::string rep_path = kDir + "/run/reports/retrieval_d4a4_seed42.json";
    REQUIRE(fs::exists(rep_path));
    auto rp = run_cli("report --inputs " + rep_path + " " + rep_path + " --format markdown-table");
    CHECK(rp.exit_code == 0);
    CHECK(rp.output.find("| d4a4") != std::string::npos);
    auto rj = run_cli("report --inputs " + rep_path + " --format json");
    CHECK(rj.exit_code == 0);
    CHECK(json::parse(rj.output).size() == 1);

    // schema mismatch -> exit 2
    std::ofstream bad_rep(kDir + "/bad_report.json");
    bad_rep << R"({"schema_version": 99})";
    bad_rep.close();
    auto rb = run_cli("report --inputs " + kDir + "/bad_report.json");
    CHECK(rb.exit_code == 2);
}

TEST_CASE("cli: t01 on the descriptor-free baseline is a not-applicable record, exit 0") {
    write_quick_config("cli_cfg_d0.json", "d0", 0);
    auto tr = run_cli("train --config cli_cfg_d0.json --out " + kDir + "/d0run");
    REQUIRE(tr.exit_code == 0);
    const std::string ckpt = kDir + "/d0run/ckpt/d0_seed5_best.ckpt";
    auto va = run_cli("validate --checkpoint " + ckpt + " --tests t01,t08 --out " + kDir + "/d0run");
    CHECK(va.exit_code == 0);
    json t01 = json::parse(slurp(kDir + "/d0run/reports/d0_t01.json"));
    CHECK(t01.at("result").at("status") == "not_applicable");
    json t08 = json::parse(slurp(kDir + "/d0run/reports/d0_t08.json"));
    CHECK(t08.at("result").at("status") == "not_applicable");
}

TEST_CASE("cli: eval reruns on the same checkpoint produce identical report bytes") {
    const std::string ckpt = kDir + "/run/ckpt/d4a4_seed5_best.ckpt";
    REQUIRE(fs::exists(ckpt));
    auto e1 = run_cli("eval --checkpoint " + ckpt + " --out " + kDir + "/repro1");
    auto e2 = run_cli("eval --checkpoint " + ckpt + " --out " + kDir + "/repro2");
    REQUIRE(e1.exit_code == 0);
    REQUIRE(e2.exit_code == 0);
    CHECK(slurp(kDir + "/repro1/reports/retrieval_d4a4_seed42.json") ==
          slurp(kDir + "/repro2/reports/retrieval_d4a4_seed42.json"));

    // --seed changes the pool composition, not the checkpoint behavior
    auto e3 = run_cli("eval --checkpoint " + ckpt + " --seed 7 --out " + kDir + "/repro3");
    CHECK(e3.exit_code == 0);
    CHECK(fs::exists(kDir + "/repro3/reports/retrieval_d4a4_seed7.json"));
}
