#include <doctest.h>

#include "cli.hpp"
#include "manifest.hpp"
#include "pivot/fileio.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result pivot_cmd(std::vector<std::string> args) {
    args.insert(args.begin(), "pivot");
    std::ostringstream out, err;
    const int code = pivot::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("pivot_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

struct EnvSeed {
    explicit EnvSeed(const char* v) { setenv("PIVOT_SEED", v, 1); }
    ~EnvSeed() { unsetenv("PIVOT_SEED"); }
};

} // namespace

TEST_CASE("gen-corpus is reproducible down to the checksums") {
    const auto d = scratch("gen");
    REQUIRE(pivot_cmd({"gen-corpus", "--preset", "plant", "--seed", "4", "--out", (d / "a").string()}).code == 0);
    REQUIRE(pivot_cmd({"gen-corpus", "--preset", "plant", "--seed", "4", "--out", (d / "b").string()}).code == 0);
    REQUIRE(pivot_cmd({"gen-corpus", "--preset", "plant", "--seed", "5", "--out", (d / "c").string()}).code == 0);
    const auto ma = read_json(d / "a" / "run_manifest.json");
    const auto mb = read_json(d / "b" / "run_manifest.json");
    const auto mc = read_json(d / "c" / "run_manifest.json");
    CHECK(ma["checksums"] == mb["checksums"]);
    CHECK(ma["checksums"] != mc["checksums"]);
    CHECK(ma["seed"] == 4);
    CHECK(ma["extra"]["videos"] == 50);
    CHECK(pivot::cli::tree_digest(pivot::cli::checksum_tree(d / "a")) ==
          pivot::cli::tree_digest(pivot::cli::checksum_tree(d / "b")));
    for (const auto& e : fs::directory_iterator(d))
        CHECK(e.path().filename().string().find("staging") == std::string::npos);
}

TEST_CASE("seed precedence: flag over config over PIVOT_SEED") {
    const auto d = scratch("seed");
    write_text(d / "cfg.json", R"({"seed": 12, "preset": "plant"})");
    {
        const EnvSeed env("33");
        REQUIRE(pivot_cmd({"gen-corpus", "--preset", "plant", "--out", (d / "env").string()}).code == 0);
        REQUIRE(pivot_cmd({"gen-corpus", "--config", (d / "cfg.json").string(), "--out", (d / "cfg").string()}).code == 0);
        REQUIRE(pivot_cmd({"gen-corpus", "--config", (d / "cfg.json").string(), "--seed", "7", "--out",
                           (d / "flag").string()})
                    .code == 0);
    }
    REQUIRE(pivot_cmd({"gen-corpus", "--preset", "plant", "--out", (d / "none").string()}).code == 0);
    CHECK(read_json(d / "env" / "run_manifest.json")["seed"] == 33);
    CHECK(read_json(d / "cfg" / "run_manifest.json")["seed"] == 12);
    CHECK(read_json(d / "flag" / "run_manifest.json")["seed"] == 7);
    CHECK(read_json(d / "none" / "run_manifest.json")["seed"] == 0);
    CHECK(read_json(d / "cfg" / "run_manifest.json")["config"]["preset"] == "plant");
}

TEST_CASE("pretrain manifest records the ablation and clip accounting") {
    const auto d = scratch("pre");
    REQUIRE(pivot_cmd({"gen-corpus", "--preset", "plant", "--seed", "2", "--out", (d / "corpus").string()}).code == 0);
    const auto mined = pivot_cmd({"mine", "--corpus", (d / "corpus").string(), "--out", (d / "labels.jsonl").string()});
    REQUIRE(mined.code == 0);
    CHECK(fs::exists(d / "labels.jsonl.manifest.json"));
    write_text(d / "small.json", R"({"model": {"dim": 64, "heads": 2, "ff_dim": 32, "head_hidden": 16}})");

    const auto run = [&](const std::string& name, std::vector<std::string> flags) {
        std::vector<std::string> args{"pretrain",  "--corpus", (d / "corpus").string(), "--labels",
                                      (d / "labels.jsonl").string(), "--out", (d / name).string(),
                                      "--epochs", "3", "--batch", "8", "--interval", "2", "--seed", "1",
                                      "--config", (d / "small.json").string()};
        args.insert(args.end(), flags.begin(), flags.end());
        const auto r = pivot_cmd(args);
        INFO(r.err);
        REQUIRE(r.code == 0);
        return read_json(d / name / "run_manifest.json");
    };
    const auto plain = run("plain", {});
    const auto thresh = run("thresh", {"--thresh"});
    const auto selected = run("selected", {"--thresh", "--in-task", "--sort"});

    CHECK(plain["extra"]["ablation"] == "lwds");
    CHECK(thresh["extra"]["ablation"] == "thresh");
    CHECK(selected["extra"]["ablation"] == "thresh+in_task+sort");
    CHECK(selected["extra"]["saved_epochs"] == json::array({2, 3}));
    CHECK(selected["config"]["augment"]["sort"] == true);
    CHECK(selected["config"]["model"]["heads"] == 2);
    for (const auto* m : {&plain, &thresh, &selected}) CHECK((*m)["extra"]["clip_positions_per_epoch"].size() == 3);
    CHECK(selected["extra"]["clip_positions_total"].get<std::size_t>() <=
          thresh["extra"]["clip_positions_total"].get<std::size_t>());
    CHECK(thresh["extra"]["clip_positions_total"].get<std::size_t>() <=
          plain["extra"]["clip_positions_total"].get<std::size_t>());
    for (const char* f : {"metrics.csv", "ckpt_2.pivt", "ckpt_3.pivt"}) CHECK(selected["checksums"].contains(f));

    SUBCASE("analyze-stop finds the checkpoints beside the metrics") {
        const auto r = pivot_cmd({"analyze-stop", "--metrics", (d / "selected" / "metrics.csv").string(), "--degree", "2"});
        REQUIRE(r.code == 0);
        const auto s = read_json(d / "selected" / "stop_analysis.json");
        CHECK((s["selected_checkpoint_epoch"] == 2 || s["selected_checkpoint_epoch"] == 3));
        CHECK(read_json(d / "selected" / "stop_analysis.json.manifest.json")["extra"]["saved_epochs"] ==
              json::array({2, 3}));
    }
    SUBCASE("fine-tune, evaluate and tabulate") {
        REQUIRE(pivot_cmd({"gen-corpus", "--preset", "transfer", "--seed", "9", "--out", (d / "xfer").string()}).code == 0);
        const auto ckpt = (d / "selected" / "ckpt_3.pivt").string();
        const auto before = pivot::file_checksum(ckpt);
        const auto ft = pivot_cmd({"finetune", "--ckpt", ckpt, "--corpus", (d / "xfer").string(), "--task", "tr",
                                   "--out", (d / "ft").string(), "--epochs", "1", "--seed", "3"});
        INFO(ft.err);
        REQUIRE(ft.code == 0);
        CHECK(pivot::file_checksum(ckpt) == before);
        const auto report = read_json(d / "ft" / "report.json");

        const auto ev = pivot_cmd({"eval", "--model", (d / "ft" / "model.pivt").string(), "--corpus",
                                   (d / "xfer").string(), "--task", "tr", "--seed", "3", "--out",
                                   (d / "again.json").string()});
        REQUIRE(ev.code == 0);
        CHECK(read_json(d / "again.json")["accuracy"] == report["accuracy"]);
        CHECK(pivot_cmd({"eval", "--model", (d / "ft" / "model.pivt").string(), "--corpus", (d / "xfer").string(),
                         "--task", "sr", "--out", (d / "bad.json").string()})
                  .code == 1);

        REQUIRE(pivot_cmd({"report", "--runs", d.string(), "--out", (d / "table").string()}).code == 0);
        std::ifstream in(d / "table.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "run,SF,SR,TR");
    }
}

TEST_CASE("analyze-stop on the logistic fixture") {
    const auto d = scratch("stop");
    fs::copy_file(fs::path(PIVOT_FIXTURES_DIR) / "logistic_metrics.csv", d / "metrics.csv");
    const auto r = pivot_cmd({"analyze-stop", "--metrics", (d / "metrics.csv").string()});
    REQUIRE(r.code == 0);
    const auto s = read_json(d / "stop_analysis.json");
    CHECK(s["degree"] == 10);
    CHECK(s["e_star"].get<int>() >= 450);
    CHECK(s["e_star"].get<int>() <= 550);
    CHECK(s["selected_checkpoint_epoch"].get<int>() % 50 == 0);
    CHECK(fs::exists(d / "stop_analysis.json.manifest.json"));
}

TEST_CASE("bad invocations exit non-zero with a message") {
    const auto d = scratch("err");
    CHECK(pivot_cmd({"no-such-command"}).code == 2);
    CHECK(pivot_cmd({"gen-corpus"}).code == 2);

    auto r = pivot_cmd({"gen-corpus", "--preset", "galaxy", "--out", (d / "x").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("galaxy") != std::string::npos);
    CHECK_FALSE(fs::exists(d / "x"));

    write_text(d / "cfg.json", R"({"sed": 3})");
    r = pivot_cmd({"gen-corpus", "--config", (d / "cfg.json").string(), "--out", (d / "y").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("sed") != std::string::npos);

    r = pivot_cmd({"mine", "--corpus", (d / "missing").string(), "--out", (d / "l.jsonl").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("missing") != std::string::npos);

    {
        const EnvSeed env("abc");
        r = pivot_cmd({"gen-corpus", "--out", (d / "z").string()});
        CHECK(r.code == 1);
        CHECK(r.err.find("PIVOT_SEED") != std::string::npos);
    }
}
