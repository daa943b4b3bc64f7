#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detwin/cli.hpp"
#include "detwin/common.hpp"
#include "detwin/pipeline.hpp"

using namespace detwin;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("detwin_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "detwin");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Result r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

const std::vector<std::string> kSmall = {"--set", "phase1.count=20",  "--set", "phase1.min_samples=5",
                                         "--set", "phase1.tolerance=0.5", "--set", "train.folds=2",
                                         "--set", "train.epochs=1",   "--set", "train.batch_size=8"};

std::vector<std::string> with_small(std::vector<std::string> args) {
    args.insert(args.end(), kSmall.begin(), kSmall.end());
    return args;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

void collect(const json& j, std::vector<const json*>& out) {
    if (j.is_object()) {
        if (j.contains("algorithm") && j.contains("mae_range")) {
            out.push_back(&j);
            return;
        }
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "config") collect(*it, out);
    } else if (j.is_array()) {
        for (const auto& v : j) collect(v, out);
    }
}

}  // namespace

TEST_CASE("cli: --help exits 0 and lists every flag") {
    const auto r = run({"--help"});
    CHECK(r.code == exit_code::ok);
    for (const char* flag : {"--config", "--set", "--seed", "--workers", "--out", "--count", "--data", "--model",
                             "--report", "--generator", "--bundle", "--format", "simulate", "train", "eval", "phase1",
                             "phase2", "phase3", "gan", "generate", "report"})
        CHECK_MESSAGE(r.out.find(flag) != std::string::npos, flag);
}

TEST_CASE("cli: usage and config errors exit 2") {
    CHECK(run({}).code == exit_code::usage);
    CHECK(run({"bogus"}).code == exit_code::usage);
    const auto dir = temp_dir("usage");
    const auto unknown = run({"simulate", "--count", "1", "--out", (dir / "a").string(), "--set", "nope=1"});
    CHECK(unknown.code == exit_code::usage);
    CHECK(unknown.err.find("nope") != std::string::npos);
    CHECK(run({"simulate", "--count", "1", "--out", (dir / "b").string(), "--set", "train.folds=0"}).code ==
          exit_code::usage);
    write_text(dir / "bad.json", "{ not json");
    CHECK(run({"simulate", "--count", "1", "--config", (dir / "bad.json").string()}).code == exit_code::usage);
}

TEST_CASE("cli: simulate writes N maps and a manifest") {
    const auto dir = temp_dir("simulate");
    write_text(dir / "cfg.json", json{{"seed", 3}, {"workers", 1}}.dump());
    const auto d = dir / "d";
    const auto r = run({"simulate", "--config", (dir / "cfg.json").string(), "--count", "5", "--seed", "42", "--out",
                        d.string()});
    REQUIRE(r.code == exit_code::ok);
    CHECK(fs::exists(d / "manifest.json"));
    int maps = 0;
    for (const auto& e : fs::directory_iterator(d / "maps")) maps += e.path().extension() == ".f32";
    CHECK(maps == 5);
    const auto ds = load_dataset(d);
    CHECK(ds.manifest.master_seed == 42);
}

TEST_CASE("cli: artifacts are identical across worker counts") {
    const auto dir = temp_dir("workers");
    REQUIRE(run({"simulate", "--count", "6", "--seed", "9", "--workers", "1", "--out", (dir / "w1").string()}).code ==
            0);
    REQUIRE(run({"simulate", "--count", "6", "--seed", "9", "--workers", "3", "--out", (dir / "w3").string()}).code ==
            0);
    CHECK(read_text(dir / "w1" / "manifest.json") == read_text(dir / "w3" / "manifest.json"));
    for (const auto& e : fs::directory_iterator(dir / "w1" / "maps"))
        CHECK(read_file(e.path()) == read_file(dir / "w3" / "maps" / e.path().filename()));
}

TEST_CASE("cli: phase2 before phase1 exits 2") {
    const auto dir = temp_dir("order");
    const auto r = run({"phase2", "--out", dir.string()});
    CHECK(r.code == exit_code::usage);
    CHECK(r.err.find("phase1 report not found") != std::string::npos);
    CHECK(run({"phase3", "--out", dir.string()}).code == exit_code::usage);
}

TEST_CASE("cli: phase1 gate, report csv and eval") {
    const auto dir = temp_dir("phase1");
    const auto fail = run(with_small({"phase1", "--out", (dir / "fail").string(), "--set", "phase1.gate_target=1.0"}));
    CHECK(fail.code == exit_code::gate_fail);

    const auto root = dir / "pass";
    const auto ok = run(with_small({"phase1", "--out", root.string(), "--set", "phase1.gate_target=0"}));
    REQUIRE(ok.code == exit_code::ok);
    const auto report_path = root / "reports" / "phase1.json";
    REQUIRE(fs::exists(report_path));

    const auto csv = run({"report", "--format", "csv", report_path.string()});
    REQUIRE(csv.code == exit_code::ok);
    std::vector<const json*> metrics;
    const json j = json::parse(read_text(report_path));
    collect(j, metrics);
    REQUIRE(!metrics.empty());

    std::istringstream lines(csv.out);
    std::string line;
    std::getline(lines, line);
    const auto header = split(line, ',');
    REQUIRE(header.size() == 14);
    std::size_t rows = 0;
    std::vector<bool> used(metrics.size(), false);
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        REQUIRE(cells.size() == header.size());
        ++rows;
        bool matched = false;
        for (std::size_t m = 0; m < metrics.size() && !matched; ++m) {
            if (used[m]) continue;
            const json& r = *metrics[m];
            const auto near = [&](int col, double v) { return std::abs(std::stod(cells[col]) - v) <= 1e-12; };
            if (cells[1] != r.at("algorithm").get<std::string>()) continue;
            if (std::stoul(cells[2]) != r.at("n").get<std::size_t>()) continue;
            if (!near(3, r.at("mae_range")) || !near(4, r.at("mae_doppler")) || !near(5, r.at("sigma_range")) ||
                !near(6, r.at("sigma_doppler")))
                continue;
            if (!near(7, r.at("within_1bin_range").at("percent")) ||
                !near(8, r.at("within_1bin_doppler").at("percent")) ||
                !near(9, r.at("within_1bin_joint").at("percent")) ||
                !near(10, r.at("within_1bin_joint").at("ci95")[0]) ||
                !near(11, r.at("within_1bin_joint").at("ci95")[1]))
                continue;
            if (r.contains("fp_per_map") && (!near(12, r.at("fp_per_map")) || !near(13, r.at("fn_rate")))) continue;
            used[m] = matched = true;
        }
        CHECK_MESSAGE(matched, line);
    }
    CHECK(rows == metrics.size());

    const auto model = root / j.at("body").at("models")[0].at("path").get<std::string>();
    const auto ev = run({"eval", "--model", model.string(), "--data", (root / "datasets" / "baseline").string(),
                         "--report", (dir / "eval.json").string()});
    REQUIRE(ev.code == exit_code::ok);
    const json e = json::parse(read_text(dir / "eval.json"));
    CHECK(e.at("evaluation").at("cnn").at("n").get<int>() == 20);
    CHECK(e.at("evaluation").at("argmax").at("algorithm") == "argmax");
}

TEST_CASE("cli: gan train and generate, phase3 with the generator as clutter source") {
    const auto dir = temp_dir("gan");
    const auto root = dir.string();
    const std::vector<std::string> gan_small = {"--set", "gan.pairs=6",         "--set", "gan.scenes=2",
                                                "--set", "gan.config.epochs=1", "--set", "gan.config.batch_size=2"};
    auto train = with_small({"gan", "train", "--out", root});
    train.insert(train.end(), gan_small.begin(), gan_small.end());
    REQUIRE(run(train).code == exit_code::ok);
    CHECK(fs::exists(dir / "gan"));
    const json report = json::parse(read_text(dir / "reports" / "gan.json"));
    CHECK(report.at("history").at("val_l1").size() == 1);
    const double l1 = report.at("validation_l1").get<double>();
    CHECK((l1 >= 0.0 && l1 <= 1.0));

    auto gen = std::vector<std::string>{"gan", "generate", "--count", "2", "--out", root};
    gen.insert(gen.end(), gan_small.begin(), gan_small.end());
    REQUIRE(run(gen).code == exit_code::ok);
    const json g = json::parse(read_text(dir / "generated" / "generated.json"));
    REQUIRE(g.at("maps").size() == 2);
    for (const auto& m : g.at("maps")) {
        const auto bytes = read_file(dir / "generated" / m.at("file").get<std::string>());
        CHECK(bytes.size() == 4u * 64u * 64u);
        CHECK(sha256_hex(bytes) == m.at("sha256").get<std::string>());
        for (float v : from_f32_le(bytes)) REQUIRE((v >= 0.0f && v <= 1.0f));
    }

    const std::vector<std::string> phases = {"--set", "phase1.gate_target=0", "--set", "phase2.gate_target=0",
                                             "--set", "phase3.count=3",       "--set", "phase3.use_generator=true"};
    for (const char* cmd : {"phase1", "phase2", "phase3"}) {
        auto args = with_small({cmd, "--out", root});
        args.insert(args.end(), phases.begin(), phases.end());
        args.insert(args.end(), gan_small.begin(), gan_small.end());
        const auto r = run(args);
        CAPTURE(r.err);
        REQUIRE(r.code == exit_code::ok);
    }
    const json p3 = json::parse(read_text(dir / "reports" / "phase3.json"));
    CHECK(p3.at("outcome") == "non_gating");
    CHECK(!p3.at("body").at("generator").is_null());
    CHECK(p3.at("body").at("scan").at("scanned").get<int>() +
              p3.at("body").at("scan").at("rejected").get<int>() >= 3);
}
