#include <cli.hpp>
#include <resfim/rten.hpp>

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace resfim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out, err;
};

const std::vector<std::string> kTiny{"--clients", "3", "--samples-per-client", "10", "--image-size", "8",
                                     "--base-width", "2", "--levels", "2", "--rounds", "2", "--fisher-cap", "4"};

Outcome invoke(std::vector<std::string> args, bool tiny = false)
{
    args.insert(args.begin(), "resfim");
    if (tiny) args.insert(args.begin() + 2, kTiny.begin(), kTiny.end());
    std::ostringstream out, err;
    const int code = cli::main(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p);
    REQUIRE(is);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text)
{
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

// Scratch output root, set through the environment for the lifetime of the fixture.
struct OutputRoot {
    fs::path dir;
    OutputRoot()
    {
        dir = fs::temp_directory_path() / ("resfim-cli-" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        ::setenv(cli::kOutputRootVar, dir.c_str(), 1);
    }
    ~OutputRoot()
    {
        ::unsetenv(cli::kOutputRootVar);
        fs::remove_all(dir);
    }
};

// Final-round "client,test_dice" rows of a rounds.csv.
std::vector<std::string> final_rows(const fs::path& rounds)
{
    const auto all = lines(slurp(rounds));
    const std::string last_round = all.back().substr(0, all.back().find(','));
    std::vector<std::string> out;
    for (std::size_t i = 1; i < all.size(); ++i) {
        if (all[i].substr(0, all[i].find(',')) != last_round) continue;
        const auto first = all[i].find(',');
        const auto client = all[i].substr(first + 1, all[i].find(',', first + 1) - first - 1);
        out.push_back(client + "," + all[i].substr(all[i].rfind(',') + 1));
    }
    return out;
}

} // namespace

TEST_CASE_FIXTURE(OutputRoot, "zero rounds writes headers only")
{
    const auto r = invoke({"run", "--policy", "fedavg", "--rounds", "0", "--seeds", "7,", "--out", "empty"}, false);
    REQUIRE(r.code == cli::kOk);
    CHECK(slurp(dir / "empty/seed-7/rounds.csv") == "round,client,train_loss,val_dice,test_dice\n");
    CHECK(slurp(dir / "empty/seed-7/layers.csv") == "round,client,layer,masking_rate\n");
    CHECK(fs::exists(dir / "empty/summary.json"));
}

TEST_CASE_FIXTURE(OutputRoot, "runs are reproducible and summarize every client")
{
    REQUIRE(invoke({"run", "--policy", "resfim", "--seeds", "3", "--out", "a"}, true).code == cli::kOk);
    REQUIRE(invoke({"run", "--policy", "resfim", "--seeds", "3", "--out", "b"}, true).code == cli::kOk);
    CHECK(slurp(dir / "a/summary.json") == slurp(dir / "b/summary.json"));
    CHECK(slurp(dir / "a/seed-2/rounds.csv") == slurp(dir / "b/seed-2/rounds.csv"));
    CHECK(slurp(dir / "a/seed-2/layers.csv") == slurp(dir / "b/seed-2/layers.csv"));

    const auto summary = nlohmann::json::parse(slurp(dir / "a/summary.json"));
    REQUIRE(summary["clients"].size() == 3);
    CHECK(summary["average"]["values"].size() == 3);
    for (const auto& c : summary["clients"]) {
        CHECK(c["values"].size() == 3);
        CHECK(c["std"].get<double>() >= 0.0);
    }
    const auto rows = lines(slurp(dir / "a/seed-0/rounds.csv"));
    CHECK(rows.size() == 1 + 2 * 3);
    // Rerunning into an existing directory replaces it.
    REQUIRE(invoke({"run", "--policy", "fedavg", "--seeds", "1", "--out", "a"}, true).code == cli::kOk);
    CHECK(!fs::exists(dir / "a/seed-2"));
}

TEST_CASE_FIXTURE(OutputRoot, "config file values are overridden by flags")
{
    std::ofstream(dir / "run.ini") << "[federation]\nclients = 4\n[training]\nrounds = 1\n";
    REQUIRE(invoke({"run", "-c", (dir / "run.ini").string(), "--seeds", "0,", "--out", "cfg"}, true)
                .code == cli::kOk);
    const auto summary = nlohmann::json::parse(slurp(dir / "cfg/summary.json"));
    CHECK(summary["config"]["clients"] == 3);
    CHECK(summary["config"]["rounds"] == 2);
    CHECK(summary["config"]["image_size"] == 8);
}

TEST_CASE_FIXTURE(OutputRoot, "sweep endpoints reproduce fedavg and local runs bit-for-bit")
{
    REQUIRE(invoke({"run", "--policy", "fedavg", "--seeds", "0,1", "--out", "avg"}, true).code == cli::kOk);
    REQUIRE(invoke({"run", "--policy", "local", "--seeds", "0,1", "--out", "loc"}, true).code == cli::kOk);
    REQUIRE(invoke({"sweep-delta", "--deltas", "0,100", "--seeds", "0,1", "--jobs", "2", "--out", "sw"}, true).code ==
            cli::kOk);
    const auto sweep = lines(slurp(dir / "sw/sweep.csv"));
    REQUIRE(sweep.front() == "delta,seed,client,test_dice");
    REQUIRE(sweep.size() == 1 + 2 * 2 * 3);
    for (const char* seed : {"0", "1"}) {
        for (const auto& [delta, run] : {std::pair{"0", "avg"}, std::pair{"100", "loc"}}) {
            std::vector<std::string> rows;
            const std::string prefix = std::string(delta) + "," + seed + ",";
            for (const auto& l : sweep) {
                if (l.rfind(prefix, 0) == 0) rows.push_back(l.substr(prefix.size()));
            }
            CAPTURE(delta);
            CHECK(rows == final_rows(dir / run / ("seed-" + std::string(seed)) / "rounds.csv"));
        }
    }
}

TEST_CASE_FIXTURE(OutputRoot, "layerstats reflects the masking policy")
{
    for (const char* policy : {"fedavg", "fedbn", "resfim"}) {
        REQUIRE(invoke({"run", "--policy", policy, "--seeds", "2", "--out", policy}, true).code == cli::kOk);
        const auto r = invoke({"layerstats", policy});
        REQUIRE(r.code == cli::kOk);
        const auto rows = lines(slurp(dir / policy / "layers-aggregated.csv"));
        REQUIRE(rows.front() == "client,layer,masking_rate");
        REQUIRE(rows.size() > 3);
        CHECK(rows[1].rfind("0,", 0) == 0);
        CHECK(rows.back().rfind("2,", 0) == 0);
        double total = 0.0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const std::string layer = rows[i].substr(2, rows[i].rfind(',') - 2);
            const double rate = std::stod(rows[i].substr(rows[i].rfind(',') + 1));
            CHECK(rate >= 0.0);
            CHECK(rate <= 1.0);
            total += rate;
            if (std::string(policy) == "fedbn") {
                // Only normalization parameters stay local; the classifier block has none.
                if (layer == "classifier") CHECK(rate == 0.0);
                else CHECK((rate > 0.0 && rate < 0.5));
            }
        }
        if (std::string(policy) == "fedavg") CHECK(total == 0.0);
        if (std::string(policy) == "resfim") CHECK(total > 0.0);
    }
    CHECK(invoke({"layerstats", "missing"}).code == cli::kConfigError);
}

TEST_CASE_FIXTURE(OutputRoot, "configuration errors exit with code 1 and name the line")
{
    std::ofstream(dir / "bad.ini") << "[training]\nrounds = 3\nlr = fast\n";
    const auto r = invoke({"run", "-c", (dir / "bad.ini").string()});
    CHECK(r.code == cli::kConfigError);
    CHECK(r.err.find("bad.ini:3:") != std::string::npos);
    CHECK(invoke({"run", "--delta", "150"}).code == cli::kConfigError);
    CHECK(invoke({"run", "--policy", "fedprox"}).code == cli::kConfigError);
    CHECK(invoke({"run", "--no-such-flag"}).code == cli::kConfigError);
    CHECK(invoke({"sweep-delta", "--deltas", "10,abc"}).code == cli::kConfigError);
    CHECK(invoke({}).code == cli::kConfigError);
    CHECK(invoke({"--help"}).code == cli::kOk);
}

TEST_CASE_FIXTURE(OutputRoot, "divergence exits with code 2 and keeps the partial log")
{
    const auto r = invoke({"run", "--lr", "1e300", "--seeds", "0,", "--out", "boom"}, true);
    CHECK(r.code == cli::kDivergence);
    CHECK(!r.err.empty());
    const auto summary = nlohmann::json::parse(slurp(dir / "boom/summary.json"));
    CHECK(summary["divergence"].size() == 1);
}

TEST_CASE_FIXTURE(OutputRoot, "outputs land under the configured root")
{
    REQUIRE(invoke({"gen-benchmark", "--seed", "4", "--out", "bench"}, true).code == cli::kOk);
    CHECK(fs::exists(dir / "bench/manifest.json"));
    CHECK(fs::is_directory(dir / "bench/banks"));
    std::size_t rten = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "bench")) rten += e.path().extension() == ".rten";
    CHECK(rten > 3);
    CHECK(cli::output_root() == dir);
}

TEST_CASE("verify runs the invariant suite")
{
    const auto r = invoke({"verify"});
    CHECK(r.code == cli::kOk);
    CHECK(r.out.find("FAIL") == std::string::npos);
    CHECK(lines(r.out).size() >= 8);
}
