#include "cli.hpp"

#include <resfim/rten.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

namespace resfim::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kConfigKeys{
    "clients",   "samples_per_client", "image_size",  "styles",       "base_width", "levels",    "rounds",
    "local_epochs", "batch_size",      "lr",          "lr_decay",     "policy",     "delta",     "eps",
    "beta",      "fisher_cap",         "fisher_mode", "label_draws",  "normalization", "weighting", "seeds",
    "parallel_clients", "checkpoint_interval"};

std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string flag_name(std::string key)
{
    std::replace(key.begin(), key.end(), '_', '-');
    return "--" + key;
}

/// Config file plus `--field value` overrides, resolved after parsing.
struct ConfigFlags {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;

    void attach(CLI::App* app)
    {
        app->add_option("-c,--config", config_path, "INI config file; flags override its values");
        for (const auto& key : kConfigKeys) {
            options[key] = app->add_option(flag_name(key), values[key], "config field " + key);
        }
    }

    FederationConfig resolve() const
    {
        FederationConfig cfg = config_path.empty() ? FederationConfig{} : load_config(config_path);
        for (const auto& key : kConfigKeys) {
            if (options.at(key)->count() == 0) continue;
            try {
                set_config_value(cfg, key, values.at(key));
            } catch (const ConfigError& e) {
                throw ConfigError(flag_name(key) + ": " + e.what());
            }
        }
        try {
            cfg.validate();
        } catch (const ConfigError& e) {
            throw ConfigError((e.field().empty() ? std::string("config") : flag_name(e.field())) + ": " + e.what(),
                              e.field());
        }
        return cfg;
    }
};

fs::path resolve_output(const std::string& out)
{
    const fs::path p(out);
    return p.is_absolute() ? p : output_root() / p;
}

/// Builds a run directory beside its destination and swaps it in on commit,
/// so readers never observe a half-written run.
class StagedDir {
public:
    explicit StagedDir(fs::path final_dir)
        : final_(std::move(final_dir))
        , staging_(final_.parent_path() / ("." + final_.filename().string() + ".tmp-" + std::to_string(::getpid())))
    {
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;
    ~StagedDir()
    {
        std::error_code ec;
        if (!committed_) fs::remove_all(staging_, ec);
    }

    const fs::path& path() const { return staging_; }

    void commit()
    {
        fs::remove_all(final_);
        fs::rename(staging_, final_);
        committed_ = true;
    }

private:
    fs::path final_;
    fs::path staging_;
    bool committed_ = false;
};

void write_text(const fs::path& path, const std::string& text)
{
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

std::string timestamp()
{
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    return buf;
}

json mean_std(const std::vector<double>& v)
{
    if (v.empty()) return {{"mean", nullptr}, {"std", nullptr}, {"values", json::array()}};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
    return {{"mean", mean}, {"std", sd}, {"values", v}};
}

double client_average(const RoundRecord& r)
{
    double s = 0.0;
    for (const auto& c : r.clients) s += c.test_dice;
    return s / double(r.clients.size());
}

json run_manifest(const FederationConfig& cfg, const std::string& config_path, const fs::path& out_dir)
{
    return {{"config_path", config_path}, {"config", config_to_json(cfg)}, {"seeds", cfg.seeds},
            {"output", out_dir.string()}};
}

/// Final-round test Dice per seed and client, with the per-seed client average.
json dice_summary(const FederationConfig& cfg, const std::vector<std::vector<double>>& finals)
{
    json clients = json::array();
    for (int c = 0; c < cfg.clients; ++c) {
        std::vector<double> v;
        for (const auto& f : finals) v.push_back(f[std::size_t(c)]);
        json entry = mean_std(v);
        entry["client"] = c;
        clients.push_back(entry);
    }
    std::vector<double> avg;
    for (const auto& f : finals) avg.push_back(std::accumulate(f.begin(), f.end(), 0.0) / double(f.size()));
    return {{"clients", clients}, {"average", mean_std(avg)}};
}

void report_divergence(std::ostream& err, std::uint64_t seed, const std::string& what)
{
    err << "error: seed " << seed << ": " << what << "\n";
}

int cmd_run(const ConfigFlags& flags, const std::string& out_name, std::ostream& out, std::ostream& err)
{
    const FederationConfig cfg = flags.resolve();
    const fs::path dir = resolve_output(out_name.empty() ? std::string("run-") + to_string(cfg.policy) : out_name);
    StagedDir staged(dir);
    std::ostringstream timing;
    timing << "# started " << timestamp() << "\n";

    std::vector<std::vector<double>> finals;
    json divergences = json::array();
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path seed_dir = staged.path() / ("seed-" + std::to_string(seed));
        fs::create_directories(seed_dir);
        auto on_round = [&](const RoundRecord& rec, std::span<const ClientState> clients) {
            timing << "seed " << seed << " round " << rec.round << " seconds " << rec.wall_seconds << "\n";
            if (cfg.checkpoint_interval > 0 && (rec.round + 1) % cfg.checkpoint_interval == 0) {
                const fs::path cp = seed_dir / "checkpoints" / ("round" + std::to_string(rec.round));
                fs::create_directories(cp);
                for (const auto& c : clients) {
                    const ParameterVector p = flatten(c.model);
                    save_rten(cp / ("client" + std::to_string(c.id) + ".rten"), Tensor({p.size()}, p.values));
                }
            }
        };
        const FederationResult result = run_federation(cfg, benchmark_for(cfg, seed), seed, on_round);
        write_text(seed_dir / "rounds.csv", rounds_csv(result.records));
        write_text(seed_dir / "layers.csv", layers_csv(result.records));
        if (!result.records.empty()) {
            std::vector<double> f;
            for (const auto& c : result.records.back().clients) f.push_back(c.test_dice);
            finals.push_back(std::move(f));
        }
        if (result.divergence) {
            report_divergence(err, seed, *result.divergence);
            divergences.push_back({{"seed", seed}, {"message", *result.divergence}});
            break;
        }
        out << "seed " << seed << ": " << result.records.size() << " rounds";
        if (!result.records.empty()) out << ", final mean test dice " << client_average(result.records.back());
        out << "\n";
    }

    json summary = dice_summary(cfg, finals);
    summary["metric"] = "final_round_test_dice";
    summary["config"] = config_to_json(cfg);
    summary["seeds"] = cfg.seeds;
    summary["divergence"] = divergences;
    write_text(staged.path() / "summary.json", summary.dump(2) + "\n");
    write_text(staged.path() / "manifest.json", run_manifest(cfg, flags.config_path, dir).dump(2) + "\n");
    write_text(staged.path() / "timing.log", timing.str());
    staged.commit();
    out << "wrote " << dir.string() << "\n";
    return divergences.empty() ? kOk : kDivergence;
}

std::vector<double> parse_deltas(const std::string& text)
{
    std::vector<double> out;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        double d = 0.0;
        try {
            d = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw ConfigError("--deltas: cannot parse '" + item + "'");
        if (!(d >= 0.0 && d <= 100.0)) throw ConfigError("--deltas: " + item + " is outside [0,100]");
        out.push_back(d);
    }
    if (out.empty()) throw ConfigError("--deltas: need at least one value");
    return out;
}

int cmd_sweep(const ConfigFlags& flags, const std::string& deltas_text, const std::string& out_name, int jobs,
              std::ostream& out, std::ostream& err)
{
    FederationConfig base = flags.resolve();
    base.policy = MaskPolicy::ResFim;
    const std::vector<double> deltas = parse_deltas(deltas_text);
    if (jobs < 1) throw ConfigError("--jobs: must be >= 1");
    const fs::path dir = resolve_output(out_name.empty() ? std::string("sweep") : out_name);
    StagedDir staged(dir);

    std::map<std::uint64_t, std::vector<ClientSplits>> data;
    for (std::uint64_t seed : base.seeds) data[seed] = benchmark_for(base, seed);

    struct Job {
        double delta;
        std::uint64_t seed;
        FederationResult result;
    };
    std::vector<Job> work;
    for (double d : deltas) {
        for (std::uint64_t s : base.seeds) work.push_back({d, s, {}});
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < work.size(); i = next++) {
            FederationConfig cfg = base;
            cfg.delta = work[i].delta;
            work[i].result = run_federation(cfg, data.at(work[i].seed), work[i].seed);
        }
    };
    std::vector<std::thread> pool;
    for (int j = 1; j < std::min<int>(jobs, int(work.size())); ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::string csv = "delta,seed,client,test_dice\n";
    json per_delta = json::array();
    bool diverged = false;
    for (double d : deltas) {
        std::vector<std::vector<double>> finals;
        for (const auto& job : work) {
            if (job.delta != d) continue;
            if (job.result.divergence) {
                report_divergence(err, job.seed, *job.result.divergence);
                diverged = true;
                continue;
            }
            if (job.result.records.empty()) continue;
            std::vector<double> f;
            for (const auto& c : job.result.records.back().clients) {
                csv += num(d) + "," + std::to_string(job.seed) + "," + std::to_string(c.client) + "," + num(c.test_dice) + "\n";
                f.push_back(c.test_dice);
            }
            finals.push_back(std::move(f));
        }
        json entry = dice_summary(base, finals);
        entry["delta"] = d;
        per_delta.push_back(entry);
        if (!finals.empty()) out << "delta " << d << ": mean test dice " << entry["average"]["mean"].get<double>() << "\n";
    }
    write_text(staged.path() / "sweep.csv", csv);
    write_text(staged.path() / "sweep-summary.json",
               json{{"config", config_to_json(base)}, {"deltas", deltas}, {"results", per_delta}}.dump(2) + "\n");
    write_text(staged.path() / "manifest.json", run_manifest(base, flags.config_path, dir).dump(2) + "\n");
    staged.commit();
    out << "wrote " << dir.string() << "\n";
    return diverged ? kDivergence : kOk;
}

int cmd_layerstats(const std::string& run_dir, std::ostream& out)
{
    const fs::path dir = resolve_output(run_dir);
    std::vector<fs::path> files;
    if (fs::exists(dir / "layers.csv")) files.push_back(dir / "layers.csv");
    if (fs::is_directory(dir)) {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_directory() && entry.path().filename().string().rfind("seed-", 0) == 0 &&
                fs::exists(entry.path() / "layers.csv")) {
                files.push_back(entry.path() / "layers.csv");
            }
        }
    }
    if (files.empty()) throw ConfigError("layerstats: no layers.csv under " + dir.string());
    std::sort(files.begin(), files.end());
    std::string csv = "client,layer,masking_rate\n";
    for (const auto& m : aggregate_layers(files)) csv += std::to_string(m.client) + "," + m.layer + "," + num(m.rate) + "\n";
    write_text(dir / "layers-aggregated.csv", csv);
    out << "wrote " << (dir / "layers-aggregated.csv").string() << "\n";
    return kOk;
}

int cmd_gen_benchmark(const ConfigFlags& flags, const std::string& out_name, std::uint64_t seed, bool seed_given,
                      std::ostream& out)
{
    const FederationConfig cfg = flags.resolve();
    const std::uint64_t s = seed_given ? seed : cfg.seeds.front();
    const fs::path dir = resolve_output(out_name.empty() ? std::string("benchmark") : out_name);
    StagedDir staged(dir);
    const auto data = benchmark_for(cfg, s);
    save_benchmark(staged.path(), data);
    std::vector<AmplitudeBank> banks;
    for (std::size_t c = 0; c < data.size(); ++c) banks.push_back(build_amplitude_bank(int(c), data[c].train));
    save_banks(staged.path() / "banks", banks);
    staged.commit();
    out << "wrote " << dir.string() << " (" << data.size() << " clients, seed " << s << ")\n";
    return kOk;
}

} // namespace

fs::path output_root()
{
    const char* root = std::getenv(kOutputRootVar);
    return root && *root ? fs::path(root) : fs::current_path();
}

std::string rounds_csv(const std::vector<RoundRecord>& records)
{
    std::string s = "round,client,train_loss,val_dice,test_dice\n";
    for (const auto& r : records) {
        for (const auto& c : r.clients) {
            s += std::to_string(r.round) + "," + std::to_string(c.client) + "," + num(c.train_loss) + "," +
                 num(c.val_dice) + "," + num(c.test_dice) + "\n";
        }
    }
    return s;
}

std::string layers_csv(const std::vector<RoundRecord>& records)
{
    std::string s = "round,client,layer,masking_rate\n";
    for (const auto& r : records) {
        for (const auto& c : r.clients) {
            for (const auto& l : c.layer_rates) {
                s += std::to_string(r.round) + "," + std::to_string(c.client) + "," + l.layer_id + "," + num(l.rate) + "\n";
            }
        }
    }
    return s;
}

std::vector<LayerMean> aggregate_layers(const std::vector<fs::path>& layer_files)
{
    std::vector<std::string> order;
    std::map<std::pair<int, std::string>, std::pair<double, long>> acc;
    for (const auto& path : layer_files) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read " + path.string());
        std::string line;
        if (!std::getline(is, line) || line != "round,client,layer,masking_rate") {
            throw ConfigError(path.string() + ": unexpected header");
        }
        int lineno = 1;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream row(line);
            std::string round, client, layer, rate;
            if (!std::getline(row, round, ',') || !std::getline(row, client, ',') || !std::getline(row, layer, ',') ||
                !std::getline(row, rate)) {
                throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
            }
            if (std::find(order.begin(), order.end(), layer) == order.end()) order.push_back(layer);
            auto& a = acc[{std::stoi(client), layer}];
            a.first += std::stod(rate);
            a.second += 1;
        }
    }
    std::vector<LayerMean> out;
    for (const auto& [key, a] : acc) out.push_back({key.first, key.second, a.first / double(a.second)});
    auto depth = [&](const std::string& l) { return std::find(order.begin(), order.end(), l) - order.begin(); };
    std::stable_sort(out.begin(), out.end(), [&](const LayerMean& x, const LayerMean& y) {
        return x.client != y.client ? x.client < y.client : depth(x.layer) < depth(y.layer);
    });
    return out;
}

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Personalized federated segmentation simulator"};
    app.require_subcommand(1);

    ConfigFlags run_flags, sweep_flags, bench_flags;
    std::string run_out, sweep_out, bench_out, deltas = "0,10,20,30,40,50,60,70,80,90,100", stats_dir;
    int jobs = 1;
    std::uint64_t bench_seed = 0;

    auto* run = app.add_subcommand("run", "Run one configuration for every seed");
    run_flags.attach(run);
    run->add_option("-o,--out", run_out, "Output directory (relative paths resolve against $RESFIM_OUTPUT_ROOT)");

    auto* sweep = app.add_subcommand("sweep-delta", "Sweep the personalization fraction for the resfim policy");
    sweep_flags.attach(sweep);
    sweep->add_option("--deltas", deltas, "Comma-separated delta percentages")->capture_default_str();
    sweep->add_option("-o,--out", sweep_out, "Output directory");
    sweep->add_option("-j,--jobs", jobs, "Concurrent runs")->capture_default_str();

    auto* stats = app.add_subcommand("layerstats", "Mean masking rate per client and layer of a run");
    stats->add_option("run_dir", stats_dir, "Run output directory")->required();

    auto* bench = app.add_subcommand("gen-benchmark", "Write the synthetic benchmark and its amplitude banks");
    bench_flags.attach(bench);
    bench->add_option("-o,--out", bench_out, "Output directory");
    auto* seed_opt = bench->add_option("--seed", bench_seed, "Benchmark seed (default: first configured seed)");

    auto* verify = app.add_subcommand("verify", "Run the invariant suite");

    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    try {
        app.parse(std::move(rev));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (run->parsed()) return cmd_run(run_flags, run_out, out, err);
        if (sweep->parsed()) return cmd_sweep(sweep_flags, deltas, sweep_out, jobs, out, err);
        if (stats->parsed()) return cmd_layerstats(stats_dir, out);
        if (bench->parsed()) return cmd_gen_benchmark(bench_flags, bench_out, bench_seed, seed_opt->count() > 0, out);
        if (verify->parsed()) return run_invariant_suite(out) ? kOk : kConfigError;
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return kDivergence;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }
    return kConfigError;
}

} // namespace resfim::cli
