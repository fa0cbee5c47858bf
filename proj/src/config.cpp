#include <resfim/config.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace resfim {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value)
{
    T out{};
    bool ok = !value.empty();
    if constexpr (std::is_floating_point_v<T>) {
        std::size_t pos = 0;
        try {
            out = T(std::stod(value, &pos));
        } catch (const std::exception&) {
            ok = false;
        }
        ok = ok && pos == value.size();
    } else {
        const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
        ok = ok && ec == std::errc{} && end == value.data() + value.size();
    }
    if (!ok) throw ConfigError("invalid value '" + value + "' for " + key);
    return out;
}

bool parse_bool(const std::string& key, const std::string& value)
{
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("invalid boolean '" + value + "' for " + key);
}

// A bare count N means seeds 0..N-1; anything with a comma is an explicit list.
std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& value)
{
    std::vector<std::uint64_t> out;
    if (value.find(',') == std::string::npos) {
        const auto n = parse_number<std::uint64_t>(key, trim(value));
        if (n == 0) throw ConfigError(key + " needs at least one seed");
        for (std::uint64_t s = 0; s < n; ++s) out.push_back(s);
        return out;
    }
    std::istringstream is(value);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_number<std::uint64_t>(key, item));
    }
    if (out.empty()) throw ConfigError(key + " needs at least one seed");
    return out;
}

std::string bare_key(const std::string& key)
{
    const auto dot = key.rfind('.');
    return dot == std::string::npos ? key : key.substr(dot + 1);
}

} // namespace

double FederationConfig::learning_rate(int round) const
{
    return lr * std::pow(lr_decay, double(round));
}

void FederationConfig::validate() const
{
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what, what.substr(0, what.find(' ')));
    };
    require(clients >= 2, "clients must be >= 2");
    require(samples_per_client >= 10, "samples_per_client must be >= 10");
    require(image_size >= 4, "image_size must be >= 4");
    require(styles == "heterogeneous" || styles == "homogeneous", "styles must be heterogeneous or homogeneous");
    require(base_width >= 1, "base_width must be >= 1");
    require(levels >= 2, "levels must be >= 2");
    require(image_size % (Index(1) << (levels - 1)) == 0, "image_size must be divisible by 2^(levels-1)");
    require(rounds >= 0, "rounds must be >= 0");
    require(local_epochs >= 0, "local_epochs must be >= 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(lr > 0.0, "lr must be > 0");
    require(lr_decay > 0.0, "lr_decay must be > 0");
    require(delta >= 0.0 && delta <= 100.0, "delta must lie in [0,100]");
    require(eps > 0.0, "eps must be > 0");
    require(beta >= 0.0 && beta <= 0.5, "beta must lie in [0,0.5]");
    require(fisher_cap >= 1, "fisher_cap must be >= 1");
    require(label_draws >= 1, "label_draws must be >= 1");
    require(!seeds.empty(), "seeds must list at least one seed");
    require(checkpoint_interval >= 0, "checkpoint_interval must be >= 0");
}

void set_config_value(FederationConfig& c, const std::string& key, const std::string& raw)
{
    const std::string k = bare_key(key);
    const std::string v = trim(raw);
    if (k == "clients") c.clients = parse_number<int>(k, v);
    else if (k == "samples_per_client") c.samples_per_client = parse_number<Index>(k, v);
    else if (k == "image_size") c.image_size = parse_number<Index>(k, v);
    else if (k == "styles") c.styles = v;
    else if (k == "base_width") c.base_width = parse_number<Index>(k, v);
    else if (k == "levels") c.levels = parse_number<Index>(k, v);
    else if (k == "rounds") c.rounds = parse_number<int>(k, v);
    else if (k == "local_epochs") c.local_epochs = parse_number<int>(k, v);
    else if (k == "batch_size") c.batch_size = parse_number<Index>(k, v);
    else if (k == "lr") c.lr = parse_number<double>(k, v);
    else if (k == "lr_decay") c.lr_decay = parse_number<double>(k, v);
    else if (k == "policy") {
        try {
            c.policy = parse_policy(v);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    else if (k == "delta") c.delta = parse_number<double>(k, v);
    else if (k == "eps") c.eps = parse_number<double>(k, v);
    else if (k == "beta") c.beta = parse_number<double>(k, v);
    else if (k == "fisher_cap") c.fisher_cap = parse_number<Index>(k, v);
    else if (k == "fisher_mode") {
        if (v == "empirical") c.fisher_mode = FisherMode::Empirical;
        else if (v == "sampled") c.fisher_mode = FisherMode::Sampled;
        else throw ConfigError("fisher_mode must be empirical or sampled");
    }
    else if (k == "label_draws") c.label_draws = parse_number<int>(k, v);
    else if (k == "normalization") {
        if (v == "global") c.normalization = ResFimNormalization::Global;
        else if (v == "elementwise") c.normalization = ResFimNormalization::Elementwise;
        else throw ConfigError("normalization must be global or elementwise");
    }
    else if (k == "weighting") {
        if (v == "samples") c.weighting = ClientWeighting::SampleCount;
        else if (v == "uniform") c.weighting = ClientWeighting::Uniform;
        else throw ConfigError("weighting must be samples or uniform");
    }
    else if (k == "seeds") c.seeds = parse_seed_list(k, v);
    else if (k == "parallel_clients") c.parallel_clients = parse_bool(k, v);
    else if (k == "checkpoint_interval") c.checkpoint_interval = parse_number<int>(k, v);
    else throw ConfigError("unknown key '" + key + "'");
}

FederationConfig parse_config(const std::string& text, const std::string& source)
{
    FederationConfig config;
    std::istringstream is(text);
    std::string line;
    std::string section;
    std::map<std::string, int> key_lines;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        key_lines[bare_key(key)] = lineno;
        try {
            set_config_value(config, section.empty() ? key : section + "." + key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        config.validate();
    } catch (const ConfigError& e) {
        const auto it = key_lines.find(e.field());
        const std::string where = it == key_lines.end() ? source : source + ":" + std::to_string(it->second);
        throw ConfigError(where + ": " + e.what(), e.field());
    }
    return config;
}

FederationConfig load_config(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw ConfigError(path.string() + ": cannot read config");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config(buf.str(), path.string());
}

std::string format_config(const FederationConfig& c)
{
    std::ostringstream os;
    os.precision(17);
    os << "[benchmark]\n"
       << "clients = " << c.clients << "\n"
       << "samples_per_client = " << c.samples_per_client << "\n"
       << "image_size = " << c.image_size << "\n"
       << "styles = " << c.styles << "\n\n"
       << "[model]\n"
       << "base_width = " << c.base_width << "\n"
       << "levels = " << c.levels << "\n\n"
       << "[training]\n"
       << "rounds = " << c.rounds << "\n"
       << "local_epochs = " << c.local_epochs << "\n"
       << "batch_size = " << c.batch_size << "\n"
       << "lr = " << c.lr << "\n"
       << "lr_decay = " << c.lr_decay << "\n\n"
       << "[personalization]\n"
       << "policy = " << to_string(c.policy) << "\n"
       << "delta = " << c.delta << "\n"
       << "eps = " << c.eps << "\n"
       << "beta = " << c.beta << "\n"
       << "fisher_cap = " << c.fisher_cap << "\n"
       << "fisher_mode = " << (c.fisher_mode == FisherMode::Empirical ? "empirical" : "sampled") << "\n"
       << "label_draws = " << c.label_draws << "\n"
       << "normalization = " << (c.normalization == ResFimNormalization::Global ? "global" : "elementwise") << "\n"
       << "weighting = " << (c.weighting == ClientWeighting::SampleCount ? "samples" : "uniform") << "\n\n"
       << "[run]\n"
       << "seeds = ";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) os << (i ? "," : "") << c.seeds[i];
    os << (c.seeds.size() == 1 ? "," : "") << "\n"
       << "parallel_clients = " << (c.parallel_clients ? "true" : "false") << "\n"
       << "checkpoint_interval = " << c.checkpoint_interval << "\n";
    return os.str();
}

nlohmann::json config_to_json(const FederationConfig& c)
{
    return {
        {"clients", c.clients},
        {"samples_per_client", c.samples_per_client},
        {"image_size", c.image_size},
        {"styles", c.styles},
        {"base_width", c.base_width},
        {"levels", c.levels},
        {"rounds", c.rounds},
        {"local_epochs", c.local_epochs},
        {"batch_size", c.batch_size},
        {"lr", c.lr},
        {"lr_decay", c.lr_decay},
        {"policy", to_string(c.policy)},
        {"delta", c.delta},
        {"eps", c.eps},
        {"beta", c.beta},
        {"fisher_cap", c.fisher_cap},
        {"fisher_mode", c.fisher_mode == FisherMode::Empirical ? "empirical" : "sampled"},
        {"label_draws", c.label_draws},
        {"normalization", c.normalization == ResFimNormalization::Global ? "global" : "elementwise"},
        {"weighting", c.weighting == ClientWeighting::SampleCount ? "samples" : "uniform"},
        {"seeds", c.seeds},
        {"parallel_clients", c.parallel_clients},
        {"checkpoint_interval", c.checkpoint_interval},
    };
}

} // namespace resfim
