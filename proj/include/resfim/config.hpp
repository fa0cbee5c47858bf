#pragma once

#include <resfim/fisher.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace resfim {

enum class ClientWeighting { SampleCount, Uniform };

struct FederationConfig {
    // [benchmark]
    int clients = 6;
    Index samples_per_client = 60;
    Index image_size = 32;
    std::string styles = "heterogeneous";  // or "homogeneous"

    // [model]
    Index base_width = 8;
    Index levels = 4;

    // [training]
    int rounds = 100;
    int local_epochs = 4;
    Index batch_size = 4;
    double lr = 1e-3;
    double lr_decay = 0.99;  // multiplicative, per round

    // [personalization]
    MaskPolicy policy = MaskPolicy::ResFim;
    double delta = 30.0;  // percent of parameters kept local
    double eps = kDefaultResFimEps;
    double beta = 0.05;   // low-frequency swap window fraction
    Index fisher_cap = 64;
    FisherMode fisher_mode = FisherMode::Empirical;
    int label_draws = 1;
    ResFimNormalization normalization = ResFimNormalization::Global;
    ClientWeighting weighting = ClientWeighting::SampleCount;

    // [run]
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool parallel_clients = false;
    int checkpoint_interval = 0;  // 0 disables checkpoints

    double learning_rate(int round) const;
    void validate() const;
};

/// Config error carrying an optional source location ("file:line").
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what, std::string field = {})
        : std::runtime_error(what)
        , field_(std::move(field))
    {}

    /// Offending field for validation errors, empty otherwise.
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// Sets one field from its textual value. `key` is either "section.key" or a
/// bare key name; both spellings are accepted everywhere.
void set_config_value(FederationConfig& config, const std::string& key, const std::string& value);

/// INI-style text: `[section]` headers, `key = value` lines, `#`/`;` comments.
FederationConfig parse_config(const std::string& text, const std::string& source = "<config>");
FederationConfig load_config(const std::filesystem::path& path);

std::string format_config(const FederationConfig& config);
nlohmann::json config_to_json(const FederationConfig& config);

} // namespace resfim
