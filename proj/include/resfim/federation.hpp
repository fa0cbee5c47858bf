#pragma once

#include <resfim/config.hpp>
#include <resfim/data.hpp>
#include <resfim/fisher.hpp>
#include <resfim/optim.hpp>
#include <resfim/spectral.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace resfim {

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClientState {
    int id = 0;
    Model model;
    ClientSplits data;
    AdamState optimizer;
    BinaryMask mask;
    std::vector<AmplitudeBank> foreign_banks;  // every other client's bank
    std::uint64_t seed = 0;
};

/// What a client sends after local work each round.
struct ClientUpload {
    int client = 0;
    ParameterVector params;
    BinaryMask mask;
};

/// Holds only what clients upload: amplitude banks (once) and per-round
/// parameter vectors with their masks. Never raw images or labels.
struct ServerState {
    std::vector<AmplitudeBank> banks;
    std::vector<ClientUpload> received;
    std::vector<double> weights;
};

/// One-time amplitude exchange. Clients must share one architecture; each
/// ends up holding the banks of all other clients. Idempotent.
void bootstrap(std::vector<ClientState>& clients, ServerState& server);

struct ClientRoundResult {
    ClientUpload upload;
    double train_loss = 0.0;  // mean minibatch loss; eval-mode training-set loss when no step ran
};

/// Local training for the configured epochs, then the round's mask: a static
/// policy mask, or ResFIM on the local data against a freshly simulated
/// cross-client dataset.
ClientRoundResult client_round(ClientState& state, const FederationConfig& config, int round);

/// The ResFIM mask a client would build for its current model in `round`.
BinaryMask resfim_mask(const ClientState& state, const FederationConfig& config, int round);

/// Masked personalised aggregation: entries with a set mask bit keep the
/// client's own value, the rest take the weighted average over all clients.
std::vector<ParameterVector> server_aggregate(std::span<const ParameterVector> params,
                                              std::span<const BinaryMask> masks, std::span<const double> weights);

std::vector<double> client_weights(std::span<const ClientState> clients, ClientWeighting weighting);

/// Serialized form of every object the server holds (RTEN tensors and mask blobs).
std::vector<std::string> server_objects(const ServerState& server);

struct ClientMetrics {
    int client = 0;
    double train_loss = 0.0;
    double val_dice = 0.0;
    double test_dice = 0.0;
    std::vector<LayerRate> layer_rates;
};

struct RoundRecord {
    int round = 0;
    std::vector<ClientMetrics> clients;
    double wall_seconds = 0.0;
};

struct FederationResult {
    std::vector<RoundRecord> records;
    std::vector<Model> final_models;
    std::optional<std::string> divergence;  // set when a client diverged; records hold the partial history
};

using RoundCallback = std::function<void(const RoundRecord&, std::span<const ClientState>)>;

/// Builds the model spec a config describes.
UNetSpec model_spec(const FederationConfig& config);

/// Benchmark for one seed as described by the config.
std::vector<ClientSplits> benchmark_for(const FederationConfig& config, std::uint64_t seed);

/// Runs the full protocol on the given client data. Everything is determined
/// by (config, data, seed).
FederationResult run_federation(const FederationConfig& config, const std::vector<ClientSplits>& data,
                                std::uint64_t seed, const RoundCallback& on_round = {});

} // namespace resfim
