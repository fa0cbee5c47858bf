#include <resfim/federation.hpp>
#include <resfim/rng.hpp>
#include <resfim/rten.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

namespace resfim {

namespace {

constexpr double kWeightTolerance = 1e-9;

void train_local(ClientState& state, const FederationConfig& config, int round, double& mean_loss)
{
    const Dataset& train = state.data.train;
    const Index n = Index(train.size());
    AdamHyper hyper;
    hyper.lr = config.learning_rate(round);
    double loss_sum = 0.0;
    int steps = 0;
    for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Index{0});
        Rng rng(derive_seed(state.seed, {kShuffleStream, std::uint64_t(round), std::uint64_t(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        for (Index start = 0; start < n; start += config.batch_size) {
            const Index len = std::min(config.batch_size, n - start);
            const Batch batch = make_batch(train, std::span<const Index>(order).subspan(std::size_t(start), std::size_t(len)));
            LossAndGrad lg;
            try {
                lg = loss_and_grad(state.model, batch.images, batch.labels, Mode::Train);
            } catch (const NonFiniteError& e) {
                throw DivergenceError("client " + std::to_string(state.id) + " diverged in round " +
                                      std::to_string(round) + ", epoch " + std::to_string(epoch) + ": " + e.what());
            }
            update_running_stats(state.model, lg.batch_stats);
            assign_parameters(state.model, adam_step(flatten(state.model), lg.grad, state.optimizer, hyper));
            loss_sum += lg.loss;
            ++steps;
        }
    }
    if (steps == 0) {
        // No local training: report the current model's loss on the training set.
        const Batch all = make_batch(train);
        mean_loss = softmax_cross_entropy(forward(state.model, all.images, Mode::Eval), all.labels);
        return;
    }
    mean_loss = loss_sum / steps;
    if (!std::isfinite(mean_loss)) {
        throw DivergenceError("client " + std::to_string(state.id) + " diverged in round " + std::to_string(round));
    }
}

} // namespace

void bootstrap(std::vector<ClientState>& clients, ServerState& server)
{
    if (clients.size() < 2) throw std::invalid_argument("bootstrap needs at least two clients");
    for (const auto& c : clients) {
        if (!same_layout(c.model.layout(), clients.front().model.layout())) {
            throw LayoutMismatch("client " + std::to_string(c.id) + " uses a different architecture");
        }
    }
    server.banks.clear();
    for (const auto& c : clients) server.banks.push_back(build_amplitude_bank(c.id, c.data.train));
    for (auto& c : clients) {
        c.foreign_banks.clear();
        for (const auto& bank : server.banks) {
            if (bank.client != c.id) c.foreign_banks.push_back(bank);
        }
    }
}

BinaryMask resfim_mask(const ClientState& state, const FederationConfig& config, int round)
{
    // The endpoints do not depend on the scores; skip the Fisher passes.
    const Index keep = mask_count(config.delta, state.model.layout()->total);
    if (keep == 0) return static_mask(state.model.layout(), MaskPolicy::FedAvg);
    if (keep == state.model.layout()->total) return static_mask(state.model.layout(), MaskPolicy::Local);

    const std::uint64_t r = std::uint64_t(round);
    // Only the simulated entries the Fisher subsample uses are rendered.
    const Index simulated_size = Index(state.data.train.size() * state.foreign_banks.size());
    const auto picked = subsample_indices(simulated_size, config.fisher_cap, derive_seed(state.seed, {kFisherSimStream, r}));
    const Dataset sim = simulate_entries(state.data.train, state.foreign_banks, SwapWindow{config.beta},
                                         derive_seed(state.seed, {kSpectralStream, r}), picked);
    const Dataset real = subsample(state.data.train, config.fisher_cap, derive_seed(state.seed, {kFisherRealStream, r}));
    const FisherOptions options{config.fisher_mode, config.label_draws};
    const FisherDiagonal f_real = fisher_diagonal(state.model, real, options, derive_seed(state.seed, {kFisherRealStream, r, 1}));
    const FisherDiagonal f_sim = fisher_diagonal(state.model, sim, options, derive_seed(state.seed, {kFisherSimStream, r, 1}));
    return build_mask(resfim(f_real, f_sim, config.eps, config.normalization), config.delta);
}

ClientRoundResult client_round(ClientState& state, const FederationConfig& config, int round)
{
    if (state.foreign_banks.empty()) throw std::logic_error("client_round before bootstrap");
    ClientRoundResult out;
    train_local(state, config, round, out.train_loss);
    try {
        state.mask = config.policy == MaskPolicy::ResFim ? resfim_mask(state, config, round)
                                                         : static_mask(state.model.layout(), config.policy);
    } catch (const NonFiniteError& e) {
        throw DivergenceError("client " + std::to_string(state.id) + " produced non-finite Fisher values in round " +
                              std::to_string(round) + ": " + e.what());
    }
    out.upload = {state.id, flatten(state.model), state.mask};
    return out;
}

std::vector<ParameterVector> server_aggregate(std::span<const ParameterVector> params,
                                              std::span<const BinaryMask> masks, std::span<const double> weights)
{
    if (params.empty()) throw std::invalid_argument("server_aggregate: no clients");
    if (masks.size() != params.size() || weights.size() != params.size()) {
        throw std::invalid_argument("server_aggregate: need one mask and one weight per client");
    }
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(wsum - 1.0) > kWeightTolerance || std::any_of(weights.begin(), weights.end(), [](double w) { return w < 0; })) {
        throw std::invalid_argument("server_aggregate: client weights must be non-negative and sum to 1");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_layout(params[i], params.front(), "server_aggregate");
        if (!same_layout(masks[i].layout, params.front().layout) || masks[i].size() != params.front().size()) {
            throw LayoutMismatch("server_aggregate: mask layout mismatch");
        }
    }

    // Shared term, computed once per round.
    Eigen::VectorXd shared = Eigen::VectorXd::Zero(params.front().size());
    for (std::size_t i = 0; i < params.size(); ++i) shared += weights[i] * params[i].values;

    std::vector<ParameterVector> out;
    out.reserve(params.size());
    for (std::size_t c = 0; c < params.size(); ++c) {
        ParameterVector personal = params[c];
        for (Index p = 0; p < personal.size(); ++p) {
            if (!masks[c][p]) personal.values[p] = shared[p];
        }
        out.push_back(std::move(personal));
    }
    return out;
}

std::vector<double> client_weights(std::span<const ClientState> clients, ClientWeighting weighting)
{
    std::vector<double> w(clients.size(), 1.0 / double(clients.size()));
    if (weighting == ClientWeighting::SampleCount) {
        double total = 0.0;
        for (const auto& c : clients) total += double(c.data.train.size());
        for (std::size_t i = 0; i < clients.size(); ++i) w[i] = double(clients[i].data.train.size()) / total;
    }
    return w;
}

std::vector<std::string> server_objects(const ServerState& server)
{
    std::vector<std::string> out;
    for (const auto& bank : server.banks) {
        for (const auto& a : bank.spectra) out.push_back(encode_rten(a.values));
    }
    for (const auto& up : server.received) {
        out.push_back(encode_rten(Tensor({up.params.size()}, up.params.values)));
        out.push_back(encode_mask(up.mask));
    }
    return out;
}

UNetSpec model_spec(const FederationConfig& config)
{
    UNetSpec spec;
    spec.base_width = config.base_width;
    spec.levels = config.levels;
    return spec;
}

std::vector<ClientSplits> benchmark_for(const FederationConfig& config, std::uint64_t seed)
{
    const BenchmarkSpec spec = config.styles == "homogeneous"
                                   ? homogeneous_benchmark(config.clients, config.samples_per_client, config.image_size)
                                   : heterogeneous_benchmark(config.clients, config.samples_per_client, config.image_size);
    return generate_benchmark(spec, derive_seed(seed, {kBenchmarkStream}));
}

FederationResult run_federation(const FederationConfig& config, const std::vector<ClientSplits>& data,
                                std::uint64_t seed, const RoundCallback& on_round)
{
    config.validate();
    if (data.size() != std::size_t(config.clients)) {
        throw std::invalid_argument("run_federation: expected data for " + std::to_string(config.clients) + " clients");
    }
    // Synchronized start: one parameter draw shared by every client.
    const Model initial = build_mini_unet(model_spec(config), derive_seed(seed, {kInitStream}));

    std::vector<ClientState> clients(data.size());
    for (std::size_t c = 0; c < data.size(); ++c) {
        clients[c].id = int(c);
        clients[c].model = initial;
        clients[c].data = data[c];
        clients[c].seed = derive_seed(seed, {0x636c69656e74ULL, std::uint64_t(c)});
        clients[c].mask = static_mask(initial.layout(), MaskPolicy::FedAvg);
    }
    ServerState server;
    bootstrap(clients, server);
    server.weights = client_weights(clients, config.weighting);

    FederationResult result;
    for (int round = 0; round < config.rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<ClientRoundResult> local(clients.size());
        std::vector<std::string> errors(clients.size());
        auto work = [&](std::size_t c) {
            try {
                local[c] = client_round(clients[c], config, round);
            } catch (const DivergenceError& e) {
                errors[c] = e.what();
            }
        };
        if (config.parallel_clients) {
            std::vector<std::thread> pool;
            for (std::size_t c = 0; c < clients.size(); ++c) pool.emplace_back(work, c);
            for (auto& t : pool) t.join();
        } else {
            for (std::size_t c = 0; c < clients.size(); ++c) work(c);
        }
        for (const auto& e : errors) {
            if (!e.empty()) {
                result.divergence = e;
                break;
            }
        }
        if (result.divergence) break;

        server.received.clear();
        std::vector<ParameterVector> params;
        std::vector<BinaryMask> masks;
        for (auto& l : local) {
            params.push_back(l.upload.params);
            masks.push_back(l.upload.mask);
            server.received.push_back(std::move(l.upload));
        }
        const auto personalized = server_aggregate(params, masks, server.weights);

        RoundRecord record;
        record.round = round;
        for (std::size_t c = 0; c < clients.size(); ++c) {
            assign_parameters(clients[c].model, personalized[c]);
            ClientMetrics m;
            m.client = clients[c].id;
            m.train_loss = local[c].train_loss;
            m.val_dice = evaluate(clients[c].model, clients[c].data.val);
            m.test_dice = evaluate(clients[c].model, clients[c].data.test);
            m.layer_rates = per_layer_masking_rate(masks[c], clients[c].model.layout());
            record.clients.push_back(std::move(m));
        }
        record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_round) on_round(record, clients);
        result.records.push_back(std::move(record));
    }
    for (const auto& c : clients) result.final_models.push_back(c.model);
    return result;
}

} // namespace resfim
