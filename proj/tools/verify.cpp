#include "cli.hpp"

#include <resfim/rng.hpp>

#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>

namespace resfim::cli {

namespace {

Tensor uniform_tensor(Shape shape, std::uint64_t seed, double lo, double hi)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

LabelTensor binary_labels(Shape shape, std::uint64_t seed)
{
    Rng rng(seed);
    std::bernoulli_distribution b(0.5);
    LabelTensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = b(rng) ? 1 : 0;
    return t;
}

bool gradient_check()
{
    UNetSpec spec;
    spec.base_width = 2;
    spec.levels = 3;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Model m = build_mini_unet(spec, seed);
        ParameterVector noisy = flatten(m);
        noisy.values += 0.3 * uniform_tensor({noisy.size()}, seed + 30, -1, 1).data();
        assign_parameters(m, noisy);
        const Tensor x = uniform_tensor({2, 1, 8, 8}, seed + 10, 0.0, 1.0);
        const LabelTensor y = binary_labels({2, 8, 8}, seed + 20);
        for (Mode mode : {Mode::Train, Mode::Eval}) {
            const auto lg = loss_and_grad(m, x, y, mode);
            ParameterVector p = flatten(m);
            Model probe = m;
            const double h = 1e-5;
            for (Index i = 0; i < p.size(); ++i) {
                const double keep = p.values[i];
                p.values[i] = keep + h;
                assign_parameters(probe, p);
                const double up = softmax_cross_entropy(forward(probe, x, mode), y);
                p.values[i] = keep - h;
                assign_parameters(probe, p);
                const double down = softmax_cross_entropy(forward(probe, x, mode), y);
                p.values[i] = keep;
                const double fd = (up - down) / (2 * h), bp = lg.grad.values[i];
                const double diff = std::abs(fd - bp);
                if (diff > 1e-9 && diff > 1e-4 * std::max(std::abs(fd), std::abs(bp))) return false;
            }
        }
    }
    return true;
}

bool flatten_round_trip()
{
    const Model m = build_mini_unet({}, 3);
    const ParameterVector p(m.layout(), uniform_tensor({m.layout()->total}, 4, -1, 1).data());
    Index offset = 0;
    for (const auto& e : m.layout()->entries) {
        if (e.offset != offset) return false;
        offset += e.length;
    }
    return offset == m.layout()->total && flatten(unflatten(m, p)).values == p.values;
}

bool spectral_integrity()
{
    const Tensor x = uniform_tensor({1, 32, 32}, 5, 0.0, 1.0);
    const Spectrum s = fft2d(x);
    const double round_trip = (ifft2d(s).data() - x.data()).cwiseAbs().maxCoeff();
    const double energy = x.data().squaredNorm();
    const double parseval = (s.real.data().squaredNorm() + s.imag.data().squaredNorm()) / 1024.0;
    return round_trip < 1e-10 && std::abs(energy - parseval) <= 1e-9 * energy;
}

bool phase_preservation()
{
    Dataset local, other;
    for (std::uint64_t i = 0; i < 3; ++i) {
        local.push_back({uniform_tensor({1, 16, 16}, 30 + i, 0.0, 1.0), LabelTensor({16, 16})});
        other.push_back({uniform_tensor({1, 16, 16}, 40 + i, 0.0, 1.0), LabelTensor({16, 16})});
    }
    const std::vector<AmplitudeBank> banks{build_amplitude_bank(1, other)};
    const Dataset sim = generate_simulated_dataset(local, banks, SwapWindow{0.1}, 1, SimulationOptions{false});
    for (std::size_t i = 0; i < sim.size(); ++i) {
        if (!(sim[i].label == local[i].label)) return false;
        const auto [a0, p0] = decompose(fft2d(local[i].image));
        const auto [a1, p1] = decompose(fft2d(sim[i].image));
        for (Index k = 0; k < a0.values.size(); ++k) {
            if (a0.values[k] <= 1e-9 || a1.values[k] <= 1e-9) continue;
            double d = std::abs(p0.values[k] - p1.values[k]);
            d = std::min(d, 2 * std::numbers::pi - d);
            if (d >= 1e-8) return false;
        }
    }
    return true;
}

bool mask_semantics()
{
    const Model m = build_mini_unet({}, 1);
    ResFimScores s{m.layout(), uniform_tensor({m.layout()->total}, 6, 0.0, 1.0).data()};
    ResFimScores t{m.layout(), s.values.array().cube() * 5.0 - 2.0};
    BinaryMask prev = build_mask(s, 0);
    for (double delta : {0.0, 1.0, 25.0, 50.0, 99.0, 100.0}) {
        const BinaryMask mask = build_mask(s, delta);
        if (mask.popcount() != mask_count(delta, m.layout()->total)) return false;
        if (mask.bits != build_mask(t, delta).bits) return false;
        for (Index i = 0; i < mask.size(); ++i) {
            if (prev[i] && !mask[i]) return false;
        }
        prev = mask;
    }
    return true;
}

bool aggregation_properties()
{
    const Model m = build_mini_unet({}, 2);
    const auto& layout = m.layout();
    std::vector<ParameterVector> params;
    std::vector<BinaryMask> masks;
    for (std::uint64_t c = 0; c < 3; ++c) {
        params.emplace_back(layout, uniform_tensor({layout->total}, 50 + c, -1, 1).data());
        masks.push_back(build_mask({layout, uniform_tensor({layout->total}, 60 + c, 0, 1).data()}, 30));
    }
    const std::vector<double> w{0.2, 0.3, 0.5};
    const auto out = server_aggregate(params, masks, w);
    for (std::size_t c = 0; c < 3; ++c) {
        for (Index p = 0; p < layout->total; ++p) {
            if (masks[c][p] && out[c].values[p] != params[c].values[p]) return false;
        }
    }
    const std::vector<ParameterVector> same(3, params[0]);
    for (const auto& v : server_aggregate(same, masks, w)) {
        if ((v.values - params[0].values).cwiseAbs().maxCoeff() > 1e-14) return false;
    }
    return true;
}

FederationConfig tiny_federation()
{
    FederationConfig c;
    c.clients = 3;
    c.samples_per_client = 10;
    c.image_size = 8;
    c.base_width = 2;
    c.levels = 2;
    c.rounds = 2;
    c.local_epochs = 1;
    c.fisher_cap = 4;
    return c;
}

std::vector<double> trajectory(const FederationResult& r)
{
    std::vector<double> out;
    for (const auto& rec : r.records) {
        for (const auto& c : rec.clients) out.push_back(c.test_dice);
    }
    return out;
}

bool structural_reductions()
{
    FederationConfig cfg = tiny_federation();
    const auto data = benchmark_for(cfg, 0);
    auto run = [&](MaskPolicy policy, double delta) {
        cfg.policy = policy;
        cfg.delta = delta;
        return trajectory(run_federation(cfg, data, 0));
    };
    return run(MaskPolicy::ResFim, 0) == run(MaskPolicy::FedAvg, 0) &&
           run(MaskPolicy::ResFim, 100) == run(MaskPolicy::Local, 0);
}

bool scheduling_independence()
{
    FederationConfig cfg = tiny_federation();
    const auto data = benchmark_for(cfg, 1);
    const auto serial = trajectory(run_federation(cfg, data, 1));
    cfg.parallel_clients = true;
    return serial == trajectory(run_federation(cfg, data, 1));
}

} // namespace

bool run_invariant_suite(std::ostream& out)
{
    const std::vector<std::pair<const char*, std::function<bool()>>> checks{
        {"gradients match central finite differences", gradient_check},
        {"flatten/unflatten is a bijection with contiguous layout", flatten_round_trip},
        {"fft round trip and Parseval", spectral_integrity},
        {"simulated images keep phase and labels", phase_preservation},
        {"mask popcount, nestedness and order invariance", mask_semantics},
        {"aggregation keeps masked entries and fixes consensus", aggregation_properties},
        {"delta 0 equals fedavg, delta 100 equals local", structural_reductions},
        {"serial and parallel clients agree", scheduling_independence},
    };
    bool all = true;
    for (const auto& [name, check] : checks) {
        bool ok = false;
        try {
            ok = check();
        } catch (const std::exception& e) {
            out << "  (" << e.what() << ")\n";
        }
        out << (ok ? "PASS " : "FAIL ") << name << "\n";
        all = all && ok;
    }
    return all;
}

} // namespace resfim::cli
