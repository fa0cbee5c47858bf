#include <resfim/fisher.hpp>
#include <resfim/rng.hpp>
#include <resfim/rten.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

namespace resfim {

namespace {

LabelTensor sample_labels(const Tensor& logits, Rng& rng)
{
    // logits [1,K,H,W]
    const Index k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    LabelTensor y({1, logits.dim(2), logits.dim(3)});
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::VectorXd p(k);
    for (Index px = 0; px < hw; ++px) {
        for (Index c = 0; c < k; ++c) p[c] = logits[c * hw + px];
        p = (p.array() - p.maxCoeff()).exp();
        p /= p.sum();
        double u = unif(rng), acc = 0.0;
        Index label = k - 1;
        for (Index c = 0; c < k; ++c) {
            acc += p[c];
            if (u < acc) {
                label = c;
                break;
            }
        }
        y[px] = std::int32_t(label);
    }
    return y;
}

} // namespace

FisherDiagonal fisher_diagonal(const Model& model, std::span<const Sample> dataset, const FisherOptions& options,
                               std::uint64_t seed)
{
    if (dataset.empty()) throw std::invalid_argument("fisher_diagonal: empty dataset");
    if (options.mode == FisherMode::Sampled && options.label_draws < 1) {
        throw std::invalid_argument("fisher_diagonal: label_draws must be >= 1");
    }
    FisherDiagonal out{model.layout(), Eigen::VectorXd::Zero(model.layout()->total), Index(dataset.size())};
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Batch b = make_batch(dataset.subspan(i, 1));
        if (options.mode == FisherMode::Empirical) {
            const auto lg = loss_and_grad(model, b.images, b.labels, Mode::Eval);
            out.values.array() += lg.grad.values.array().square();
        } else {
            Rng rng(derive_seed(seed, {std::uint64_t(i)}));
            const Tensor logits = forward(model, b.images, Mode::Eval);
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(out.values.size());
            for (int d = 0; d < options.label_draws; ++d) {
                const auto lg = loss_and_grad(model, b.images, sample_labels(logits, rng), Mode::Eval);
                acc.array() += lg.grad.values.array().square();
            }
            out.values += acc / double(options.label_draws);
        }
    }
    out.values /= double(dataset.size());
    if (!out.values.allFinite()) throw NonFiniteError("fisher_diagonal: non-finite gradients");
    return out;
}

std::vector<Index> subsample_indices(Index n, Index cap, std::uint64_t seed)
{
    if (cap < 1) throw std::invalid_argument("subsample: cap must be positive");
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (n <= cap) return idx;
    Rng rng(seed);
    // Partial Fisher-Yates.
    for (Index i = 0; i < cap; ++i) {
        std::uniform_int_distribution<Index> pick(i, n - 1);
        std::swap(idx[std::size_t(i)], idx[std::size_t(pick(rng))]);
    }
    idx.resize(std::size_t(cap));
    std::sort(idx.begin(), idx.end());
    return idx;
}

Dataset subsample(std::span<const Sample> dataset, Index cap, std::uint64_t seed)
{
    Dataset out;
    for (Index i : subsample_indices(Index(dataset.size()), cap, seed)) out.push_back(dataset[std::size_t(i)]);
    return out;
}

ResFimScores resfim(const FisherDiagonal& f_real, const FisherDiagonal& f_sim, double eps,
                    ResFimNormalization normalization)
{
    if (!(eps > 0.0)) throw std::invalid_argument("resfim: eps must be positive");
    if (!same_layout(f_real.layout, f_sim.layout) || f_real.values.size() != f_sim.values.size()) {
        throw LayoutMismatch("resfim: Fisher layouts differ");
    }
    const Eigen::ArrayXd d = (f_real.values - f_sim.values).array().abs();
    ResFimScores out{f_real.layout, Eigen::VectorXd()};
    if (normalization == ResFimNormalization::Global) {
        const double dmax = d.size() ? d.maxCoeff() : 0.0;
        out.values = (d / std::max(dmax, eps)).matrix();
    } else {
        out.values = (d / d.max(eps)).matrix();
    }
    return out;
}

Index BinaryMask::popcount() const
{
    return Index(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

Index mask_count(double delta_percent, Index total)
{
    if (!(delta_percent >= 0.0 && delta_percent <= 100.0)) {
        throw std::out_of_range("delta must lie in [0,100], got " + std::to_string(delta_percent));
    }
    const auto k = Index(std::floor(delta_percent / 100.0 * double(total) + 0.5));
    return std::clamp<Index>(k, 0, total);
}

BinaryMask build_mask(const ResFimScores& scores, double delta_percent)
{
    const Index total = scores.values.size();
    const Index k = mask_count(delta_percent, total);
    if (!scores.values.allFinite()) throw NonFiniteError("build_mask: non-finite score");
    BinaryMask mask{scores.layout, std::vector<std::uint8_t>(std::size_t(total), 0), delta_percent};
    if (k == 0) return mask;
    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), Index{0});
    const auto& s = scores.values;
    auto before = [&s](Index a, Index b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), before);
    for (Index i = 0; i < k; ++i) mask.bits[std::size_t(order[std::size_t(i)])] = 1;
    return mask;
}

const char* to_string(MaskPolicy policy)
{
    switch (policy) {
    case MaskPolicy::ResFim: return "resfim";
    case MaskPolicy::FedAvg: return "fedavg";
    case MaskPolicy::FedBN: return "fedbn";
    case MaskPolicy::FedPer: return "fedper";
    case MaskPolicy::Local: return "local";
    }
    return "?";
}

MaskPolicy parse_policy(const std::string& name)
{
    for (auto p : {MaskPolicy::ResFim, MaskPolicy::FedAvg, MaskPolicy::FedBN, MaskPolicy::FedPer, MaskPolicy::Local}) {
        if (name == to_string(p)) return p;
    }
    throw std::invalid_argument("unknown mask policy '" + name + "' (expected resfim, fedavg, fedbn, fedper, local)");
}

BinaryMask static_mask(const LayoutPtr& layout, MaskPolicy policy)
{
    BinaryMask mask{layout, std::vector<std::uint8_t>(std::size_t(layout->total), 0), 0.0};
    auto set_where = [&](auto&& pred, const char* missing) {
        bool any = false;
        for (const auto& e : layout->entries) {
            if (!pred(e)) continue;
            any = true;
            std::fill_n(mask.bits.begin() + e.offset, e.length, std::uint8_t{1});
        }
        if (!any) throw std::invalid_argument(std::string("static_mask: ") + missing);
    };
    switch (policy) {
    case MaskPolicy::FedAvg:
        break;
    case MaskPolicy::Local:
        std::fill(mask.bits.begin(), mask.bits.end(), std::uint8_t{1});
        mask.delta_percent = 100.0;
        break;
    case MaskPolicy::FedBN:
        set_where([](const LayoutEntry& e) { return e.kind == LayerKind::BatchNorm2D; },
                  "fedbn requires BatchNorm layers");
        break;
    case MaskPolicy::FedPer:
        set_where([](const LayoutEntry& e) { return e.layer_id == "classifier"; },
                  "fedper requires a 'classifier' layer");
        break;
    case MaskPolicy::ResFim:
        throw std::invalid_argument("static_mask: resfim masks are data-dependent");
    }
    if (policy == MaskPolicy::FedBN || policy == MaskPolicy::FedPer) {
        mask.delta_percent = 100.0 * double(mask.popcount()) / double(std::max<Index>(layout->total, 1));
    }
    return mask;
}

std::vector<LayerRate> per_layer_masking_rate(const BinaryMask& mask, const LayoutPtr& layout)
{
    if (!same_layout(mask.layout, layout) || mask.size() != layout->total) {
        throw LayoutMismatch("per_layer_masking_rate: mask does not match layout");
    }
    std::vector<LayerRate> rates;
    for (const auto& id : layout->layer_ids()) {
        Index set = 0, count = 0;
        for (const auto& e : layout->entries) {
            if (e.layer_id != id) continue;
            count += e.length;
            for (Index i = e.offset; i < e.offset + e.length; ++i) set += mask.bits[std::size_t(i)] ? 1 : 0;
        }
        rates.push_back({id, count ? double(set) / double(count) : 0.0});
    }
    return rates;
}

std::string encode_mask(const BinaryMask& mask)
{
    std::string out(24 + (mask.bits.size() + 7) / 8, '\0');
    const std::uint64_t hash = mask.layout ? mask.layout->hash() : 0;
    const std::uint64_t count = mask.bits.size();
    std::memcpy(out.data(), &hash, 8);
    std::memcpy(out.data() + 8, &count, 8);
    std::memcpy(out.data() + 16, &mask.delta_percent, 8);
    for (std::size_t i = 0; i < mask.bits.size(); ++i) {
        if (mask.bits[i]) out[24 + i / 8] = char(std::uint8_t(out[24 + i / 8]) | (1u << (i % 8)));
    }
    return out;
}

BinaryMask decode_mask(const std::string& bytes, const LayoutPtr& layout)
{
    if (bytes.size() < 24) throw FormatError("mask blob truncated");
    std::uint64_t hash = 0, count = 0;
    double delta = 0.0;
    std::memcpy(&hash, bytes.data(), 8);
    std::memcpy(&count, bytes.data() + 8, 8);
    std::memcpy(&delta, bytes.data() + 16, 8);
    if (hash != layout->hash()) throw LayoutMismatch("mask blob was built for a different layout");
    if (count != std::uint64_t(layout->total) || bytes.size() != 24 + (count + 7) / 8) {
        throw FormatError("mask blob length does not match its parameter count");
    }
    BinaryMask mask{layout, std::vector<std::uint8_t>(count, 0), delta};
    for (std::size_t i = 0; i < count; ++i) mask.bits[i] = (std::uint8_t(bytes[24 + i / 8]) >> (i % 8)) & 1u;
    return mask;
}

} // namespace resfim
