#pragma once

#include <resfim/dataset.hpp>
#include <resfim/nn.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace resfim {

enum class FisherMode {
    Empirical,  // gradients at the dataset labels
    Sampled,    // labels drawn per pixel from the model's predictive distribution
};

struct FisherOptions {
    FisherMode mode = FisherMode::Empirical;
    int label_draws = 1;  // Sampled mode only
};

/// Diagonal of the Fisher information: per-parameter mean squared gradient.
struct FisherDiagonal {
    LayoutPtr layout;
    Eigen::VectorXd values;
    Index sample_count = 0;
};

/// Per-sample gradients are taken in eval mode (BN running statistics), so
/// the estimate does not depend on how samples would have been batched.
FisherDiagonal fisher_diagonal(const Model& model, std::span<const Sample> dataset, const FisherOptions& options = {},
                               std::uint64_t seed = 0);

/// Uniform subsample without replacement, returned in ascending index order.
/// Datasets no larger than `cap` are returned whole.
Dataset subsample(std::span<const Sample> dataset, Index cap, std::uint64_t seed);

/// The ascending indices subsample() would pick from a dataset of size n.
std::vector<Index> subsample_indices(Index n, Index cap, std::uint64_t seed);

enum class ResFimNormalization {
    Global,       // divide by max(max_q |dF_q|, eps)
    Elementwise,  // divide each entry by max(|dF_p|, eps)
};

struct ResFimScores {
    LayoutPtr layout;
    Eigen::VectorXd values;  // in [0,1]
};

inline constexpr double kDefaultResFimEps = 1e-12;

ResFimScores resfim(const FisherDiagonal& f_real, const FisherDiagonal& f_sim, double eps = kDefaultResFimEps,
                    ResFimNormalization normalization = ResFimNormalization::Global);

/// One bit per parameter; 1 = domain-sensitive (kept local).
struct BinaryMask {
    LayoutPtr layout;
    std::vector<std::uint8_t> bits;
    double delta_percent = 0.0;

    Index size() const { return Index(bits.size()); }
    Index popcount() const;
    bool operator[](Index i) const { return bits[std::size_t(i)] != 0; }
};

/// Number of set bits for a given delta: round-half-up of delta% of P.
Index mask_count(double delta_percent, Index total);

/// Sets the k = mask_count(delta, P) largest scores. Equal scores are broken
/// by ascending parameter index.
BinaryMask build_mask(const ResFimScores& scores, double delta_percent);

enum class MaskPolicy { ResFim, FedAvg, FedBN, FedPer, Local };

const char* to_string(MaskPolicy policy);
MaskPolicy parse_policy(const std::string& name);

/// Layer-level masks of the baselines: fedavg none, local all, fedbn the
/// BatchNorm scale/shift, fedper the "classifier" layer.
BinaryMask static_mask(const LayoutPtr& layout, MaskPolicy policy);

struct LayerRate {
    std::string layer_id;
    double rate = 0.0;
};

/// Fraction of set bits per layer, in network-depth order.
std::vector<LayerRate> per_layer_masking_rate(const BinaryMask& mask, const LayoutPtr& layout);

/// Blob: u64 layout hash, u64 parameter count, f64 delta, LSB-first packed bits.
std::string encode_mask(const BinaryMask& mask);
BinaryMask decode_mask(const std::string& bytes, const LayoutPtr& layout);

} // namespace resfim
