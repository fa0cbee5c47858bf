#pragma once

#include <resfim/dataset.hpp>
#include <resfim/nn.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace resfim {

/// Imaging style of one institution. Applied to geometry-rendered images;
/// labels come from the geometry alone.
struct DomainStyle {
    double brightness = 0.0;
    double contrast = 1.0;           // gain around mid-grey; negative inverts
    double texture_amplitude = 0.0;  // band-limited additive texture
    double texture_band_low = 1.0;   // cycles per image
    double texture_band_high = 3.0;
    double blur_radius = 0.0;        // Gaussian sigma in pixels

    friend bool operator==(const DomainStyle&, const DomainStyle&) = default;
};

struct SplitRatio {
    double train = 6.0;
    double val = 2.0;
    double test = 2.0;
};

struct BenchmarkSpec {
    int clients = 6;
    Index samples_per_client = 60;
    Index image_size = 32;
    Index max_blobs = 2;
    double noise_sigma = 0.08;
    std::vector<DomainStyle> styles;  // one per client
    SplitRatio split;
};

/// Preset with pairwise distinct styles per client.
BenchmarkSpec heterogeneous_benchmark(int clients = 6, Index samples_per_client = 60, Index image_size = 32);
/// Same geometry distribution and one shared style: clients are i.i.d.
BenchmarkSpec homogeneous_benchmark(int clients = 6, Index samples_per_client = 60, Index image_size = 32);

struct ClientSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

struct SplitSizes {
    Index train = 0, val = 0, test = 0;
};

SplitSizes split_sizes(Index n, const SplitRatio& ratio);

/// Geometry image (background 0.35, foreground 0.65) and its label map.
Sample render_geometry(Index image_size, Index max_blobs, std::uint64_t seed);

/// Styles a [1,H,W] image; result is clamped to [0,1].
Tensor apply_style(const Tensor& image, const DomainStyle& style, double noise_sigma, std::uint64_t seed);

std::vector<ClientSplits> generate_benchmark(const BenchmarkSpec& spec, std::uint64_t seed);

/// 2|P∩T| / (|P|+|T|) over the foreground (label > 0); 1 when both are empty.
double dice_score(const LabelTensor& prediction, const LabelTensor& truth);

/// Mean per-sample Dice of the eval-mode argmax prediction.
double evaluate(const Model& model, std::span<const Sample> dataset);

void save_benchmark(const std::filesystem::path& dir, const std::vector<ClientSplits>& clients);
std::vector<ClientSplits> load_benchmark(const std::filesystem::path& dir);

} // namespace resfim
