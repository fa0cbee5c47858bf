#pragma once

#include <resfim/tensor.hpp>

#include <span>
#include <vector>

namespace resfim {

/// One segmentation example: image [C,H,W] in [0,1], label [H,W] of class ids.
struct Sample {
    Tensor image;
    LabelTensor label;
};

using Dataset = std::vector<Sample>;

struct Batch {
    Tensor images;       // [N,C,H,W]
    LabelTensor labels;  // [N,H,W]
};

Batch make_batch(std::span<const Sample> samples);
Batch make_batch(std::span<const Sample> samples, std::span<const Index> indices);

} // namespace resfim
