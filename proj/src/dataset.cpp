#include <resfim/dataset.hpp>

namespace resfim {

Batch make_batch(std::span<const Sample> samples)
{
    std::vector<const Tensor*> images;
    std::vector<const LabelTensor*> labels;
    for (const auto& s : samples) {
        images.push_back(&s.image);
        labels.push_back(&s.label);
    }
    return {stack(images), stack(labels)};
}

Batch make_batch(std::span<const Sample> samples, std::span<const Index> indices)
{
    std::vector<const Tensor*> images;
    std::vector<const LabelTensor*> labels;
    for (Index i : indices) {
        images.push_back(&samples[std::size_t(i)].image);
        labels.push_back(&samples[std::size_t(i)].label);
    }
    return {stack(images), stack(labels)};
}

} // namespace resfim
