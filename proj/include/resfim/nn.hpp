#pragma once

#include <resfim/tensor.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace resfim {

enum class LayerKind {
    Dense,       // per-pixel linear map over channels (rank-2 inputs: plain dense layer)
    Conv2D,      // 3x3, stride 1, same padding
    BatchNorm2D,
    ReLU,
    Sigmoid,
    MaxPool2,    // 2x2, stride 2
    Upsample2,   // nearest neighbour, factor 2
    Concat,      // channel concatenation of two inputs
};

const char* to_string(LayerKind kind);

enum class Mode { Train, Eval };

inline constexpr int kModelInput = -1;

struct Param {
    std::string name;
    Tensor value;
};

struct Layer {
    LayerKind kind = LayerKind::ReLU;
    std::string block;          // layer identifier used for masking statistics
    std::string name;           // unique within the block
    std::vector<int> inputs;    // producer nodes, kModelInput for the model input
    Index in_channels = 0;
    Index out_channels = 0;
    std::vector<Param> params;  // trainable
    Tensor running_mean;        // BatchNorm2D only, never trainable
    Tensor running_var;
    Index param_offset = 0;     // offset of params[0] in the flat parameter vector
};

Layer dense_layer(std::string block, std::string name, Index in, Index out);
Layer conv2d_layer(std::string block, std::string name, Index in, Index out);
Layer batchnorm_layer(std::string block, std::string name, Index channels);
Layer relu_layer(std::string block, std::string name);
Layer sigmoid_layer(std::string block, std::string name);
Layer maxpool_layer(std::string block, std::string name);
Layer upsample_layer(std::string block, std::string name);
Layer concat_layer(std::string block, std::string name);

struct LayoutEntry {
    std::string layer_id;
    std::string param_name;
    LayerKind kind;
    Index offset;
    Index length;

    friend bool operator==(const LayoutEntry&, const LayoutEntry&) = default;
};

/// Ordered map of trainable parameters onto a flat vector. Entries are
/// contiguous and in network-depth order.
struct ParameterLayout {
    std::vector<LayoutEntry> entries;
    Index total = 0;

    std::uint64_t hash() const;
    /// Distinct layer ids in order of first appearance (network depth).
    std::vector<std::string> layer_ids() const;
    Index layer_size(const std::string& layer_id) const;

    friend bool operator==(const ParameterLayout& a, const ParameterLayout& b)
    {
        return a.total == b.total && a.entries == b.entries;
    }
};

using LayoutPtr = std::shared_ptr<const ParameterLayout>;

class LayoutMismatch : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline bool same_layout(const LayoutPtr& a, const LayoutPtr& b)
{
    return a == b || (a && b && *a == *b);
}

/// A flat per-parameter vector tied to a layout. The tag keeps parameters,
/// gradients and other per-parameter quantities from being mixed up.
template <class Tag>
struct FlatVector {
    LayoutPtr layout;
    Eigen::VectorXd values;

    FlatVector() = default;
    FlatVector(LayoutPtr layout_, Eigen::VectorXd values_)
        : layout(std::move(layout_))
        , values(std::move(values_))
    {
        if (!layout || values.size() != layout->total) {
            throw LayoutMismatch("flat vector length does not match its layout");
        }
    }

    static FlatVector zeros(LayoutPtr layout_)
    {
        const Index n = layout_->total;
        return FlatVector(std::move(layout_), Eigen::VectorXd::Zero(n));
    }

    Index size() const { return values.size(); }
};

using ParameterVector = FlatVector<struct ParameterTag>;
using GradientVector = FlatVector<struct GradientTag>;

template <class A, class B>
void require_same_layout(const FlatVector<A>& a, const FlatVector<B>& b, const char* what)
{
    if (!same_layout(a.layout, b.layout)) {
        throw LayoutMismatch(std::string(what) + ": layout mismatch");
    }
}

struct BatchNormStats {
    int node = 0;
    Eigen::VectorXd mean;
    Eigen::VectorXd var;  // unbiased
};

/// A directed acyclic network stored as nodes in execution order; the last
/// node produces the per-pixel class logits.
class Model {
public:
    Model() = default;
    Model(std::vector<Layer> layers, Index in_channels, Index num_classes);

    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }
    Index in_channels() const { return in_channels_; }
    Index num_classes() const { return num_classes_; }
    const LayoutPtr& layout() const { return layout_; }

private:
    void validate();

    std::vector<Layer> layers_;
    Index in_channels_ = 0;
    Index num_classes_ = 0;
    LayoutPtr layout_;
};

/// Chains layers so that each consumes the previous node's output.
Model sequential(std::vector<Layer> layers, Index in_channels, Index num_classes);

/// He-normal weights, zero biases, unit BN scale, zero BN shift.
void init_parameters(Model& model, std::uint64_t seed);

struct UNetSpec {
    Index in_channels = 1;
    Index num_classes = 2;
    Index base_width = 8;  // channel widths base, 2*base, 4*base, ...
    Index levels = 4;      // resolution levels including the input level
};

/// Encoder-decoder with skip connections. Blocks: "input", "enc1".."enc{L-1}",
/// "dec{L-2}".."dec0", "classifier".
Model build_mini_unet(const UNetSpec& spec, std::uint64_t seed);

Tensor forward(const Model& model, const Tensor& batch, Mode mode = Mode::Eval);

/// Per-pixel argmax of the eval-mode logits, shape [N,H,W].
LabelTensor predict(const Model& model, const Tensor& batch);

struct LossAndGrad {
    double loss = 0.0;
    GradientVector grad;
    std::vector<BatchNormStats> batch_stats;  // populated in train mode
};

/// Mean per-pixel softmax cross-entropy and its gradient with respect to
/// every trainable parameter. `labels` has shape [N,H,W] (or [N] for rank-2
/// logits).
LossAndGrad loss_and_grad(const Model& model, const Tensor& batch, const LabelTensor& labels,
                          Mode mode = Mode::Train);

double softmax_cross_entropy(const Tensor& logits, const LabelTensor& labels, Tensor* dlogits = nullptr);

void update_running_stats(Model& model, const std::vector<BatchNormStats>& stats, double momentum = 0.1);

ParameterVector flatten(const Model& model);
Model unflatten(const Model& model, const ParameterVector& params);
void assign_parameters(Model& model, const ParameterVector& params);

} // namespace resfim
