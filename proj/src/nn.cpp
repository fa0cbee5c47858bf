#include <resfim/nn.hpp>
#include <resfim/rng.hpp>
#include <resfim/rten.hpp>

#include <cmath>
#include <random>

namespace resfim {

namespace {

constexpr double kBnEps = 1e-5;

using MatrixXdR = rowmat_type<double>;

Layer make_layer(LayerKind kind, std::string block, std::string name)
{
    Layer l;
    l.kind = kind;
    l.block = std::move(block);
    l.name = std::move(name);
    return l;
}

// NCHW tensor -> (C, N*H*W) with column index n*HW + p.
MatrixXdR gather_channels(const Tensor& x)
{
    const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    MatrixXdR m(c, n * hw);
    for (Index i = 0; i < n; ++i) {
        m.middleCols(i * hw, hw) = const_rowmat_map<double>(x.ptr() + i * c * hw, c, hw);
    }
    return m;
}

Tensor scatter_channels(const MatrixXdR& m, Index n, Index h, Index w)
{
    const Index c = m.rows(), hw = h * w;
    Tensor out({n, c, h, w});
    for (Index i = 0; i < n; ++i) {
        rowmat_map<double>(out.ptr() + i * c * hw, c, hw) = m.middleCols(i * hw, hw);
    }
    return out;
}

MatrixXdR im2col(const Tensor& x)
{
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
    MatrixXdR cols = MatrixXdR::Zero(c * 9, n * hw);
    for (Index s = 0; s < n; ++s) {
        for (Index ch = 0; ch < c; ++ch) {
            const double* src = x.ptr() + (s * c + ch) * hw;
            for (Index ky = 0; ky < 3; ++ky) {
                for (Index kx = 0; kx < 3; ++kx) {
                    double* dst = cols.row(ch * 9 + ky * 3 + kx).data() + s * hw;
                    for (Index y = 0; y < h; ++y) {
                        const Index sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        const Index x0 = std::max<Index>(0, 1 - kx);
                        const Index x1 = std::min<Index>(w, w + 1 - kx);
                        for (Index xx = x0; xx < x1; ++xx) {
                            dst[y * w + xx] = src[sy * w + xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    return cols;
}

Tensor col2im(const MatrixXdR& cols, Index n, Index c, Index h, Index w)
{
    const Index hw = h * w;
    Tensor dx({n, c, h, w});
    for (Index s = 0; s < n; ++s) {
        for (Index ch = 0; ch < c; ++ch) {
            double* dst = dx.ptr() + (s * c + ch) * hw;
            for (Index ky = 0; ky < 3; ++ky) {
                for (Index kx = 0; kx < 3; ++kx) {
                    const double* src = cols.row(ch * 9 + ky * 3 + kx).data() + s * hw;
                    for (Index y = 0; y < h; ++y) {
                        const Index sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        const Index x0 = std::max<Index>(0, 1 - kx);
                        const Index x1 = std::min<Index>(w, w + 1 - kx);
                        for (Index xx = x0; xx < x1; ++xx) {
                            dst[sy * w + xx + kx - 1] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// Rank-2 [N,F] tensors are treated as [N,F,1,1].
Tensor as_nchw(const Tensor& x)
{
    if (x.rank() == 4) return x;
    if (x.rank() == 2) return x.reshaped({x.dim(0), x.dim(1), 1, 1});
    throw ShapeError("expected a rank-2 or rank-4 tensor, got " + shape_string(x.shape()));
}

struct NodeCache {
    MatrixXdR cols;              // Conv2D im2col / Dense gathered input
    Tensor xhat;                 // BatchNorm2D
    Eigen::VectorXd inv_std;     // BatchNorm2D
    std::vector<Index> argmax;   // MaxPool2
};

struct Trace {
    std::vector<Tensor> outputs;
    std::vector<NodeCache> cache;
    std::vector<BatchNormStats> batch_stats;
};

const Tensor& node_input(const Trace& tr, const Tensor& x, int idx)
{
    return idx == kModelInput ? x : tr.outputs[std::size_t(idx)];
}

Tensor run_node(const Layer& layer, int node, const std::vector<const Tensor*>& in, Mode mode, NodeCache* cache,
                std::vector<BatchNormStats>* stats)
{
    const Tensor& x = *in.front();
    switch (layer.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2D: {
        if (x.dim(1) != layer.in_channels) {
            throw ShapeError("layer " + layer.block + "." + layer.name + ": expected " +
                             std::to_string(layer.in_channels) + " input channels, got " + std::to_string(x.dim(1)));
        }
        const Index n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const Index k = layer.kind == LayerKind::Conv2D ? layer.in_channels * 9 : layer.in_channels;
        const_rowmat_map<double> weight(layer.params[0].value.ptr(), layer.out_channels, k);
        MatrixXdR cols = layer.kind == LayerKind::Conv2D ? im2col(x) : gather_channels(x);
        MatrixXdR y = weight * cols;
        y.colwise() += layer.params[1].value.data();
        if (cache) cache->cols = std::move(cols);
        return scatter_channels(y, n, h, w);
    }
    case LayerKind::BatchNorm2D: {
        const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        if (c != layer.in_channels) throw ShapeError("batchnorm " + layer.block + ": channel mismatch");
        Eigen::VectorXd mean(c), var(c);
        if (mode == Mode::Train) {
            const double m = double(n * hw);
            if (n * hw < 2) throw ShapeError("batchnorm in train mode needs more than one value per channel");
            for (Index ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (Index i = 0; i < n; ++i) {
                    s += Eigen::Map<const Eigen::VectorXd>(x.ptr() + (i * c + ch) * hw, hw).sum();
                }
                mean[ch] = s / m;
                double ss = 0.0;
                for (Index i = 0; i < n; ++i) {
                    ss += (Eigen::Map<const Eigen::VectorXd>(x.ptr() + (i * c + ch) * hw, hw).array() - mean[ch])
                              .square()
                              .sum();
                }
                var[ch] = ss / m;
            }
            if (stats) stats->push_back({node, mean, var * (m / (m - 1.0))});
        } else {
            mean = layer.running_mean.data();
            var = layer.running_var.data();
        }
        Eigen::VectorXd inv_std = (var.array() + kBnEps).rsqrt();
        Tensor xhat(x.shape());
        Tensor y(x.shape());
        const auto& scale = layer.params[0].value.data();
        const auto& shift = layer.params[1].value.data();
        for (Index i = 0; i < n; ++i) {
            for (Index ch = 0; ch < c; ++ch) {
                const Index off = (i * c + ch) * hw;
                auto xs = Eigen::Map<const Eigen::ArrayXd>(x.ptr() + off, hw);
                auto xh = Eigen::Map<Eigen::ArrayXd>(xhat.ptr() + off, hw);
                xh = (xs - mean[ch]) * inv_std[ch];
                Eigen::Map<Eigen::ArrayXd>(y.ptr() + off, hw) = xh * scale[ch] + shift[ch];
            }
        }
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->inv_std = std::move(inv_std);
        }
        return y;
    }
    case LayerKind::ReLU: {
        Tensor y(x.shape());
        y.data() = x.data().cwiseMax(0.0);
        return y;
    }
    case LayerKind::Sigmoid: {
        Tensor y(x.shape());
        y.data() = (1.0 + (-x.data().array()).exp()).inverse().matrix();
        return y;
    }
    case LayerKind::MaxPool2: {
        const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        if (h % 2 || w % 2) throw ShapeError("maxpool needs even spatial dimensions, got " + shape_string(x.shape()));
        const Index oh = h / 2, ow = w / 2;
        Tensor y({n, c, oh, ow});
        std::vector<Index> arg(std::size_t(y.size()));
        Index o = 0;
        for (Index i = 0; i < n * c; ++i) {
            const double* src = x.ptr() + i * h * w;
            for (Index yy = 0; yy < oh; ++yy) {
                for (Index xx = 0; xx < ow; ++xx, ++o) {
                    Index best = (2 * yy) * w + 2 * xx;
                    for (Index cand : {best + 1, best + w, best + w + 1}) {
                        if (src[cand] > src[best]) best = cand;
                    }
                    y[o] = src[best];
                    arg[std::size_t(o)] = i * h * w + best;
                }
            }
        }
        if (cache) cache->argmax = std::move(arg);
        return y;
    }
    case LayerKind::Upsample2: {
        const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        Tensor y({n, c, 2 * h, 2 * w});
        for (Index i = 0; i < n * c; ++i) {
            const double* src = x.ptr() + i * h * w;
            double* dst = y.ptr() + i * 4 * h * w;
            for (Index yy = 0; yy < 2 * h; ++yy) {
                for (Index xx = 0; xx < 2 * w; ++xx) dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
        return y;
    }
    case LayerKind::Concat: {
        const Tensor& b = *in.at(1);
        if (x.dim(0) != b.dim(0) || x.dim(2) != b.dim(2) || x.dim(3) != b.dim(3)) {
            throw ShapeError("concat " + layer.block + ": incompatible " + shape_string(x.shape()) + " and " +
                             shape_string(b.shape()));
        }
        const Index n = x.dim(0), ca = x.dim(1), cb = b.dim(1), hw = x.dim(2) * x.dim(3);
        Tensor y({n, ca + cb, x.dim(2), x.dim(3)});
        for (Index i = 0; i < n; ++i) {
            y.data().segment(i * (ca + cb) * hw, ca * hw) = x.data().segment(i * ca * hw, ca * hw);
            y.data().segment((i * (ca + cb) + ca) * hw, cb * hw) = b.data().segment(i * cb * hw, cb * hw);
        }
        return y;
    }
    }
    throw std::logic_error("unknown layer kind");
}

Trace run_forward(const Model& model, const Tensor& x, Mode mode, bool keep)
{
    if (x.dim(1) != model.in_channels()) {
        throw ShapeError("model expects " + std::to_string(model.in_channels()) + " input channels, got batch " +
                         shape_string(x.shape()));
    }
    Trace tr;
    const auto& layers = model.layers();
    tr.outputs.reserve(layers.size());
    tr.cache.resize(keep ? layers.size() : 0);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        std::vector<const Tensor*> in;
        for (int src : layers[i].inputs) in.push_back(&node_input(tr, x, src));
        tr.outputs.push_back(
            run_node(layers[i], int(i), in, mode, keep ? &tr.cache[i] : nullptr, &tr.batch_stats));
    }
    return tr;
}

void accumulate(std::vector<Tensor>& grads, std::vector<bool>& live, int node, Tensor&& g)
{
    if (node == kModelInput) return;
    auto& slot = grads[std::size_t(node)];
    if (!live[std::size_t(node)]) {
        slot = std::move(g);
        live[std::size_t(node)] = true;
    } else {
        slot.data() += g.data();
    }
}

void run_backward(const Model& model, const Tensor& x, const Trace& tr, Mode mode, Tensor&& dlogits,
                  Eigen::VectorXd& dparams)
{
    const auto& layers = model.layers();
    std::vector<Tensor> grads(layers.size());
    std::vector<bool> live(layers.size(), false);
    grads.back() = std::move(dlogits);
    live.back() = true;

    for (int i = int(layers.size()) - 1; i >= 0; --i) {
        if (!live[std::size_t(i)]) continue;
        const Layer& layer = layers[std::size_t(i)];
        const Tensor& dy = grads[std::size_t(i)];
        const Tensor& y = tr.outputs[std::size_t(i)];
        const Tensor& in0 = node_input(tr, x, layer.inputs.front());
        const NodeCache& cache = tr.cache[std::size_t(i)];
        const bool needs_dx = layer.inputs.front() != kModelInput;

        switch (layer.kind) {
        case LayerKind::Dense:
        case LayerKind::Conv2D: {
            const Index n = in0.dim(0), c = in0.dim(1), h = in0.dim(2), w = in0.dim(3);
            const Index k = cache.cols.rows();
            MatrixXdR g = gather_channels(dy);
            rowmat_map<double>(dparams.data() + layer.param_offset, layer.out_channels, k).noalias() +=
                g * cache.cols.transpose();
            dparams.segment(layer.param_offset + layer.out_channels * k, layer.out_channels) += g.rowwise().sum();
            if (needs_dx) {
                const_rowmat_map<double> weight(layer.params[0].value.ptr(), layer.out_channels, k);
                MatrixXdR dcols = weight.transpose() * g;
                Tensor dx = layer.kind == LayerKind::Conv2D ? col2im(dcols, n, c, h, w)
                                                            : scatter_channels(dcols, n, h, w);
                accumulate(grads, live, layer.inputs.front(), std::move(dx));
            }
            break;
        }
        case LayerKind::BatchNorm2D: {
            const Index n = in0.dim(0), c = in0.dim(1), hw = in0.dim(2) * in0.dim(3);
            const double m = double(n * hw);
            const auto& scale = layer.params[0].value.data();
            Tensor dx(in0.shape());
            for (Index ch = 0; ch < c; ++ch) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (Index s = 0; s < n; ++s) {
                    const Index off = (s * c + ch) * hw;
                    auto d = Eigen::Map<const Eigen::ArrayXd>(dy.ptr() + off, hw);
                    auto xh = Eigen::Map<const Eigen::ArrayXd>(cache.xhat.ptr() + off, hw);
                    sum_dy += d.sum();
                    sum_dy_xhat += (d * xh).sum();
                }
                dparams[layer.param_offset + ch] += sum_dy_xhat;
                dparams[layer.param_offset + c + ch] += sum_dy;
                if (!needs_dx) continue;
                const double k = scale[ch] * cache.inv_std[ch];
                for (Index s = 0; s < n; ++s) {
                    const Index off = (s * c + ch) * hw;
                    auto d = Eigen::Map<const Eigen::ArrayXd>(dy.ptr() + off, hw);
                    auto xh = Eigen::Map<const Eigen::ArrayXd>(cache.xhat.ptr() + off, hw);
                    auto out = Eigen::Map<Eigen::ArrayXd>(dx.ptr() + off, hw);
                    if (mode == Mode::Train) {
                        out = k * (d - sum_dy / m - xh * (sum_dy_xhat / m));
                    } else {
                        out = k * d;
                    }
                }
            }
            if (needs_dx) accumulate(grads, live, layer.inputs.front(), std::move(dx));
            break;
        }
        case LayerKind::ReLU: {
            if (!needs_dx) break;
            Tensor dx(dy.shape());
            dx.data() = (in0.data().array() > 0.0).select(dy.data(), 0.0);
            accumulate(grads, live, layer.inputs.front(), std::move(dx));
            break;
        }
        case LayerKind::Sigmoid: {
            if (!needs_dx) break;
            Tensor dx(dy.shape());
            dx.data() = (dy.data().array() * y.data().array() * (1.0 - y.data().array())).matrix();
            accumulate(grads, live, layer.inputs.front(), std::move(dx));
            break;
        }
        case LayerKind::MaxPool2: {
            if (!needs_dx) break;
            Tensor dx(in0.shape());
            for (Index o = 0; o < dy.size(); ++o) dx[cache.argmax[std::size_t(o)]] += dy[o];
            accumulate(grads, live, layer.inputs.front(), std::move(dx));
            break;
        }
        case LayerKind::Upsample2: {
            if (!needs_dx) break;
            const Index h = in0.dim(2), w = in0.dim(3);
            Tensor dx(in0.shape());
            for (Index j = 0; j < in0.dim(0) * in0.dim(1); ++j) {
                const double* src = dy.ptr() + j * 4 * h * w;
                double* dst = dx.ptr() + j * h * w;
                for (Index yy = 0; yy < 2 * h; ++yy) {
                    for (Index xx = 0; xx < 2 * w; ++xx) dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
            accumulate(grads, live, layer.inputs.front(), std::move(dx));
            break;
        }
        case LayerKind::Concat: {
            const Tensor& in1 = node_input(tr, x, layer.inputs[1]);
            const Index n = in0.dim(0), ca = in0.dim(1), cb = in1.dim(1), hw = in0.dim(2) * in0.dim(3);
            Tensor da(in0.shape()), db(in1.shape());
            for (Index s = 0; s < n; ++s) {
                da.data().segment(s * ca * hw, ca * hw) = dy.data().segment(s * (ca + cb) * hw, ca * hw);
                db.data().segment(s * cb * hw, cb * hw) = dy.data().segment((s * (ca + cb) + ca) * hw, cb * hw);
            }
            accumulate(grads, live, layer.inputs[0], std::move(da));
            accumulate(grads, live, layer.inputs[1], std::move(db));
            break;
        }
        }
    }
}

} // namespace

const char* to_string(LayerKind kind)
{
    switch (kind) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::BatchNorm2D: return "BatchNorm2D";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Sigmoid: return "Sigmoid";
    case LayerKind::MaxPool2: return "MaxPool2";
    case LayerKind::Upsample2: return "Upsample2";
    case LayerKind::Concat: return "Concat";
    }
    return "?";
}

Layer dense_layer(std::string block, std::string name, Index in, Index out)
{
    Layer l = make_layer(LayerKind::Dense, std::move(block), std::move(name));
    l.in_channels = in;
    l.out_channels = out;
    l.params = {{"weight", Tensor({out, in})}, {"bias", Tensor({out})}};
    return l;
}

Layer conv2d_layer(std::string block, std::string name, Index in, Index out)
{
    Layer l = make_layer(LayerKind::Conv2D, std::move(block), std::move(name));
    l.in_channels = in;
    l.out_channels = out;
    l.params = {{"weight", Tensor({out, in, 3, 3})}, {"bias", Tensor({out})}};
    return l;
}

Layer batchnorm_layer(std::string block, std::string name, Index channels)
{
    Layer l = make_layer(LayerKind::BatchNorm2D, std::move(block), std::move(name));
    l.in_channels = l.out_channels = channels;
    l.params = {{"scale", Tensor({channels}, 1.0)}, {"shift", Tensor({channels})}};
    l.running_mean = Tensor({channels});
    l.running_var = Tensor({channels}, 1.0);
    return l;
}

Layer relu_layer(std::string block, std::string name) { return make_layer(LayerKind::ReLU, std::move(block), std::move(name)); }
Layer sigmoid_layer(std::string block, std::string name) { return make_layer(LayerKind::Sigmoid, std::move(block), std::move(name)); }
Layer maxpool_layer(std::string block, std::string name) { return make_layer(LayerKind::MaxPool2, std::move(block), std::move(name)); }
Layer upsample_layer(std::string block, std::string name) { return make_layer(LayerKind::Upsample2, std::move(block), std::move(name)); }
Layer concat_layer(std::string block, std::string name) { return make_layer(LayerKind::Concat, std::move(block), std::move(name)); }

std::uint64_t ParameterLayout::hash() const
{
    std::string repr;
    for (const auto& e : entries) {
        repr += e.layer_id + '/' + e.param_name + '/' + to_string(e.kind) + '/' + std::to_string(e.offset) + '/' +
                std::to_string(e.length) + ';';
    }
    return fnv1a(repr);
}

std::vector<std::string> ParameterLayout::layer_ids() const
{
    std::vector<std::string> ids;
    for (const auto& e : entries) {
        if (std::find(ids.begin(), ids.end(), e.layer_id) == ids.end()) ids.push_back(e.layer_id);
    }
    return ids;
}

Index ParameterLayout::layer_size(const std::string& layer_id) const
{
    Index n = 0;
    for (const auto& e : entries) {
        if (e.layer_id == layer_id) n += e.length;
    }
    return n;
}

Model::Model(std::vector<Layer> layers, Index in_channels, Index num_classes)
    : layers_(std::move(layers))
    , in_channels_(in_channels)
    , num_classes_(num_classes)
{
    validate();
}

void Model::validate()
{
    if (layers_.empty()) throw ShapeError("model has no layers");
    // Channel bookkeeping: propagate channel counts through the graph.
    std::vector<Index> channels(layers_.size());
    auto channels_of = [&](int src) { return src == kModelInput ? in_channels_ : channels[std::size_t(src)]; };
    auto layout = std::make_shared<ParameterLayout>();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Layer& l = layers_[i];
        const std::size_t arity = l.kind == LayerKind::Concat ? 2 : 1;
        if (l.inputs.size() != arity) throw ShapeError("layer " + l.block + "." + l.name + ": wrong input count");
        for (int src : l.inputs) {
            if (src != kModelInput && (src < 0 || std::size_t(src) >= i)) {
                throw ShapeError("layer " + l.block + "." + l.name + ": inputs must precede the layer");
            }
        }
        const Index cin = channels_of(l.inputs[0]);
        switch (l.kind) {
        case LayerKind::Dense:
        case LayerKind::Conv2D:
        case LayerKind::BatchNorm2D:
            if (cin != l.in_channels) {
                throw ShapeError("layer " + l.block + "." + l.name + " expects " + std::to_string(l.in_channels) +
                                 " channels but receives " + std::to_string(cin));
            }
            channels[i] = l.out_channels;
            break;
        case LayerKind::Concat:
            l.in_channels = cin + channels_of(l.inputs[1]);
            l.out_channels = channels[i] = l.in_channels;
            break;
        default:
            if (!l.params.empty()) throw ShapeError("parameter-free layer kind carries parameters");
            l.in_channels = l.out_channels = channels[i] = cin;
            break;
        }
        l.param_offset = layout->total;
        for (const auto& p : l.params) {
            layout->entries.push_back({l.block, l.name + "." + p.name, l.kind, layout->total, p.value.size()});
            layout->total += p.value.size();
        }
    }
    if (channels.back() != num_classes_) {
        throw ShapeError("model output has " + std::to_string(channels.back()) + " channels, expected " +
                         std::to_string(num_classes_) + " classes");
    }
    layout_ = std::move(layout);
}

Model sequential(std::vector<Layer> layers, Index in_channels, Index num_classes)
{
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].inputs = {int(i) - 1};
    return Model(std::move(layers), in_channels, num_classes);
}

void init_parameters(Model& model, std::uint64_t seed)
{
    Rng rng(derive_seed(seed, {kInitStream}));
    for (auto& l : model.layers()) {
        if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2D) {
            const Index fan_in = l.kind == LayerKind::Conv2D ? l.in_channels * 9 : l.in_channels;
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
            for (Index j = 0; j < l.params[0].value.size(); ++j) l.params[0].value[j] = dist(rng);
            l.params[1].value.data().setZero();
        } else if (l.kind == LayerKind::BatchNorm2D) {
            l.params[0].value.data().setOnes();
            l.params[1].value.data().setZero();
            l.running_mean.data().setZero();
            l.running_var.data().setOnes();
        }
    }
}

Model build_mini_unet(const UNetSpec& spec, std::uint64_t seed)
{
    if (spec.levels < 2 || spec.base_width < 1) throw std::invalid_argument("mini-UNet needs >= 2 levels and width >= 1");
    std::vector<Layer> layers;
    auto add = [&](Layer l, std::vector<int> inputs) {
        l.inputs = std::move(inputs);
        layers.push_back(std::move(l));
        return int(layers.size()) - 1;
    };
    auto conv_block = [&](const std::string& block, int src, Index cin, Index cout) {
        int c = add(conv2d_layer(block, "conv", cin, cout), {src});
        int b = add(batchnorm_layer(block, "bn", cout), {c});
        return add(relu_layer(block, "relu"), {b});
    };

    std::vector<int> skips;
    std::vector<Index> widths;
    Index width = spec.base_width;
    int cur = conv_block("input", kModelInput, spec.in_channels, width);
    skips.push_back(cur);
    widths.push_back(width);
    for (Index lvl = 1; lvl < spec.levels; ++lvl) {
        const std::string block = "enc" + std::to_string(lvl);
        int pooled = add(maxpool_layer(block, "pool"), {cur});
        cur = conv_block(block, pooled, width, width * 2);
        width *= 2;
        skips.push_back(cur);
        widths.push_back(width);
    }
    for (Index lvl = spec.levels - 2; lvl >= 0; --lvl) {
        const std::string block = "dec" + std::to_string(lvl);
        int up = add(upsample_layer(block, "up"), {cur});
        int cat = add(concat_layer(block, "cat"), {up, skips[std::size_t(lvl)]});
        cur = conv_block(block, cat, width + widths[std::size_t(lvl)], widths[std::size_t(lvl)]);
        width = widths[std::size_t(lvl)];
    }
    add(dense_layer("classifier", "fc", width, spec.num_classes), {cur});

    Model model(std::move(layers), spec.in_channels, spec.num_classes);
    init_parameters(model, seed);
    return model;
}

Tensor forward(const Model& model, const Tensor& batch, Mode mode)
{
    const bool flat = batch.rank() == 2;
    Trace tr = run_forward(model, as_nchw(batch), mode, false);
    Tensor out = std::move(tr.outputs.back());
    require_finite(out, "forward");
    if (flat) return out.reshaped({out.dim(0), out.dim(1)});
    return out;
}

LabelTensor predict(const Model& model, const Tensor& batch)
{
    const Tensor logits = as_nchw(forward(model, batch, Mode::Eval));
    const Index n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    LabelTensor out({n, logits.dim(2), logits.dim(3)});
    for (Index s = 0; s < n; ++s) {
        for (Index p = 0; p < hw; ++p) {
            Index best = 0;
            for (Index c = 1; c < k; ++c) {
                if (logits[(s * k + c) * hw + p] > logits[(s * k + best) * hw + p]) best = c;
            }
            out[s * hw + p] = std::int32_t(best);
        }
    }
    return out;
}

double softmax_cross_entropy(const Tensor& logits_in, const LabelTensor& labels, Tensor* dlogits)
{
    const Tensor logits = as_nchw(logits_in);
    const Index n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    if (labels.size() != n * hw) {
        throw ShapeError("labels " + shape_string(labels.shape()) + " do not match logits " +
                         shape_string(logits_in.shape()));
    }
    const double inv_m = 1.0 / double(n * hw);
    if (dlogits) *dlogits = Tensor(logits.shape());
    double loss = 0.0;
    Eigen::VectorXd z(k);
    for (Index s = 0; s < n; ++s) {
        for (Index p = 0; p < hw; ++p) {
            const std::int32_t y = labels[s * hw + p];
            if (y < 0 || y >= k) {
                throw std::out_of_range("label " + std::to_string(y) + " outside class range [0," +
                                        std::to_string(k) + ")");
            }
            for (Index c = 0; c < k; ++c) z[c] = logits[(s * k + c) * hw + p];
            const double zmax = z.maxCoeff();
            const double lse = zmax + std::log((z.array() - zmax).exp().sum());
            loss += lse - z[y];
            if (dlogits) {
                for (Index c = 0; c < k; ++c) {
                    (*dlogits)[(s * k + c) * hw + p] = (std::exp(z[c] - lse) - (c == y ? 1.0 : 0.0)) * inv_m;
                }
            }
        }
    }
    return loss * inv_m;
}

LossAndGrad loss_and_grad(const Model& model, const Tensor& batch, const LabelTensor& labels, Mode mode)
{
    const Tensor x = as_nchw(batch);
    Trace tr = run_forward(model, x, mode, true);
    require_finite(tr.outputs.back(), "forward");
    Tensor dlogits;
    LossAndGrad out;
    out.loss = softmax_cross_entropy(tr.outputs.back(), labels, &dlogits);
    out.grad = GradientVector::zeros(model.layout());
    run_backward(model, x, tr, mode, std::move(dlogits), out.grad.values);
    if (!std::isfinite(out.loss) || !out.grad.values.allFinite()) {
        throw NonFiniteError("loss_and_grad: non-finite loss or gradient");
    }
    out.batch_stats = std::move(tr.batch_stats);
    return out;
}

void update_running_stats(Model& model, const std::vector<BatchNormStats>& stats, double momentum)
{
    for (const auto& s : stats) {
        Layer& l = model.layers().at(std::size_t(s.node));
        l.running_mean.data() = (1.0 - momentum) * l.running_mean.data() + momentum * s.mean;
        l.running_var.data() = (1.0 - momentum) * l.running_var.data() + momentum * s.var;
    }
}

ParameterVector flatten(const Model& model)
{
    Eigen::VectorXd values(model.layout()->total);
    for (const auto& l : model.layers()) {
        Index off = l.param_offset;
        for (const auto& p : l.params) {
            values.segment(off, p.value.size()) = p.value.data();
            off += p.value.size();
        }
    }
    return ParameterVector(model.layout(), std::move(values));
}

void assign_parameters(Model& model, const ParameterVector& params)
{
    if (params.values.size() != model.layout()->total) {
        throw LayoutMismatch("unflatten: vector has " + std::to_string(params.values.size()) + " entries, model has " +
                             std::to_string(model.layout()->total));
    }
    if (!same_layout(params.layout, model.layout())) throw LayoutMismatch("unflatten: layout mismatch");
    for (auto& l : model.layers()) {
        Index off = l.param_offset;
        for (auto& p : l.params) {
            p.value.data() = params.values.segment(off, p.value.size());
            off += p.value.size();
        }
    }
}

Model unflatten(const Model& model, const ParameterVector& params)
{
    Model out = model;
    assign_parameters(out, params);
    return out;
}

} // namespace resfim
