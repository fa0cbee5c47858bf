#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace resfim {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class Scalar_>
using vec_type = Eigen::Matrix<Scalar_, Eigen::Dynamic, 1>;

template <class Scalar_>
using rowmat_type = Eigen::Matrix<Scalar_, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar_>
using rowmat_map = Eigen::Map<rowmat_type<Scalar_>>;

template <class Scalar_>
using const_rowmat_map = Eigen::Map<const rowmat_type<Scalar_>>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline Index shape_size(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<Index>{});
}

inline std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor. Image batches use NCHW, single images CHW and
/// label maps NHW / HW.
template <class Scalar_>
class BasicTensor {
public:
    using Scalar = Scalar_;
    using Storage = vec_type<Scalar>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, Scalar fill = Scalar{0})
        : shape_(std::move(shape))
        , data_(Storage::Constant(shape_size(shape_), fill))
    {
        check_shape();
    }

    BasicTensor(Shape shape, Storage data)
        : shape_(std::move(shape))
        , data_(std::move(data))
    {
        check_shape();
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    BasicTensor(Shape shape, std::initializer_list<Scalar> values)
        : BasicTensor(std::move(shape), Storage(Eigen::Map<const Storage>(values.begin(), Index(values.size()))))
    {}

    const Shape& shape() const { return shape_; }
    Index rank() const { return Index(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(std::size_t(axis)); }
    Index size() const { return data_.size(); }

    Storage& data() { return data_; }
    const Storage& data() const { return data_; }
    Scalar* ptr() { return data_.data(); }
    const Scalar* ptr() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    /// Element of a rank-4 NCHW tensor.
    Scalar& at(Index n, Index c, Index h, Index w)
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    Scalar at(Index n, Index c, Index h, Index w) const
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    BasicTensor reshaped(Shape shape) const
    {
        return BasicTensor(std::move(shape), data_);
    }

    bool all_finite() const
    {
        if constexpr (std::is_floating_point_v<Scalar>) {
            return data_.allFinite();
        } else {
            return true;
        }
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const
    {
        for (Index d : shape_) {
            if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    Storage data_;
};

using Tensor = BasicTensor<double>;
using LabelTensor = BasicTensor<std::int32_t>;

template <class Scalar>
void require_finite(const BasicTensor<Scalar>& t, const char* what)
{
    if (!t.all_finite()) {
        throw NonFiniteError(std::string(what) + ": non-finite value");
    }
}

template <class Scalar>
void require_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b, const char* what)
{
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
}

/// Stacks equally shaped tensors along a new leading axis.
template <class Scalar>
BasicTensor<Scalar> stack(const std::vector<const BasicTensor<Scalar>*>& items)
{
    if (items.empty()) throw ShapeError("stack: no tensors");
    const Shape& inner = items.front()->shape();
    Shape shape{Index(items.size())};
    shape.insert(shape.end(), inner.begin(), inner.end());
    BasicTensor<Scalar> out(shape);
    const Index stride = shape_size(inner);
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i]->shape() != inner) throw ShapeError("stack: ragged shapes");
        out.data().segment(Index(i) * stride, stride) = items[i]->data();
    }
    return out;
}

/// Slice `i` along the leading axis.
template <class Scalar>
BasicTensor<Scalar> slice_front(const BasicTensor<Scalar>& t, Index i)
{
    Shape inner(t.shape().begin() + 1, t.shape().end());
    const Index stride = shape_size(inner);
    return BasicTensor<Scalar>(inner, vec_type<Scalar>(t.data().segment(i * stride, stride)));
}

} // namespace resfim
