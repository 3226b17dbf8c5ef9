#include "vlrr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace vlrr {

DimensionError::DimensionError(std::string axis, std::size_t expected, std::size_t actual, const std::string& where)
    : Error(where + ": dimension mismatch on axis '" + axis + "' (expected " + std::to_string(expected) + ", got " +
            std::to_string(actual) + ")"),
      axis_(std::move(axis)),
      expected_(expected),
      actual_(actual) {}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_size(shape_) != values_.size()) {
        throw DimensionError("values", shape_size(shape_), values_.size(), "Tensor" + shape_string(shape_));
    }
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("rank", axis + 1, shape_.size(), "Tensor::extent");
    }
    return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
        throw DimensionError("rank", shape_.size(), index.size(), "Tensor::at");
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= shape_[axis]) {
            throw DimensionError("index[" + std::to_string(axis) + "]", shape_[axis], i, "Tensor::at");
        }
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return values_[offset(index)]; }

double Tensor::at(std::initializer_list<std::size_t> index) const { return values_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != values_.size()) {
        throw DimensionError("size", values_.size(), shape_size(shape), "Tensor::reshaped");
    }
    return Tensor(std::move(shape), values_);
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "Tensor::operator+=");
    for (std::size_t i = 0; i < values_.size(); ++i) {
        values_[i] += other.values_[i];
    }
    return *this;
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
    if (a.shape() != b.shape()) {
        return false;
    }
    return a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_difference");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& where) {
    if (a.rank() != b.rank()) {
        throw DimensionError("rank", a.rank(), b.rank(), where);
    }
    for (std::size_t i = 0; i < a.rank(); ++i) {
        if (a.shape()[i] != b.shape()[i]) {
            throw DimensionError("axis " + std::to_string(i), a.shape()[i], b.shape()[i], where);
        }
    }
}

Tensor gather_rows(const Tensor& batch, std::span<const std::size_t> idx) {
    if (batch.rank() == 0) {
        throw DimensionError("rank", 1, 0, "gather_rows");
    }
    const std::size_t stride = batch.size() / std::max<std::size_t>(batch.extent(0), 1);
    Shape shape = batch.shape();
    shape[0] = idx.size();
    Tensor out(shape);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= batch.extent(0)) {
            throw DimensionError("batch", batch.extent(0), idx[r], "gather_rows");
        }
        std::copy_n(batch.data() + idx[r] * stride, stride, out.data() + r * stride);
    }
    return out;
}

Tensor slice_rows(const Tensor& batch, std::size_t first, std::size_t count) {
    if (first + count > batch.extent(0)) {
        throw DimensionError("batch", batch.extent(0), first + count, "slice_rows");
    }
    const std::size_t stride = batch.size() / std::max<std::size_t>(batch.extent(0), 1);
    Shape shape = batch.shape();
    shape[0] = count;
    Tensor out(shape);
    std::copy_n(batch.data() + first * stride, count * stride, out.data());
    return out;
}

} // namespace vlrr
