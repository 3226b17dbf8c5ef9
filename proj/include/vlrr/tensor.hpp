#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlrr {

// ----------------------------- errors -----------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation expects.
class DimensionError : public Error {
public:
    DimensionError(std::string axis, std::size_t expected, std::size_t actual, const std::string& where);

    const std::string& axis() const noexcept { return axis_; }
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::string axis_;
    std::size_t expected_;
    std::size_t actual_;
};

// A scalar argument is outside its admissible range.
class ParameterError : public Error {
public:
    using Error::Error;
};

// Malformed file contents (bad magic, truncation, inconsistent header).
class FormatError : public Error {
public:
    using Error::Error;
};

// Invalid user configuration: plan files, flags, incompatible settings.
class ConfigError : public Error {
public:
    using Error::Error;
};

// ----------------------------- tensor -----------------------------

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. The shape is fixed at construction;
/// there is no in-place reshape, use reshaped() for a relabelled copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }

    // Bounds-checked multi-index access.
    double& at(std::initializer_list<std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const;

    Tensor reshaped(Shape shape) const;

    void fill(double value);
    Tensor& operator+=(const Tensor& other);

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    std::vector<double> values_;
};

/// Same shape and identical bit patterns (distinguishes -0.0 from 0.0 and compares NaNs).
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

double max_abs_difference(const Tensor& a, const Tensor& b);

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& where);

// Copies samples idx[0], idx[1], ... along axis 0 into a new batch.
Tensor gather_rows(const Tensor& batch, std::span<const std::size_t> idx);

// Sub-tensor along axis 0: [first, first + count).
Tensor slice_rows(const Tensor& batch, std::size_t first, std::size_t count);

} // namespace vlrr
