#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace advpocket {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 array.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor filled(Shape shape, double value);
    static Tensor from(std::vector<double> data);  // 1-D

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s) noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

// Small vector helpers used across modules.

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v) noexcept;

std::vector<double> softmax(std::span<const double> logits);
double log_sum_exp(std::span<const double> v) noexcept;
double l1_distance(std::span<const double> a, std::span<const double> b) noexcept;
double linf_distance(std::span<const double> a, std::span<const double> b) noexcept;
double dot(std::span<const double> a, std::span<const double> b) noexcept;

/// Empirical quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);
double median(std::vector<double> values);

}  // namespace advpocket
