#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace soap {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Links a tensor value to a node on a specific tape. gen identifies the tape
// instance so stale handles from destroyed tapes are ignored.
struct GradHandle {
    std::uint64_t gen = 0;
    int node = -1;
};

// Dense row-major 64-bit float tensor. Plain value type: copies are deep,
// copies of a tracked tensor keep referring to the same tape node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }

    // multi-index access, bounds unchecked beyond debug builds
    double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    const double& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

    // value of a single-element tensor; throws otherwise
    double item() const;

    bool all_finite() const;

    GradHandle node_id;  // set by the active tape when the value is tracked

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const;

    Shape shape_;
    std::vector<double> data_;
};

// strips the tape handle; the value no longer participates in backward
inline Tensor detach(Tensor t) {
    t.node_id = GradHandle{};
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace soap
