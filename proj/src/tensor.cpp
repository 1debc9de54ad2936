#include "steer/tensor.hpp"

#include <cmath>
#include <sstream>

namespace steer {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_.size() > 2) throw DimensionError("tensor rank > 2 unsupported: " + shape_str(shape_));
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                             " elements");
    }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
    Tensor t;
    t.data_.assign(shape_numel(shape), value);
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t n_rows = rows.size();
    std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(n_rows * n_cols);
    for (const auto& r : rows) {
        if (r.size() != n_cols) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), r.begin(), r.end());
    }
    return matrix(n_rows, n_cols, std::move(values));
}

std::size_t Tensor::rows() const {
    if (shape_.size() == 2) return shape_[0];
    return 1;
}

std::size_t Tensor::cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    return 1;
}

double Tensor::item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

std::vector<double> Tensor::row(std::size_t r) const {
    auto c = cols();
    return {data_.begin() + static_cast<std::ptrdiff_t>(r * c), data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

std::vector<double> Tensor::col(std::size_t c) const {
    std::vector<double> out(rows());
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = at(r, c);
    return out;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace steer
