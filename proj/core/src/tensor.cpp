#include "dmdd/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "dmdd/error.hpp"

namespace dmdd {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, ErrorKind::InvalidArgument, "negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_numel(shape_), ErrorKind::InvalidArgument,
            "tensor data size does not match shape " + shape_str(shape_));
}

double Tensor::item() const {
    require(data_.size() == 1, ErrorKind::InvalidArgument,
            "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == data_.size(), ErrorKind::InvalidArgument,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), ErrorKind::InvalidArgument,
            "max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void Fnv1a::update(const void* bytes, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < size; ++i) {
        state_ ^= p[i];
        state_ *= 1099511628211ull;
    }
}

void Fnv1a::update(const Tensor& t) {
    for (int d : t.shape()) update(&d, sizeof d);
    update(t.data().data(), t.numel() * sizeof(double));
}

void Fnv1a::update(std::string_view s) { update(s.data(), s.size()); }

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
}

}  // namespace dmdd
