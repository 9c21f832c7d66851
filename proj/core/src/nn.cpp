#include "dmdd/nn.hpp"

#include <cmath>

#include "dmdd/error.hpp"

namespace dmdd::nn {

void ParamList::add(std::string name, const ag::Var& var) {
    require(var.defined(), ErrorKind::Internal, "undefined parameter " + name);
    items_.push_back({std::move(name), var});
}

void ParamList::extend(const ParamList& other) {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
}

std::size_t ParamList::numel() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.var.value().numel();
    return n;
}

void ParamList::zero_grad() const {
    for (const auto& p : items_) {
        ag::Var v = p.var;
        v.zero_grad();
    }
}

void ParamList::set_requires_grad(bool on) const {
    for (const auto& p : items_) p.var.node()->requires_grad = on;
}

std::string ParamList::hash() const {
    Fnv1a h;
    for (const auto& p : items_) {
        h.update(p.name);
        h.update(p.var.value());
    }
    return h.hex();
}

Tensor normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.vec()) v = dist(rng);
    return t;
}

Tensor kaiming_normal(Shape shape, int fan_in, Rng& rng) {
    return normal(std::move(shape), std::sqrt(2.0 / fan_in), rng);
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int padding_, bool with_bias, Rng& rng)
    : stride(stride_), padding(padding_) {
    weight = ag::Var::parameter(kaiming_normal(Shape{out_ch, in_ch, kernel, kernel},
                                               in_ch * kernel * kernel, rng));
    if (with_bias) bias = ag::Var::parameter(Tensor::zeros(Shape{out_ch}));
}

ag::Var Conv2d::forward(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(ParamList& params, const std::string& prefix) const {
    params.add(prefix + ".weight", weight);
    if (bias.defined()) params.add(prefix + ".bias", bias);
}

Conv2d Conv2d::clone() const {
    Conv2d c;
    c.weight = clone_param(weight);
    if (bias.defined()) c.bias = clone_param(bias);
    c.stride = stride;
    c.padding = padding;
    return c;
}

ag::Var clone_param(const ag::Var& p) { return ag::Var(p.value(), p.requires_grad()); }

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    require(lr > 0.0, ErrorKind::InvalidArgument, "Adam: learning rate must be positive");
    for (const auto& p : params_.items()) {
        m_.emplace_back(p.var.value().numel(), 0.0);
        v_.emplace_back(p.var.value().numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto& items = params_.items();
    for (std::size_t k = 0; k < items.size(); ++k) {
        ag::Var var = items[k].var;
        if (!var.requires_grad() || !var.has_grad()) continue;
        auto& w = var.mutable_value();
        const auto& g = var.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

}  // namespace dmdd::nn
