#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dmdd/autograd.hpp"

namespace dmdd::nn {

using Rng = std::mt19937_64;

struct NamedParam {
    std::string name;
    ag::Var var;
};

// Ordered, named view over parameters; the order is the serialization order.
class ParamList {
public:
    void add(std::string name, const ag::Var& var);
    void extend(const ParamList& other);

    const std::vector<NamedParam>& items() const noexcept { return items_; }
    std::size_t size() const noexcept { return items_.size(); }
    std::size_t numel() const;

    void zero_grad() const;
    void set_requires_grad(bool on) const;
    std::string hash() const;

private:
    std::vector<NamedParam> items_;
};

Tensor kaiming_normal(Shape shape, int fan_in, Rng& rng);
Tensor normal(Shape shape, double stddev, Rng& rng);

struct Conv2d {
    ag::Var weight;
    ag::Var bias;
    int stride = 1;
    int padding = 0;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, bool with_bias, Rng& rng);

    int in_channels() const { return weight.dim(1); }
    int out_channels() const { return weight.dim(0); }
    ag::Var forward(const ag::Var& x) const;
    void collect(ParamList& params, const std::string& prefix) const;
    Conv2d clone() const;
};

// Adam with bias correction; one instance per parameter list.
class Adam {
public:
    Adam(ParamList params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // Parameters without a gradient buffer or with requires_grad off are skipped.
    void step();
    void zero_grad() const { params_.zero_grad(); }
    long steps() const noexcept { return t_; }
    const ParamList& params() const noexcept { return params_; }

private:
    ParamList params_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

ag::Var clone_param(const ag::Var& p);

}  // namespace dmdd::nn
