#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dmdd/tensor.hpp"

// Minimal reverse-mode differentiation over Tensor values. Every op works on a
// single image ([C, H, W]); batches are formed by summing per-image losses.
namespace dmdd::ag {

struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();
    bool has_grad() const noexcept { return !grad.empty(); }
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    static Var leaf(Tensor value) { return Var(std::move(value), false); }
    static Var parameter(Tensor value) { return Var(std::move(value), true); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

    bool has_grad() const { return node_->has_grad(); }
    const Tensor& grad() const { return node_->grad; }
    void zero_grad();

    // Same value, no history; gradients do not flow through the result.
    Var detach() const;

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;

    friend Var make_result(Tensor value, std::vector<Var> inputs,
                           std::function<void(Node&)> backward);
};

// Creates the node for an op result. History is only recorded when grad mode
// is on and at least one input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// `loss` must hold a single element.
void backward(const Var& loss);

bool grad_enabled() noexcept;

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var relu(const Var& x);
Var sigmoid(const Var& x);

// reductions to a single element
Var sum(const Var& x);
Var mean(const Var& x);
Var mean_abs_diff(const Var& x, const Tensor& target);
Var bce_mean(const Var& p, const Tensor& target, double clamp_eps = 1e-7);
Var topk_mean(const Var& x, int k);

// [C, H, W] layers
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var affine_channels(const Var& x, const Var& scale, const Var& shift);
Var avg_pool(const Var& x, int kernel);
Var max_pool(const Var& x, int kernel, int stride, int padding);
// Bilinear resize with half-pixel centers (align_corners = false).
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var slice_channels(const Var& x, int begin, int count);
Var concat_channels(std::span<const Var> parts);

// 1 - cos(a(h,w), b(h,w)) per pixel; result [1, H, W]. The product of the two
// norms is clamped below by eps, so a zero vector yields distance 1.
Var cosine_distance(const Var& a, const Var& b, double eps = 1e-8);

Var global_avg_pool(const Var& x);                    // [C,H,W] -> [C]
Var linear(const Var& x, const Var& weight, const Var& bias);  // [N] -> [O]
Var mul_channel(const Var& x, const Var& gate);       // [C,H,W] * [C]
Var mul_pixel(const Var& x, const Var& gate);         // [C,H,W] * [1,H,W]
Var channel_max(const Var& x);                        // -> [1,H,W]
Var channel_mean(const Var& x);                       // -> [1,H,W]
Var softmax_channels(const Var& x);

}  // namespace dmdd::ag
