#include "dmdd/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "dmdd/error.hpp"

namespace dmdd::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void check_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::InvalidArgument,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

void check_chw(const Var& x, const char* op) {
    require(x.value().rank() == 3, ErrorKind::InvalidArgument,
            std::string(op) + ": expected [C,H,W], got " + shape_str(x.shape()));
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

// im2col for a single [C,H,W] image into a (C*k*k) x (Ho*Wo) matrix.
void im2col(const double* x, int channels, int height, int width, int kernel, int stride,
            int padding, int out_h, int out_w, double* cols) {
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
                double* row = cols + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    double* dst = row + static_cast<std::size_t>(oy) * out_w;
                    if (iy < 0 || iy >= height) {
                        std::fill(dst, dst + out_w, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * height + iy) * width;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        dst[ox] = (ix >= 0 && ix < width) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, int channels, int height, int width, int kernel, int stride,
            int padding, int out_h, int out_w, double* x) {
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
                const double* row =
                    cols + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    if (iy < 0 || iy >= height) continue;
                    double* dst = x + (static_cast<std::size_t>(c) * height + iy) * width;
                    const double* src = row + static_cast<std::size_t>(oy) * out_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        if (ix >= 0 && ix < width) dst[ix] += src[ox];
                    }
                }
            }
}

struct BilinearTap {
    int i0, i1;
    double w0, w1;
};

std::vector<BilinearTap> bilinear_taps(int in_size, int out_size) {
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out_size));
    const double ratio = static_cast<double>(in_size) / out_size;
    for (int o = 0; o < out_size; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in_size - 1) i0 = in_size - 1;
        const int i1 = std::min(i0 + 1, in_size - 1);
        const double l = src - i0;
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - l, l};
    }
    return taps;
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var Var::detach() const { return Var(node_->value, false); }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& v : inputs) needs = needs || v.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& v : inputs) node->inputs.push_back(v.node());
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

void backward(const Var& loss) {
    require(loss.defined() && loss.value().numel() == 1, ErrorKind::InvalidArgument,
            "backward() needs a single-element loss");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && node->has_grad()) node->backward(*node);
    }
    // Interior gradients are not needed after the sweep; leaves keep theirs.
    for (Node* node : order)
        if (node->backward) node->grad = Tensor();
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            Node& x = in(self, k);
            if (!x.requires_grad) continue;
            auto& g = x.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            Node& x = in(self, k);
            if (!x.requires_grad) continue;
            const double sign = k == 0 ? 1.0 : -1.0;
            auto& g = x.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += sign * self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        if (x.requires_grad) {
            auto& g = x.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * y.value[i];
        }
        if (y.requires_grad) {
            auto& g = y.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * x.value[i];
        }
    });
}

Var scale(const Var& a, double factor) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v *= factor;
    return make_result(std::move(out), {a}, [factor](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += factor * self.grad[i];
    });
}

Var add_scalar(const Var& a, double offset) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v += offset;
    return make_result(std::move(out), {a}, [](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.vec()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
    return make_result(std::move(out), {x}, [](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (self.value[i] > 0.0) g[i] += self.grad[i];
    });
}

namespace {
double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.vec()) v = stable_sigmoid(v);
    return make_result(std::move(out), {x}, [](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double s = self.value[i];
            g[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var& x) {
    const double total = std::accumulate(x.value().vec().begin(), x.value().vec().end(), 0.0);
    return make_result(Tensor::scalar(total), {x}, [](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (auto& v : g.vec()) v += self.grad[0];
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(x.value().numel());
    require(n > 0, ErrorKind::InvalidArgument, "mean of empty tensor");
    const double total = std::accumulate(x.value().vec().begin(), x.value().vec().end(), 0.0);
    return make_result(Tensor::scalar(total / n), {x}, [n](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        const double d = self.grad[0] / n;
        for (auto& v : g.vec()) v += d;
    });
}

Var mean_abs_diff(const Var& x, const Tensor& target) {
    require(x.shape() == target.shape(), ErrorKind::InvalidArgument,
            "mean_abs_diff: shape mismatch " + shape_str(x.shape()) + " vs " +
                shape_str(target.shape()));
    const double n = static_cast<double>(target.numel());
    double total = 0.0;
    for (std::size_t i = 0; i < target.numel(); ++i) total += std::abs(x.value()[i] - target[i]);
    return make_result(Tensor::scalar(total / n), {x}, [target, n](Node& self) {
        Node& xn = in(self, 0);
        auto& g = xn.grad_buffer();
        const double d = self.grad[0] / n;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double diff = xn.value[i] - target[i];
            if (diff > 0.0) g[i] += d;
            else if (diff < 0.0) g[i] -= d;
        }
    });
}

Var bce_mean(const Var& p, const Tensor& target, double clamp_eps) {
    require(p.shape() == target.shape(), ErrorKind::InvalidArgument,
            "bce_mean: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(target.shape()));
    const double n = static_cast<double>(target.numel());
    const double lo = clamp_eps, hi = 1.0 - clamp_eps;
    double total = 0.0;
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const double q = std::clamp(p.value()[i], lo, hi);
        total -= target[i] * std::log(q) + (1.0 - target[i]) * std::log(1.0 - q);
    }
    return make_result(Tensor::scalar(total / n), {p}, [target, n, lo, hi](Node& self) {
        Node& pn = in(self, 0);
        auto& g = pn.grad_buffer();
        const double d = self.grad[0] / n;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double q = pn.value[i];
            if (q < lo || q > hi) continue;
            g[i] += d * (q - target[i]) / (q * (1.0 - q));
        }
    });
}

Var topk_mean(const Var& x, int k) {
    const std::size_t n = x.value().numel();
    require(k >= 1 && static_cast<std::size_t>(k) <= n, ErrorKind::InvalidArgument,
            "topk_mean: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const auto& v = x.value();
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::size_t a, std::size_t b) {
        return v[a] > v[b] || (v[a] == v[b] && a < b);
    });
    idx.resize(static_cast<std::size_t>(k));
    double total = 0.0;
    for (auto i : idx) total += v[i];
    return make_result(Tensor::scalar(total / k), {x}, [idx = std::move(idx), k](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        const double d = self.grad[0] / k;
        for (auto i : idx) g[i] += d;
    });
}

// ---------------------------------------------------------------------------
// layers

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
    check_chw(x, "conv2d");
    const auto& ws = weight.shape();
    require(ws.size() == 4 && ws[2] == ws[3], ErrorKind::InvalidArgument,
            "conv2d: weight must be [O,C,k,k], got " + shape_str(ws));
    const int channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    const int out_ch = ws[0], kernel = ws[2];
    require(ws[1] == channels, ErrorKind::InvalidArgument,
            "conv2d: input has " + std::to_string(channels) + " channels, weight expects " +
                std::to_string(ws[1]));
    require(stride >= 1 && padding >= 0, ErrorKind::InvalidArgument, "conv2d: bad stride/padding");
    const int out_h = (height + 2 * padding - kernel) / stride + 1;
    const int out_w = (width + 2 * padding - kernel) / stride + 1;
    require(out_h > 0 && out_w > 0, ErrorKind::InvalidArgument, "conv2d: input smaller than kernel");
    if (bias.defined())
        require(bias.value().numel() == static_cast<std::size_t>(out_ch),
                ErrorKind::InvalidArgument, "conv2d: bias size mismatch");

    const int patch = channels * kernel * kernel;
    const int plane = out_h * out_w;
    const bool pointwise = kernel == 1 && stride == 1 && padding == 0;

    std::vector<double> cols;
    const double* col_ptr = x.value().data().data();
    if (!pointwise) {
        cols.resize(static_cast<std::size_t>(patch) * plane);
        im2col(x.value().data().data(), channels, height, width, kernel, stride, padding, out_h,
               out_w, cols.data());
        col_ptr = cols.data();
    }

    Tensor out(Shape{out_ch, out_h, out_w});
    MapMat(out.data().data(), out_ch, plane).noalias() =
        ConstMapMat(weight.value().data().data(), out_ch, patch) * ConstMapMat(col_ptr, patch, plane);
    if (bias.defined())
        for (int o = 0; o < out_ch; ++o) {
            double* row = out.data().data() + static_cast<std::size_t>(o) * plane;
            const double b = bias.value()[static_cast<std::size_t>(o)];
            for (int i = 0; i < plane; ++i) row[i] += b;
        }

    std::vector<Var> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(std::move(out), std::move(inputs),
                       [=](Node& self) {
                           Node& xn = in(self, 0);
                           Node& wn = in(self, 1);
                           ConstMapMat dout(self.grad.data().data(), out_ch, plane);
                           std::vector<double> cols_local;
                           const double* cp = xn.value.data().data();
                           if (!pointwise) {
                               cols_local.resize(static_cast<std::size_t>(patch) * plane);
                               im2col(xn.value.data().data(), channels, height, width, kernel,
                                      stride, padding, out_h, out_w, cols_local.data());
                               cp = cols_local.data();
                           }
                           if (wn.requires_grad) {
                               MapMat(wn.grad_buffer().data().data(), out_ch, patch).noalias() +=
                                   dout * ConstMapMat(cp, patch, plane).transpose();
                           }
                           if (self.inputs.size() > 2 && in(self, 2).requires_grad) {
                               auto& gb = in(self, 2).grad_buffer();
                               for (int o = 0; o < out_ch; ++o) gb[o] += dout.row(o).sum();
                           }
                           if (xn.requires_grad) {
                               auto& gx = xn.grad_buffer();
                               if (pointwise) {
                                   MapMat(gx.data().data(), patch, plane).noalias() +=
                                       ConstMapMat(wn.value.data().data(), out_ch, patch).transpose() *
                                       dout;
                               } else {
                                   RowMat dcols =
                                       ConstMapMat(wn.value.data().data(), out_ch, patch).transpose() *
                                       dout;
                                   col2im(dcols.data(), channels, height, width, kernel, stride,
                                          padding, out_h, out_w, gx.data().data());
                               }
                           }
                       });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    check_chw(x, "layer_norm");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    const double n = static_cast<double>(x.value().numel());
    require(gamma.value().numel() == static_cast<std::size_t>(channels) &&
                beta.value().numel() == static_cast<std::size_t>(channels),
            ErrorKind::InvalidArgument, "layer_norm: affine size mismatch");

    const auto& xv = x.value();
    double mu = 0.0;
    for (double v : xv.vec()) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : xv.vec()) var += (v - mu) * (v - mu);
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);

    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    for (int c = 0; c < channels; ++c) {
        const double g = gamma.value()[static_cast<std::size_t>(c)];
        const double b = beta.value()[static_cast<std::size_t>(c)];
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
            xhat[i] = (xv[i] - mu) * inv_std;
            out[i] = g * xhat[i] + b;
        }
    }
    return make_result(std::move(out), {x, gamma, beta},
                       [xhat = std::move(xhat), inv_std, n, channels, plane](Node& self) {
                           Node& xn = in(self, 0);
                           Node& gn = in(self, 1);
                           Node& bn = in(self, 2);
                           const auto& dy = self.grad;
                           if (gn.requires_grad || bn.requires_grad) {
                               for (int c = 0; c < channels; ++c) {
                                   double dg = 0.0, db = 0.0;
                                   for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
                                       dg += dy[i] * xhat[i];
                                       db += dy[i];
                                   }
                                   if (gn.requires_grad) gn.grad_buffer()[c] += dg;
                                   if (bn.requires_grad) bn.grad_buffer()[c] += db;
                               }
                           }
                           if (!xn.requires_grad) return;
                           double sum_d = 0.0, sum_dx = 0.0;
                           std::vector<double> dxhat(xhat.numel());
                           for (int c = 0; c < channels; ++c) {
                               const double g = gn.value[static_cast<std::size_t>(c)];
                               for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
                                   dxhat[i] = dy[i] * g;
                                   sum_d += dxhat[i];
                                   sum_dx += dxhat[i] * xhat[i];
                               }
                           }
                           auto& gx = xn.grad_buffer();
                           for (std::size_t i = 0; i < dxhat.size(); ++i)
                               gx[i] += inv_std / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
                       });
}

Var affine_channels(const Var& x, const Var& scale_v, const Var& shift) {
    check_chw(x, "affine_channels");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    require(scale_v.value().numel() == static_cast<std::size_t>(channels) &&
                shift.value().numel() == static_cast<std::size_t>(channels),
            ErrorKind::InvalidArgument, "affine_channels: size mismatch");
    Tensor out = x.value();
    for (int c = 0; c < channels; ++c)
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i)
            out[i] = out[i] * scale_v.value()[c] + shift.value()[c];
    return make_result(std::move(out), {x, scale_v, shift}, [channels, plane](Node& self) {
        Node& xn = in(self, 0);
        Node& sn = in(self, 1);
        Node& tn = in(self, 2);
        for (int c = 0; c < channels; ++c) {
            double ds = 0.0, dt = 0.0;
            for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
                ds += self.grad[i] * xn.value[i];
                dt += self.grad[i];
                if (xn.requires_grad) xn.grad_buffer()[i] += self.grad[i] * sn.value[c];
            }
            if (sn.requires_grad) sn.grad_buffer()[c] += ds;
            if (tn.requires_grad) tn.grad_buffer()[c] += dt;
        }
    });
}

Var avg_pool(const Var& x, int kernel) {
    check_chw(x, "avg_pool");
    const int channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    require(kernel >= 1 && height % kernel == 0 && width % kernel == 0, ErrorKind::InvalidArgument,
            "avg_pool: kernel " + std::to_string(kernel) + " does not divide " +
                shape_str(x.shape()));
    const int oh = height / kernel, ow = width / kernel;
    const double norm = 1.0 / (kernel * kernel);
    Tensor out(Shape{channels, oh, ow});
    const auto& xv = x.value();
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < height; ++y)
            for (int xx = 0; xx < width; ++xx) out.at(c, y / kernel, xx / kernel) += xv.at(c, y, xx) * norm;
    return make_result(std::move(out), {x}, [=](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < height; ++y)
                for (int xx = 0; xx < width; ++xx)
                    g.at(c, y, xx) += self.grad.at(c, y / kernel, xx / kernel) * norm;
    });
}

Var max_pool(const Var& x, int kernel, int stride, int padding) {
    check_chw(x, "max_pool");
    const int channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    const int oh = (height + 2 * padding - kernel) / stride + 1;
    const int ow = (width + 2 * padding - kernel) / stride + 1;
    require(oh > 0 && ow > 0, ErrorKind::InvalidArgument, "max_pool: input too small");
    Tensor out(Shape{channels, oh, ow});
    std::vector<std::size_t> argmax(out.numel());
    const auto& xv = x.value();
    for (int c = 0; c < channels; ++c)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_i = 0;
                for (int ky = 0; ky < kernel; ++ky)
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int iy = oy * stride - padding + ky;
                        const int ix = ox * stride - padding + kx;
                        if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                        const std::size_t i = (static_cast<std::size_t>(c) * height + iy) * width + ix;
                        if (xv[i] > best || std::isnan(xv[i])) {
                            best = xv[i];
                            best_i = i;
                        }
                    }
                const std::size_t o = (static_cast<std::size_t>(c) * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_i;
            }
    return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
    });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    check_chw(x, "resize_bilinear");
    require(out_h > 0 && out_w > 0, ErrorKind::InvalidArgument, "resize_bilinear: empty target");
    const int channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    if (height == out_h && width == out_w) {
        return make_result(x.value(), {x}, [](Node& self) {
            auto& g = in(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        });
    }
    auto ty = bilinear_taps(height, out_h);
    auto tx = bilinear_taps(width, out_w);
    Tensor out(Shape{channels, out_h, out_w});
    const auto& xv = x.value();
    for (int c = 0; c < channels; ++c)
        for (int oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            for (int ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[ox];
                out.at(c, oy, ox) = a.w0 * (b.w0 * xv.at(c, a.i0, b.i0) + b.w1 * xv.at(c, a.i0, b.i1)) +
                                    a.w1 * (b.w0 * xv.at(c, a.i1, b.i0) + b.w1 * xv.at(c, a.i1, b.i1));
            }
        }
    return make_result(std::move(out), {x}, [ty = std::move(ty), tx = std::move(tx), channels, out_h,
                                             out_w](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (int c = 0; c < channels; ++c)
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& a = ty[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& b = tx[ox];
                    const double d = self.grad.at(c, oy, ox);
                    g.at(c, a.i0, b.i0) += d * a.w0 * b.w0;
                    g.at(c, a.i0, b.i1) += d * a.w0 * b.w1;
                    g.at(c, a.i1, b.i0) += d * a.w1 * b.w0;
                    g.at(c, a.i1, b.i1) += d * a.w1 * b.w1;
                }
            }
    });
}

Var slice_channels(const Var& x, int begin, int count) {
    check_chw(x, "slice_channels");
    require(begin >= 0 && count > 0 && begin + count <= x.dim(0), ErrorKind::InvalidArgument,
            "slice_channels: range out of bounds");
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    const std::size_t offset = static_cast<std::size_t>(begin) * plane;
    Tensor out(Shape{count, x.dim(1), x.dim(2)});
    std::copy_n(x.value().data().begin() + static_cast<std::ptrdiff_t>(offset), out.numel(),
                out.data().begin());
    return make_result(std::move(out), {x}, [offset](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[offset + i] += self.grad[i];
    });
}

Var concat_channels(std::span<const Var> parts) {
    require(!parts.empty(), ErrorKind::InvalidArgument, "concat_channels: no inputs");
    const int height = parts[0].dim(1), width = parts[0].dim(2);
    int channels = 0;
    for (const auto& p : parts) {
        check_chw(p, "concat_channels");
        require(p.dim(1) == height && p.dim(2) == width, ErrorKind::InvalidArgument,
                "concat_channels: spatial size mismatch");
        channels += p.dim(0);
    }
    Tensor out(Shape{channels, height, width});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.value().vec().begin(), p.value().vec().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.value().numel();
    }
    return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
        std::size_t off = 0;
        for (auto& input : self.inputs) {
            const std::size_t n = input->value.numel();
            if (input->requires_grad) {
                auto& g = input->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
            }
            off += n;
        }
    });
}

Var cosine_distance(const Var& a, const Var& b, double eps) {
    check_chw(a, "cosine_distance");
    check_same_shape(a, b, "cosine_distance");
    const int channels = a.dim(0), height = a.dim(1), width = a.dim(2);
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    const auto& av = a.value();
    const auto& bv = b.value();

    Tensor out(Shape{1, height, width});
    // Per-pixel cache for the backward pass: dot, |a|, |b|, clamped denominator.
    std::vector<double> cache(plane * 4);
    for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0, aa = 0.0, bb = 0.0;
        for (int c = 0; c < channels; ++c) {
            const double x = av[c * plane + p], y = bv[c * plane + p];
            dot += x * y;
            aa += x * x;
            bb += y * y;
        }
        const double na = std::sqrt(aa), nb = std::sqrt(bb);
        const double denom = std::max(na * nb, eps);
        out[p] = 1.0 - dot / denom;
        cache[4 * p] = dot;
        cache[4 * p + 1] = na;
        cache[4 * p + 2] = nb;
        cache[4 * p + 3] = denom;
    }
    return make_result(std::move(out), {a, b},
                       [cache = std::move(cache), channels, plane, eps](Node& self) {
                           Node& an = in(self, 0);
                           Node& bn = in(self, 1);
                           for (std::size_t p = 0; p < plane; ++p) {
                               const double d = self.grad[p];
                               if (d == 0.0) continue;
                               const double dot = cache[4 * p], na = cache[4 * p + 1],
                                            nb = cache[4 * p + 2], denom = cache[4 * p + 3];
                               const bool clamped = na * nb < eps;
                               const double cos = dot / denom;
                               // d(1 - cos)/da = -(b/denom - cos * a / |a|^2) when unclamped
                               for (int c = 0; c < channels; ++c) {
                                   const std::size_t i = c * plane + p;
                                   const double x = an.value[i], y = bn.value[i];
                                   if (an.requires_grad) {
                                       double dc = y / denom;
                                       if (!clamped) dc -= cos * x / (na * na);
                                       an.grad_buffer()[i] -= d * dc;
                                   }
                                   if (bn.requires_grad) {
                                       double dc = x / denom;
                                       if (!clamped) dc -= cos * y / (nb * nb);
                                       bn.grad_buffer()[i] -= d * dc;
                                   }
                               }
                           }
                       });
}

Var global_avg_pool(const Var& x) {
    check_chw(x, "global_avg_pool");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor out(Shape{channels});
    for (int c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) s += x.value()[i];
        out[c] = s / static_cast<double>(plane);
    }
    return make_result(std::move(out), {x}, [channels, plane](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (int c = 0; c < channels; ++c) {
            const double d = self.grad[c] / static_cast<double>(plane);
            for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) g[i] += d;
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    require(x.value().rank() == 1 && weight.value().rank() == 2, ErrorKind::InvalidArgument,
            "linear: expected [N] input and [O,N] weight");
    const int n = x.dim(0), o = weight.dim(0);
    require(weight.dim(1) == n && bias.value().numel() == static_cast<std::size_t>(o),
            ErrorKind::InvalidArgument, "linear: size mismatch");
    Tensor out(Shape{o});
    for (int r = 0; r < o; ++r) {
        double s = bias.value()[r];
        for (int c = 0; c < n; ++c) s += weight.value()[static_cast<std::size_t>(r) * n + c] * x.value()[c];
        out[r] = s;
    }
    return make_result(std::move(out), {x, weight, bias}, [n, o](Node& self) {
        Node& xn = in(self, 0);
        Node& wn = in(self, 1);
        Node& bn = in(self, 2);
        for (int r = 0; r < o; ++r) {
            const double d = self.grad[r];
            if (bn.requires_grad) bn.grad_buffer()[r] += d;
            for (int c = 0; c < n; ++c) {
                const std::size_t wi = static_cast<std::size_t>(r) * n + c;
                if (wn.requires_grad) wn.grad_buffer()[wi] += d * xn.value[c];
                if (xn.requires_grad) xn.grad_buffer()[c] += d * wn.value[wi];
            }
        }
    });
}

Var mul_channel(const Var& x, const Var& gate) {
    check_chw(x, "mul_channel");
    const int channels = x.dim(0);
    require(gate.value().numel() == static_cast<std::size_t>(channels), ErrorKind::InvalidArgument,
            "mul_channel: gate size mismatch");
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor out = x.value();
    for (int c = 0; c < channels; ++c)
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) out[i] *= gate.value()[c];
    return make_result(std::move(out), {x, gate}, [channels, plane](Node& self) {
        Node& xn = in(self, 0);
        Node& gn = in(self, 1);
        for (int c = 0; c < channels; ++c) {
            double dg = 0.0;
            for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
                dg += self.grad[i] * xn.value[i];
                if (xn.requires_grad) xn.grad_buffer()[i] += self.grad[i] * gn.value[c];
            }
            if (gn.requires_grad) gn.grad_buffer()[c] += dg;
        }
    });
}

Var mul_pixel(const Var& x, const Var& gate) {
    check_chw(x, "mul_pixel");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    require(gate.shape() == Shape{1, x.dim(1), x.dim(2)}, ErrorKind::InvalidArgument,
            "mul_pixel: gate must be [1,H,W]");
    Tensor out = x.value();
    for (int c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] *= gate.value()[p];
    return make_result(std::move(out), {x, gate}, [channels, plane](Node& self) {
        Node& xn = in(self, 0);
        Node& gn = in(self, 1);
        for (int c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = c * plane + p;
                if (xn.requires_grad) xn.grad_buffer()[i] += self.grad[i] * gn.value[p];
                if (gn.requires_grad) gn.grad_buffer()[p] += self.grad[i] * xn.value[i];
            }
    });
}

Var channel_max(const Var& x) {
    check_chw(x, "channel_max");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor out(Shape{1, x.dim(1), x.dim(2)});
    std::vector<std::size_t> argmax(plane);
    for (std::size_t p = 0; p < plane; ++p) {
        std::size_t best = p;
        for (int c = 1; c < channels; ++c)
            if (x.value()[c * plane + p] > x.value()[best] || std::isnan(x.value()[c * plane + p])) best = c * plane + p;
        argmax[p] = best;
        out[p] = x.value()[best];
    }
    return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t p = 0; p < argmax.size(); ++p) g[argmax[p]] += self.grad[p];
    });
}

Var channel_mean(const Var& x) {
    check_chw(x, "channel_mean");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor out(Shape{1, x.dim(1), x.dim(2)});
    for (int c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[p] += x.value()[c * plane + p];
    for (auto& v : out.vec()) v /= channels;
    return make_result(std::move(out), {x}, [channels, plane](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (int c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < plane; ++p) g[c * plane + p] += self.grad[p] / channels;
    });
}

Var softmax_channels(const Var& x) {
    check_chw(x, "softmax_channels");
    const int channels = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor out(x.shape());
    for (std::size_t p = 0; p < plane; ++p) {
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < channels; ++c) m = std::max(m, x.value()[c * plane + p]);
        double z = 0.0;
        for (int c = 0; c < channels; ++c) {
            const double e = std::exp(x.value()[c * plane + p] - m);
            out[c * plane + p] = e;
            z += e;
        }
        for (int c = 0; c < channels; ++c) out[c * plane + p] /= z;
    }
    return make_result(std::move(out), {x}, [channels, plane](Node& self) {
        auto& g = in(self, 0).grad_buffer();
        for (std::size_t p = 0; p < plane; ++p) {
            double dot = 0.0;
            for (int c = 0; c < channels; ++c) dot += self.grad[c * plane + p] * self.value[c * plane + p];
            for (int c = 0; c < channels; ++c) {
                const std::size_t i = c * plane + p;
                g[i] += self.value[i] * (self.grad[i] - dot);
            }
        }
    });
}

}  // namespace dmdd::ag
