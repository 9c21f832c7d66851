#pragma once

// Independent reference implementations used by unit and acceptance tests.
// They deliberately avoid the library's own helpers (no autograd, no OpenCV).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dmdd/tensor.hpp"

namespace oracle {

using dmdd::Shape;
using dmdd::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.vec()) v = u(rng);
    return t;
}

// Per-pixel cosine distance with scalar loops.
inline double cosine_distance_at(const Tensor& a, const Tensor& b, int y, int x, double eps = 1e-8) {
    double dot = 0, na = 0, nb = 0;
    for (int c = 0; c < a.dim(0); ++c) {
        dot += a.at(c, y, x) * b.at(c, y, x);
        na += a.at(c, y, x) * a.at(c, y, x);
        nb += b.at(c, y, x) * b.at(c, y, x);
    }
    return 1.0 - dot / std::max(std::sqrt(na) * std::sqrt(nb), eps);
}

inline double mean_distance(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (int y = 0; y < a.dim(1); ++y)
        for (int x = 0; x < a.dim(2); ++x) s += cosine_distance_at(a, b, y, x);
    return s / (a.dim(1) * a.dim(2));
}

inline double ngm_loss(const std::vector<Tensor>& t, const std::vector<Tensor>& sn, const std::vector<Tensor>& sa) {
    double total = 0;
    for (std::size_t i = 0; i < t.size(); ++i) total += mean_distance(t[i], sn[i]) + mean_distance(t[i], sa[i]);
    return total / static_cast<double>(t.size());
}

// Block average computed pixel by pixel from the full-resolution mask.
inline double mask_block_mean(const Tensor& mask, int h, int w, int y, int x) {
    const int fy = mask.dim(1) / h, fx = mask.dim(2) / w;
    double s = 0;
    for (int yy = y * fy; yy < (y + 1) * fy; ++yy)
        for (int xx = x * fx; xx < (x + 1) * fx; ++xx) s += mask.at(0, yy, xx);
    return s / (fy * fx);
}

inline double aim_loss(const std::vector<Tensor>& t, const std::vector<Tensor>& s, const Tensor& mask) {
    double total = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const int h = t[i].dim(1), w = t[i].dim(2);
        double stage = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                stage += std::abs(cosine_distance_at(t[i], s[i], y, x) - mask_block_mean(mask, h, w, y, x));
        total += stage / (h * w);
    }
    return total / static_cast<double>(t.size());
}

inline double bce(double p, double y) {
    p = std::clamp(p, 1e-7, 1.0 - 1e-7);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

inline double top_k_mean(std::vector<double> values, int k) {
    std::sort(values.begin(), values.end(), std::greater<>());
    double s = 0;
    for (int i = 0; i < k; ++i) s += values[static_cast<std::size_t>(i)];
    return s / k;
}

inline double seg_loss(const Tensor& m, const Tensor& gt, int k) {
    double pix = 0, label = 0;
    for (std::size_t i = 0; i < m.numel(); ++i) {
        pix += bce(m[i], gt[i]);
        label = std::max(label, gt[i]);
    }
    return pix / static_cast<double>(m.numel()) + bce(top_k_mean(m.vec(), k), label);
}

// Probability that a random positive outranks a random negative (ties 1/2),
// by counting all pairs.
inline double auroc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            pairs += 1;
            if (scores[i] > scores[j]) wins += 1;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

// 8-connected flood fill labelling of a binary [1,H,W] mask.
inline std::vector<int> flood_fill_regions(const Tensor& mask, int& count) {
    const int h = mask.dim(1), w = mask.dim(2);
    std::vector<int> label(static_cast<std::size_t>(h) * w, 0);
    count = 0;
    for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < w; ++x0) {
            if (mask.at(0, y0, x0) <= 0.5 || label[static_cast<std::size_t>(y0) * w + x0]) continue;
            ++count;
            std::vector<std::pair<int, int>> stack{{y0, x0}};
            label[static_cast<std::size_t>(y0) * w + x0] = count;
            while (!stack.empty()) {
                const auto [y, x] = stack.back();
                stack.pop_back();
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        auto& l = label[static_cast<std::size_t>(yy) * w + xx];
                        if (mask.at(0, yy, xx) > 0.5 && l == 0) {
                            l = count;
                            stack.emplace_back(yy, xx);
                        }
                    }
            }
        }
    return label;
}

// Exhaustive sweep: for every distinct value t, evaluates map > t from scratch,
// then integrates the (fpr, mean overlap) curve starting at (0, 0) up to the
// limit, holding the last overlap if the curve stops short.
inline double pro_sweep(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks, double limit) {
    std::vector<std::vector<int>> labels;
    std::vector<int> counts;
    std::vector<double> values;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        int n = 0;
        labels.push_back(flood_fill_regions(masks[i], n));
        counts.push_back(n);
        values.insert(values.end(), maps[i].vec().begin(), maps[i].vec().end());
    }
    std::sort(values.begin(), values.end(), std::greater<>());
    values.erase(std::unique(values.begin(), values.end()), values.end());

    std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
    for (double t : values) {
        double fp = 0, negatives = 0, overlap_sum = 0, regions = 0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            std::vector<double> hit(static_cast<std::size_t>(counts[i]) + 1, 0.0), size(hit.size(), 0.0);
            for (std::size_t k = 0; k < maps[i].numel(); ++k) {
                const int l = labels[i][k];
                const bool pred = maps[i][k] > t;
                if (l == 0) {
                    negatives += 1;
                    fp += pred ? 1 : 0;
                } else {
                    size[static_cast<std::size_t>(l)] += 1;
                    hit[static_cast<std::size_t>(l)] += pred ? 1 : 0;
                }
            }
            for (int r = 1; r <= counts[i]; ++r) {
                overlap_sum += hit[static_cast<std::size_t>(r)] / size[static_cast<std::size_t>(r)];
                regions += 1;
            }
        }
        curve.emplace_back(fp / negatives, overlap_sum / regions);
    }
    double area = 0;
    for (std::size_t k = 1; k < curve.size(); ++k) {
        double x0 = curve[k - 1].first, y0 = curve[k - 1].second, x1 = curve[k].first, y1 = curve[k].second;
        if (x0 >= limit) break;
        if (x1 > limit) {
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            x1 = limit;
        }
        area += 0.5 * (x1 - x0) * (y0 + y1);
    }
    if (curve.back().first < limit) area += (limit - curve.back().first) * curve.back().second;
    return area / limit;
}

// Central finite differences of f with respect to every entry of x.
inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double h = 1e-6) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f();
        x[i] = saved - h;
        const double down = f();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// ||a - n|| / max(||a||, ||n||) in the Euclidean norm.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < numeric.numel(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
}

}  // namespace oracle
