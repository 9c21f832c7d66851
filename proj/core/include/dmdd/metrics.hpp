#pragma once

#include <span>
#include <vector>

#include "dmdd/tensor.hpp"

namespace dmdd {

// Exact Mann-Whitney AUC with midranks for ties. labels are 0/1.
// Throws undefined-metric unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

// AUROC over the pooled pixels of all maps; masks binarized at 0.5.
double pixel_auroc(std::span<const Tensor> maps, std::span<const Tensor> masks);

// Labels 8-connected foreground regions of a [1,H,W] or [H,W] binary mask.
// Returns per-pixel labels (0 = background, 1..n = regions) and sets count.
std::vector<int> label_regions(const Tensor& mask, int& count);

inline constexpr int kProMaxThresholds = 10000;

// Per-region overlap integrated over FPR in [0, fpr_limit], normalized by the
// limit. Predictions are map > t for every distinct map value t (or
// kProMaxThresholds quantiles when there are more); the curve starts at
// (0, 0), is integrated by trapezoids, interpolated at the limit, and held
// flat if it ends before the limit. Throws undefined-metric without regions.
double pro(std::span<const Tensor> maps, std::span<const Tensor> masks, double fpr_limit = 0.3,
           int max_thresholds = kProMaxThresholds);

struct MetricsReport {
    double i_auc = 0.0;
    double p_auc = 0.0;
    double pro = 0.0;
    int n_images = 0;
    double fpr_limit = 0.3;
};

MetricsReport evaluate_metrics(std::span<const double> scores, std::span<const int> labels,
                               std::span<const Tensor> maps, std::span<const Tensor> masks, double fpr_limit = 0.3);

}  // namespace dmdd
