#include "dmdd/metrics.hpp"

#include <algorithm>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "dmdd/error.hpp"

namespace dmdd {

double auroc(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), ErrorKind::InvalidArgument, "auroc: scores/labels size mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] != 0) {
                rank_sum += midrank;
                ++positives;
            }
        i = j;
    }
    const std::size_t negatives = n - positives;
    require(positives > 0 && negatives > 0, ErrorKind::UndefinedMetric,
            "AUROC needs both classes (positives=" + std::to_string(positives) +
                ", negatives=" + std::to_string(negatives) + ")");
    const double np = static_cast<double>(positives);
    const double u = rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(negatives));
}

namespace {

void check_maps(std::span<const Tensor> maps, std::span<const Tensor> masks) {
    require(maps.size() == masks.size(), ErrorKind::InvalidArgument, "maps/masks count mismatch");
    for (std::size_t i = 0; i < maps.size(); ++i)
        require(maps[i].numel() == masks[i].numel() && maps[i].shape() == masks[i].shape(),
                ErrorKind::InvalidArgument,
                "map/mask shape mismatch: " + shape_str(maps[i].shape()) + " vs " + shape_str(masks[i].shape()));
}

}  // namespace

double pixel_auroc(std::span<const Tensor> maps, std::span<const Tensor> masks) {
    check_maps(maps, masks);
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        scores.insert(scores.end(), maps[i].vec().begin(), maps[i].vec().end());
        for (double v : masks[i].vec()) labels.push_back(v > 0.5 ? 1 : 0);
    }
    return auroc(scores, labels);
}

std::vector<int> label_regions(const Tensor& mask, int& count) {
    require(mask.rank() == 2 || (mask.rank() == 3 && mask.dim(0) == 1), ErrorKind::InvalidArgument,
            "label_regions expects [H,W] or [1,H,W]");
    const int h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
    cv::Mat binary(h, w, CV_8U);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            binary.at<std::uint8_t>(y, x) = mask[static_cast<std::size_t>(y) * w + x] > 0.5 ? 1 : 0;
    cv::Mat labels;
    count = cv::connectedComponents(binary, labels, 8, CV_32S) - 1;
    std::vector<int> out(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(y) * w + x] = labels.at<int>(y, x);
    return out;
}

double pro(std::span<const Tensor> maps, std::span<const Tensor> masks, double fpr_limit, int max_thresholds) {
    check_maps(maps, masks);
    require(fpr_limit > 0.0 && fpr_limit <= 1.0, ErrorKind::InvalidArgument, "fpr_limit must be in (0,1]");
    require(max_thresholds >= 2, ErrorKind::InvalidArgument, "max_thresholds must be >= 2");

    // Pixel records: value, region id (global, -1 for normal).
    std::vector<double> values;
    std::vector<int> region;
    std::vector<double> region_size;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        int n = 0;
        const std::vector<int> labels = label_regions(masks[i], n);
        const int base = static_cast<int>(region_size.size());
        region_size.resize(region_size.size() + static_cast<std::size_t>(n), 0.0);
        for (std::size_t k = 0; k < labels.size(); ++k) {
            values.push_back(maps[i][k]);
            if (labels[k] > 0) {
                region.push_back(base + labels[k] - 1);
                region_size[static_cast<std::size_t>(base + labels[k] - 1)] += 1.0;
            } else {
                region.push_back(-1);
            }
        }
    }
    require(!region_size.empty(), ErrorKind::UndefinedMetric, "PRO needs at least one anomalous region");
    const double n_regions = static_cast<double>(region_size.size());
    const double n_normal = static_cast<double>(std::count(region.begin(), region.end(), -1));
    require(n_normal > 0, ErrorKind::UndefinedMetric, "PRO needs at least one normal pixel");

    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });

    // Thresholds in descending order.
    std::vector<double> distinct;
    for (std::size_t k : order)
        if (distinct.empty() || values[k] != distinct.back()) distinct.push_back(values[k]);
    std::vector<double> thresholds;
    if (static_cast<int>(distinct.size()) <= max_thresholds) {
        thresholds = distinct;
    } else {
        const std::size_t n = values.size();
        for (int q = 0; q < max_thresholds; ++q) {
            const std::size_t pos = static_cast<std::size_t>(
                static_cast<double>(q) * static_cast<double>(n - 1) / static_cast<double>(max_thresholds - 1));
            const double t = values[order[pos]];
            if (thresholds.empty() || t < thresholds.back()) thresholds.push_back(t);
        }
    }

    std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
    double false_pos = 0.0, overlap = 0.0;
    std::size_t cursor = 0;
    for (double t : thresholds) {
        while (cursor < order.size() && values[order[cursor]] > t) {
            const int r = region[order[cursor]];
            if (r < 0)
                false_pos += 1.0;
            else
                overlap += 1.0 / (n_regions * region_size[static_cast<std::size_t>(r)]);
            ++cursor;
        }
        curve.emplace_back(false_pos / n_normal, overlap);
    }

    double area = 0.0;
    for (std::size_t k = 1; k < curve.size(); ++k) {
        const auto [x0, y0] = curve[k - 1];
        auto [x1, y1] = curve[k];
        if (x0 >= fpr_limit) break;
        if (x1 > fpr_limit) {
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
            x1 = fpr_limit;
        }
        area += 0.5 * (x1 - x0) * (y0 + y1);
    }
    const auto [last_x, last_y] = curve.back();
    if (last_x < fpr_limit) area += (fpr_limit - last_x) * last_y;
    return std::clamp(area / fpr_limit, 0.0, 1.0);
}

MetricsReport evaluate_metrics(std::span<const double> scores, std::span<const int> labels,
                               std::span<const Tensor> maps, std::span<const Tensor> masks, double fpr_limit) {
    MetricsReport report;
    report.i_auc = auroc(scores, labels);
    report.p_auc = pixel_auroc(maps, masks);
    report.pro = pro(maps, masks, fpr_limit);
    report.n_images = static_cast<int>(scores.size());
    report.fpr_limit = fpr_limit;
    return report;
}

}  // namespace dmdd
