#pragma once

#include <filesystem>
#include <vector>

#include "dmdd/tensor.hpp"

namespace dmdd {

// Interleaved (HWC) image with intensities in [0, 1] (pixel / 255).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool empty() const noexcept { return data.empty(); }

    friend bool operator==(const Image&, const Image&) = default;
};

// Decodes an 8-bit RGB image (any format OpenCV reads). Throws io-error.
Image read_rgb(const std::filesystem::path& path);
// Decodes a single-channel 8-bit image. Throws io-error.
Image read_gray(const std::filesystem::path& path);
// Writes 1- or 3-channel images as 8-bit PNG (values clamped, rounded).
void write_png(const Image& image, const std::filesystem::path& path);

Image resize_bilinear(const Image& image, int height, int width);
Image resize_nearest(const Image& image, int height, int width);

// [1,H,W] map (any range) -> single-channel image, no rescaling.
Image map_to_gray(const Tensor& map);
// Colorized 8-bit rendering of a [1,H,W] map with values in [0,1].
Image heatmap(const Tensor& map);

Image hstack(const std::vector<Image>& parts);
Image gray_to_rgb(const Image& gray);

bool is_image_file(const std::filesystem::path& path);

}  // namespace dmdd
