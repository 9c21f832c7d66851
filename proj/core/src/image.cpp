#include "dmdd/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dmdd/error.hpp"

namespace dmdd {

namespace {

cv::Mat to_mat8(const Image& image) {
    const int type = image.channels == 3 ? CV_8UC3 : CV_8UC1;
    cv::Mat mat(image.height, image.width, type);
    for (int y = 0; y < image.height; ++y) {
        auto* row = mat.ptr<unsigned char>(y);
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < image.channels; ++c) {
                // RGB -> BGR for OpenCV
                const int src_c = image.channels == 3 ? 2 - c : c;
                const double v = std::clamp(image.at(y, x, src_c), 0.0, 1.0);
                row[x * image.channels + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
    }
    return mat;
}

Image from_mat8(const cv::Mat& mat) {
    const int channels = mat.channels();
    Image image(mat.rows, mat.cols, channels);
    for (int y = 0; y < mat.rows; ++y) {
        const auto* row = mat.ptr<unsigned char>(y);
        for (int x = 0; x < mat.cols; ++x)
            for (int c = 0; c < channels; ++c) {
                const int dst_c = channels == 3 ? 2 - c : c;
                image.at(y, x, dst_c) = row[x * channels + c] / 255.0;
            }
    }
    return image;
}

cv::Mat to_mat64(const Image& image) {
    cv::Mat mat(image.height, image.width, CV_64FC(image.channels));
    std::copy(image.data.begin(), image.data.end(), mat.ptr<double>(0));
    return mat;
}

Image from_mat64(const cv::Mat& mat) {
    Image image(mat.rows, mat.cols, mat.channels());
    cv::Mat cont = mat.isContinuous() ? mat : mat.clone();
    std::copy_n(cont.ptr<double>(0), image.data.size(), image.data.begin());
    return image;
}

}  // namespace

Image read_rgb(const std::filesystem::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
    require(!mat.empty(), ErrorKind::IoError, "cannot decode image " + path.string());
    return from_mat8(mat);
}

Image read_gray(const std::filesystem::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    require(!mat.empty(), ErrorKind::IoError, "cannot decode mask " + path.string());
    return from_mat8(mat);
}

void write_png(const Image& image, const std::filesystem::path& path) {
    require(image.channels == 1 || image.channels == 3, ErrorKind::InvalidArgument,
            "write_png: need 1 or 3 channels");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    require(cv::imwrite(path.string(), to_mat8(image)), ErrorKind::IoError,
            "cannot write " + path.string());
}

Image resize_bilinear(const Image& image, int height, int width) {
    if (image.height == height && image.width == width) return image;
    cv::Mat out;
    cv::resize(to_mat64(image), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    return from_mat64(out);
}

Image resize_nearest(const Image& image, int height, int width) {
    if (image.height == height && image.width == width) return image;
    cv::Mat out;
    cv::resize(to_mat64(image), out, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
    return from_mat64(out);
}

Image map_to_gray(const Tensor& map) {
    require(map.rank() == 3 && map.dim(0) == 1, ErrorKind::InvalidArgument, "map_to_gray: need [1,H,W]");
    Image out(map.dim(1), map.dim(2), 1);
    out.data = map.vec();
    return out;
}

Image heatmap(const Tensor& map) {
    cv::Mat gray = to_mat8(map_to_gray(map));
    cv::Mat color;
    cv::applyColorMap(gray, color, cv::COLORMAP_JET);
    return from_mat8(color);
}

Image gray_to_rgb(const Image& gray) {
    Image out(gray.height, gray.width, 3);
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = gray.at(y, x, 0);
    return out;
}

Image hstack(const std::vector<Image>& parts) {
    require(!parts.empty(), ErrorKind::InvalidArgument, "hstack: no parts");
    const int h = parts[0].height, c = parts[0].channels;
    int w = 0;
    for (const auto& p : parts) {
        require(p.height == h && p.channels == c, ErrorKind::InvalidArgument, "hstack: mismatched parts");
        w += p.width;
    }
    Image out(h, w, c);
    int x0 = 0;
    for (const auto& p : parts) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < p.width; ++x)
                for (int k = 0; k < c; ++k) out.at(y, x0 + x, k) = p.at(y, x, k);
        x0 += p.width;
    }
    return out;
}

bool is_image_file(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" ||
           ext == ".tiff";
}

}  // namespace dmdd
