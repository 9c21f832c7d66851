#include "dmdd/synthesis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <opencv2/imgproc.hpp>
#include <random>

#include "dmdd/error.hpp"

namespace dmdd {

namespace {

using Rng = std::mt19937_64;

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double lerp(double a, double b, double t) { return a + t * (b - a); }

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

Tensor mat_to_mask(const cv::Mat& m) {
    Tensor mask(Shape{1, m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) mask.at(0, y, x) = m.at<unsigned char>(y, x) ? 1.0 : 0.0;
    return mask;
}

int band_width(const Image& image, const ForegroundOptions& options) {
    const int side = std::min(image.height, image.width);
    return std::max(1, static_cast<int>(std::lround(options.band_fraction * side)));
}

// Counter-clockwise quarter turn.
Image rotate_quarter(const Image& in) {
    Image out(in.width, in.height, in.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < in.channels; ++c) out.at(y, x, c) = in.at(x, in.width - 1 - y, c);
    return out;
}

bool in_band(int y, int x, int h, int w, int band) {
    return y < band || x < band || y >= h - band || x >= w - band;
}

// Keeps 8-connected components covering at least min_component of the image.
cv::Mat drop_small_components(const cv::Mat& binary, double min_component) {
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(binary, labels, stats, centroids, 8, CV_32S);
    const double min_area = min_component * binary.rows * binary.cols;
    cv::Mat out = cv::Mat::zeros(binary.size(), CV_8UC1);
    for (int label = 1; label < n; ++label) {
        if (stats.at<int>(label, cv::CC_STAT_AREA) < min_area) continue;
        out.setTo(255, labels == label);
    }
    return out;
}

ForegroundMask finalize(cv::Mat fg, const ForegroundOptions& options, ForegroundMethod method) {
    const cv::Mat kernel =
        cv::getStructuringElement(cv::MORPH_RECT, cv::Size(options.kernel, options.kernel));
    cv::morphologyEx(fg, fg, cv::MORPH_CLOSE, kernel);
    cv::morphologyEx(fg, fg, cv::MORPH_OPEN, kernel);
    fg = drop_small_components(fg, options.min_component);
    const double area = cv::countNonZero(fg);
    if (area < options.min_foreground * fg.rows * fg.cols) return full_foreground(fg.rows, fg.cols);
    return {mat_to_mask(fg), method};
}

}  // namespace

Tensor perlin_noise_raw(int height, int width, int freq_x, int freq_y, std::uint64_t seed) {
    require(height > 0 && width > 0, ErrorKind::InvalidArgument, "perlin_noise: nonpositive size");
    require(freq_x >= 1 && freq_y >= 1, ErrorKind::InvalidArgument, "perlin_noise: frequency < 1");
    const int cell_y = (height + freq_y - 1) / freq_y;
    const int cell_x = (width + freq_x - 1) / freq_x;

    Rng rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    const int gy = freq_y + 1, gx = freq_x + 1;
    std::vector<double> grad_x(static_cast<std::size_t>(gy) * gx), grad_y(grad_x.size());
    for (std::size_t i = 0; i < grad_x.size(); ++i) {
        const double a = angle(rng);
        grad_x[i] = std::cos(a);
        grad_y[i] = std::sin(a);
    }
    auto dot_grad = [&](int iy, int ix, double dx, double dy) {
        const std::size_t k = static_cast<std::size_t>(iy) * gx + ix;
        return grad_x[k] * dx + grad_y[k] * dy;
    };

    Tensor out(Shape{1, height, width});
    for (int y = 0; y < height; ++y) {
        const int iy = y / cell_y;
        const double ty = static_cast<double>(y - iy * cell_y) / cell_y;
        const double v = fade(ty);
        for (int x = 0; x < width; ++x) {
            const int ix = x / cell_x;
            const double tx = static_cast<double>(x - ix * cell_x) / cell_x;
            const double u = fade(tx);
            const double n00 = dot_grad(iy, ix, tx, ty);
            const double n10 = dot_grad(iy, ix + 1, tx - 1.0, ty);
            const double n01 = dot_grad(iy + 1, ix, tx, ty - 1.0);
            const double n11 = dot_grad(iy + 1, ix + 1, tx - 1.0, ty - 1.0);
            out.at(0, y, x) = std::numbers::sqrt2 * lerp(lerp(n00, n10, u), lerp(n01, n11, u), v);
        }
    }
    return out;
}

NoiseField perlin_noise(int height, int width, int freq_x, int freq_y, std::uint64_t seed) {
    NoiseField field{perlin_noise_raw(height, width, freq_x, freq_y, seed), freq_x, freq_y, seed};
    auto& v = field.data.vec();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mn = *lo, mx = *hi;
    if (mx - mn <= 0.0) {
        field.data.fill(0.0);
    } else {
        for (auto& x : v) x = 2.0 * (x - mn) / (mx - mn) - 1.0;
    }
    return field;
}

Tensor binarize_noise(const NoiseField& noise, double threshold) {
    Tensor mask(noise.data.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = noise.data[i] > threshold ? 1.0 : 0.0;
    return mask;
}

ForegroundMask full_foreground(int height, int width) {
    return {Tensor::full(Shape{1, height, width}, 1.0), ForegroundMethod::Full};
}

ForegroundMask extract_foreground(const Image& image, const ForegroundOptions& options) {
    require(image.channels == 3, ErrorKind::InvalidArgument, "extract_foreground: need RGB image");
    const int h = image.height, w = image.width;
    const int band = band_width(image, options);

    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    long count = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (in_band(y, x, h, w, band)) {
                mean += Eigen::Vector3d(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2));
                ++count;
            }
    mean /= static_cast<double>(count);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (in_band(y, x, h, w, band)) {
                const Eigen::Vector3d d =
                    Eigen::Vector3d(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2)) - mean;
                cov += d * d.transpose();
            }
    cov /= static_cast<double>(count);
    // Ridge keeps flat backgrounds invertible; roughly 1.5 gray levels of slack.
    cov += Eigen::Matrix3d::Identity() * (1e-3 * cov.trace() / 3.0 + 3.6e-5);
    const Eigen::Matrix3d precision = cov.inverse();

    cv::Mat fg(h, w, CV_8UC1);
    const double tau2 = options.tau * options.tau;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Eigen::Vector3d d =
                Eigen::Vector3d(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2)) - mean;
            fg.at<unsigned char>(y, x) = d.dot(precision * d) > tau2 ? 255 : 0;
        }
    return finalize(fg, options, ForegroundMethod::BackgroundStat);
}

ForegroundMask extract_foreground_graphcut(const Image& image, const ForegroundOptions& options) {
    require(image.channels == 3, ErrorKind::InvalidArgument, "graphcut foreground: need RGB image");
    const int h = image.height, w = image.width;
    const int band = band_width(image, options);
    if (h <= 2 * band + 1 || w <= 2 * band + 1) return full_foreground(h, w);

    cv::Mat bgr(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                bgr.at<cv::Vec3b>(y, x)[2 - c] =
                    static_cast<unsigned char>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255));
    cv::Mat mask(h, w, CV_8UC1, cv::Scalar(cv::GC_BGD));
    const cv::Rect rect(band, band, w - 2 * band, h - 2 * band);
    cv::Mat bgd_model, fgd_model;
    cv::setRNGSeed(0);
    cv::grabCut(bgr, mask, rect, bgd_model, fgd_model, 5, cv::GC_INIT_WITH_RECT);
    cv::Mat fg = (mask == cv::GC_FGD) | (mask == cv::GC_PR_FGD);
    return finalize(fg, options, ForegroundMethod::GraphCut);
}

ForegroundMask load_precomputed_foreground(const std::filesystem::path& path, int height, int width) {
    const Image gray = resize_nearest(read_gray(path), height, width);
    Tensor mask(Shape{1, height, width});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = gray.data[i] * 255.0 > 127.5 ? 1.0 : 0.0;
    return {std::move(mask), ForegroundMethod::Precomputed};
}

ForegroundMode parse_foreground_mode(const std::string& text) {
    if (text == "category") return ForegroundMode::Category;
    if (text == "auto" || text == "background-stat") return ForegroundMode::Auto;
    if (text == "full") return ForegroundMode::Full;
    if (text == "graphcut") return ForegroundMode::GraphCut;
    if (text == "precomputed") return ForegroundMode::Precomputed;
    fail(ErrorKind::ConfigError, "unknown foreground_mode '" + text + "'");
}

std::string to_string(ForegroundMode mode) {
    switch (mode) {
        case ForegroundMode::Category: return "category";
        case ForegroundMode::Auto: return "auto";
        case ForegroundMode::Full: return "full";
        case ForegroundMode::GraphCut: return "graphcut";
        case ForegroundMode::Precomputed: return "precomputed";
    }
    return "category";
}

bool is_texture_category(const std::string& category) {
    static const char* kTextures[] = {"carpet", "grid", "leather", "tile", "wood"};
    return std::any_of(std::begin(kTextures), std::end(kTextures),
                       [&](const char* t) { return category == t; });
}

void SynthesisConfig::validate() const {
    require(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi <= 1.0, ErrorKind::ConfigError,
            "beta range must satisfy 0 < lo <= hi <= 1");
    require(!freq_choices.empty(), ErrorKind::ConfigError, "freq_choices must be nonempty");
    for (int f : freq_choices)
        require(is_power_of_two(f), ErrorKind::ConfigError,
                "freq_choices must be powers of two, got " + std::to_string(f));
    require(std::isfinite(noise_threshold), ErrorKind::ConfigError, "noise_threshold must be finite");
    require(!texture_source.empty(), ErrorKind::ConfigError, "texture_source is empty");
    if (foreground_mode == ForegroundMode::Precomputed)
        require(!foreground_dir.empty(), ErrorKind::ConfigError,
                "foreground_mode=precomputed needs foreground_dir");
}

SynthesisResult synthesize_anomaly(const Image& image, const Image& texture, const Tensor& foreground,
                                   const SynthesisConfig& config, std::uint64_t seed) {
    config.validate();
    require(image.channels == 3 && texture.channels == 3, ErrorKind::InvalidArgument,
            "synthesize_anomaly: need RGB image and texture");
    require(foreground.shape() == Shape{1, image.height, image.width}, ErrorKind::InvalidArgument,
            "synthesize_anomaly: foreground size mismatch");
    const Image tex = texture.height == image.height && texture.width == image.width
                          ? texture
                          : resize_bilinear(texture, image.height, image.width);

    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, config.freq_choices.size() - 1);
    SynthesisResult result;
    result.freq_x = config.freq_choices[pick(rng)];
    result.freq_y = config.freq_choices[pick(rng)];
    const std::uint64_t noise_seed = rng();
    result.beta = std::uniform_real_distribution<double>(config.beta_lo, config.beta_hi)(rng);
    if (config.beta_lo == config.beta_hi) result.beta = config.beta_lo;

    const NoiseField noise = perlin_noise(image.height, image.width, result.freq_x, result.freq_y, noise_seed);
    result.mask = binarize_noise(noise, config.noise_threshold);
    for (std::size_t i = 0; i < result.mask.numel(); ++i)
        if (foreground[i] <= 0.5) result.mask[i] = 0.0;

    result.anomalous = image;
    const double beta = result.beta;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            if (result.mask.at(0, y, x) == 0.0) continue;
            for (int c = 0; c < 3; ++c)
                result.anomalous.at(y, x, c) = (1.0 - beta) * image.at(y, x, c) + beta * tex.at(y, x, c);
        }
    return result;
}

Image augment_texture(const Image& image, std::uint64_t seed) {
    Rng rng(seed);
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<int> quarter(0, 3);
    std::uniform_real_distribution<double> brightness(-0.2, 0.2), contrast(0.7, 1.3), gain(0.6, 1.4);
    const bool flip_h = coin(rng), flip_v = coin(rng);
    const int turns = quarter(rng);
    const double b = brightness(rng), k = contrast(rng);
    const double g[3] = {gain(rng), gain(rng), gain(rng)};

    Image out = image;
    for (int t = 0; t < turns; ++t) out = rotate_quarter(out);
    const int h = out.height, w = out.width;
    Image flipped(h, w, out.channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int sy = flip_v ? h - 1 - y : y;
            const int sx = flip_h ? w - 1 - x : x;
            for (int c = 0; c < out.channels; ++c) {
                const double v = (out.at(sy, sx, c) - 0.5) * k + 0.5 + b;
                flipped.at(y, x, c) = std::clamp(v * g[c % 3], 0.0, 1.0);
            }
        }
    out = std::move(flipped);
    if (out.height != image.height || out.width != image.width)
        out = resize_bilinear(out, image.height, image.width);
    return out;
}

AnomalySynthesizer::AnomalySynthesizer(SynthesisConfig config, std::string category, bool foreground_aware,
                                       std::vector<Image> self_textures, int image_size)
    : config_(std::move(config)),
      category_(std::move(category)),
      foreground_aware_(foreground_aware),
      mode_(config_.foreground_mode),
      self_textures_(std::move(self_textures)),
      image_size_(image_size) {
    config_.validate();
    if (mode_ == ForegroundMode::Category)
        mode_ = is_texture_category(category_) ? ForegroundMode::Full : ForegroundMode::Auto;
    if (!foreground_aware_) mode_ = ForegroundMode::Full;

    if (config_.texture_source == "self") {
        require(!self_textures_.empty(), ErrorKind::ConfigError,
                "texture_source=self needs at least one training image");
    } else {
        const std::filesystem::path dir(config_.texture_source);
        require(std::filesystem::is_directory(dir), ErrorKind::ConfigError,
                "texture directory not found: " + dir.string());
        for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
            if (entry.is_regular_file() && is_image_file(entry.path())) texture_files_.push_back(entry.path());
        std::sort(texture_files_.begin(), texture_files_.end());
        require(!texture_files_.empty(), ErrorKind::ConfigError,
                "texture directory has no images: " + dir.string());
    }
}

ForegroundMask AnomalySynthesizer::foreground_for(const Image& image, const std::filesystem::path& source) const {
    switch (mode_) {
        case ForegroundMode::Full:
        case ForegroundMode::Category:
            return full_foreground(image.height, image.width);
        case ForegroundMode::Auto:
            return extract_foreground(image, config_.foreground);
        case ForegroundMode::GraphCut:
            return extract_foreground_graphcut(image, config_.foreground);
        case ForegroundMode::Precomputed:
            require(!source.empty(), ErrorKind::ConfigError, "precomputed foreground needs the image path");
            return load_precomputed_foreground(config_.foreground_dir / (source.stem().string() + ".png"),
                                               image.height, image.width);
    }
    return full_foreground(image.height, image.width);
}

Image AnomalySynthesizer::pick_texture(std::uint64_t seed) const {
    Rng rng(seed);
    if (!texture_files_.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, texture_files_.size() - 1);
        return resize_bilinear(read_rgb(texture_files_[pick(rng)]), image_size_, image_size_);
    }
    std::uniform_int_distribution<std::size_t> pick(0, self_textures_.size() - 1);
    const Image& base = self_textures_[pick(rng)];
    Image tex = augment_texture(base, rng());
    if (tex.height != image_size_ || tex.width != image_size_)
        tex = resize_bilinear(tex, image_size_, image_size_);
    return tex;
}

SynthesisResult AnomalySynthesizer::synthesize(const Image& image, std::uint64_t seed,
                                               const std::filesystem::path& source,
                                               ForegroundMask* foreground_out) const {
    ForegroundMask fg = foreground_for(image, source);
    SynthesisResult result = synthesize(image, fg, seed);
    if (foreground_out) *foreground_out = std::move(fg);
    return result;
}

SynthesisResult AnomalySynthesizer::synthesize(const Image& image, const ForegroundMask& foreground,
                                               std::uint64_t seed) const {
    Rng rng(seed);
    const std::uint64_t texture_seed = rng();
    const std::uint64_t blend_seed = rng();
    Image texture = pick_texture(texture_seed);
    if (texture.height != image.height || texture.width != image.width)
        texture = resize_bilinear(texture, image.height, image.width);
    return synthesize_anomaly(image, texture, foreground.data, config_, blend_seed);
}

}  // namespace dmdd
