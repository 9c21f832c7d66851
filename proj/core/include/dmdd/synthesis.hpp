#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmdd/image.hpp"
#include "dmdd/tensor.hpp"

namespace dmdd {

struct NoiseField {
    Tensor data;  // [1,H,W], min-max normalized to [-1,1] (all zero if constant)
    int freq_x = 1;
    int freq_y = 1;
    std::uint64_t seed = 0;
};

// Gradient-lattice Perlin noise with freq_x x freq_y periods, before
// normalization. Zero at every lattice point. Non-dividing sizes are padded to
// whole cells and cropped.
Tensor perlin_noise_raw(int height, int width, int freq_x, int freq_y, std::uint64_t seed);
NoiseField perlin_noise(int height, int width, int freq_x, int freq_y, std::uint64_t seed);

// 1 where noise > threshold, else 0. Result is [1,H,W].
Tensor binarize_noise(const NoiseField& noise, double threshold);

enum class ForegroundMethod { GraphCut, BackgroundStat, Full, Precomputed };

struct ForegroundMask {
    Tensor data;  // [1,H,W] binary
    ForegroundMethod method = ForegroundMethod::Full;
};

struct ForegroundOptions {
    double band_fraction = 0.04;     // border band width relative to the shorter side
    double tau = 3.0;                // Mahalanobis radius classed as background
    int kernel = 5;                  // close/open structuring element
    double min_component = 0.01;     // of image area
    double min_foreground = 0.05;    // below this, fall back to the full mask
};

ForegroundMask full_foreground(int height, int width);
// Background-statistics foreground: border-band color model, Mahalanobis test,
// close+open, small-component removal, full-mask fallback.
ForegroundMask extract_foreground(const Image& image, const ForegroundOptions& options = {});
// GrabCut (OpenCV) initialised with the border band as definite background.
ForegroundMask extract_foreground_graphcut(const Image& image, const ForegroundOptions& options = {});
ForegroundMask load_precomputed_foreground(const std::filesystem::path& path, int height, int width);

enum class ForegroundMode {
    Category,     // full for texture categories, auto otherwise
    Auto,         // background statistics
    Full,
    GraphCut,
    Precomputed,  // <foreground_dir>/<image stem>.png
};

ForegroundMode parse_foreground_mode(const std::string& text);
std::string to_string(ForegroundMode mode);
bool is_texture_category(const std::string& category);

struct SynthesisConfig {
    double beta_lo = 0.15;
    double beta_hi = 1.0;
    double noise_threshold = 0.5;
    std::vector<int> freq_choices{2, 4, 8, 16, 32};
    std::string texture_source = "self";  // "self" or a directory of images
    ForegroundMode foreground_mode = ForegroundMode::Category;
    std::filesystem::path foreground_dir;
    ForegroundOptions foreground;

    void validate() const;  // throws config-error
};

struct SynthesisResult {
    Image anomalous;
    Tensor mask;  // [1,H,W] binary
    double beta = 0.0;
    int freq_x = 0;
    int freq_y = 0;
};

// Blends `texture` into `image` inside M = binarize(perlin) AND foreground:
// out = (1 - M) * I + M * ((1 - beta) * I + beta * A). Pixels outside M are
// copied unchanged. Deterministic in seed.
SynthesisResult synthesize_anomaly(const Image& image, const Image& texture, const Tensor& foreground,
                                   const SynthesisConfig& config, std::uint64_t seed);

// Random flips, quarter turns and color jitter; used for the "self" texture source.
Image augment_texture(const Image& image, std::uint64_t seed);

// Owns the texture pool and foreground policy for one category.
class AnomalySynthesizer {
public:
    AnomalySynthesizer(SynthesisConfig config, std::string category, bool foreground_aware,
                       std::vector<Image> self_textures, int image_size);

    const SynthesisConfig& config() const noexcept { return config_; }
    bool foreground_aware() const noexcept { return foreground_aware_; }
    ForegroundMode effective_mode() const noexcept { return mode_; }

    ForegroundMask foreground_for(const Image& image, const std::filesystem::path& source = {}) const;
    Image pick_texture(std::uint64_t seed) const;

    // Full pipeline for one image: foreground, texture choice, noise, blend.
    SynthesisResult synthesize(const Image& image, std::uint64_t seed,
                               const std::filesystem::path& source = {},
                               ForegroundMask* foreground_out = nullptr) const;
    // Same draw as above with the foreground already computed for this image.
    SynthesisResult synthesize(const Image& image, const ForegroundMask& foreground, std::uint64_t seed) const;

private:
    SynthesisConfig config_;
    std::string category_;
    bool foreground_aware_;
    ForegroundMode mode_;
    std::vector<Image> self_textures_;
    std::vector<std::filesystem::path> texture_files_;
    int image_size_;
};

}  // namespace dmdd
