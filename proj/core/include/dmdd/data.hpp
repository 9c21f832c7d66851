#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmdd/image.hpp"
#include "dmdd/synthesis.hpp"
#include "dmdd/tensor.hpp"

namespace dmdd {

enum class Split { Train, Test };
enum class Label { Normal, Anomalous };

Split parse_split(const std::string& text);
std::string to_string(Split split);

struct DatasetEntry {
    std::filesystem::path image_path;
    Label label = Label::Normal;
    std::optional<std::filesystem::path> mask_path;
    std::string defect;  // "good" for normal images
};

// One split of one category in MVTec AD layout:
//   <root>/<category>/train/good/*.png
//   <root>/<category>/test/<defect>/*.png
//   <root>/<category>/ground_truth/<defect>/<stem>_mask.png
struct DatasetIndex {
    std::filesystem::path root;
    std::string category;
    Split split = Split::Train;
    std::vector<DatasetEntry> entries;  // sorted by image path

    std::size_t count(Label label) const;
};

DatasetIndex load_dataset(const std::filesystem::path& root, const std::string& category, Split split);
std::vector<std::string> list_categories(const std::filesystem::path& root);

struct Normalization {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};
};

// [3,H,W] tensor of (pixel/255 - mean_c) / std_c.
Tensor standardize(const Image& image, const Normalization& norm);
Image destandardize(const Tensor& tensor, const Normalization& norm);

// Bilinear resize to input_size x input_size, then standardize.
Tensor load_image(const std::filesystem::path& path, int input_size, const Normalization& norm = {});
// Resized (not standardized) RGB image in [0,1].
Image load_image_raw(const std::filesystem::path& path, int input_size);
// Nearest-neighbor resize, binarized at 127.5 on the 8-bit scale. Result [1,S,S].
Tensor load_mask(const std::filesystem::path& path, int input_size);
// Writes a standardized tensor back out as an 8-bit PNG.
void save_image(const Tensor& tensor, const std::filesystem::path& path, const Normalization& norm = {});

struct TrainingPair {
    Tensor normal;      // [3,S,S] standardized
    Tensor anomalous;   // [3,S,S] standardized
    Tensor gt_mask;     // [1,S,S] binary
    Tensor foreground;  // [1,S,S] binary
    Image normal_raw;
    Image anomalous_raw;
    double beta = 0.0;
};

// `normal` is the resized, unnormalized image. Fully determined by (image, seed).
TrainingPair make_training_pair(const Image& normal, const AnomalySynthesizer& synthesizer, std::uint64_t seed,
                                const Normalization& norm = {},
                                const std::filesystem::path& source = {});
TrainingPair make_training_pair(const Image& normal, const ForegroundMask& foreground,
                                const AnomalySynthesizer& synthesizer, std::uint64_t seed,
                                const Normalization& norm = {});

}  // namespace dmdd
