#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace dmdd {

struct ToyDatasetSpec {
    std::string category = "toy_shapes";
    int image_size = 64;
    int train_normal = 40;
    int test_normal = 10;
    int test_defect = 20;
    std::uint64_t seed = 0;
};

// Writes an MVTec-layout dataset of striped disks on a dark background.
// Defective test images carry a spot or a scratch inside the disk, with masks
// under ground_truth/<defect>/<stem>_mask.png. Returns the category directory.
std::filesystem::path make_toy_dataset(const std::filesystem::path& root, const ToyDatasetSpec& spec = {});

}  // namespace dmdd
