#include "dmdd/data.hpp"

#include <algorithm>

#include "dmdd/error.hpp"

namespace dmdd {

namespace fs = std::filesystem;

namespace {

std::vector<fs::path> sorted_images(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

}  // namespace

Split parse_split(const std::string& text) {
    if (text == "train") return Split::Train;
    if (text == "test") return Split::Test;
    fail(ErrorKind::InvalidArgument, "unknown split '" + text + "'");
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::size_t DatasetIndex::count(Label label) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [&](const DatasetEntry& e) { return e.label == label; }));
}

DatasetIndex load_dataset(const fs::path& root, const std::string& category, Split split) {
    const fs::path base = root / category;
    require(fs::is_directory(base) && fs::is_directory(base / "train") && fs::is_directory(base / "test"),
            ErrorKind::DatasetNotFound, "no MVTec-style dataset at " + base.string());

    DatasetIndex index{root, category, split, {}};
    if (split == Split::Train) {
        const fs::path good = base / "train" / "good";
        require(fs::is_directory(good), ErrorKind::DatasetNotFound, "missing " + good.string());
        for (auto& p : sorted_images(good)) index.entries.push_back({p, Label::Normal, std::nullopt, "good"});
    } else {
        for (const auto& defect_dir : sorted_subdirs(base / "test")) {
            const std::string defect = defect_dir.filename().string();
            for (auto& p : sorted_images(defect_dir)) {
                if (defect == "good") {
                    index.entries.push_back({p, Label::Normal, std::nullopt, defect});
                    continue;
                }
                const fs::path mask = base / "ground_truth" / defect / (p.stem().string() + "_mask.png");
                require(fs::is_regular_file(mask), ErrorKind::CorruptDataset,
                        "anomalous image " + p.string() + " has no mask " + mask.string());
                index.entries.push_back({p, Label::Anomalous, mask, defect});
            }
        }
    }
    std::sort(index.entries.begin(), index.entries.end(),
              [](const DatasetEntry& a, const DatasetEntry& b) { return a.image_path < b.image_path; });
    return index;
}

std::vector<std::string> list_categories(const fs::path& root) {
    require(fs::is_directory(root), ErrorKind::DatasetNotFound, "dataset root not found: " + root.string());
    std::vector<std::string> out;
    for (const auto& dir : sorted_subdirs(root))
        if (fs::is_directory(dir / "train") && fs::is_directory(dir / "test"))
            out.push_back(dir.filename().string());
    return out;
}

Tensor standardize(const Image& image, const Normalization& norm) {
    require(image.channels == 3, ErrorKind::InvalidArgument, "standardize: need RGB image");
    Tensor t(Shape{3, image.height, image.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                t.at(c, y, x) = (image.at(y, x, c) - norm.mean[c]) / norm.std[c];
    return t;
}

Image destandardize(const Tensor& tensor, const Normalization& norm) {
    require(tensor.rank() == 3 && tensor.dim(0) == 3, ErrorKind::InvalidArgument,
            "destandardize: need [3,H,W]");
    Image image(tensor.dim(1), tensor.dim(2), 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                image.at(y, x, c) = tensor.at(c, y, x) * norm.std[c] + norm.mean[c];
    return image;
}

Image load_image_raw(const fs::path& path, int input_size) {
    require(input_size > 0, ErrorKind::InvalidArgument, "input_size must be positive");
    return resize_bilinear(read_rgb(path), input_size, input_size);
}

Tensor load_image(const fs::path& path, int input_size, const Normalization& norm) {
    return standardize(load_image_raw(path, input_size), norm);
}

Tensor load_mask(const fs::path& path, int input_size) {
    require(input_size > 0, ErrorKind::InvalidArgument, "input_size must be positive");
    const Image gray = resize_nearest(read_gray(path), input_size, input_size);
    Tensor mask(Shape{1, input_size, input_size});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = gray.data[i] * 255.0 > 127.5 ? 1.0 : 0.0;
    return mask;
}

void save_image(const Tensor& tensor, const fs::path& path, const Normalization& norm) {
    write_png(destandardize(tensor, norm), path);
}

TrainingPair make_training_pair(const Image& normal, const AnomalySynthesizer& synthesizer, std::uint64_t seed,
                                const Normalization& norm, const fs::path& source) {
    return make_training_pair(normal, synthesizer.foreground_for(normal, source), synthesizer, seed, norm);
}

TrainingPair make_training_pair(const Image& normal, const ForegroundMask& fg, const AnomalySynthesizer& synthesizer,
                                std::uint64_t seed, const Normalization& norm) {
    SynthesisResult synth = synthesizer.synthesize(normal, fg, seed);
    TrainingPair pair;
    pair.normal = standardize(normal, norm);
    pair.anomalous = standardize(synth.anomalous, norm);
    pair.gt_mask = std::move(synth.mask);
    pair.foreground = fg.data;
    pair.normal_raw = normal;
    pair.anomalous_raw = std::move(synth.anomalous);
    pair.beta = synth.beta;
    return pair;
}

}  // namespace dmdd
