#include "dmdd/toy_dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "dmdd/error.hpp"
#include "dmdd/image.hpp"

namespace dmdd {

namespace fs = std::filesystem;

namespace {

using Rng = std::mt19937_64;

struct Disk {
    double cx, cy, radius, angle;
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Dark noisy background with a disk carrying two-tone stripes.
std::pair<Image, Disk> render_normal(int size, Rng& rng) {
    Image img(size, size, 3);
    const Disk disk{size / 2.0 + uniform(rng, -3.0, 3.0), size / 2.0 + uniform(rng, -3.0, 3.0),
                    size * uniform(rng, 0.30, 0.34), uniform(rng, 0.0, std::numbers::pi)};
    const std::array<double, 3> stripe_a{0.85, 0.55, 0.20};
    const std::array<double, 3> stripe_b{0.70, 0.40, 0.15};
    const double period = size / 8.0;
    std::normal_distribution<double> noise(0.0, 0.015);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x + 0.5 - disk.cx, dy = y + 0.5 - disk.cy;
            const bool inside = dx * dx + dy * dy <= disk.radius * disk.radius;
            const double u = dx * std::cos(disk.angle) + dy * std::sin(disk.angle);
            const bool first = std::fmod(std::floor(u / period), 2.0) == 0.0;
            for (int c = 0; c < 3; ++c) {
                const double base = inside ? (first ? stripe_a[c] : stripe_b[c]) : 0.08;
                img.at(y, x, c) = std::clamp(base + noise(rng), 0.0, 1.0);
            }
        }
    return {img, disk};
}

Image empty_mask(int size) { return Image(size, size, 1); }

// A filled blob of a foreign color inside the disk.
void add_spot(Image& img, Image& mask, const Disk& disk, Rng& rng) {
    const double r = uniform(rng, 3.0, 6.0);
    const double rho = uniform(rng, 0.0, disk.radius - r - 1.0);
    const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double cx = disk.cx + rho * std::cos(phi), cy = disk.cy + rho * std::sin(phi);
    const std::array<double, 3> color{uniform(rng, 0.1, 0.3), uniform(rng, 0.5, 0.8), uniform(rng, 0.6, 0.9)};
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy > r * r) continue;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
            mask.at(y, x, 0) = 1.0;
        }
}

// A thin dark line segment inside the disk.
void add_scratch(Image& img, Image& mask, const Disk& disk, Rng& rng) {
    const double len = uniform(rng, 12.0, 20.0);
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    const double rho = uniform(rng, 0.0, std::max(0.0, disk.radius - len / 2.0 - 2.0));
    const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double cx = disk.cx + rho * std::cos(phi), cy = disk.cy + rho * std::sin(phi);
    const double ux = std::cos(theta), uy = std::sin(theta);
    const double shade = uniform(rng, 0.05, 0.2);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double along = dx * ux + dy * uy;
            const double across = -dx * uy + dy * ux;
            if (std::abs(along) > len / 2.0 || std::abs(across) > 1.2) continue;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = shade;
            mask.at(y, x, 0) = 1.0;
        }
}

std::string numbered(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", i);
    return buf;
}

}  // namespace

fs::path make_toy_dataset(const fs::path& root, const ToyDatasetSpec& spec) {
    require(spec.image_size >= 32, ErrorKind::InvalidArgument, "toy image_size must be >= 32");
    require(spec.train_normal >= 0 && spec.test_normal >= 0 && spec.test_defect >= 0, ErrorKind::InvalidArgument,
            "toy dataset counts must be nonnegative");
    const fs::path dir = root / spec.category;
    Rng rng(spec.seed);
    const int size = spec.image_size;

    for (int i = 0; i < spec.train_normal; ++i)
        write_png(render_normal(size, rng).first, dir / "train" / "good" / (numbered(i) + ".png"));
    for (int i = 0; i < spec.test_normal; ++i)
        write_png(render_normal(size, rng).first, dir / "test" / "good" / (numbered(i) + ".png"));

    int counts[2] = {0, 0};
    for (int i = 0; i < spec.test_defect; ++i) {
        auto [img, disk] = render_normal(size, rng);
        Image mask = empty_mask(size);
        const int kind = i % 2;
        if (kind == 0)
            add_spot(img, mask, disk, rng);
        else
            add_scratch(img, mask, disk, rng);
        const std::string defect = kind == 0 ? "spot" : "scratch";
        const std::string stem = numbered(counts[kind]++);
        write_png(img, dir / "test" / defect / (stem + ".png"));
        write_png(mask, dir / "ground_truth" / defect / (stem + "_mask.png"));
    }
    return dir;
}

}  // namespace dmdd
