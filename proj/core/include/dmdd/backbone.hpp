#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dmdd/autograd.hpp"
#include "dmdd/nn.hpp"

namespace dmdd {

inline constexpr int kStages = 4;

enum class BackboneKind { Toy, WideResNet50 };

BackboneKind parse_backbone_kind(const std::string& text);
std::string to_string(BackboneKind kind);

struct BackboneSpec {
    BackboneKind kind = BackboneKind::Toy;
    std::array<int, kStages> stage_channels{8, 16, 32, 64};
    int input_size = 64;
    // Required for WideResNet50 unless random_weights is set (architecture tests only).
    std::filesystem::path weights;
    bool random_weights = false;
    std::uint64_t init_seed = 0;  // toy backbone initialization

    // Spatial size of stage i: input_size / 4, /8, /16, /32.
    int stage_size(int stage) const { return input_size >> (stage + 2); }
    void validate() const;  // throws config-error

    static BackboneSpec toy(int input_size = 64, std::uint64_t seed = 0);
    static BackboneSpec wide_resnet50(int input_size, std::filesystem::path weights);
};

// Autograd view of a 4-stage pyramid.
using Pyramid = std::array<ag::Var, kStages>;

enum class PyramidRole { Teacher, StudentNormality, StudentAbnormality };

// Value view of a pyramid, detached from any graph.
struct FeaturePyramid {
    std::array<Tensor, kStages> stages;
    PyramidRole role = PyramidRole::Teacher;
};

FeaturePyramid to_values(const Pyramid& pyramid, PyramidRole role);
Pyramid to_leaves(const FeaturePyramid& pyramid, bool requires_grad = false);

class Stage {
public:
    virtual ~Stage() = default;
    virtual ag::Var forward(const ag::Var& x) const = 0;
    virtual void collect(nn::ParamList& params, const std::string& prefix) const = 0;
    virtual std::unique_ptr<Stage> clone() const = 0;
};

// Four feature-extraction stages; copying deep-copies parameters.
class Trunk {
public:
    Trunk() = default;
    Trunk(const Trunk& other);
    Trunk& operator=(const Trunk& other);
    Trunk(Trunk&&) noexcept = default;
    Trunk& operator=(Trunk&&) noexcept = default;

    // Toy stages: 3x3 conv -> layer norm -> ReLU -> 2x2 average pool. The first
    // stage convolves with stride 2 so its output is input / 4.
    static Trunk toy(const BackboneSpec& spec);
    // WideResNet-50-2 (stem + layer1 .. layer4), batch norm folded into a
    // per-channel affine. Loads torchvision-named tensors from spec.weights.
    static Trunk wide_resnet50(const BackboneSpec& spec);
    static Trunk build(const BackboneSpec& spec);

    ag::Var stage_forward(int stage, const ag::Var& x) const;
    nn::ParamList params(const std::string& prefix = "trunk") const;
    int input_size() const noexcept { return input_size_; }

private:
    std::vector<std::unique_ptr<Stage>> stages_;
    int input_size_ = 0;
};

// 1x1 convolution C -> 2C after a student stage; channels [0, C) are the
// normality half, [C, 2C) the abnormality half.
struct DecoupleLayer {
    nn::Conv2d conv;

    // Both halves start as identity maps plus N(0, noise^2) weight jitter.
    static DecoupleLayer identity(int channels, double noise, nn::Rng& rng);
    int channels() const { return conv.in_channels(); }
};

enum class Branch { Normality, Abnormality };

struct PmnFlags {
    bool inner = true;
    bool outer = true;
};

// Bidirectional dual-path pyramid refinement for one branch. Each path is FPN
// style: lateral 1x1 to width P, neighbor resize (bilinear up / 2x2 average
// pool down), add, 3x3 smooth. The result is projected back to C_i by a 1x1
// conv and added to the input, so a disabled path set leaves features intact.
class PyramidModelingNetwork {
public:
    PyramidModelingNetwork() = default;
    PyramidModelingNetwork(Branch branch, const std::array<int, kStages>& channels, int width, double out_noise,
                           nn::Rng& rng);

    Branch branch() const noexcept { return branch_; }
    // Normality: inner top-down, outer bottom-up. Abnormality: the reverse.
    bool inner_top_down() const noexcept { return branch_ == Branch::Normality; }

    Pyramid forward(const Pyramid& input, const PmnFlags& flags) const;
    void collect(nn::ParamList& params, const std::string& prefix) const;

private:
    Branch branch_ = Branch::Normality;
    std::array<nn::Conv2d, kStages> lateral_;
    std::array<nn::Conv2d, kStages> inner_smooth_;
    std::array<nn::Conv2d, kStages> outer_smooth_;
    std::array<nn::Conv2d, kStages> output_;
};

// Frozen teacher. Both logical teachers (normal and anomalous pathway) are
// this one object, so weight sharing holds by construction.
class Teacher {
public:
    explicit Teacher(Trunk trunk);

    Pyramid forward(const ag::Var& image) const;
    FeaturePyramid forward(const Tensor& image) const;
    const nn::ParamList& params() const noexcept { return params_; }
    std::string hash() const { return params_.hash(); }
    const Trunk& trunk() const noexcept { return trunk_; }

private:
    Trunk trunk_;
    nn::ParamList params_;
};

struct StudentConfig {
    PmnFlags pmn;
    bool trunk_trainable = true;
    double init_noise = 0.0;  // decouple / PMN output jitter; 0 gives the exact identity start
    std::uint64_t seed = 0;
};

struct StudentOutput {
    Pyramid normality;
    Pyramid abnormality;
};

class Student {
public:
    // The trunk is a copy of the teacher's.
    Student(const Trunk& teacher_trunk, const BackboneSpec& spec, const StudentConfig& config);

    StudentOutput forward(const ag::Var& image) const;
    std::pair<FeaturePyramid, FeaturePyramid> forward(const Tensor& image) const;

    // Stable order: trunk, decouple, pmn.normality, pmn.abnormality.
    const nn::ParamList& params() const noexcept { return params_; }
    nn::ParamList trainable_params() const;
    std::string hash() const { return params_.hash(); }
    const StudentConfig& config() const noexcept { return config_; }

private:
    StudentConfig config_;
    Trunk trunk_;
    std::array<DecoupleLayer, kStages> decouple_;
    PyramidModelingNetwork pmn_normality_;
    PyramidModelingNetwork pmn_abnormality_;
    nn::ParamList params_;
    nn::ParamList trunk_params_;
};

void check_image_shape(const ag::Var& image, int input_size);

}  // namespace dmdd
