#include "dmdd/backbone.hpp"

#include <cmath>
#include <optional>

#include "dmdd/error.hpp"
#include "dmdd/serialization.hpp"

namespace dmdd {

using ag::Var;

BackboneKind parse_backbone_kind(const std::string& text) {
    if (text == "toy") return BackboneKind::Toy;
    if (text == "pretrained-wideresnet50" || text == "wideresnet50") return BackboneKind::WideResNet50;
    fail(ErrorKind::ConfigError, "unknown backbone '" + text + "'");
}

std::string to_string(BackboneKind kind) {
    return kind == BackboneKind::Toy ? "toy" : "pretrained-wideresnet50";
}

void BackboneSpec::validate() const {
    require(input_size >= 32 && input_size % 32 == 0, ErrorKind::ConfigError,
            "input_size must be a positive multiple of 32, got " + std::to_string(input_size));
    for (int c : stage_channels) require(c > 0, ErrorKind::ConfigError, "stage channels must be positive");
    if (kind == BackboneKind::WideResNet50) {
        require(stage_channels == std::array<int, kStages>{256, 512, 1024, 2048}, ErrorKind::ConfigError,
                "wideresnet50 stage channels are 256,512,1024,2048");
        require(random_weights || !weights.empty(), ErrorKind::ConfigError,
                "pretrained-wideresnet50 needs backbone_weights (see tools/export_wide_resnet50.py)");
    }
}

BackboneSpec BackboneSpec::toy(int input_size, std::uint64_t seed) {
    BackboneSpec spec;
    spec.input_size = input_size;
    spec.init_seed = seed;
    return spec;
}

BackboneSpec BackboneSpec::wide_resnet50(int input_size, std::filesystem::path weights) {
    BackboneSpec spec;
    spec.kind = BackboneKind::WideResNet50;
    spec.stage_channels = {256, 512, 1024, 2048};
    spec.input_size = input_size;
    spec.weights = std::move(weights);
    return spec;
}

FeaturePyramid to_values(const Pyramid& pyramid, PyramidRole role) {
    FeaturePyramid out;
    out.role = role;
    for (int i = 0; i < kStages; ++i) out.stages[i] = pyramid[i].value();
    return out;
}

Pyramid to_leaves(const FeaturePyramid& pyramid, bool requires_grad) {
    Pyramid out;
    for (int i = 0; i < kStages; ++i) out[i] = Var(pyramid.stages[i], requires_grad);
    return out;
}

void check_image_shape(const Var& image, int input_size) {
    require(image.shape() == Shape{3, input_size, input_size}, ErrorKind::InvalidArgument,
            "expected image " + shape_str({3, input_size, input_size}) + ", got " + shape_str(image.shape()));
}

// ---------------------------------------------------------------------------
// stages

namespace {

struct Affine {
    Var scale;
    Var shift;

    static Affine identity(int channels) {
        return {Var::parameter(Tensor::full(Shape{channels}, 1.0)), Var::parameter(Tensor::zeros(Shape{channels}))};
    }
    Affine clone() const { return {nn::clone_param(scale), nn::clone_param(shift)}; }
    Var forward(const Var& x) const { return ag::affine_channels(x, scale, shift); }
    void collect(nn::ParamList& params, const std::string& prefix) const {
        params.add(prefix + ".scale", scale);
        params.add(prefix + ".shift", shift);
    }
};

class ToyStage final : public Stage {
public:
    ToyStage(int in_ch, int out_ch, int conv_stride, nn::Rng& rng)
        : conv_(in_ch, out_ch, 3, conv_stride, 1, true, rng),
          gamma_(Var::parameter(Tensor::full(Shape{out_ch}, 1.0))),
          beta_(Var::parameter(Tensor::zeros(Shape{out_ch}))) {}

    Var forward(const Var& x) const override {
        return ag::avg_pool(ag::relu(ag::layer_norm(conv_.forward(x), gamma_, beta_)), 2);
    }

    void collect(nn::ParamList& params, const std::string& prefix) const override {
        conv_.collect(params, prefix + ".conv");
        params.add(prefix + ".norm.gamma", gamma_);
        params.add(prefix + ".norm.beta", beta_);
    }

    std::unique_ptr<Stage> clone() const override {
        auto copy = std::make_unique<ToyStage>(*this);
        copy->conv_ = conv_.clone();
        copy->gamma_ = nn::clone_param(gamma_);
        copy->beta_ = nn::clone_param(beta_);
        return copy;
    }

private:
    nn::Conv2d conv_;
    Var gamma_;
    Var beta_;
};

struct Bottleneck {
    nn::Conv2d conv1, conv2, conv3;
    Affine bn1, bn2, bn3;
    std::optional<nn::Conv2d> down;
    Affine down_bn;

    Var forward(const Var& x) const {
        Var y = ag::relu(bn1.forward(conv1.forward(x)));
        y = ag::relu(bn2.forward(conv2.forward(y)));
        y = bn3.forward(conv3.forward(y));
        const Var skip = down ? down_bn.forward(down->forward(x)) : x;
        return ag::relu(ag::add(y, skip));
    }

    Bottleneck clone() const {
        Bottleneck b{conv1.clone(), conv2.clone(), conv3.clone(), bn1.clone(), bn2.clone(), bn3.clone(),
                     std::nullopt, {}};
        if (down) {
            b.down = down->clone();
            b.down_bn = down_bn.clone();
        }
        return b;
    }

    void collect(nn::ParamList& params, const std::string& prefix) const {
        conv1.collect(params, prefix + ".conv1");
        bn1.collect(params, prefix + ".bn1");
        conv2.collect(params, prefix + ".conv2");
        bn2.collect(params, prefix + ".bn2");
        conv3.collect(params, prefix + ".conv3");
        bn3.collect(params, prefix + ".bn3");
        if (down) {
            down->collect(params, prefix + ".downsample.0");
            down_bn.collect(params, prefix + ".downsample.1");
        }
    }
};

class ResNetStage final : public Stage {
public:
    std::optional<nn::Conv2d> stem;
    Affine stem_bn;
    std::vector<Bottleneck> blocks;
    std::string layer_name;

    Var forward(const Var& x) const override {
        Var y = x;
        if (stem) y = ag::max_pool(ag::relu(stem_bn.forward(stem->forward(y))), 3, 2, 1);
        for (const auto& b : blocks) y = b.forward(y);
        return y;
    }

    void collect(nn::ParamList& params, const std::string& prefix) const override {
        if (stem) {
            stem->collect(params, prefix + ".conv1");
            stem_bn.collect(params, prefix + ".bn1");
        }
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(params, prefix + "." + layer_name + "." + std::to_string(i));
    }

    std::unique_ptr<Stage> clone() const override {
        auto copy = std::make_unique<ResNetStage>();
        if (stem) {
            copy->stem = stem->clone();
            copy->stem_bn = stem_bn.clone();
        }
        for (const auto& b : blocks) copy->blocks.push_back(b.clone());
        copy->layer_name = layer_name;
        return copy;
    }
};

// Loads a torchvision conv weight, or keeps the random init.
void load_conv(nn::Conv2d& conv, const TensorArchive* archive, const std::string& name) {
    if (!archive) return;
    const Tensor& w = archive->get(name + ".weight");
    require(w.shape() == conv.weight.shape(), ErrorKind::CorruptDataset,
            "weight " + name + " has shape " + shape_str(w.shape()) + ", expected " +
                shape_str(conv.weight.shape()));
    conv.weight.mutable_value() = w;
}

// Folds eval-mode batch norm into scale/shift.
void load_bn(Affine& bn, const TensorArchive* archive, const std::string& name, double random_scale) {
    const int channels = static_cast<int>(bn.scale.value().numel());
    if (!archive) {
        bn.scale.mutable_value().fill(random_scale);
        return;
    }
    const Tensor& gamma = archive->get(name + ".weight");
    const Tensor& beta = archive->get(name + ".bias");
    const Tensor& mean = archive->get(name + ".running_mean");
    const Tensor& var = archive->get(name + ".running_var");
    require(static_cast<int>(gamma.numel()) == channels, ErrorKind::CorruptDataset, "bn size mismatch: " + name);
    for (int c = 0; c < channels; ++c) {
        const double s = gamma[c] / std::sqrt(var[c] + 1e-5);
        bn.scale.mutable_value()[c] = s;
        bn.shift.mutable_value()[c] = beta[c] - mean[c] * s;
    }
}

}  // namespace

Trunk::Trunk(const Trunk& other) : input_size_(other.input_size_) {
    for (const auto& s : other.stages_) stages_.push_back(s->clone());
}

Trunk& Trunk::operator=(const Trunk& other) {
    if (this != &other) {
        Trunk copy(other);
        stages_ = std::move(copy.stages_);
        input_size_ = other.input_size_;
    }
    return *this;
}

Trunk Trunk::toy(const BackboneSpec& spec) {
    nn::Rng rng(spec.init_seed);
    Trunk trunk;
    trunk.input_size_ = spec.input_size;
    int in_ch = 3;
    for (int i = 0; i < kStages; ++i) {
        trunk.stages_.push_back(std::make_unique<ToyStage>(in_ch, spec.stage_channels[i], i == 0 ? 2 : 1, rng));
        in_ch = spec.stage_channels[i];
    }
    return trunk;
}

Trunk Trunk::wide_resnet50(const BackboneSpec& spec) {
    std::optional<TensorArchive> archive;
    if (!spec.random_weights) archive = read_archive(spec.weights);
    const TensorArchive* ar = archive ? &*archive : nullptr;
    nn::Rng rng(spec.init_seed);

    constexpr int kBlocks[kStages] = {3, 4, 6, 3};
    Trunk trunk;
    trunk.input_size_ = spec.input_size;
    int in_ch = 64;
    for (int s = 0; s < kStages; ++s) {
        auto stage = std::make_unique<ResNetStage>();
        stage->layer_name = "layer" + std::to_string(s + 1);
        if (s == 0) {
            stage->stem = nn::Conv2d(3, 64, 7, 2, 3, false, rng);
            stage->stem_bn = Affine::identity(64);
            load_conv(*stage->stem, ar, "conv1");
            load_bn(stage->stem_bn, ar, "bn1", 1.0);
        }
        const int width = 128 << s;  // wide: 2x the ResNet-50 bottleneck width
        const int out_ch = 256 << s;
        for (int b = 0; b < kBlocks[s]; ++b) {
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            const std::string name = stage->layer_name + "." + std::to_string(b);
            Bottleneck block{nn::Conv2d(in_ch, width, 1, 1, 0, false, rng),
                             nn::Conv2d(width, width, 3, stride, 1, false, rng),
                             nn::Conv2d(width, out_ch, 1, 1, 0, false, rng),
                             Affine::identity(width),
                             Affine::identity(width),
                             Affine::identity(out_ch),
                             std::nullopt,
                             {}};
            load_conv(block.conv1, ar, name + ".conv1");
            load_conv(block.conv2, ar, name + ".conv2");
            load_conv(block.conv3, ar, name + ".conv3");
            load_bn(block.bn1, ar, name + ".bn1", 1.0);
            load_bn(block.bn2, ar, name + ".bn2", 1.0);
            // Random weights: damp the residual branch so activations stay bounded.
            load_bn(block.bn3, ar, name + ".bn3", 0.2);
            if (b == 0) {
                block.down = nn::Conv2d(in_ch, out_ch, 1, stride, 0, false, rng);
                block.down_bn = Affine::identity(out_ch);
                load_conv(*block.down, ar, name + ".downsample.0");
                load_bn(block.down_bn, ar, name + ".downsample.1", 1.0);
            }
            stage->blocks.push_back(std::move(block));
            in_ch = out_ch;
        }
        trunk.stages_.push_back(std::move(stage));
    }
    return trunk;
}

Trunk Trunk::build(const BackboneSpec& spec) {
    spec.validate();
    return spec.kind == BackboneKind::Toy ? toy(spec) : wide_resnet50(spec);
}

Var Trunk::stage_forward(int stage, const Var& x) const {
    require(stage >= 0 && stage < static_cast<int>(stages_.size()), ErrorKind::Internal, "bad stage index");
    return stages_[static_cast<std::size_t>(stage)]->forward(x);
}

nn::ParamList Trunk::params(const std::string& prefix) const {
    nn::ParamList params;
    for (std::size_t i = 0; i < stages_.size(); ++i)
        stages_[i]->collect(params, prefix + ".stage" + std::to_string(i + 1));
    return params;
}

// ---------------------------------------------------------------------------
// decouple + PMN

DecoupleLayer DecoupleLayer::identity(int channels, double noise, nn::Rng& rng) {
    DecoupleLayer layer;
    Tensor w(Shape{2 * channels, channels, 1, 1});
    for (int o = 0; o < 2 * channels; ++o) w[static_cast<std::size_t>(o) * channels + (o % channels)] = 1.0;
    if (noise > 0.0) {
        std::normal_distribution<double> jitter(0.0, noise);
        for (auto& v : w.vec()) v += jitter(rng);
    }
    layer.conv.weight = Var::parameter(std::move(w));
    layer.conv.bias = Var::parameter(Tensor::zeros(Shape{2 * channels}));
    return layer;
}

PyramidModelingNetwork::PyramidModelingNetwork(Branch branch, const std::array<int, kStages>& channels, int width,
                                               double out_noise, nn::Rng& rng)
    : branch_(branch) {
    for (int i = 0; i < kStages; ++i) {
        lateral_[i] = nn::Conv2d(channels[i], width, 1, 1, 0, true, rng);
        inner_smooth_[i] = nn::Conv2d(width, width, 3, 1, 1, true, rng);
        outer_smooth_[i] = nn::Conv2d(width, width, 3, 1, 1, true, rng);
        output_[i] = nn::Conv2d(width, channels[i], 1, 1, 0, true, rng);
        Tensor w = out_noise > 0.0 ? nn::normal(output_[i].weight.shape(), out_noise / std::sqrt(width), rng)
                                   : Tensor::zeros(output_[i].weight.shape());
        output_[i].weight.mutable_value() = std::move(w);
    }
}

namespace {

Var resize_to(const Var& x, const Var& like) {
    const int h = like.dim(1), w = like.dim(2);
    if (x.dim(1) == h && x.dim(2) == w) return x;
    if (x.dim(1) == 2 * h && x.dim(2) == 2 * w) return ag::avg_pool(x, 2);
    return ag::resize_bilinear(x, h, w);
}

// Accumulates along the pyramid: out[first] = in[first], out[i] = in[i] + resize(out[prev]).
std::array<Var, kStages> fuse_path(const std::array<Var, kStages>& in, bool top_down) {
    std::array<Var, kStages> out;
    for (int k = 0; k < kStages; ++k) {
        const int i = top_down ? kStages - 1 - k : k;
        const int prev = top_down ? i + 1 : i - 1;
        out[i] = k == 0 ? in[i] : ag::add(in[i], resize_to(out[prev], in[i]));
    }
    return out;
}

}  // namespace

Pyramid PyramidModelingNetwork::forward(const Pyramid& input, const PmnFlags& flags) const {
    if (!flags.inner && !flags.outer) return input;
    std::array<Var, kStages> x;
    for (int i = 0; i < kStages; ++i) x[i] = lateral_[i].forward(input[i]);
    if (flags.inner) {
        x = fuse_path(x, inner_top_down());
        for (int i = 0; i < kStages; ++i) x[i] = inner_smooth_[i].forward(x[i]);
    }
    if (flags.outer) {
        x = fuse_path(x, !inner_top_down());
        for (int i = 0; i < kStages; ++i) x[i] = outer_smooth_[i].forward(x[i]);
    }
    Pyramid out;
    for (int i = 0; i < kStages; ++i) out[i] = ag::add(input[i], output_[i].forward(x[i]));
    return out;
}

void PyramidModelingNetwork::collect(nn::ParamList& params, const std::string& prefix) const {
    for (int i = 0; i < kStages; ++i) {
        const std::string s = prefix + ".stage" + std::to_string(i + 1);
        lateral_[i].collect(params, s + ".lateral");
        inner_smooth_[i].collect(params, s + ".inner_smooth");
        outer_smooth_[i].collect(params, s + ".outer_smooth");
        output_[i].collect(params, s + ".output");
    }
}

// ---------------------------------------------------------------------------
// teacher / student

Teacher::Teacher(Trunk trunk) : trunk_(std::move(trunk)), params_(trunk_.params("teacher")) {
    params_.set_requires_grad(false);
}

Pyramid Teacher::forward(const Var& image) const {
    Pyramid out;
    check_image_shape(image, trunk_.input_size());
    Var x = image.detach();
    for (int i = 0; i < kStages; ++i) {
        x = trunk_.stage_forward(i, x);
        out[i] = x;
    }
    return out;
}

FeaturePyramid Teacher::forward(const Tensor& image) const {
    ag::NoGradGuard guard;
    return to_values(forward(Var(image)), PyramidRole::Teacher);
}

Student::Student(const Trunk& teacher_trunk, const BackboneSpec& spec, const StudentConfig& config)
    : config_(config), trunk_(teacher_trunk) {
    nn::Rng rng(config.seed);
    for (int i = 0; i < kStages; ++i)
        decouple_[i] = DecoupleLayer::identity(spec.stage_channels[i], config.init_noise, rng);
    const int width = spec.stage_channels[0];
    pmn_normality_ = PyramidModelingNetwork(Branch::Normality, spec.stage_channels, width, config.init_noise, rng);
    pmn_abnormality_ =
        PyramidModelingNetwork(Branch::Abnormality, spec.stage_channels, width, config.init_noise, rng);

    trunk_params_ = trunk_.params("student.trunk");
    trunk_params_.set_requires_grad(config.trunk_trainable);
    params_.extend(trunk_params_);
    for (int i = 0; i < kStages; ++i)
        decouple_[i].conv.collect(params_, "student.decouple.stage" + std::to_string(i + 1));
    nn::ParamList pmn;
    pmn_normality_.collect(pmn, "student.pmn.normality");
    pmn_abnormality_.collect(pmn, "student.pmn.abnormality");
    // PMN weights are only live when at least one path is on.
    pmn.set_requires_grad(config.pmn.inner || config.pmn.outer);
    params_.extend(pmn);
}

nn::ParamList Student::trainable_params() const {
    nn::ParamList out;
    for (const auto& p : params_.items())
        if (p.var.requires_grad()) out.add(p.name, p.var);
    return out;
}

StudentOutput Student::forward(const Var& image) const {
    check_image_shape(image, trunk_.input_size());
    Pyramid normality, abnormality;
    Var x = image;
    for (int i = 0; i < kStages; ++i) {
        const Var features = trunk_.stage_forward(i, x);
        const Var decoupled = decouple_[i].conv.forward(features);
        const int c = decouple_[i].channels();
        normality[i] = ag::slice_channels(decoupled, 0, c);
        abnormality[i] = ag::slice_channels(decoupled, c, c);
        x = normality[i];
    }
    return {pmn_normality_.forward(normality, config_.pmn), pmn_abnormality_.forward(abnormality, config_.pmn)};
}

std::pair<FeaturePyramid, FeaturePyramid> Student::forward(const Tensor& image) const {
    ag::NoGradGuard guard;
    auto out = forward(Var(image));
    return {to_values(out.normality, PyramidRole::StudentNormality),
            to_values(out.abnormality, PyramidRole::StudentAbnormality)};
}

}  // namespace dmdd
