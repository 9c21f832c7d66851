#include "dmdd/segmentation_head.hpp"

#include <algorithm>
#include <cmath>

#include "dmdd/error.hpp"

namespace dmdd {

using ag::Var;

StageMaps compute_stage_maps(const Pyramid& teacher, const Pyramid& normality, const Pyramid& abnormality) {
    StageMaps maps;
    for (int i = 0; i < kStages; ++i) {
        require(teacher[i].shape() == normality[i].shape() && teacher[i].shape() == abnormality[i].shape(),
                ErrorKind::InvalidArgument, "compute_stage_maps: pyramid shape mismatch at stage " +
                                                std::to_string(i + 1));
        maps.ngm[i] = ag::cosine_distance(teacher[i], normality[i]);
        maps.aim[i] = ag::cosine_distance(teacher[i], abnormality[i]);
    }
    return maps;
}

namespace {

Var resize_like(const Var& x, const Var& like) {
    if (x.shape() == like.shape()) return x;
    return ag::resize_bilinear(x, like.dim(1), like.dim(2));
}

}  // namespace

Var pyramid_upsample(const StageMaps& maps, int input_size, bool pu) {
    std::array<Var, kStages> ngm = maps.ngm;
    std::array<Var, kStages> aim = maps.aim;
    if (pu) {
        for (int i = kStages - 2; i >= 0; --i) ngm[i] = ag::add(ngm[i], resize_like(ngm[i + 1], ngm[i]));
        for (int i = 1; i < kStages; ++i) aim[i] = ag::add(aim[i], resize_like(aim[i - 1], aim[i]));
    }
    std::vector<Var> channels;
    for (const auto& m : ngm) channels.push_back(ag::resize_bilinear(m, input_size, input_size));
    for (const auto& m : aim) channels.push_back(ag::resize_bilinear(m, input_size, input_size));
    return ag::concat_channels(channels);
}

SegmentationHead::SegmentationHead(const HeadConfig& config, std::uint64_t seed) : config_(config) {
    require(config.input_size > 0, ErrorKind::ConfigError, "head input_size must be positive");
    require(config.top_k > 0 && config.top_k <= config.input_size * config.input_size, ErrorKind::ConfigError,
            "top_k must be in [1, input_size^2]");
    if (!config.mm) return;
    nn::Rng rng(seed);
    // The stack is non-negative, so non-negative fc1 weights keep the squeeze
    // units out of the dead ReLU region at the start.
    Tensor fc1 = nn::kaiming_normal(Shape{kSqueeze, kChannels}, kChannels, rng);
    for (auto& v : fc1.vec()) v = std::abs(v);
    p_.fc1_w = Var::parameter(std::move(fc1));
    p_.fc1_b = Var::parameter(Tensor::zeros(Shape{kSqueeze}));
    // Tiny rather than zero so fc1 receives gradient from the first step.
    p_.fc2_w = Var::parameter(nn::normal(Shape{kChannels, kSqueeze}, kGateInitStd, rng));
    p_.fc2_b = Var::parameter(Tensor::zeros(Shape{kChannels}));
    p_.spatial = nn::Conv2d(2, 1, kSpatialKernel, 1, kSpatialKernel / 2, true, rng);
    p_.spatial.weight.mutable_value().fill(0.0);
    p_.global = Var::parameter(Tensor::zeros(Shape{kChannels, config.input_size, config.input_size}));
    p_.compress = nn::Conv2d(kChannels, 1, 1, 1, 0, true, rng);
    p_.compress.weight.mutable_value().fill(1.0);
    p_.compress.bias.mutable_value().fill(0.0);

    params_.add("head.channel.fc1.weight", p_.fc1_w);
    params_.add("head.channel.fc1.bias", p_.fc1_b);
    params_.add("head.channel.fc2.weight", p_.fc2_w);
    params_.add("head.channel.fc2.bias", p_.fc2_b);
    p_.spatial.collect(params_, "head.spatial");
    params_.add("head.global", p_.global);
    p_.compress.collect(params_, "head.compress");
}

Var SegmentationHead::fuse(const Var& stack) const {
    require(stack.shape() == Shape{kChannels, config_.input_size, config_.input_size}, ErrorKind::InvalidArgument,
            "fuse expects an [8,S,S] stack, got " + shape_str(stack.shape()));
    if (!config_.mm) return ag::sigmoid(ag::channel_mean(stack));

    const Var squeeze = ag::relu(ag::linear(ag::global_avg_pool(stack), p_.fc1_w, p_.fc1_b));
    const Var channel_gate = ag::scale(ag::sigmoid(ag::linear(squeeze, p_.fc2_w, p_.fc2_b)), 2.0);
    const Var x1 = ag::mul_channel(stack, channel_gate);

    const std::array<Var, 2> pooled{ag::channel_max(x1), ag::channel_mean(x1)};
    const Var spatial_gate = ag::scale(ag::sigmoid(p_.spatial.forward(ag::concat_channels(pooled))), 2.0);
    const Var x2 = ag::mul_pixel(x1, spatial_gate);

    const Var weighted = ag::mul(ag::softmax_channels(p_.global), x2);
    return ag::sigmoid(p_.compress.forward(weighted));
}

Var anomaly_score(const Var& map, int k, bool extra_sigmoid) {
    const Var s = ag::topk_mean(map, k);
    return extra_sigmoid ? ag::sigmoid(s) : s;
}

Var seg_loss(const Var& map, const Var& score, const Tensor& gt) {
    require(map.shape() == gt.shape(), ErrorKind::InvalidArgument,
            "seg_loss: map " + shape_str(map.shape()) + " vs mask " + shape_str(gt.shape()));
    double label = 0.0;
    for (double v : gt.vec()) label = std::max(label, v);
    return ag::add(ag::bce_mean(map, gt), ag::bce_mean(score, Tensor::scalar(label)));
}

Tensor frozen_stack(const Teacher& teacher, const Student& student, const Tensor& image, int input_size, bool pu) {
    ag::NoGradGuard guard;
    const Var x(image);
    const Pyramid t = teacher.forward(x);
    const StudentOutput s = student.forward(x);
    return pyramid_upsample(compute_stage_maps(t, s.normality, s.abnormality), input_size, pu).value();
}

Prediction predict(const Teacher& teacher, const Student& student, const SegmentationHead& head,
                   const Tensor& image) {
    const HeadConfig& cfg = head.config();
    const Tensor stack = frozen_stack(teacher, student, image, cfg.input_size, cfg.pu);
    ag::NoGradGuard guard;
    const Var m = head.fuse(Var(stack));
    return {m.value(), anomaly_score(m, cfg.top_k, cfg.score_extra_sigmoid).value().item()};
}

SegEpochStats train_seg_epoch(std::span<const TrainingPair> pairs, const Teacher& teacher, const Student& student,
                              const SegmentationHead& head, nn::Adam& optimizer, int batch_size) {
    require(batch_size > 0, ErrorKind::ConfigError, "batch_size must be positive");
    const std::string teacher_hash = teacher.hash();
    const std::string student_hash = student.hash();
    const HeadConfig& cfg = head.config();

    SegEpochStats stats;
    double loss_sum = 0.0;
    std::size_t terms = 0;
    for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(batch_size));
        optimizer.zero_grad();
        const double inv = 1.0 / static_cast<double>(2 * (end - start));
        for (std::size_t i = start; i < end; ++i) {
            const TrainingPair& pair = pairs[i];
            const Tensor zero = Tensor::zeros(pair.gt_mask.shape());
            for (int member = 0; member < 2; ++member) {
                const Tensor& image = member == 0 ? pair.normal : pair.anomalous;
                const Tensor& mask = member == 0 ? zero : pair.gt_mask;
                const Var m = head.fuse(Var(frozen_stack(teacher, student, image, cfg.input_size, cfg.pu)));
                const Var loss = seg_loss(m, anomaly_score(m, cfg.top_k, cfg.score_extra_sigmoid), mask);
                require(loss.value().all_finite(), ErrorKind::NonFiniteLoss, "non-finite segmentation loss");
                ag::backward(ag::scale(loss, inv));
                loss_sum += loss.value().item();
                ++terms;
            }
        }
        optimizer.step();
        ++stats.steps;
    }
    stats.mean_loss = terms ? loss_sum / static_cast<double>(terms) : 0.0;
    require(teacher.hash() == teacher_hash, ErrorKind::Internal, "teacher parameters changed during head training");
    require(student.hash() == student_hash, ErrorKind::Internal, "student parameters changed during head training");
    return stats;
}

}  // namespace dmdd
