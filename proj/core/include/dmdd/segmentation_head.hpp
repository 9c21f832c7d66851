#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "dmdd/backbone.hpp"
#include "dmdd/data.hpp"

namespace dmdd {

// Per-stage teacher-student distance maps, each [1,H_i,W_i].
struct StageMaps {
    std::array<ag::Var, kStages> ngm;
    std::array<ag::Var, kStages> aim;
};

StageMaps compute_stage_maps(const Pyramid& teacher, const Pyramid& normality, const Pyramid& abnormality);

// Builds the [8,S,S] stack in channel order NGM1..NGM4, AIM1..AIM4. With pu on,
// NGM maps accumulate top-down and AIM maps bottom-up before the final bilinear
// resize to S x S.
ag::Var pyramid_upsample(const StageMaps& maps, int input_size, bool pu = true);

struct HeadConfig {
    int input_size = 64;
    bool mm = true;
    bool pu = true;
    int top_k = 100;
    bool score_extra_sigmoid = false;
};

// Multi-perception fusion of the 8-channel stack into a map in (0,1):
//   X1 = X * 2 sigmoid(MLP(GAP(X)))            channel attention, 8 -> 2 -> 8
//   X2 = X1 * 2 sigmoid(conv7x7([max, mean]))  spatial attention
//   M  = sigmoid(conv1x1(softmax_c(G) * X2))   global weights + compression
// fc1 starts with non-negative weights and fc2 with N(0, 1e-8^2) weights; the
// 7x7 conv and G start at zero and the compression weights at one, so at
// construction M = sigmoid(mean_c X) to within about 1e-7.
// With mm off the head has no parameters and computes sigmoid(mean_c X).
class SegmentationHead {
public:
    static constexpr int kChannels = 2 * kStages;
    static constexpr int kSqueeze = 2;
    static constexpr int kSpatialKernel = 7;
    static constexpr double kGateInitStd = 1e-8;

    explicit SegmentationHead(const HeadConfig& config, std::uint64_t seed = 0);

    ag::Var fuse(const ag::Var& stack) const;
    const HeadConfig& config() const noexcept { return config_; }
    const nn::ParamList& params() const noexcept { return params_; }
    std::string hash() const { return params_.hash(); }

    struct Params {
        ag::Var fc1_w, fc1_b, fc2_w, fc2_b;  // channel attention
        nn::Conv2d spatial;                  // 2 -> 1, 7x7
        ag::Var global;                      // G, [8,S,S]
        nn::Conv2d compress;                 // 8 -> 1, 1x1
    };
    Params& raw() noexcept { return p_; }

private:
    HeadConfig config_;
    Params p_;
    nn::ParamList params_;
};

// Mean of the k largest values; optionally passed through one more sigmoid.
ag::Var anomaly_score(const ag::Var& map, int k = 100, bool extra_sigmoid = false);

// BCE(M, gt) pixel mean + BCE(S, max(gt)).
ag::Var seg_loss(const ag::Var& map, const ag::Var& score, const Tensor& gt);

struct Prediction {
    Tensor map;  // [1,S,S] in (0,1)
    double score = 0.0;
};

Prediction predict(const Teacher& teacher, const Student& student, const SegmentationHead& head,
                   const Tensor& image);

// Stack for an image with teacher and student frozen; no graph is recorded.
Tensor frozen_stack(const Teacher& teacher, const Student& student, const Tensor& image, int input_size, bool pu);

struct SegEpochStats {
    double mean_loss = 0.0;
    std::size_t steps = 0;
};

// Trains the head for one pass over the pairs (normal image with a zero mask,
// anomalous image with its gt mask). Batch gradients are averaged per step.
// Throws internal-error if the teacher or student parameters change.
SegEpochStats train_seg_epoch(std::span<const TrainingPair> pairs, const Teacher& teacher, const Student& student,
                              const SegmentationHead& head, nn::Adam& optimizer, int batch_size);

}  // namespace dmdd
