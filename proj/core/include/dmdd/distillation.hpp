#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "dmdd/backbone.hpp"
#include "dmdd/data.hpp"

namespace dmdd {

// Per-pixel 1 - cos(a, b) over channels; [C,H,W] x [C,H,W] -> [1,H,W].
Tensor cosine_distance_map(const Tensor& a, const Tensor& b, double eps = 1e-8);

// Block average of a [1,S,S] mask down to [1,h,w]; h and w must divide S.
Tensor downsample_mask(const Tensor& mask, int height, int width);

// Mean over stages of mean(D_i(T, S_n)) + mean(D_i(T, S_a)).
ag::Var ngm_loss(const Pyramid& teacher_normal, const Pyramid& student_norm_of_normal,
                 const Pyramid& student_norm_of_anomalous);

// Mean over stages of mean |D_i(T, S_abn) - downsample(mask)|.
ag::Var aim_loss(const Pyramid& teacher, const Pyramid& student_abn, const Tensor& gt_mask);

struct LossWeights {
    double ngm = 1.0;
    double aim = 1.0;
};

struct DistillLossReport {
    double l_ngm = 0.0;
    double l_aim = 0.0;
    double total = 0.0;
    std::array<double, kStages> ngm_stage{};
    std::array<double, kStages> aim_stage{};
};

// Builds the combined loss for one pair. AIM averages the normal image (zero
// mask) and the anomalous image (gt mask).
struct PairLoss {
    ag::Var total;
    DistillLossReport report;
};
PairLoss distillation_loss(const TrainingPair& pair, const Teacher& teacher, const Student& student,
                           const LossWeights& weights = {});

// One optimizer step over a batch: gradients of the batch-mean loss. Throws
// non-finite-loss naming batch_seed if any loss is NaN/inf.
DistillLossReport train_step(std::span<const TrainingPair> batch, const Teacher& teacher, const Student& student,
                             nn::Adam& optimizer, const LossWeights& weights, std::uint64_t batch_seed);

}  // namespace dmdd
