#include "dmdd/distillation.hpp"

#include <cmath>
#include <sstream>

#include "dmdd/error.hpp"

namespace dmdd {

using ag::Var;

Tensor cosine_distance_map(const Tensor& a, const Tensor& b, double eps) {
    ag::NoGradGuard guard;
    return ag::cosine_distance(Var(a), Var(b), eps).value();
}

Tensor downsample_mask(const Tensor& mask, int height, int width) {
    require(mask.rank() == 3 && mask.dim(0) == 1, ErrorKind::InvalidArgument,
            "mask must be [1,H,W], got " + shape_str(mask.shape()));
    require(height > 0 && width > 0 && mask.dim(1) % height == 0 && mask.dim(2) % width == 0,
            ErrorKind::InvalidArgument,
            "target " + std::to_string(height) + "x" + std::to_string(width) + " does not divide mask " +
                shape_str(mask.shape()));
    const int fy = mask.dim(1) / height, fx = mask.dim(2) / width;
    Tensor out(Shape{1, height, width});
    const double inv = 1.0 / (fy * fx);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double s = 0.0;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx) s += mask.at(0, y * fy + dy, x * fx + dx);
            out.at(0, y, x) = s * inv;
        }
    return out;
}

namespace {

void check_pair(const Var& a, const Var& b, const char* what) {
    require(a.shape() == b.shape(), ErrorKind::InvalidArgument,
            std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Var ngm_loss(const Pyramid& teacher_normal, const Pyramid& student_norm_of_normal,
             const Pyramid& student_norm_of_anomalous) {
    Var total;
    for (int i = 0; i < kStages; ++i) {
        check_pair(teacher_normal[i], student_norm_of_normal[i], "ngm_loss");
        check_pair(teacher_normal[i], student_norm_of_anomalous[i], "ngm_loss");
        const Var dn = ag::mean(ag::cosine_distance(teacher_normal[i], student_norm_of_normal[i]));
        const Var da = ag::mean(ag::cosine_distance(teacher_normal[i], student_norm_of_anomalous[i]));
        const Var term = ag::add(dn, da);
        total = i == 0 ? term : ag::add(total, term);
    }
    return ag::scale(total, 1.0 / kStages);
}

Var aim_loss(const Pyramid& teacher, const Pyramid& student_abn, const Tensor& gt_mask) {
    Var total;
    for (int i = 0; i < kStages; ++i) {
        check_pair(teacher[i], student_abn[i], "aim_loss");
        const Tensor target = downsample_mask(gt_mask, teacher[i].dim(1), teacher[i].dim(2));
        const Var term = ag::mean_abs_diff(ag::cosine_distance(teacher[i], student_abn[i]), target);
        total = i == 0 ? term : ag::add(total, term);
    }
    return ag::scale(total, 1.0 / kStages);
}

PairLoss distillation_loss(const TrainingPair& pair, const Teacher& teacher, const Student& student,
                           const LossWeights& weights) {
    const Pyramid t_normal = teacher.forward(Var(pair.normal));
    const Pyramid t_anomalous = teacher.forward(Var(pair.anomalous));
    const StudentOutput s_normal = student.forward(Var(pair.normal));
    const StudentOutput s_anomalous = student.forward(Var(pair.anomalous));

    const Var ngm = ngm_loss(t_normal, s_normal.normality, s_anomalous.normality);
    const Tensor zero_mask = Tensor::zeros(pair.gt_mask.shape());
    const Var aim = ag::scale(ag::add(aim_loss(t_normal, s_normal.abnormality, zero_mask),
                                      aim_loss(t_anomalous, s_anomalous.abnormality, pair.gt_mask)),
                              0.5);

    PairLoss out;
    out.total = ag::add(ag::scale(ngm, weights.ngm), ag::scale(aim, weights.aim));
    out.report.l_ngm = ngm.value().item();
    out.report.l_aim = aim.value().item();
    out.report.total = out.total.value().item();
    for (int i = 0; i < kStages; ++i) {
        const Tensor& t = t_normal[i].value();
        const auto mean_of = [](const Tensor& m) {
            double s = 0.0;
            for (double v : m.vec()) s += v;
            return s / static_cast<double>(m.numel());
        };
        out.report.ngm_stage[i] = mean_of(cosine_distance_map(t, s_normal.normality[i].value())) +
                                  mean_of(cosine_distance_map(t, s_anomalous.normality[i].value()));
        const Tensor target = downsample_mask(pair.gt_mask, t.dim(1), t.dim(2));
        double zero_term = 0.0, gt_term = 0.0;
        const Tensor dz = cosine_distance_map(t, s_normal.abnormality[i].value());
        const Tensor dg = cosine_distance_map(t_anomalous[i].value(), s_anomalous.abnormality[i].value());
        for (std::size_t k = 0; k < dz.numel(); ++k) {
            zero_term += std::abs(dz[k]);
            gt_term += std::abs(dg[k] - target[k]);
        }
        out.report.aim_stage[i] = 0.5 * (zero_term + gt_term) / static_cast<double>(dz.numel());
    }
    return out;
}

DistillLossReport train_step(std::span<const TrainingPair> batch, const Teacher& teacher, const Student& student,
                             nn::Adam& optimizer, const LossWeights& weights, std::uint64_t batch_seed) {
    require(!batch.empty(), ErrorKind::InvalidArgument, "train_step needs a nonempty batch");
    optimizer.zero_grad();
    DistillLossReport mean;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& pair : batch) {
        PairLoss loss = distillation_loss(pair, teacher, student, weights);
        if (!std::isfinite(loss.report.total)) {
            std::ostringstream msg;
            msg << "non-finite distillation loss (l_ngm=" << loss.report.l_ngm << ", l_aim=" << loss.report.l_aim
                << "); batch seed " << batch_seed;
            fail(ErrorKind::NonFiniteLoss, msg.str());
        }
        ag::backward(ag::scale(loss.total, inv));
        mean.l_ngm += inv * loss.report.l_ngm;
        mean.l_aim += inv * loss.report.l_aim;
        mean.total += inv * loss.report.total;
        for (int i = 0; i < kStages; ++i) {
            mean.ngm_stage[i] += inv * loss.report.ngm_stage[i];
            mean.aim_stage[i] += inv * loss.report.aim_stage[i];
        }
    }
    optimizer.step();
    return mean;
}

}  // namespace dmdd
