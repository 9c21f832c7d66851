#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dmdd/distillation.hpp"
#include "dmdd/error.hpp"
#include "oracles.hpp"

using namespace dmdd;
using ag::Var;

namespace {

template <typename F>
void expect_error(F&& f, ErrorKind kind) {
    try {
        f();
        ADD_FAILURE() << "no exception";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

std::vector<Tensor> random_stages(std::mt19937_64& rng, Shape shape = {2, 3, 3}) {
    std::vector<Tensor> out;
    for (int i = 0; i < kStages; ++i) out.push_back(oracle::random_tensor(shape, rng));
    return out;
}

Pyramid leaves(const std::vector<Tensor>& t, bool grad = false) {
    Pyramid p;
    for (int i = 0; i < kStages; ++i) p[i] = Var(t[i], grad);
    return p;
}

std::vector<Tensor> negated(std::vector<Tensor> t) {
    for (auto& x : t)
        for (auto& v : x.vec()) v = -v;
    return t;
}

// Per pixel (a, b) -> (-b, a) is orthogonal to (a, b).
std::vector<Tensor> rotated(const std::vector<Tensor>& t) {
    std::vector<Tensor> out;
    for (const auto& x : t) {
        Tensor r(x.shape());
        for (int y = 0; y < x.dim(1); ++y)
            for (int z = 0; z < x.dim(2); ++z) {
                r.at(0, y, z) = -x.at(1, y, z);
                r.at(1, y, z) = x.at(0, y, z);
            }
        out.push_back(r);
    }
    return out;
}

// Applies one pixel permutation of a 3x3 grid to every [C,3,3] tensor.
Tensor permute_pixels(const Tensor& t, const std::vector<int>& perm) {
    Tensor out(t.shape());
    for (int c = 0; c < t.dim(0); ++c)
        for (int i = 0; i < 9; ++i) out.at(c, perm[i] / 3, perm[i] % 3) = t.at(c, i / 3, i % 3);
    return out;
}

Tensor random_mask(std::mt19937_64& rng, int size) {
    Tensor m({1, size, size});
    std::bernoulli_distribution b(0.4);
    for (auto& v : m.vec()) v = b(rng) ? 1.0 : 0.0;
    return m;
}

// By value, so range-for over a temporary tensor stays valid.
std::vector<double> values(const Tensor& t) { return t.vec(); }

}  // namespace

TEST(CosineDistance, AnalyticCases) {
    std::mt19937_64 rng(1);
    const Tensor a = oracle::random_tensor({4, 5, 6}, rng, 0.1, 1.0);
    const Tensor zero = cosine_distance_map(a, a);
    EXPECT_EQ(zero.shape(), (Shape{1, 5, 6}));
    for (double v : zero.vec()) EXPECT_NEAR(v, 0.0, 1e-12);
    for (double v : values(cosine_distance_map(a, negated({a})[0]))) EXPECT_NEAR(v, 2.0, 1e-12);
    const Tensor b = oracle::random_tensor({2, 5, 6}, rng, 0.1, 1.0);
    for (double v : values(cosine_distance_map(b, rotated({b})[0]))) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(CosineDistance, ZeroVectorIsAgnosticAndShapesMustMatch) {
    const Tensor z = Tensor::zeros({3, 2, 2});
    Tensor o({3, 2, 2});
    o.fill(1.0);
    for (double v : values(cosine_distance_map(z, o))) EXPECT_DOUBLE_EQ(v, 1.0);
    expect_error([&] { cosine_distance_map(z, Tensor::zeros({3, 2, 3})); }, ErrorKind::InvalidArgument);
}

TEST(DownsampleMask, BlockAverageExamples) {
    Tensor ones({1, 8, 8});
    ones.fill(1.0);
    for (double v : values(downsample_mask(ones, 2, 2))) EXPECT_DOUBLE_EQ(v, 1.0);
    for (double v : values(downsample_mask(Tensor::zeros({1, 8, 8}), 4, 4))) EXPECT_DOUBLE_EQ(v, 0.0);
    Tensor checker({1, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) checker.at(0, y, x) = (x + y) % 2;
    const Tensor half = downsample_mask(checker, 4, 4);
    EXPECT_EQ(half.shape(), (Shape{1, 4, 4}));
    for (double v : half.vec()) EXPECT_DOUBLE_EQ(v, 0.5);
    expect_error([&] { downsample_mask(ones, 3, 3); }, ErrorKind::InvalidArgument);
}

TEST(DownsampleMask, MatchesPixelOracle) {
    std::mt19937_64 rng(4);
    const Tensor m = random_mask(rng, 16);
    for (int s : {1, 2, 4, 8, 16}) {
        const Tensor d = downsample_mask(m, s, s);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) EXPECT_NEAR(d.at(0, y, x), oracle::mask_block_mean(m, s, s, y, x), 1e-15);
    }
}

TEST(NgmLoss, AnalyticCases) {
    std::mt19937_64 rng(2);
    const auto t = random_stages(rng);
    EXPECT_NEAR(ngm_loss(leaves(t), leaves(t), leaves(t)).value()[0], 0.0, 1e-12);
    const auto neg = negated(t);
    EXPECT_NEAR(ngm_loss(leaves(t), leaves(neg), leaves(neg)).value()[0], 4.0, 1e-12);
}

TEST(NgmLoss, MatchesLoopOracle) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Tensor> t, sn, sa;
        for (int i = 0; i < kStages; ++i) {
            const Shape s{3 + i, 8 >> i, 8 >> i};
            t.push_back(oracle::random_tensor(s, rng));
            sn.push_back(oracle::random_tensor(s, rng));
            sa.push_back(oracle::random_tensor(s, rng));
        }
        const double got = ngm_loss(leaves(t), leaves(sn), leaves(sa)).value()[0];
        const double want = oracle::ngm_loss(t, sn, sa);
        EXPECT_NEAR(got, want, 1e-6 * std::abs(want));
    }
}

TEST(AimLoss, AnalyticCases) {
    std::mt19937_64 rng(5);
    const auto t = random_stages(rng);
    Tensor ones({1, 6, 6});
    ones.fill(1.0);
    EXPECT_NEAR(aim_loss(leaves(t), leaves(t), Tensor::zeros({1, 6, 6})).value()[0], 0.0, 1e-12);
    EXPECT_NEAR(aim_loss(leaves(t), leaves(rotated(t)), ones).value()[0], 0.0, 1e-12);
    EXPECT_NEAR(aim_loss(leaves(t), leaves(t), ones).value()[0], 1.0, 1e-12);
}

TEST(AimLoss, MatchesLoopOracle) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Tensor> t, s;
        for (int i = 0; i < kStages; ++i) {
            const Shape shape{3, 16 >> i, 16 >> i};
            t.push_back(oracle::random_tensor(shape, rng));
            s.push_back(oracle::random_tensor(shape, rng));
        }
        const Tensor mask = random_mask(rng, 64);
        const double got = aim_loss(leaves(t), leaves(s), mask).value()[0];
        const double want = oracle::aim_loss(t, s, mask);
        EXPECT_NEAR(got, want, 1e-6 * std::abs(want));
    }
}

TEST(AimLoss, ZeroMaskEqualsMeanDistance) {
    std::mt19937_64 rng(7);
    const auto t = random_stages(rng, {4, 4, 4});
    const auto s = random_stages(rng, {4, 4, 4});
    double mean = 0;
    for (int i = 0; i < kStages; ++i) {
        const Tensor d = cosine_distance_map(t[i], s[i]);
        mean += std::accumulate(d.vec().begin(), d.vec().end(), 0.0) / static_cast<double>(d.numel());
    }
    mean /= kStages;
    EXPECT_NEAR(aim_loss(leaves(t), leaves(s), Tensor::zeros({1, 8, 8})).value()[0], mean, 1e-12);
}

TEST(DistillLosses, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(8);
    const auto t = random_stages(rng);
    auto sn = random_stages(rng);
    auto sa = random_stages(rng);
    const Tensor mask = random_mask(rng, 6);

    const Pyramid pn = leaves(sn, true), pa = leaves(sa, true);
    ag::backward(ngm_loss(leaves(t), pn, pa));
    for (int i = 0; i < kStages; ++i) {
        const Tensor num_n = oracle::numeric_gradient([&] { return oracle::ngm_loss(t, sn, sa); }, sn[i]);
        const Tensor num_a = oracle::numeric_gradient([&] { return oracle::ngm_loss(t, sn, sa); }, sa[i]);
        EXPECT_LT(oracle::relative_error(pn[i].grad(), num_n), 1e-4);
        EXPECT_LT(oracle::relative_error(pa[i].grad(), num_a), 1e-4);
    }

    const Pyramid ps = leaves(sa, true);
    ag::backward(aim_loss(leaves(t), ps, mask));
    for (int i = 0; i < kStages; ++i) {
        const Tensor num = oracle::numeric_gradient([&] { return oracle::aim_loss(t, sa, mask); }, sa[i]);
        EXPECT_LT(oracle::relative_error(ps[i].grad(), num), 1e-4);
    }
}

TEST(DistillLosses, PixelPermutationEquivariance) {
    std::mt19937_64 rng(9);
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 10; ++trial) {
        const auto t = random_stages(rng), sn = random_stages(rng), sa = random_stages(rng);
        const Tensor mask = random_mask(rng, 3);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<Tensor> pt, psn, psa;
        for (int i = 0; i < kStages; ++i) {
            pt.push_back(permute_pixels(t[i], perm));
            psn.push_back(permute_pixels(sn[i], perm));
            psa.push_back(permute_pixels(sa[i], perm));
        }
        const Tensor pmask = permute_pixels(mask, perm);
        EXPECT_NEAR(ngm_loss(leaves(t), leaves(sn), leaves(sa)).value()[0],
                    ngm_loss(leaves(pt), leaves(psn), leaves(psa)).value()[0], 1e-12);
        EXPECT_NEAR(aim_loss(leaves(t), leaves(sa), mask).value()[0], aim_loss(leaves(pt), leaves(psa), pmask).value()[0],
                    1e-12);
    }
}

TEST(DistillLosses, BoundsOnRandomInputs) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        const auto t = random_stages(rng), sn = random_stages(rng), sa = random_stages(rng);
        const double ngm = ngm_loss(leaves(t), leaves(sn), leaves(sa)).value()[0];
        EXPECT_GE(ngm, 0.0);
        EXPECT_LE(ngm, 8.0);
        const Tensor mask = random_mask(rng, 3);
        for (int i = 0; i < kStages; ++i) {
            const double stage = oracle::aim_loss({t[i]}, {sa[i]}, mask);
            EXPECT_GE(stage, 0.0);
            EXPECT_LE(stage, 2.0);
        }
        const double aim = aim_loss(leaves(t), leaves(sa), mask).value()[0];
        EXPECT_GE(aim, 0.0);
        EXPECT_LE(aim, 2.0);
    }
}

TEST(DistillLosses, ShapeMismatchRejected) {
    std::mt19937_64 rng(11);
    const auto t = random_stages(rng);
    const auto other = random_stages(rng, {2, 3, 4});
    expect_error([&] { ngm_loss(leaves(t), leaves(other), leaves(t)); }, ErrorKind::InvalidArgument);
    expect_error([&] { aim_loss(leaves(t), leaves(t), Tensor::zeros({1, 7, 7})); }, ErrorKind::InvalidArgument);
}

namespace {

struct ToyModel {
    BackboneSpec spec = BackboneSpec::toy(64, 1);
    Teacher teacher{Trunk::build(spec)};
    Student student;
    explicit ToyModel(double noise) : student(teacher.trunk(), spec, StudentConfig{{true, true}, true, noise, 3}) {}
};

TrainingPair pair_from(std::uint64_t seed, bool with_defect) {
    std::mt19937_64 rng(seed);
    TrainingPair p;
    p.normal = oracle::random_tensor({3, 64, 64}, rng, -1.5, 1.5);
    p.anomalous = p.normal;
    p.gt_mask = Tensor::zeros({1, 64, 64});
    p.foreground = Tensor::zeros({1, 64, 64});
    p.foreground.fill(1.0);
    if (with_defect)
        for (int y = 16; y < 40; ++y)
            for (int x = 8; x < 32; ++x) {
                p.gt_mask.at(0, y, x) = 1.0;
                for (int c = 0; c < 3; ++c) p.anomalous.at(c, y, x) = 1.2 - 0.7 * c;
            }
    return p;
}

}  // namespace

TEST(TrainStep, IdentityInitGivesZeroLossOnEmptyMaskPair) {
    ToyModel m(0.0);
    nn::Adam adam(m.student.trainable_params(), 0.005);
    const std::vector<TrainingPair> batch{pair_from(1, false), pair_from(2, false)};
    const DistillLossReport r = train_step(batch, m.teacher, m.student, adam, {}, 0);
    EXPECT_NEAR(r.l_ngm, 0.0, 1e-12);
    EXPECT_NEAR(r.l_aim, 0.0, 1e-12);
    EXPECT_NEAR(r.total, 0.0, 1e-12);
}

TEST(TrainStep, ReportTotalsAndFrozenTeacher) {
    ToyModel m(0.01);
    const std::string teacher_hash = m.teacher.hash();
    const std::string student_hash = m.student.hash();
    nn::Adam adam(m.student.trainable_params(), 0.005);
    const std::vector<TrainingPair> batch{pair_from(3, true), pair_from(4, true)};
    double first = 0;
    for (int step = 0; step < 8; ++step) {
        const DistillLossReport r = train_step(batch, m.teacher, m.student, adam, {}, step);
        EXPECT_NEAR(r.total, r.l_ngm + r.l_aim, 1e-12);
        EXPECT_GE(r.l_ngm, 0.0);
        EXPECT_GE(r.l_aim, 0.0);
        double ngm = 0, aim = 0;
        for (int i = 0; i < kStages; ++i) {
            ngm += r.ngm_stage[i] / kStages;
            aim += r.aim_stage[i] / kStages;
        }
        EXPECT_NEAR(ngm, r.l_ngm, 1e-12);
        EXPECT_NEAR(aim, r.l_aim, 1e-12);
        if (step == 0) first = r.total;
        if (step == 7) EXPECT_LT(r.total, first);
    }
    EXPECT_EQ(m.teacher.hash(), teacher_hash);
    EXPECT_NE(m.student.hash(), student_hash);
}

TEST(TrainStep, LossWeightsScaleTotal) {
    ToyModel m(0.01);
    const TrainingPair p = pair_from(5, true);
    const PairLoss base = distillation_loss(p, m.teacher, m.student);
    const PairLoss weighted = distillation_loss(p, m.teacher, m.student, {2.0, 0.5});
    EXPECT_NEAR(weighted.report.total, 2.0 * base.report.l_ngm + 0.5 * base.report.l_aim, 1e-12);
}

TEST(TrainStep, NonFiniteLossNamesBatchSeed) {
    ToyModel m(0.01);
    nn::Adam adam(m.student.trainable_params(), 0.005);
    TrainingPair p = pair_from(6, false);
    p.anomalous.at(0, 5, 5) = std::numeric_limits<double>::quiet_NaN();
    const std::vector<TrainingPair> batch{p};
    try {
        train_step(batch, m.teacher, m.student, adam, {}, 987654321);
        FAIL() << "expected non-finite-loss";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
        EXPECT_NE(std::string(e.what()).find("987654321"), std::string::npos);
    }
    expect_error([&] { train_step({}, m.teacher, m.student, adam, {}, 0); }, ErrorKind::InvalidArgument);
}
