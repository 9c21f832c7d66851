#include <gtest/gtest.h>

#include <random>

#include "dmdd/backbone.hpp"
#include "dmdd/distillation.hpp"
#include "dmdd/error.hpp"
#include "oracles.hpp"

using namespace dmdd;
using ag::Var;

namespace {

Tensor image(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return oracle::random_tensor({3, size, size}, rng, -2.0, 2.0);
}

const std::array<Shape, kStages> kToyShapes{Shape{8, 16, 16}, Shape{16, 8, 8}, Shape{32, 4, 4}, Shape{64, 2, 2}};

Pyramid random_pyramid(const std::array<Shape, kStages>& shapes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Pyramid p;
    for (int i = 0; i < kStages; ++i) p[i] = Var(oracle::random_tensor(shapes[i], rng));
    return p;
}

}  // namespace

TEST(Teacher, ToyStageShapes) {
    const Teacher teacher(Trunk::build(BackboneSpec::toy(64)));
    const FeaturePyramid f = teacher.forward(image(64, 1));
    for (int i = 0; i < kStages; ++i) {
        EXPECT_EQ(f.stages[i].shape(), kToyShapes[i]);
        EXPECT_TRUE(f.stages[i].all_finite());
    }
}

TEST(Teacher, BothPathwaysShareOneNetwork) {
    const Teacher teacher(Trunk::build(BackboneSpec::toy(64)));
    const Tensor x = image(64, 2);
    const FeaturePyramid normal_path = teacher.forward(x);
    const FeaturePyramid anomalous_path = teacher.forward(x);
    for (int i = 0; i < kStages; ++i) EXPECT_EQ(normal_path.stages[i], anomalous_path.stages[i]);
}

TEST(Teacher, RejectsWrongImageSizeAndKeepsNoGradients) {
    const Teacher teacher(Trunk::build(BackboneSpec::toy(64)));
    EXPECT_THROW(teacher.forward(image(32, 1)), Error);
    for (const auto& p : teacher.params().items()) EXPECT_FALSE(p.var.requires_grad());
}

TEST(Student, IdentityInitWithoutPmnReproducesTeacher) {
    const BackboneSpec spec = BackboneSpec::toy(64, 4);
    const Teacher teacher(Trunk::build(spec));
    StudentConfig cfg;
    cfg.pmn = {false, false};
    cfg.init_noise = 0.0;
    const Student student(teacher.trunk(), spec, cfg);
    for (std::uint64_t s = 0; s < 3; ++s) {
        const Tensor x = image(64, s);
        const FeaturePyramid t = teacher.forward(x);
        const auto [n, a] = student.forward(x);
        for (int i = 0; i < kStages; ++i) {
            EXPECT_LT(max_abs_diff(n.stages[i], t.stages[i]), 1e-12);
            EXPECT_LT(max_abs_diff(a.stages[i], t.stages[i]), 1e-12);
        }
    }
}

TEST(Student, ShapesAndDeterminism) {
    const BackboneSpec spec = BackboneSpec::toy(64, 1);
    const Teacher teacher(Trunk::build(spec));
    StudentConfig cfg;
    cfg.init_noise = 0.05;
    cfg.seed = 9;
    const Student a(teacher.trunk(), spec, cfg);
    const Student b(teacher.trunk(), spec, cfg);
    const Tensor x = image(64, 3);
    const auto [na, aa] = a.forward(x);
    const auto [nb, ab] = b.forward(x);
    for (int i = 0; i < kStages; ++i) {
        EXPECT_EQ(na.stages[i].shape(), kToyShapes[i]);
        EXPECT_EQ(aa.stages[i].shape(), kToyShapes[i]);
        EXPECT_EQ(na.stages[i], nb.stages[i]);
        EXPECT_EQ(aa.stages[i], ab.stages[i]);
    }
    EXPECT_EQ(a.hash(), b.hash());
}

TEST(Student, TrunkIsADeepCopy) {
    const BackboneSpec spec = BackboneSpec::toy(64);
    const Teacher teacher(Trunk::build(spec));
    const std::string before = teacher.hash();
    const Student student(teacher.trunk(), spec, {});
    for (const auto& p : student.params().items()) {
        Var v = p.var;
        v.mutable_value().fill(0.25);
    }
    EXPECT_EQ(teacher.hash(), before);
}

TEST(Student, NormalityHalfFeedsNextStage) {
    // Zeroing the abnormality half of the first decouple layer must not change
    // later normality features.
    const BackboneSpec spec = BackboneSpec::toy(64, 2);
    const Teacher teacher(Trunk::build(spec));
    StudentConfig cfg;
    cfg.pmn = {false, false};
    cfg.init_noise = 0.0;
    const Student student(teacher.trunk(), spec, cfg);
    const Tensor x = image(64, 5);
    const auto before = student.forward(x);
    for (const auto& p : student.params().items())
        if (p.name == "student.decouple.stage1.weight") {
            Var w = p.var;
            for (int o = 8; o < 16; ++o)
                for (int i = 0; i < 8; ++i) w.mutable_value()[static_cast<std::size_t>(o) * 8 + i] = 0.0;
        }
    const auto after = student.forward(x);
    for (int i = 0; i < kStages; ++i) EXPECT_EQ(before.first.stages[i], after.first.stages[i]);
    EXPECT_NE(before.second.stages[0], after.second.stages[0]);
}

TEST(Student, EveryTrainableParameterGetsGradient) {
    const BackboneSpec spec = BackboneSpec::toy(64, 3);
    const Teacher teacher(Trunk::build(spec));
    StudentConfig cfg;
    cfg.init_noise = 0.01;
    const Student student(teacher.trunk(), spec, cfg);

    TrainingPair pair;
    pair.normal = image(64, 1);
    pair.anomalous = image(64, 2);
    pair.gt_mask = Tensor::zeros({1, 64, 64});
    for (int y = 10; y < 30; ++y)
        for (int x = 20; x < 40; ++x) pair.gt_mask.at(0, y, x) = 1.0;
    student.params().zero_grad();
    ag::backward(distillation_loss(pair, teacher, student).total);
    const nn::ParamList trainable = student.trainable_params();
    EXPECT_EQ(trainable.size(), student.params().size());
    for (const auto& p : trainable.items()) {
        ASSERT_TRUE(p.var.has_grad()) << p.name;
        double norm = 0;
        for (double g : p.var.grad().vec()) norm += g * g;
        EXPECT_GT(norm, 0.0) << p.name;
    }
    for (const auto& p : teacher.params().items()) EXPECT_FALSE(p.var.has_grad()) << p.name;
}

TEST(Student, FrozenTrunkSwitch) {
    const BackboneSpec spec = BackboneSpec::toy(64);
    const Teacher teacher(Trunk::build(spec));
    StudentConfig cfg;
    cfg.trunk_trainable = false;
    const Student student(teacher.trunk(), spec, cfg);
    const nn::ParamList trainable = student.trainable_params();
    EXPECT_LT(trainable.size(), student.params().size());
    for (const auto& p : trainable.items()) EXPECT_EQ(p.name.find("student.trunk"), std::string::npos);
}

TEST(Pmn, DisabledPathsAreIdentity) {
    nn::Rng rng(1);
    const PyramidModelingNetwork pmn(Branch::Normality, {8, 16, 32, 64}, 8, 0.5, rng);
    const Pyramid in = random_pyramid(kToyShapes, 3);
    const Pyramid out = pmn.forward(in, {false, false});
    for (int i = 0; i < kStages; ++i) EXPECT_EQ(out[i].value(), in[i].value());
}

TEST(Pmn, PreservesShapesForBothBranches) {
    nn::Rng rng(2);
    const std::array<Shape, kStages> shapes{Shape{4, 12, 12}, Shape{6, 6, 6}, Shape{8, 3, 3}, Shape{10, 2, 2}};
    for (Branch b : {Branch::Normality, Branch::Abnormality}) {
        const PyramidModelingNetwork pmn(b, {4, 6, 8, 10}, 4, 0.5, rng);
        for (PmnFlags f : {PmnFlags{true, false}, PmnFlags{false, true}, PmnFlags{true, true}}) {
            const Pyramid out = pmn.forward(random_pyramid(shapes, 4), f);
            for (int i = 0; i < kStages; ++i) EXPECT_EQ(out[i].shape(), shapes[i]);
        }
    }
}

TEST(Pmn, OuterPathChangesTheOutput) {
    nn::Rng rng(3);
    const PyramidModelingNetwork pmn(Branch::Abnormality, {8, 16, 32, 64}, 8, 1.0, rng);
    const Pyramid in = random_pyramid(kToyShapes, 5);
    const Pyramid inner = pmn.forward(in, {true, false});
    const Pyramid both = pmn.forward(in, {true, true});
    double diff = 0;
    for (int i = 0; i < kStages; ++i) diff = std::max(diff, max_abs_diff(inner[i].value(), both[i].value()));
    EXPECT_GT(diff, 1e-3);
}

TEST(Pmn, BranchDirectionsDiffer) {
    nn::Rng r1(7), r2(7);
    const PyramidModelingNetwork normal(Branch::Normality, {8, 16, 32, 64}, 8, 1.0, r1);
    const PyramidModelingNetwork abnormal(Branch::Abnormality, {8, 16, 32, 64}, 8, 1.0, r2);
    EXPECT_TRUE(normal.inner_top_down());
    EXPECT_FALSE(abnormal.inner_top_down());
    // Same weights, opposite directions: outputs must differ.
    const Pyramid in = random_pyramid(kToyShapes, 6);
    const Pyramid a = normal.forward(in, {true, false});
    const Pyramid b = abnormal.forward(in, {true, false});
    EXPECT_GT(max_abs_diff(a[0].value(), b[0].value()), 1e-6);
}

TEST(Backbone, SpecValidation) {
    BackboneSpec bad = BackboneSpec::toy(48);
    EXPECT_THROW(bad.validate(), Error);
    BackboneSpec wrn = BackboneSpec::wide_resnet50(256, {});
    EXPECT_THROW(wrn.validate(), Error);
    EXPECT_EQ(parse_backbone_kind("toy"), BackboneKind::Toy);
    EXPECT_EQ(parse_backbone_kind("pretrained-wideresnet50"), BackboneKind::WideResNet50);
}

TEST(Backbone, WideResNetArchitectureShapes) {
    BackboneSpec spec = BackboneSpec::wide_resnet50(64, {});
    spec.random_weights = true;
    const Teacher teacher(Trunk::build(spec));
    std::size_t numel = 0;
    for (const auto& p : teacher.params().items()) numel += p.var.value().numel();
    // wide_resnet50_2 up to layer4 has 66.8M conv weights plus folded norms
    EXPECT_GT(numel, 66'000'000u);
    EXPECT_LT(numel, 67'000'000u);
    const FeaturePyramid f = teacher.forward(image(64, 1));
    const std::array<Shape, kStages> expect{Shape{256, 16, 16}, Shape{512, 8, 8}, Shape{1024, 4, 4},
                                            Shape{2048, 2, 2}};
    for (int i = 0; i < kStages; ++i) {
        EXPECT_EQ(f.stages[i].shape(), expect[i]);
        EXPECT_TRUE(f.stages[i].all_finite());
    }
}
