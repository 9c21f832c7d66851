#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "dmdd/backbone.hpp"
#include "dmdd/config.hpp"
#include "dmdd/segmentation_head.hpp"

namespace dmdd {

// Teacher, student and head built from one config. The teacher is rebuilt
// from the backbone spec and never serialized.
class Model {
public:
    explicit Model(const RunConfig& config);

    const RunConfig& config() const noexcept { return config_; }
    const Teacher& teacher() const noexcept { return teacher_; }
    const Student& student() const noexcept { return student_; }
    const SegmentationHead& head() const noexcept { return head_; }

    Prediction predict(const Tensor& image) const { return dmdd::predict(teacher_, student_, head_, image); }
    // Hash over student and head parameters.
    std::string hash() const;

private:
    RunConfig config_;
    BackboneSpec spec_;
    Teacher teacher_;
    Student student_;
    SegmentationHead head_;
};

struct CheckpointInfo {
    int epoch = 0;
    double head_loss = 0.0;
    std::string fingerprint;
};

void save_checkpoint(const Model& model, const CheckpointInfo& info, const std::filesystem::path& path);

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    CheckpointInfo info;
    RunConfig stored_config;
};

// Rebuilds the model from the stored config, or from `expected` when given.
// `expected` must have the stored fingerprint unless `force` is set; a forced
// load still fails if parameter shapes disagree.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const RunConfig* expected = nullptr,
                                 bool force = false);

}  // namespace dmdd
