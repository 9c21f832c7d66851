#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dmdd/backbone.hpp"
#include "dmdd/data.hpp"
#include "dmdd/distillation.hpp"
#include "dmdd/segmentation_head.hpp"
#include "dmdd/synthesis.hpp"

namespace dmdd {

struct AblationFlags {
    bool pmn_inner = true;
    bool pmn_outer = true;
    bool fas = true;  // foreground-aware synthesis
    bool pu = true;   // pyramid upsampling
    bool mm = true;   // multi-perception mechanism
};

struct RunConfig {
    std::filesystem::path data_root;
    std::string category;
    std::filesystem::path output_dir = "runs";

    BackboneKind backbone = BackboneKind::WideResNet50;
    std::filesystem::path backbone_weights;
    std::array<int, kStages> stage_channels{8, 16, 32, 64};  // toy backbone only
    int input_size = 256;

    int epochs = 100;
    std::map<std::string, int> category_epochs;  // "epochs.<category> = n"
    double lr = 0.005;
    int batch_size = 8;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    bool trunk_trainable = true;
    double init_noise = 0.01;

    AblationFlags flags;
    SynthesisConfig synthesis;

    int top_k = 100;
    bool score_extra_sigmoid = false;
    double fpr_limit = 0.3;

    void validate() const;  // throws config-error

    int epochs_for(const std::string& category) const;
    BackboneSpec backbone_spec() const;
    StudentConfig student_config() const;
    HeadConfig head_config() const;

    // Sorted "key = value" lines covering every field.
    std::string canonical() const;
    // FNV-1a over the canonical lines of all non-path fields.
    std::string fingerprint() const;

    static RunConfig smoke();
};

// Flat key = value text; '#' starts a comment; values may be double-quoted.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

// Applies one "key=value" override.
void apply_override(RunConfig& config, const std::string& assignment);
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

std::vector<std::string> config_keys();

}  // namespace dmdd
