#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dmdd/checkpoint.hpp"
#include "dmdd/config.hpp"
#include "dmdd/metrics.hpp"

namespace dmdd {

// Deterministic 64-bit seed derived from a base seed and two counters.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

struct EpochRecord {
    int epoch = 0;
    double l_ngm = 0.0;
    double l_aim = 0.0;
    double distill_loss = 0.0;
    double head_loss = 0.0;
    double seconds = 0.0;
};

struct TrainOptions {
    // Empty: <config.output_dir>/<category>.
    std::filesystem::path run_dir;
    bool write_files = true;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    std::unique_ptr<Model> model;
    std::vector<EpochRecord> epochs;
    std::filesystem::path last_checkpoint;
    std::filesystem::path best_checkpoint;
    std::filesystem::path log_path;
    std::string teacher_hash_before;
    std::string teacher_hash_after;
};

std::filesystem::path default_run_dir(const RunConfig& config);

// Per epoch: a distillation pass over freshly synthesized pairs, then one
// head pass over the same pairs with teacher and student frozen. Writes
// train_log.ndjson (one record per step), checkpoint_last.dmdd every epoch
// and checkpoint_best.dmdd when the epoch head loss improves.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

struct ImageResult {
    std::filesystem::path path;
    int label = 0;
    double score = 0.0;
    Tensor map;
    Tensor mask;
};

struct EvalResult {
    std::string category;
    std::string fingerprint;
    MetricsReport report;
    std::vector<ImageResult> images;
};

EvalResult evaluate(const Model& model, const std::filesystem::path& data_root, const std::string& category,
                    Split split = Split::Test);

std::string eval_json(const EvalResult& result);
std::string eval_table(const std::vector<EvalResult>& results);

// Raw map file: u32 height, u32 width (little endian), then float32 row-major.
void write_map_file(const Tensor& map, const std::filesystem::path& path);
Tensor read_map_file(const std::filesystem::path& path);

struct InferSummary {
    int processed = 0;
    int failed = 0;
    std::vector<std::string> errors;
};

// For each image (directories are scanned recursively, sorted): <stem>.map,
// <stem>_heatmap.png and one results.jsonl line {path, score, label?}. The
// label is present for images inside a test/<defect>/ directory. Per-file
// errors are collected and the run continues.
InferSummary infer(const Model& model, const std::vector<std::filesystem::path>& inputs,
                   const std::filesystem::path& out_dir);

// Writes n previews synth_XXXX.png = normal | anomalous | mask over the
// category's training images. Returns the written paths.
std::vector<std::filesystem::path> synth_previews(const RunConfig& config, int n, const std::filesystem::path& out_dir);

}  // namespace dmdd
