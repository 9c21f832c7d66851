#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include <json.hpp>

#include "dmdd/error.hpp"
#include "dmdd/pipeline.hpp"
#include "dmdd/serialization.hpp"
#include "dmdd/toy_dataset.hpp"
#include "test_paths.hpp"

using namespace dmdd;
using testing_support::TempDir;
namespace fs = std::filesystem;

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

ToyDatasetSpec tiny_spec() {
    ToyDatasetSpec s;
    s.train_normal = 6;
    s.test_normal = 2;
    s.test_defect = 4;
    return s;
}

RunConfig tiny_config(const fs::path& root, const fs::path& out) {
    RunConfig c = RunConfig::smoke();
    c.data_root = root;
    c.output_dir = out;
    c.epochs = 2;
    c.batch_size = 4;
    return c;
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

std::size_t count_files(const fs::path& dir, const std::string& suffix) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().string().ends_with(suffix)) ++n;
    return n;
}

}  // namespace

TEST(Pipeline, MixSeedSeparatesStreams) {
    std::set<std::uint64_t> seen;
    for (std::uint64_t e = 0; e < 20; ++e)
        for (std::uint64_t k = 0; k < 20; ++k) seen.insert(mix_seed(0, e, k));
    EXPECT_EQ(seen.size(), 400u);
    EXPECT_EQ(mix_seed(5, 6, 7), mix_seed(5, 6, 7));
    EXPECT_NE(mix_seed(5, 6, 7), mix_seed(6, 6, 7));
}

TEST(Pipeline, MapFileRoundTrip) {
    TempDir dir("mapfile");
    Tensor m({1, 5, 7});
    for (std::size_t i = 0; i < m.numel(); ++i) m[i] = 0.125 * static_cast<double>(i) / 3.0;
    write_map_file(m, dir / "a.map");
    EXPECT_EQ(fs::file_size(dir / "a.map"), 8u + 4u * 35u);
    const Tensor back = read_map_file(dir / "a.map");
    ASSERT_EQ(back.shape(), m.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(m[i])));
    std::ofstream(dir / "short.map") << "abc";
    EXPECT_THROW(read_map_file(dir / "short.map"), Error);
}

TEST(Pipeline, TrainIsDeterministicAndKeepsTeacherFrozen) {
    TempDir data("pipe_data"), out("pipe_out");
    make_toy_dataset(data.path(), tiny_spec());
    const RunConfig c = tiny_config(data.path(), out.path());

    TrainOptions first_opts;
    first_opts.run_dir = out / "a";
    const TrainResult a = train(c, first_opts);
    TrainOptions second_opts;
    second_opts.run_dir = out / "b";
    int callbacks = 0;
    second_opts.on_epoch = [&](const EpochRecord&) { ++callbacks; };
    const TrainResult b = train(c, second_opts);

    EXPECT_EQ(callbacks, 2);
    ASSERT_EQ(a.epochs.size(), 2u);
    EXPECT_EQ(a.teacher_hash_before, a.teacher_hash_after);
    EXPECT_EQ(a.model->hash(), b.model->hash());
    EXPECT_EQ(file_hash(a.last_checkpoint), file_hash(b.last_checkpoint));
    for (std::size_t e = 0; e < a.epochs.size(); ++e) {
        EXPECT_EQ(a.epochs[e].distill_loss, b.epochs[e].distill_loss);
        EXPECT_EQ(a.epochs[e].head_loss, b.epochs[e].head_loss);
    }
    EXPECT_TRUE(fs::exists(a.best_checkpoint));
    EXPECT_TRUE(fs::exists(out / "a" / "config.toml"));

    // 6 images at batch 4: two steps per epoch plus one summary line.
    const auto log = lines(a.log_path);
    ASSERT_EQ(log.size(), 6u);
    const auto step = nlohmann::json::parse(log[0]);
    for (const char* key : {"epoch", "step", "l_ngm", "l_aim", "total"}) EXPECT_TRUE(step.contains(key)) << key;
    EXPECT_TRUE(nlohmann::json::parse(log[2]).contains("head_loss"));

    const EvalResult ra = evaluate(*a.model, data.path(), c.category);
    const EvalResult rb = evaluate(*b.model, data.path(), c.category);
    EXPECT_EQ(eval_json(ra), eval_json(rb));
    EXPECT_EQ(ra.report.n_images, 6);
    for (double v : {ra.report.i_auc, ra.report.p_auc, ra.report.pro}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    const auto report = nlohmann::json::parse(eval_json(ra));
    for (const char* key : {"category", "i_auc", "p_auc", "pro", "n_images", "config_fingerprint"})
        EXPECT_TRUE(report.contains(key)) << key;
    EXPECT_NE(eval_table({ra}).find("toy_shapes"), std::string::npos);

    expect_error([&] { evaluate(*a.model, data.path(), c.category, Split::Train); }, ErrorKind::UndefinedMetric);

    // Loading the last checkpoint reproduces the in-memory model.
    const LoadedCheckpoint loaded = load_checkpoint(a.last_checkpoint, &c);
    EXPECT_EQ(loaded.model->hash(), a.model->hash());
    EXPECT_EQ(loaded.info.epoch, 2);
}

TEST(Pipeline, ConfigAndDataErrorsComeBeforeAnyOutput) {
    TempDir out("pipe_err");
    RunConfig c = tiny_config(out / "nodata", out.path());
    expect_error([&] { train(c); }, ErrorKind::DatasetNotFound);
    c.batch_size = 0;
    expect_error([&] { train(c); }, ErrorKind::ConfigError);
    EXPECT_TRUE(fs::is_empty(out.path()));
}

TEST(Pipeline, InferWritesOneArtifactSetPerImage) {
    TempDir data("infer_data"), out("infer_out");
    const fs::path cat = make_toy_dataset(data.path(), tiny_spec());
    const Model model(tiny_config(data.path(), out.path()));

    const InferSummary s = infer(model, {cat / "test"}, out / "maps");
    EXPECT_EQ(s.processed, 6);
    EXPECT_EQ(s.failed, 0);
    EXPECT_EQ(count_files(out / "maps", ".map"), 6u);
    EXPECT_EQ(count_files(out / "maps", "_heatmap.png"), 6u);
    const auto records = lines(out / "maps" / "results.jsonl");
    ASSERT_EQ(records.size(), 6u);
    int labelled = 0;
    for (const auto& r : records) {
        const auto j = nlohmann::json::parse(r);
        EXPECT_TRUE(j.contains("path"));
        EXPECT_TRUE(j.contains("score"));
        if (j.contains("label")) ++labelled;
    }
    EXPECT_EQ(labelled, 6);

    // The same image twice gives identical scores; a bad file is reported
    // and the rest still run.
    const fs::path img = cat / "train" / "good" / "000.png";
    std::ofstream(out / "broken.png") << "not an image";
    const InferSummary t = infer(model, {img, img, out / "broken.png"}, out / "again");
    EXPECT_EQ(t.processed, 2);
    EXPECT_EQ(t.failed, 1);
    const auto again = lines(out / "again" / "results.jsonl");
    ASSERT_EQ(again.size(), 2u);
    EXPECT_EQ(nlohmann::json::parse(again[0])["score"], nlohmann::json::parse(again[1])["score"]);
    EXPECT_FALSE(nlohmann::json::parse(again[0]).contains("label"));

    const Tensor map = read_map_file(out / "again" / "good_000.map");
    EXPECT_EQ(map.shape(), (Shape{1, 64, 64}));
}

TEST(Pipeline, SynthPreviews) {
    TempDir data("synth_data"), out("synth_out");
    make_toy_dataset(data.path(), tiny_spec());
    const RunConfig c = tiny_config(data.path(), out.path());
    EXPECT_TRUE(synth_previews(c, 0, out / "none").empty());
    EXPECT_TRUE(!fs::exists(out / "none") || fs::is_empty(out / "none"));
    const auto a = synth_previews(c, 3, out / "a");
    const auto b = synth_previews(c, 3, out / "b");
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(file_hash(a[i]), file_hash(b[i]));
}
