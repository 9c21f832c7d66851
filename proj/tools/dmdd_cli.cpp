#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmdd/checkpoint.hpp"
#include "dmdd/config.hpp"
#include "dmdd/data.hpp"
#include "dmdd/error.hpp"
#include "dmdd/pipeline.hpp"
#include "dmdd/serialization.hpp"
#include "dmdd/toy_dataset.hpp"

namespace fs = std::filesystem;
using namespace dmdd;

namespace {

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string data_root;
    std::string category;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_file, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", args.overrides, "override a config key (key=value), repeatable");
    cmd->add_option("--data-root", args.data_root, "dataset root (default: config or $DMDD_DATA_ROOT)");
    cmd->add_option("--category", args.category, "dataset category");
    cmd->add_option("--output-dir", args.output_dir, "run output directory");
    cmd->add_option("--seed", args.seed, "random seed");
}

// Precedence: base < config file < $DMDD_DATA_ROOT < --set < explicit flags.
RunConfig resolve(const CommonArgs& args, RunConfig base = {}) {
    RunConfig cfg = args.config_file.empty() ? std::move(base) : load_config(args.config_file, std::move(base));
    if (const char* env = std::getenv("DMDD_DATA_ROOT"); env && *env) cfg.data_root = env;
    for (const auto& o : args.overrides) apply_override(cfg, o);
    if (!args.data_root.empty()) cfg.data_root = args.data_root;
    if (!args.category.empty()) cfg.category = args.category;
    if (!args.output_dir.empty()) cfg.output_dir = args.output_dir;
    if (args.seed) cfg.seed = *args.seed;
    return cfg;
}

// Config stored in a checkpoint, read without building the model.
RunConfig stored_config(const fs::path& checkpoint) {
    return parse_config(read_archive(checkpoint).meta_or("config", ""));
}

bool customized(const CommonArgs& args) {
    return !args.config_file.empty() || !args.overrides.empty() || args.seed.has_value();
}

std::vector<std::string> categories_for(const RunConfig& cfg, bool all) {
    if (all) {
        auto cats = list_categories(cfg.data_root);
        require(!cats.empty(), ErrorKind::DatasetNotFound, "no categories under " + cfg.data_root.string());
        return cats;
    }
    require(!cfg.category.empty(), ErrorKind::ConfigError, "no category given (--category or config key)");
    return {cfg.category};
}

void print_epoch(const std::string& category, const EpochRecord& r) {
    std::cerr << category << " epoch " << r.epoch << "  distill " << r.distill_loss << " (ngm " << r.l_ngm
              << ", aim " << r.l_aim << ")  head " << r.head_loss << "  " << r.seconds << "s\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dmdd: decoupled student-teacher anomaly detection"};
    app.require_subcommand(1);

    CommonArgs train_args;
    bool train_all = false;
    std::optional<int> train_epochs;
    auto* train_cmd = app.add_subcommand("train", "train one model per category");
    add_common(train_cmd, train_args);
    train_cmd->add_flag("--all-categories", train_all, "train every category under the dataset root");
    train_cmd->add_option("--epochs", train_epochs, "epochs (overrides config)");

    CommonArgs eval_args;
    std::string eval_checkpoint, eval_json_path, eval_split = "test";
    bool eval_force = false, eval_all = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    add_common(eval_cmd, eval_args);
    eval_cmd->add_option("--checkpoint", eval_checkpoint,
                         "checkpoint file (default: <output_dir>/<category>/checkpoint_last.dmdd)");
    eval_cmd->add_option("--json", eval_json_path, "report path (default: <run dir>/eval_<split>.json)");
    eval_cmd->add_option("--split", eval_split, "train or test")->check(CLI::IsMember({"train", "test"}));
    eval_cmd->add_flag("--force", eval_force, "accept a config fingerprint mismatch");
    eval_cmd->add_flag("--all-categories", eval_all, "evaluate every category's last checkpoint");

    CommonArgs infer_args;
    std::string infer_checkpoint, infer_out = "infer_out";
    std::vector<std::string> infer_inputs;
    bool infer_force = false, infer_extra_sigmoid = false;
    auto* infer_cmd = app.add_subcommand("infer", "write anomaly maps, heatmaps and scores");
    add_common(infer_cmd, infer_args);
    infer_cmd->add_option("--checkpoint", infer_checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    infer_cmd->add_option("inputs", infer_inputs, "images or directories")->required();
    infer_cmd->add_option("-o,--out", infer_out, "output directory");
    infer_cmd->add_flag("--force", infer_force, "accept a config fingerprint mismatch");
    infer_cmd->add_flag("--score-extra-sigmoid", infer_extra_sigmoid,
                        "apply one more sigmoid to the top-k mean (changes the fingerprint)");

    CommonArgs synth_args;
    int synth_n = 8;
    std::string synth_out = "synth_out";
    auto* synth_cmd = app.add_subcommand("synth", "write synthetic-anomaly previews");
    add_common(synth_cmd, synth_args);
    synth_cmd->add_option("-n", synth_n, "number of previews")->check(CLI::NonNegativeNumber);
    synth_cmd->add_option("-o,--out", synth_out, "output directory");

    std::string toy_root;
    ToyDatasetSpec toy;
    auto* toy_cmd = app.add_subcommand("make-toy-dataset", "generate the toy shapes dataset");
    toy_cmd->add_option("--root", toy_root, "dataset root")->required();
    toy_cmd->add_option("--category", toy.category, "category name");
    toy_cmd->add_option("--seed", toy.seed, "generator seed");
    toy_cmd->add_option("--size", toy.image_size, "image side length");
    toy_cmd->add_option("--train", toy.train_normal, "normal training images");
    toy_cmd->add_option("--test-normal", toy.test_normal, "normal test images");
    toy_cmd->add_option("--test-defect", toy.test_defect, "defective test images");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train_cmd) {
            RunConfig cfg = resolve(train_args);
            if (train_epochs) cfg.epochs = *train_epochs;
            cfg.validate();
            for (const auto& category : categories_for(cfg, train_all)) {
                RunConfig c = cfg;
                c.category = category;
                TrainOptions opts;
                opts.on_epoch = [&](const EpochRecord& r) { print_epoch(category, r); };
                const TrainResult r = train(c, opts);
                std::cout << category << ": " << r.last_checkpoint.string() << '\n';
            }
        } else if (*eval_cmd) {
            require(eval_checkpoint.empty() || !eval_all, ErrorKind::ConfigError,
                    "--checkpoint and --all-categories are exclusive");
            // An explicit checkpoint supplies the defaults (category, data root).
            const RunConfig cfg =
                eval_checkpoint.empty() ? resolve(eval_args) : resolve(eval_args, stored_config(eval_checkpoint));
            std::vector<EvalResult> results;
            for (const auto& category : categories_for(cfg, eval_all)) {
                RunConfig c = cfg;
                c.category = category;
                const fs::path ckpt =
                    eval_checkpoint.empty() ? default_run_dir(c) / "checkpoint_last.dmdd" : fs::path(eval_checkpoint);
                // Without an explicit config the checkpoint's own config is used.
                LoadedCheckpoint loaded = load_checkpoint(ckpt);
                if (customized(eval_args)) {
                    RunConfig expected = resolve(eval_args, loaded.stored_config);
                    loaded = load_checkpoint(ckpt, &expected, eval_force);
                }
                const fs::path root = c.data_root.empty() ? loaded.stored_config.data_root : c.data_root;
                EvalResult r = evaluate(*loaded.model, root, category, parse_split(eval_split));
                const fs::path json_path = eval_json_path.empty() || eval_all
                                               ? ckpt.parent_path() / ("eval_" + eval_split + ".json")
                                               : fs::path(eval_json_path);
                if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
                std::ofstream(json_path) << eval_json(r) << '\n';
                results.push_back(std::move(r));
            }
            std::cout << eval_table(results);
        } else if (*infer_cmd) {
            LoadedCheckpoint loaded = load_checkpoint(infer_checkpoint);
            if (customized(infer_args) || infer_extra_sigmoid) {
                RunConfig expected = resolve(infer_args, loaded.stored_config);
                if (infer_extra_sigmoid) expected.score_extra_sigmoid = true;
                loaded = load_checkpoint(infer_checkpoint, &expected, infer_force);
            }
            std::vector<fs::path> inputs(infer_inputs.begin(), infer_inputs.end());
            const InferSummary s = infer(*loaded.model, inputs, infer_out);
            for (const auto& e : s.errors) std::cerr << "error: " << e << '\n';
            std::cout << "processed " << s.processed << ", failed " << s.failed << " -> " << infer_out << '\n';
            if (s.failed > 0) return exit_code_for(ErrorKind::IoError);
        } else if (*synth_cmd) {
            RunConfig cfg = resolve(synth_args);
            require(!cfg.category.empty(), ErrorKind::ConfigError, "no category given");
            const auto written = synth_previews(cfg, synth_n, synth_out);
            std::cout << "wrote " << written.size() << " previews to " << synth_out << '\n';
        } else if (*toy_cmd) {
            const fs::path dir = make_toy_dataset(toy_root, toy);
            std::cout << dir.string() << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "dmdd: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "dmdd: internal error: " << e.what() << '\n';
        return exit_code_for(ErrorKind::Internal);
    }
    return 0;
}
