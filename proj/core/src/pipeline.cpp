#include "dmdd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "dmdd/error.hpp"
#include "dmdd/image.hpp"
#include "dmdd/serialization.hpp"

namespace dmdd {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a simple combination.
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(base) ^ a) ^ b);
}

fs::path default_run_dir(const RunConfig& config) { return config.output_dir / config.category; }

namespace {

struct TrainingSet {
    std::vector<Image> images;
    std::vector<fs::path> paths;
};

TrainingSet load_training_set(const RunConfig& config) {
    const DatasetIndex index = load_dataset(config.data_root, config.category, Split::Train);
    require(!index.entries.empty(), ErrorKind::CorruptDataset,
            "no training images in " + (config.data_root / config.category).string());
    TrainingSet set;
    for (const auto& e : index.entries) {
        set.images.push_back(load_image_raw(e.image_path, config.input_size));
        set.paths.push_back(e.image_path);
    }
    return set;
}

AnomalySynthesizer make_synthesizer(const RunConfig& config, const TrainingSet& set) {
    return AnomalySynthesizer(config.synthesis, config.category, config.flags.fas, set.images, config.input_size);
}

}  // namespace

TrainResult train(const RunConfig& config, const TrainOptions& options) {
    // Everything that can fail on bad input happens before the first step.
    config.validate();
    const TrainingSet set = load_training_set(config);
    const AnomalySynthesizer synthesizer = make_synthesizer(config, set);
    std::vector<ForegroundMask> foregrounds;
    for (std::size_t i = 0; i < set.images.size(); ++i)
        foregrounds.push_back(synthesizer.foreground_for(set.images[i], set.paths[i]));

    TrainResult result;
    result.model = std::make_unique<Model>(config);
    const Model& model = *result.model;
    const Teacher& teacher = model.teacher();
    const Student& student = model.student();
    result.teacher_hash_before = teacher.hash();

    const fs::path run_dir = options.run_dir.empty() ? default_run_dir(config) : options.run_dir;
    std::ofstream log;
    if (options.write_files) {
        fs::create_directories(run_dir);
        std::ofstream(run_dir / "config.toml") << config.canonical();
        result.log_path = run_dir / "train_log.ndjson";
        log.open(result.log_path, std::ios::trunc);
        require(static_cast<bool>(log), ErrorKind::IoError, "cannot write " + result.log_path.string());
        result.last_checkpoint = run_dir / "checkpoint_last.dmdd";
        result.best_checkpoint = run_dir / "checkpoint_best.dmdd";
    }

    nn::Adam student_opt(student.trainable_params(), config.lr);
    nn::Adam head_opt(model.head().params(), config.lr);
    const Normalization norm;
    const int epochs = config.epochs_for(config.category);
    const std::size_t n = set.images.size();
    const auto batch = static_cast<std::size_t>(config.batch_size);
    double best_head_loss = std::numeric_limits<double>::infinity();
    long step = 0;

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(mix_seed(config.seed, 0x5348554646ull, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        std::vector<TrainingPair> pairs;
        pairs.reserve(n);
        for (std::size_t k : order)
            pairs.push_back(make_training_pair(set.images[k], foregrounds[k], synthesizer,
                                               mix_seed(config.seed, static_cast<std::uint64_t>(epoch), k), norm));

        EpochRecord record;
        record.epoch = epoch;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t count = std::min(batch, n - start);
            const std::uint64_t batch_seed = mix_seed(config.seed, static_cast<std::uint64_t>(epoch), 1000000 + start);
            const DistillLossReport rep =
                train_step(std::span<const TrainingPair>(pairs).subspan(start, count), teacher, student, student_opt,
                           config.loss_weights, batch_seed);
            const double w = static_cast<double>(count) / static_cast<double>(n);
            record.l_ngm += w * rep.l_ngm;
            record.l_aim += w * rep.l_aim;
            record.distill_loss += w * rep.total;
            ++step;
            if (log.is_open())
                log << json{{"epoch", epoch}, {"step", step}, {"l_ngm", rep.l_ngm}, {"l_aim", rep.l_aim},
                            {"total", rep.total}}
                           .dump()
                    << '\n';
        }

        const SegEpochStats head_stats =
            train_seg_epoch(pairs, teacher, student, model.head(), head_opt, config.batch_size);
        record.head_loss = head_stats.mean_loss;
        record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (log.is_open()) {
            log << json{{"epoch", epoch}, {"head_loss", record.head_loss}, {"distill_loss", record.distill_loss},
                        {"seconds", record.seconds}}
                       .dump()
                << '\n';
            log.flush();
        }

        if (options.write_files) {
            const CheckpointInfo info{epoch, record.head_loss, config.fingerprint()};
            save_checkpoint(model, info, result.last_checkpoint);
            if (record.head_loss < best_head_loss) {
                best_head_loss = record.head_loss;
                fs::copy_file(result.last_checkpoint, result.best_checkpoint, fs::copy_options::overwrite_existing);
            }
        }
        result.epochs.push_back(record);
        if (options.on_epoch) options.on_epoch(record);
    }

    result.teacher_hash_after = teacher.hash();
    require(result.teacher_hash_after == result.teacher_hash_before, ErrorKind::Internal,
            "teacher parameters changed during training");
    return result;
}

EvalResult evaluate(const Model& model, const fs::path& data_root, const std::string& category, Split split) {
    const DatasetIndex index = load_dataset(data_root, category, split);
    require(!index.entries.empty(), ErrorKind::CorruptDataset,
            "empty " + to_string(split) + " split for " + category);
    const int size = model.config().input_size;
    EvalResult out;
    out.category = category;
    out.fingerprint = model.config().fingerprint();
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<Tensor> maps, masks;
    for (const auto& e : index.entries) {
        ImageResult r;
        r.path = e.image_path;
        r.label = e.label == Label::Anomalous ? 1 : 0;
        const Prediction p = model.predict(load_image(e.image_path, size));
        r.score = p.score;
        r.map = p.map;
        r.mask = e.mask_path ? load_mask(*e.mask_path, size) : Tensor::zeros(Shape{1, size, size});
        scores.push_back(r.score);
        labels.push_back(r.label);
        maps.push_back(r.map);
        masks.push_back(r.mask);
        out.images.push_back(std::move(r));
    }
    out.report = evaluate_metrics(scores, labels, maps, masks, model.config().fpr_limit);
    return out;
}

std::string eval_json(const EvalResult& result) {
    return json{{"category", result.category},
                {"i_auc", result.report.i_auc},
                {"p_auc", result.report.p_auc},
                {"pro", result.report.pro},
                {"n_images", result.report.n_images},
                {"fpr_limit", result.report.fpr_limit},
                {"config_fingerprint", result.fingerprint}}
        .dump(2);
}

std::string eval_table(const std::vector<EvalResult>& results) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "category" << std::right << std::setw(9) << "I-AUC" << std::setw(9)
       << "P-AUC" << std::setw(9) << "PRO" << std::setw(9) << "images" << '\n';
    double si = 0, sp = 0, sr = 0;
    os << std::fixed << std::setprecision(2);
    for (const auto& r : results) {
        os << std::left << std::setw(16) << r.category << std::right << std::setw(9) << 100.0 * r.report.i_auc
           << std::setw(9) << 100.0 * r.report.p_auc << std::setw(9) << 100.0 * r.report.pro << std::setw(9)
           << r.report.n_images << '\n';
        si += r.report.i_auc;
        sp += r.report.p_auc;
        sr += r.report.pro;
    }
    if (results.size() > 1) {
        const double k = 100.0 / static_cast<double>(results.size());
        os << std::left << std::setw(16) << "mean" << std::right << std::setw(9) << si * k << std::setw(9) << sp * k
           << std::setw(9) << sr * k << '\n';
    }
    return os.str();
}

void write_map_file(const Tensor& map, const fs::path& path) {
    require(map.rank() == 3 && map.dim(0) == 1, ErrorKind::InvalidArgument, "map must be [1,H,W]");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
    const std::uint32_t dims[2] = {static_cast<std::uint32_t>(map.dim(1)), static_cast<std::uint32_t>(map.dim(2))};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    std::vector<float> data(map.vec().begin(), map.vec().end());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(static_cast<bool>(out), ErrorKind::IoError, "short write to " + path.string());
}

Tensor read_map_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::IoError, "cannot read " + path.string());
    std::uint32_t dims[2] = {0, 0};
    in.read(reinterpret_cast<char*>(dims), sizeof dims);
    require(static_cast<bool>(in) && dims[0] > 0 && dims[1] > 0 && dims[0] <= 65536 && dims[1] <= 65536,
            ErrorKind::IoError, "bad map header in " + path.string());
    std::vector<float> data(static_cast<std::size_t>(dims[0]) * dims[1]);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(static_cast<bool>(in), ErrorKind::IoError, "truncated map file " + path.string());
    return Tensor(Shape{1, static_cast<int>(dims[0]), static_cast<int>(dims[1])},
                  std::vector<double>(data.begin(), data.end()));
}

InferSummary infer(const Model& model, const std::vector<fs::path>& inputs, const fs::path& out_dir) {
    std::vector<fs::path> files;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            for (const auto& entry : fs::recursive_directory_iterator(in))
                if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
        } else {
            files.push_back(in);
        }
    }
    std::sort(files.begin(), files.end());

    fs::create_directories(out_dir);
    std::ofstream results(out_dir / "results.jsonl", std::ios::trunc);
    require(static_cast<bool>(results), ErrorKind::IoError, "cannot write results.jsonl in " + out_dir.string());

    InferSummary summary;
    const int size = model.config().input_size;
    for (const auto& file : files) {
        try {
            const Prediction p = model.predict(load_image(file, size));
            // Stems can repeat across defect directories; prefix the parent.
            const std::string stem = file.parent_path().filename().string() + "_" + file.stem().string();
            write_map_file(p.map, out_dir / (stem + ".map"));
            write_png(heatmap(p.map), out_dir / (stem + "_heatmap.png"));
            json record{{"path", file.string()}, {"score", p.score}};
            if (file.parent_path().parent_path().filename() == "test")
                record["label"] = file.parent_path().filename() == "good" ? 0 : 1;
            results << record.dump() << '\n';
            ++summary.processed;
        } catch (const Error& e) {
            ++summary.failed;
            summary.errors.push_back(file.string() + ": " + e.what());
        }
    }
    return summary;
}

std::vector<fs::path> synth_previews(const RunConfig& config, int n, const fs::path& out_dir) {
    require(n >= 0, ErrorKind::ConfigError, "n must be nonnegative");
    config.synthesis.validate();
    if (n == 0) return {};
    const TrainingSet set = load_training_set(config);
    const AnomalySynthesizer synthesizer = make_synthesizer(config, set);
    std::vector<fs::path> written;
    for (int i = 0; i < n; ++i) {
        const std::size_t k = static_cast<std::size_t>(i) % set.images.size();
        const SynthesisResult r =
            synthesizer.synthesize(set.images[k], mix_seed(config.seed, 0x53594e5448ull, static_cast<std::uint64_t>(i)),
                                   set.paths[k]);
        char name[32];
        std::snprintf(name, sizeof name, "synth_%04d.png", i);
        const fs::path path = out_dir / name;
        write_png(hstack({set.images[k], r.anomalous, gray_to_rgb(map_to_gray(r.mask))}), path);
        written.push_back(path);
    }
    return written;
}

}  // namespace dmdd
