#include "dmdd/checkpoint.hpp"

#include "dmdd/error.hpp"
#include "dmdd/serialization.hpp"

namespace dmdd {

namespace {

BackboneSpec checked_spec(const RunConfig& config) {
    config.validate();
    return config.backbone_spec();
}

}  // namespace

Model::Model(const RunConfig& config)
    : config_(config),
      spec_(checked_spec(config)),
      teacher_(Trunk::build(spec_)),
      student_(teacher_.trunk(), spec_, config.student_config()),
      head_(config.head_config(), config.seed + 2) {}

std::string Model::hash() const {
    Fnv1a h;
    h.update(student_.hash());
    h.update(head_.hash());
    return h.hex();
}

void save_checkpoint(const Model& model, const CheckpointInfo& info, const std::filesystem::path& path) {
    TensorArchive archive;
    archive.meta["format"] = "dmdd-checkpoint-1";
    archive.meta["config"] = model.config().canonical();
    archive.meta["fingerprint"] = info.fingerprint.empty() ? model.config().fingerprint() : info.fingerprint;
    archive.meta["epoch"] = std::to_string(info.epoch);
    archive.meta["head_loss"] = std::to_string(info.head_loss);
    archive.meta["teacher_hash"] = model.teacher().hash();
    for (const auto& p : model.student().params().items()) archive.tensors.emplace_back(p.name, p.var.value());
    for (const auto& p : model.head().params().items()) archive.tensors.emplace_back(p.name, p.var.value());
    write_archive(archive, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const RunConfig* expected, bool force) {
    const TensorArchive archive = read_archive(path);
    require(archive.meta_or("format", "") == "dmdd-checkpoint-1", ErrorKind::CorruptDataset,
            "not a dmdd checkpoint: " + path.string());

    LoadedCheckpoint out;
    out.stored_config = parse_config(archive.meta_or("config", ""));
    out.info.fingerprint = archive.meta_or("fingerprint", "");
    out.info.epoch = std::stoi(archive.meta_or("epoch", "0"));
    out.info.head_loss = std::stod(archive.meta_or("head_loss", "0"));
    require(out.stored_config.fingerprint() == out.info.fingerprint, ErrorKind::CorruptDataset,
            "checkpoint config does not match its fingerprint: " + path.string());

    RunConfig config = out.stored_config;
    if (expected) {
        if (!force)
            require(expected->fingerprint() == out.info.fingerprint, ErrorKind::FingerprintMismatch,
                    "config fingerprint " + expected->fingerprint() + " does not match checkpoint " +
                        out.info.fingerprint + " (use --force to override)");
        config = *expected;
    }

    out.model = std::make_unique<Model>(config);
    const auto restore = [&](const nn::ParamList& params) {
        for (const auto& p : params.items()) {
            const Tensor& t = archive.get(p.name);
            require(t.shape() == p.var.value().shape(), ErrorKind::CorruptDataset,
                    "checkpoint tensor " + p.name + " has shape " + shape_str(t.shape()));
            ag::Var v = p.var;
            v.mutable_value() = t;
        }
    };
    restore(out.model->student().params());
    restore(out.model->head().params());
    require(archive.meta_or("teacher_hash", "") == out.model->teacher().hash(), ErrorKind::FingerprintMismatch,
            "teacher weights differ from the ones used for training");
    return out;
}

}  // namespace dmdd
