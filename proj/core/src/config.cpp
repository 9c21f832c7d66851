#include "dmdd/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dmdd/error.hpp"

namespace dmdd {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    fail(ErrorKind::ConfigError, "config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

int to_int(const std::string& key, const std::string& v) {
    int out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) bad_value(key, v, "a number");
        return out;
    } catch (const std::logic_error&) {
        bad_value(key, v, "a number");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    bad_value(key, v, "true/false");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::string body = v;
    if (!body.empty() && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_int(key, trim(item)));
    if (out.empty()) bad_value(key, v, "a comma-separated integer list");
    return out;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

std::string fmt_list(const auto& values) {
    std::string out;
    for (const auto& v : values) out += (out.empty() ? "" : ",") + std::to_string(v);
    return out;
}

struct Field {
    const char* key;
    bool is_path;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define DMDD_FIELD_INT(KEY, MEMBER)                                                     \
    Field {                                                                             \
        KEY, false, [](const RunConfig& c) { return std::to_string(c.MEMBER); },        \
            [](RunConfig& c, const std::string& v) { c.MEMBER = to_int(KEY, v); }       \
    }
#define DMDD_FIELD_DOUBLE(KEY, MEMBER)                                                  \
    Field {                                                                             \
        KEY, false, [](const RunConfig& c) { return fmt_double(c.MEMBER); },            \
            [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); }    \
    }
#define DMDD_FIELD_BOOL(KEY, MEMBER)                                                    \
    Field {                                                                             \
        KEY, false, [](const RunConfig& c) { return fmt_bool(c.MEMBER); },              \
            [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(KEY, v); }      \
    }
#define DMDD_FIELD_PATH(KEY, MEMBER)                                                    \
    Field {                                                                             \
        KEY, true, [](const RunConfig& c) { return c.MEMBER.string(); },                \
            [](RunConfig& c, const std::string& v) { c.MEMBER = v; }                    \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        DMDD_FIELD_PATH("data_root", data_root),
        Field{"category", false, [](const RunConfig& c) { return c.category; },
              [](RunConfig& c, const std::string& v) { c.category = v; }},
        DMDD_FIELD_PATH("output_dir", output_dir),
        Field{"backbone", false, [](const RunConfig& c) { return to_string(c.backbone); },
              [](RunConfig& c, const std::string& v) { c.backbone = parse_backbone_kind(v); }},
        DMDD_FIELD_PATH("backbone_weights", backbone_weights),
        Field{"stage_channels", false, [](const RunConfig& c) { return fmt_list(c.stage_channels); },
              [](RunConfig& c, const std::string& v) {
                  const auto list = to_int_list("stage_channels", v);
                  if (list.size() != kStages) bad_value("stage_channels", v, "four integers");
                  std::copy(list.begin(), list.end(), c.stage_channels.begin());
              }},
        DMDD_FIELD_INT("input_size", input_size),
        DMDD_FIELD_INT("epochs", epochs),
        DMDD_FIELD_DOUBLE("lr", lr),
        DMDD_FIELD_INT("batch_size", batch_size),
        Field{"seed", false, [](const RunConfig& c) { return std::to_string(c.seed); },
              [](RunConfig& c, const std::string& v) { c.seed = to_u64("seed", v); }},
        DMDD_FIELD_DOUBLE("ngm_weight", loss_weights.ngm),
        DMDD_FIELD_DOUBLE("aim_weight", loss_weights.aim),
        DMDD_FIELD_BOOL("trunk_trainable", trunk_trainable),
        DMDD_FIELD_DOUBLE("init_noise", init_noise),
        DMDD_FIELD_BOOL("pmn_inner", flags.pmn_inner),
        DMDD_FIELD_BOOL("pmn_outer", flags.pmn_outer),
        DMDD_FIELD_BOOL("fas", flags.fas),
        DMDD_FIELD_BOOL("pu", flags.pu),
        DMDD_FIELD_BOOL("mm", flags.mm),
        DMDD_FIELD_DOUBLE("beta_lo", synthesis.beta_lo),
        DMDD_FIELD_DOUBLE("beta_hi", synthesis.beta_hi),
        DMDD_FIELD_DOUBLE("noise_threshold", synthesis.noise_threshold),
        Field{"freq_choices", false, [](const RunConfig& c) { return fmt_list(c.synthesis.freq_choices); },
              [](RunConfig& c, const std::string& v) { c.synthesis.freq_choices = to_int_list("freq_choices", v); }},
        Field{"texture_source", true, [](const RunConfig& c) { return c.synthesis.texture_source; },
              [](RunConfig& c, const std::string& v) { c.synthesis.texture_source = v; }},
        Field{"foreground_mode", false, [](const RunConfig& c) { return to_string(c.synthesis.foreground_mode); },
              [](RunConfig& c, const std::string& v) { c.synthesis.foreground_mode = parse_foreground_mode(v); }},
        DMDD_FIELD_PATH("foreground_dir", synthesis.foreground_dir),
        DMDD_FIELD_INT("top_k", top_k),
        DMDD_FIELD_BOOL("score_extra_sigmoid", score_extra_sigmoid),
        DMDD_FIELD_DOUBLE("fpr_limit", fpr_limit),
    };
    return table;
}

#undef DMDD_FIELD_INT
#undef DMDD_FIELD_DOUBLE
#undef DMDD_FIELD_BOOL
#undef DMDD_FIELD_PATH

constexpr std::string_view kEpochPrefix = "epochs.";

std::vector<std::pair<std::string, std::string>> canonical_lines(const RunConfig& c, bool include_paths) {
    std::vector<std::pair<std::string, std::string>> lines;
    for (const auto& f : fields())
        if (include_paths || !f.is_path) lines.emplace_back(f.key, f.get(c));
    for (const auto& [cat, n] : c.category_epochs) lines.emplace_back(std::string(kEpochPrefix) + cat, std::to_string(n));
    std::sort(lines.begin(), lines.end());
    return lines;
}

}  // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    if (key.starts_with(kEpochPrefix) && key.size() > kEpochPrefix.size()) {
        config.category_epochs[key.substr(kEpochPrefix.size())] = to_int(key, value);
        return;
    }
    for (const auto& f : fields())
        if (key == f.key) {
            f.set(config, value);
            return;
        }
    fail(ErrorKind::ConfigError, "unknown config key '" + key + "'");
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.emplace_back(f.key);
    return keys;
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos, ErrorKind::ConfigError, "override must be key=value, got '" + assignment + "'");
    std::string value = trim(assignment.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    set_config_value(config, trim(assignment.substr(0, eq)), value);
}

RunConfig parse_config(const std::string& text, RunConfig base) {
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        // Strip comments outside quotes.
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        const std::string body = trim(line);
        if (body.empty()) continue;
        if (body.front() == '[') continue;  // section headers are cosmetic
        require(body.find('=') != std::string::npos, ErrorKind::ConfigError,
                "config line " + std::to_string(number) + ": expected key = value");
        apply_override(base, body);
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::ConfigError, "cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

void RunConfig::validate() const {
    const auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::ConfigError, msg); };
    check(epochs >= 1, "epochs must be >= 1");
    for (const auto& [cat, n] : category_epochs) check(n >= 1, "epochs." + cat + " must be >= 1");
    check(lr > 0.0, "lr must be positive");
    check(batch_size >= 1, "batch_size must be >= 1");
    check(loss_weights.ngm >= 0.0 && loss_weights.aim >= 0.0, "loss weights must be nonnegative");
    check(init_noise >= 0.0, "init_noise must be nonnegative");
    check(top_k >= 1 && top_k <= input_size * input_size, "top_k must be in [1, input_size^2]");
    check(fpr_limit > 0.0 && fpr_limit <= 1.0, "fpr_limit must be in (0, 1]");
    backbone_spec().validate();
    synthesis.validate();
}

int RunConfig::epochs_for(const std::string& cat) const {
    const auto it = category_epochs.find(cat);
    return it == category_epochs.end() ? epochs : it->second;
}

BackboneSpec RunConfig::backbone_spec() const {
    BackboneSpec spec = backbone == BackboneKind::Toy ? BackboneSpec::toy(input_size, seed)
                                                      : BackboneSpec::wide_resnet50(input_size, backbone_weights);
    if (backbone == BackboneKind::Toy) spec.stage_channels = stage_channels;
    return spec;
}

StudentConfig RunConfig::student_config() const {
    StudentConfig s;
    s.pmn = {flags.pmn_inner, flags.pmn_outer};
    s.trunk_trainable = trunk_trainable;
    s.init_noise = init_noise;
    s.seed = seed + 1;
    return s;
}

HeadConfig RunConfig::head_config() const {
    HeadConfig h;
    h.input_size = input_size;
    h.mm = flags.mm;
    h.pu = flags.pu;
    h.top_k = top_k;
    h.score_extra_sigmoid = score_extra_sigmoid;
    return h;
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : canonical_lines(*this, true)) out += k + " = \"" + v + "\"\n";
    return out;
}

std::string RunConfig::fingerprint() const {
    Fnv1a h;
    for (const auto& [k, v] : canonical_lines(*this, false)) {
        h.update(k);
        h.update(std::string_view("="));
        h.update(v);
        h.update(std::string_view("\n"));
    }
    return h.hex();
}

RunConfig RunConfig::smoke() {
    RunConfig c;
    c.category = "toy_shapes";
    c.backbone = BackboneKind::Toy;
    c.input_size = 64;
    c.epochs = 30;
    c.batch_size = 2;
    return c;
}

}  // namespace dmdd
