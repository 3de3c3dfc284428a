#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peclr/augment.hpp"
#include "peclr/csvio.hpp"
#include "peclr/encoder.hpp"
#include "peclr/errors.hpp"
#include "peclr/trainer.hpp"

namespace peclr {

// Sectioned key = value experiment configuration. Every key has a default;
// unknown sections or keys are hard errors. The fully resolved form is echoed
// verbatim into each run's manifest.
struct ExperimentConfig {
    std::vector<std::filesystem::path> dataset_paths;

    EncoderConfig model;

    Objective objective = Objective::PeCLR;
    double temperature = 0.5;
    bool normalize_translation = true;

    bool lars = true;
    double weight_decay = 1e-6;

    std::size_t batch = 64;
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    double base_lr = 0;  // 0 -> sqrt(batch) * 1e-4

    AugmentConfig augment_pretrain = AugmentConfig::pretrain_defaults();
    AugmentConfig augment_finetune = AugmentConfig::finetune_defaults();

    std::size_t finetune_batch = 128;
    std::size_t finetune_epochs = 100;
    double finetune_lr = 5e-4;
    double val_fraction = 0.1;

    ProbeConfig probe;

    std::uint64_t root_seed = 1;
    std::string output_dir;

    PretrainConfig pretrain_config() const {
        PretrainConfig c;
        c.datasets = dataset_paths;
        c.model = model;
        c.model.head = HeadType::Projection;
        c.augment = augment_pretrain;
        c.objective = objective;
        c.normalize_translation = normalize_translation;
        c.temperature = temperature;
        c.batch = batch;
        c.epochs = epochs;
        c.warmup_epochs = warmup_epochs;
        c.base_lr = base_lr;
        c.lars = lars;
        c.weight_decay = weight_decay;
        c.seed = root_seed;
        return c;
    }

    FinetuneConfig finetune_config(double label_fraction) const {
        FinetuneConfig c;
        if (dataset_paths.empty()) throw std::invalid_argument("config: no dataset path set");
        c.dataset = dataset_paths.front();
        c.model = model;
        c.augment = augment_finetune;
        c.batch = finetune_batch;
        c.epochs = finetune_epochs;
        c.lr = finetune_lr;
        c.label_fraction = label_fraction;
        c.val_fraction = val_fraction;
        c.seed = root_seed;
        return c;
    }

    ProbeConfig probe_config() const {
        ProbeConfig c = probe;
        c.val_fraction = val_fraction;
        c.seed = Rng(root_seed).substream("probe").next_u64();
        return c;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw FormatError("config: bad boolean for " + key + ": " + v);
}

inline Range parse_range(const std::string& v, const std::string& key) {
    std::istringstream ss(v);
    Range r;
    if (!(ss >> r.lo >> r.hi)) throw FormatError("config: bad range for " + key + ": " + v);
    return r;
}

inline bool apply_augment_key(AugmentConfig& a, const std::string& key, const std::string& val) {
    if (key == "rotation") a.rotation = parse_bool(val, key);
    else if (key == "translation") a.translation = parse_bool(val, key);
    else if (key == "scale") a.scale = parse_bool(val, key);
    else if (key == "color_jitter") a.color_jitter = parse_bool(val, key);
    else if (key == "drop_color") a.drop_color = parse_bool(val, key);
    else if (key == "blur") a.blur = parse_bool(val, key);
    else if (key == "noise") a.noise = parse_bool(val, key);
    else if (key == "rotation_range") a.rotation_range = parse_range(val, key);
    else if (key == "translation_range") a.translation_range = parse_range(val, key);
    else if (key == "scale_range") a.scale_range = parse_range(val, key);
    else if (key == "hue_range") a.hue_range = parse_range(val, key);
    else if (key == "sat_range") a.sat_range = parse_range(val, key);
    else if (key == "bright_scale_range") a.bright_scale_range = parse_range(val, key);
    else if (key == "bright_bias_range") a.bright_bias_range = parse_range(val, key);
    else if (key == "blur_sigma_range") a.blur_sigma_range = parse_range(val, key);
    else if (key == "noise_std_range") a.noise_std_range = parse_range(val, key);
    else return false;
    return true;
}

inline std::string augment_to_text(const AugmentConfig& a, const std::string& section) {
    std::ostringstream os;
    auto b = [](bool v) { return v ? "on" : "off"; };
    auto r = [](const Range& v) { return csv_num(v.lo) + " " + csv_num(v.hi); };
    os << "[" << section << "]\n";
    os << "rotation = " << b(a.rotation) << "\n";
    os << "rotation_range = " << r(a.rotation_range) << "\n";
    os << "translation = " << b(a.translation) << "\n";
    os << "translation_range = " << r(a.translation_range) << "\n";
    os << "scale = " << b(a.scale) << "\n";
    os << "scale_range = " << r(a.scale_range) << "\n";
    os << "color_jitter = " << b(a.color_jitter) << "\n";
    os << "hue_range = " << r(a.hue_range) << "\n";
    os << "sat_range = " << r(a.sat_range) << "\n";
    os << "bright_scale_range = " << r(a.bright_scale_range) << "\n";
    os << "bright_bias_range = " << r(a.bright_bias_range) << "\n";
    os << "drop_color = " << b(a.drop_color) << "\n";
    os << "blur = " << b(a.blur) << "\n";
    os << "blur_sigma_range = " << r(a.blur_sigma_range) << "\n";
    os << "noise = " << b(a.noise) << "\n";
    os << "noise_std_range = " << r(a.noise_std_range) << "\n";
    return os.str();
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig cfg;
    cfg.dataset_paths.clear();
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    bool channels_set = false;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw FormatError("config line " + std::to_string(lineno) + ": bad section");
            section = t.substr(1, t.size() - 2);
            static const std::vector<std::string> known{
                "dataset", "model", "objective", "optimizer", "schedule",
                "augment.pretrain", "augment.finetune", "finetune", "probe", "seeds", "output"};
            if (std::find(known.begin(), known.end(), section) == known.end())
                throw FormatError("config: unknown section [" + section + "]");
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(t.substr(0, eq));
        std::string val = detail::trim(t.substr(eq + 1));
        auto bad_key = [&]() -> FormatError {
            return FormatError("config: unknown key '" + key + "' in section [" + section + "]");
        };
        if (section == "dataset") {
            if (key == "path") cfg.dataset_paths.emplace_back(val);
            else throw bad_key();
        } else if (section == "model") {
            if (key == "input_side") cfg.model.input_side = std::stoul(val);
            else if (key == "feature_dim") cfg.model.feature_dim = std::stoul(val);
            else if (key == "latent_points") cfg.model.latent_points = std::stoul(val);
            else if (key == "channels") {
                cfg.model.channels.clear();
                std::istringstream cs(val);
                std::size_t c;
                while (cs >> c) cfg.model.channels.push_back(c);
                if (cfg.model.channels.empty()) throw FormatError("config: empty channels list");
                channels_set = true;
            } else throw bad_key();
        } else if (section == "objective") {
            if (key == "kind") {
                if (val == "simclr") cfg.objective = Objective::SimCLR;
                else if (val == "peclr") cfg.objective = Objective::PeCLR;
                else throw FormatError("config: objective kind must be simclr or peclr, got " + val);
            } else if (key == "temperature") cfg.temperature = std::stod(val);
            else if (key == "normalize_translation") cfg.normalize_translation = detail::parse_bool(val, key);
            else throw bad_key();
        } else if (section == "optimizer") {
            if (key == "lars") cfg.lars = detail::parse_bool(val, key);
            else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
            else throw bad_key();
        } else if (section == "schedule") {
            if (key == "batch") cfg.batch = std::stoul(val);
            else if (key == "epochs") cfg.epochs = std::stoul(val);
            else if (key == "warmup_epochs") cfg.warmup_epochs = std::stoul(val);
            else if (key == "base_lr") cfg.base_lr = std::stod(val);
            else throw bad_key();
        } else if (section == "augment.pretrain") {
            if (!detail::apply_augment_key(cfg.augment_pretrain, key, val)) throw bad_key();
        } else if (section == "augment.finetune") {
            if (!detail::apply_augment_key(cfg.augment_finetune, key, val)) throw bad_key();
        } else if (section == "finetune") {
            if (key == "batch") cfg.finetune_batch = std::stoul(val);
            else if (key == "epochs") cfg.finetune_epochs = std::stoul(val);
            else if (key == "lr") cfg.finetune_lr = std::stod(val);
            else if (key == "val_fraction") cfg.val_fraction = std::stod(val);
            else throw bad_key();
        } else if (section == "probe") {
            if (key == "hidden") cfg.probe.hidden = std::stoul(val);
            else if (key == "epochs") cfg.probe.epochs = std::stoul(val);
            else if (key == "batch") cfg.probe.batch = std::stoul(val);
            else if (key == "lr") cfg.probe.lr = std::stod(val);
            else throw bad_key();
        } else if (section == "seeds") {
            if (key == "root") cfg.root_seed = std::stoull(val);
            else throw bad_key();
        } else if (section == "output") {
            if (key == "dir") cfg.output_dir = val;
            else throw bad_key();
        } else {
            throw FormatError("config: key '" + key + "' outside any section");
        }
    }
    (void)channels_set;
    cfg.model.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    return parse_experiment_config(read_text_file(path));
}

// Canonical serialization of the fully resolved configuration.
inline std::string experiment_config_to_text(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "[dataset]\n";
    for (const auto& p : cfg.dataset_paths) os << "path = " << p.string() << "\n";
    os << "[model]\n";
    os << "input_side = " << cfg.model.input_side << "\n";
    os << "channels =";
    for (auto c : cfg.model.channels) os << " " << c;
    os << "\n";
    os << "feature_dim = " << cfg.model.feature_dim << "\n";
    os << "latent_points = " << cfg.model.latent_points << "\n";
    os << "[objective]\n";
    os << "kind = " << objective_name(cfg.objective) << "\n";
    os << "temperature = " << csv_num(cfg.temperature) << "\n";
    os << "normalize_translation = " << (cfg.normalize_translation ? "true" : "false") << "\n";
    os << "[optimizer]\n";
    os << "lars = " << (cfg.lars ? "true" : "false") << "\n";
    os << "weight_decay = " << csv_num(cfg.weight_decay) << "\n";
    os << "[schedule]\n";
    os << "batch = " << cfg.batch << "\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "warmup_epochs = " << cfg.warmup_epochs << "\n";
    os << "base_lr = " << csv_num(cfg.base_lr) << "\n";
    os << detail::augment_to_text(cfg.augment_pretrain, "augment.pretrain");
    os << detail::augment_to_text(cfg.augment_finetune, "augment.finetune");
    os << "[finetune]\n";
    os << "batch = " << cfg.finetune_batch << "\n";
    os << "epochs = " << cfg.finetune_epochs << "\n";
    os << "lr = " << csv_num(cfg.finetune_lr) << "\n";
    os << "val_fraction = " << csv_num(cfg.val_fraction) << "\n";
    os << "[probe]\n";
    os << "hidden = " << cfg.probe.hidden << "\n";
    os << "epochs = " << cfg.probe.epochs << "\n";
    os << "batch = " << cfg.probe.batch << "\n";
    os << "lr = " << csv_num(cfg.probe.lr) << "\n";
    os << "[seeds]\n";
    os << "root = " << cfg.root_seed << "\n";
    os << "[output]\n";
    os << "dir = " << cfg.output_dir << "\n";
    return os.str();
}

}  // namespace peclr
