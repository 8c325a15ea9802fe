#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastinst/data/augment.hpp"
#include "fastinst/data/scene.hpp"
#include "fastinst/loss/losses.hpp"
#include "fastinst/model/config.hpp"
#include "fastinst/train/optim.hpp"

namespace fastinst {

/// Malformed or unknown configuration; `key` is the dotted path at fault.
class ConfigError : public std::runtime_error {
   public:
    ConfigError(std::string key, const std::string& what) : std::runtime_error(key + ": " + what), key(std::move(key)) {}
    std::string key;
};

enum class ValueKind { Bool, Int, Real, Text, RealList };

struct ConfigKey {
    std::string key;
    ValueKind kind;
    nlohmann::json fallback;
    std::string help;
};

inline const std::vector<ConfigKey>& config_schema() {
    using K = ValueKind;
    static const std::vector<ConfigKey> schema = {
        {"data.dir", K::Text, "data", "dataset directory"},
        {"data.num_classes", K::Int, 3, "number of shape classes K"},
        {"data.height", K::Int, 96, "image height (multiple of 32)"},
        {"data.width", K::Int, 96, "image width (multiple of 32)"},
        {"data.num_images", K::Int, 64, "images to generate"},
        {"data.min_instances", K::Int, 2, "fewest instances per image"},
        {"data.max_instances", K::Int, 6, "most instances per image"},
        {"data.min_instance_area", K::Int, 16, "smallest visible instance area"},
        {"data.seed", K::Int, 0, "dataset seed"},
        {"model.seed", K::Int, 0, "parameter initialization seed"},
        {"pixel.dim", K::Int, 32, "feature width of the pixel decoder and queries"},
        {"pixel.use_ppm", K::Bool, true, "pyramid pooling on the coarsest level"},
        {"query.na", K::Int, 16, "IA-guided queries"},
        {"query.nb", K::Int, 8, "auxiliary learnable queries"},
        {"query.pos", K::Text, "learnable", "positional embedding: learnable | sine"},
        {"query.source_level", K::Text, "E4", "query source level: E3 | E4 | E5"},
        {"query.local_max_first", K::Bool, true, "prefer local maxima when selecting queries"},
        {"decoder.d", K::Int, 1, "decoder layers D"},
        {"decoder.heads", K::Int, 4, "attention heads"},
        {"decoder.ffn_dim", K::Int, 0, "FFN hidden width (0 = 4 * dim)"},
        {"decoder.order", K::Text, "pixel_then_query", "pixel_then_query | query_then_pixel"},
        {"loss.cls", K::Real, 2.0, "class loss weight"},
        {"loss.ce", K::Real, 5.0, "mask BCE weight"},
        {"loss.dice", K::Real, 5.0, "mask Dice weight"},
        {"loss.cls_q", K::Real, 20.0, "instance activation loss weight"},
        {"loss.loc", K::Real, 1000.0, "location cost weight"},
        {"loss.no_object", K::Real, 0.1, "no-object class weight"},
        {"loss.use_gt_guidance", K::Bool, true, "add the GT mask-guided loss"},
        {"loss.use_location_cost", K::Bool, true, "add the location cost to matching"},
        {"loss.use_bipartite", K::Bool, true, "bipartite matching for the activation loss"},
        {"train.base_lr", K::Real, 1e-4, "initial learning rate"},
        {"train.weight_decay", K::Real, 0.05, "decoupled weight decay"},
        {"train.backbone_lr_mult", K::Real, 0.1, "backbone learning-rate multiplier"},
        {"train.decay_fractions", K::RealList, nlohmann::json::array({0.9, 0.95}), "schedule step points"},
        {"train.decay_factor", K::Real, 0.1, "factor applied at each step point"},
        {"train.batch_size", K::Int, 4, "images per iteration"},
        {"train.total_iters", K::Int, 5000, "training iterations"},
        {"train.seed", K::Int, 0, "batch order and augmentation seed"},
        {"train.augment", K::Bool, true, "scale jitter and random crop"},
        {"train.log_every", K::Int, 1, "iterations between log records"},
        {"train.checkpoint_every", K::Int, 0, "iterations between checkpoints (0 = final only)"},
        {"train.eval_every", K::Int, 0, "iterations between evaluations (0 = final only)"},
        {"augment.short_min", K::Int, 64, "smallest shorter edge"},
        {"augment.short_max", K::Int, 128, "largest shorter edge"},
        {"augment.long_max", K::Int, 172, "cap on the longer edge"},
        {"augment.crop_h", K::Int, 96, "crop height"},
        {"augment.crop_w", K::Int, 96, "crop width"},
        {"io.out", K::Text, "runs/default", "output directory"},
        {"io.checkpoint", K::Text, "", "checkpoint to load"},
        {"io.detections", K::Text, "", "detection JSON to evaluate instead of running the model"},
        {"io.image", K::Int, 0, "dataset image index for predict and viz commands"},
        {"io.count", K::Int, 1, "number of images for predict and viz commands"},
        {"bench.height", K::Int, 320, "benchmark input height"},
        {"bench.width", K::Int, 320, "benchmark input width"},
        {"bench.warmup", K::Int, 2, "untimed warmup runs"},
        {"bench.iters", K::Int, 10, "timed runs"},
        {"gradcheck.coords", K::Int, 200, "sampled coordinates per parameter group"},
        {"gradcheck.eps", K::Real, 1e-4, "finite-difference step"},
        {"gradcheck.tol", K::Real, 1e-4, "maximum relative error"},
    };
    return schema;
}

inline const ConfigKey* find_config_key(const std::string& key) {
    for (const auto& k : config_schema())
        if (k.key == key) return &k;
    return nullptr;
}

/// Flat dotted-key configuration. Values are validated against the schema on every write.
class RunConfig {
   public:
    RunConfig() {
        for (const auto& k : config_schema()) values_[k.key] = k.fallback;
    }

    void set(const std::string& key, const nlohmann::json& value) {
        const auto* def = find_config_key(key);
        if (!def) throw ConfigError(key, "unknown configuration key");
        values_[key] = coerce(*def, value);
    }

    /// Parses a command-line string according to the key's type.
    void set_text(const std::string& key, const std::string& text) {
        const auto* def = find_config_key(key);
        if (!def) throw ConfigError(key, "unknown configuration key");
        nlohmann::json v;
        try {
            switch (def->kind) {
                case ValueKind::Text: v = text; break;
                case ValueKind::Bool:
                    if (text == "true" || text == "1") v = true;
                    else if (text == "false" || text == "0") v = false;
                    else throw ConfigError(key, "expected true or false, got '" + text + "'");
                    break;
                case ValueKind::RealList: {
                    v = nlohmann::json::array();
                    std::stringstream ss(text);
                    std::string item;
                    while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
                    break;
                }
                default: v = nlohmann::json::parse(text);
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError(key, "cannot parse '" + text + "'");
        }
        set(key, v);
    }

    /// Merges a nested or dotted JSON object; every leaf must name a schema key.
    void merge(const nlohmann::json& j, const std::string& prefix = "") {
        if (!j.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
        for (const auto& [name, value] : j.items()) {
            const std::string key = prefix.empty() ? name : prefix + "." + name;
            if (value.is_object()) merge(value, key);
            else set(key, value);
        }
    }

    void merge_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("<file>", "cannot open config file " + path.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
        }
        merge(j);
    }

    const nlohmann::json& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError(key, "unknown configuration key");
        return it.value();
    }
    bool flag(const std::string& key) const { return get(key).get<bool>(); }
    double real(const std::string& key) const { return get(key).get<double>(); }
    std::size_t count(const std::string& key) const { return get(key).get<std::size_t>(); }
    std::string text(const std::string& key) const { return get(key).get<std::string>(); }

    /// Flat {dotted key: value} object.
    const nlohmann::json& flat() const { return values_; }

    /// Nested view for echoing into artifacts.
    nlohmann::json nested() const {
        nlohmann::json out = nlohmann::json::object();
        for (const auto& [key, value] : values_.items()) out[nlohmann::json::json_pointer("/" + replace_dots(key))] = value;
        return out;
    }

    DatasetSpec dataset_spec() const {
        DatasetSpec s;
        s.num_classes = get("data.num_classes").get<int>();
        s.height = count("data.height");
        s.width = count("data.width");
        s.num_images = count("data.num_images");
        s.min_instances = get("data.min_instances").get<int>();
        s.max_instances = get("data.max_instances").get<int>();
        s.min_instance_area = count("data.min_instance_area");
        s.seed = get("data.seed").get<std::uint64_t>();
        wrap("data", [&] { s.validate(); });
        return s;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.num_classes = get("data.num_classes").get<int>();
        m.seed = get("model.seed").get<std::uint64_t>();
        m.dim = count("pixel.dim");
        m.use_ppm = flag("pixel.use_ppm");
        m.na = count("query.na");
        m.nb = count("query.nb");
        m.local_max_first = flag("query.local_max_first");
        const auto pos = text("query.pos");
        if (pos == "learnable") m.pos = PosKind::Learnable;
        else if (pos == "sine") m.pos = PosKind::Sine;
        else throw ConfigError("query.pos", "expected learnable or sine, got '" + pos + "'");
        const auto level = text("query.source_level");
        if (level == "E3") m.source_level = SourceLevel::E3;
        else if (level == "E4") m.source_level = SourceLevel::E4;
        else if (level == "E5") m.source_level = SourceLevel::E5;
        else throw ConfigError("query.source_level", "expected E3, E4 or E5, got '" + level + "'");
        m.layers = count("decoder.d");
        m.heads = count("decoder.heads");
        m.ffn_dim = count("decoder.ffn_dim");
        const auto order = text("decoder.order");
        if (order == "pixel_then_query") m.order = DecoderOrder::PixelThenQuery;
        else if (order == "query_then_pixel") m.order = DecoderOrder::QueryThenPixel;
        else throw ConfigError("decoder.order", "expected pixel_then_query or query_then_pixel, got '" + order + "'");
        wrap("model", [&] { m.validate(); });
        return m;
    }

    LossConfig loss_config() const {
        LossConfig l;
        l.weights = {real("loss.cls"), real("loss.ce"), real("loss.dice"), real("loss.cls_q"), real("loss.loc"), real("loss.no_object")};
        l.use_gt_guidance = flag("loss.use_gt_guidance");
        l.use_location_cost = flag("loss.use_location_cost");
        l.use_bipartite = flag("loss.use_bipartite");
        return l;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.base_lr = real("train.base_lr");
        t.weight_decay = real("train.weight_decay");
        t.backbone_lr_mult = real("train.backbone_lr_mult");
        t.decay_fractions = get("train.decay_fractions").get<std::vector<double>>();
        t.decay_factor = real("train.decay_factor");
        t.batch_size = count("train.batch_size");
        t.total_iters = count("train.total_iters");
        t.seed = get("train.seed").get<std::uint64_t>();
        t.augment = flag("train.augment");
        t.log_every = count("train.log_every");
        t.checkpoint_every = count("train.checkpoint_every");
        t.eval_every = count("train.eval_every");
        wrap("train", [&] { t.validate(); });
        return t;
    }

    AugmentConfig augment_config() const {
        return {count("augment.short_min"), count("augment.short_max"), count("augment.long_max"), count("augment.crop_h"),
                count("augment.crop_w")};
    }

   private:
    static std::string replace_dots(std::string s) {
        for (auto& c : s)
            if (c == '.') c = '/';
        return s;
    }

    template <typename F>
    static void wrap(const std::string& section, F&& check) {
        try {
            check();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(section, e.what());
        }
    }

    static nlohmann::json coerce(const ConfigKey& def, const nlohmann::json& v) {
        switch (def.kind) {
            case ValueKind::Bool:
                if (v.is_boolean()) return v;
                break;
            case ValueKind::Int:
                if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)) return v.get<std::uint64_t>();
                break;
            case ValueKind::Real:
                if (v.is_number()) return v.get<double>();
                break;
            case ValueKind::Text:
                if (v.is_string()) return v;
                break;
            case ValueKind::RealList:
                if (v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& x) { return x.is_number(); })) {
                    nlohmann::json out = nlohmann::json::array();
                    for (const auto& x : v) out.push_back(x.template get<double>());
                    return out;
                }
                break;
        }
        static const char* names[] = {"a boolean", "a nonnegative integer", "a number", "a string", "a list of numbers"};
        throw ConfigError(def.key, std::string("expected ") + names[static_cast<int>(def.kind)] + ", got " + v.dump());
    }

    nlohmann::json values_ = nlohmann::json::object();
};

}  // namespace fastinst
