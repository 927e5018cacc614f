#include "caw/config.hpp"

#include <fstream>

namespace caw {

namespace {

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void expect_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                 const std::string& scope) {
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (const char* candidate : allowed) {
            if (key == candidate) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("unknown config key '" + scope + key + "'");
        }
    }
}

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out, const std::string& scope) {
    if (!obj.contains(key)) {
        return;
    }
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + scope + key + "' has the wrong type: " + e.what());
    }
}

AttackConfig attack_config_from_json(const nlohmann::json& obj, const std::string& scope) {
    expect_keys(obj,
                {"epsilon", "steps", "step_size", "random_start", "clamp_min", "clamp_max",
                 "kind"},
                scope);
    AttackConfig cfg;
    read_field(obj, "epsilon", cfg.epsilon, scope);
    read_field(obj, "steps", cfg.steps, scope);
    if (obj.contains("step_size")) {
        read_field(obj, "step_size", cfg.step_size, scope);
    } else {
        cfg.step_size = cfg.epsilon; // convention: step size equals the budget
    }
    read_field(obj, "random_start", cfg.random_start, scope);
    read_field(obj, "clamp_min", cfg.clamp_min, scope);
    read_field(obj, "clamp_max", cfg.clamp_max, scope);
    return cfg;
}

AttackSpec attack_spec_from_json(const nlohmann::json& obj, const std::string& scope) {
    AttackSpec spec;
    spec.config = attack_config_from_json(obj, scope);
    std::string kind = "pgd";
    read_field(obj, "kind", kind, scope);
    spec.kind = attack_kind_from_name(kind);
    return spec;
}

nlohmann::json attack_spec_to_json(const AttackSpec& spec) {
    return {{"kind", attack_kind_name(spec.kind)},
            {"epsilon", spec.config.epsilon},
            {"steps", spec.config.steps},
            {"step_size", spec.config.step_size},
            {"random_start", spec.config.random_start},
            {"clamp_min", spec.config.clamp_min},
            {"clamp_max", spec.config.clamp_max}};
}

} // namespace

void RunConfig::validate() const {
    if (format_version != 1) {
        throw ConfigError("unsupported config format_version " +
                          std::to_string(format_version));
    }
    model.validate();
    if (!(temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (data_source != "synthetic" && data_source != "file") {
        throw ConfigError("data.source must be 'synthetic' or 'file'");
    }
    if (data_source == "file" && data_path.empty()) {
        throw ConfigError("data.source 'file' requires data.path");
    }
    if (data_source == "synthetic") {
        data.validate();
        if (data.input_dim != model.input_dim) {
            throw ConfigError("data.input_dim must match model.input_dim");
        }
        if (data.embed_dim != model.embed_dim) {
            throw ConfigError("data.embed_dim must match model.embed_dim");
        }
    }
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
        throw ConfigError("data.holdout_fraction must be in [0, 1)");
    }
    train.validate();
    for (const AttackSpec& spec : eval_attacks) {
        spec.config.validate();
    }
    attack.config.validate();
    if (eval_batch_size == 0) {
        throw ConfigError("eval.batch_size must be >= 1");
    }
}

RunConfig default_config() {
    RunConfig cfg;
    cfg.train.batch_size = 128;
    cfg.train.epochs = 10;
    // Desk-scale attack ladder: the published 1:2:4 budget ratio.
    for (double eps : {0.0125, 0.025, 0.05}) {
        AttackSpec spec;
        spec.kind = AttackKind::pgd;
        spec.config.epsilon = eps;
        spec.config.steps = 20;
        spec.config.step_size = eps;
        cfg.eval_attacks.push_back(spec);
    }
    {
        AttackSpec spec;
        spec.kind = AttackKind::cw;
        spec.config.epsilon = 0.05;
        spec.config.steps = 20;
        spec.config.step_size = 0.05;
        cfg.eval_attacks.push_back(spec);
    }
    cfg.attack.kind = AttackKind::pgd;
    cfg.attack.config.epsilon = 0.05;
    cfg.attack.config.steps = 20;
    cfg.attack.config.step_size = 0.05;
    return cfg;
}

RunConfig config_from_json(const nlohmann::json& json) {
    RunConfig cfg = default_config();
    expect_keys(json,
                {"format_version", "seed", "out_dir", "model", "data", "train", "eval",
                 "attack", "gradcheck"},
                "");
    read_field(json, "format_version", cfg.format_version, "");
    read_field(json, "seed", cfg.seed, "");
    read_field(json, "out_dir", cfg.out_dir, "");

    if (json.contains("model")) {
        const auto& obj = json.at("model");
        expect_keys(obj, {"input_dim", "hidden_dims", "embed_dim", "temperature"}, "model.");
        read_field(obj, "input_dim", cfg.model.input_dim, "model.");
        read_field(obj, "hidden_dims", cfg.model.hidden_dims, "model.");
        read_field(obj, "embed_dim", cfg.model.embed_dim, "model.");
        read_field(obj, "temperature", cfg.temperature, "model.");
        // Keep the dataset consistent with explicit model dims unless data
        // overrides them below.
        cfg.data.input_dim = cfg.model.input_dim;
        cfg.data.embed_dim = cfg.model.embed_dim;
    }

    if (json.contains("data")) {
        const auto& obj = json.at("data");
        expect_keys(obj,
                    {"source", "path", "num_classes", "input_dim", "samples_per_class",
                     "embed_dim", "center_scale", "noise_sigma", "seed", "prototype_linkage",
                     "holdout_fraction", "transfer_sets"},
                    "data.");
        read_field(obj, "source", cfg.data_source, "data.");
        read_field(obj, "path", cfg.data_path, "data.");
        read_field(obj, "num_classes", cfg.data.num_classes, "data.");
        read_field(obj, "input_dim", cfg.data.input_dim, "data.");
        read_field(obj, "samples_per_class", cfg.data.samples_per_class, "data.");
        read_field(obj, "embed_dim", cfg.data.embed_dim, "data.");
        read_field(obj, "center_scale", cfg.data.center_scale, "data.");
        read_field(obj, "noise_sigma", cfg.data.noise_sigma, "data.");
        read_field(obj, "seed", cfg.data.seed, "data.");
        read_field(obj, "prototype_linkage", cfg.data.prototype_linkage, "data.");
        read_field(obj, "holdout_fraction", cfg.holdout_fraction, "data.");
        read_field(obj, "transfer_sets", cfg.transfer_sets, "data.");
    }

    if (json.contains("train")) {
        const auto& obj = json.at("train");
        expect_keys(obj,
                    {"alpha", "beta", "detach_weight", "kl_direction", "ce_on_adv",
                     "learning_rate", "momentum", "weight_decay", "batch_size", "epochs",
                     "pretrain_epochs", "checkpoint_every", "inner_attack"},
                    "train.");
        read_field(obj, "alpha", cfg.train.loss.alpha, "train.");
        read_field(obj, "beta", cfg.train.loss.beta, "train.");
        read_field(obj, "detach_weight", cfg.train.loss.detach_weight, "train.");
        if (obj.contains("kl_direction")) {
            cfg.train.loss.kl_direction =
                kl_direction_from_name(obj.at("kl_direction").get<std::string>());
        }
        read_field(obj, "ce_on_adv", cfg.train.loss.ce_on_adv, "train.");
        read_field(obj, "learning_rate", cfg.train.learning_rate, "train.");
        read_field(obj, "momentum", cfg.train.momentum, "train.");
        read_field(obj, "weight_decay", cfg.train.weight_decay, "train.");
        read_field(obj, "batch_size", cfg.train.batch_size, "train.");
        read_field(obj, "epochs", cfg.train.epochs, "train.");
        read_field(obj, "pretrain_epochs", cfg.pretrain_epochs, "train.");
        read_field(obj, "checkpoint_every", cfg.checkpoint_every, "train.");
        if (obj.contains("inner_attack")) {
            cfg.train.inner_attack =
                attack_config_from_json(obj.at("inner_attack"), "train.inner_attack.");
        }
    }

    if (json.contains("eval")) {
        const auto& obj = json.at("eval");
        expect_keys(obj, {"attacks", "batch_size", "checkpoint"}, "eval.");
        if (obj.contains("attacks")) {
            cfg.eval_attacks.clear();
            std::size_t index = 0;
            for (const auto& item : obj.at("attacks")) {
                cfg.eval_attacks.push_back(attack_spec_from_json(
                    item, "eval.attacks[" + std::to_string(index) + "]."));
                ++index;
            }
        }
        read_field(obj, "batch_size", cfg.eval_batch_size, "eval.");
        read_field(obj, "checkpoint", cfg.checkpoint_path, "eval.");
    }

    if (json.contains("attack")) {
        cfg.attack = attack_spec_from_json(json.at("attack"), "attack.");
    }

    if (json.contains("gradcheck")) {
        const auto& obj = json.at("gradcheck");
        expect_keys(obj,
                    {"states", "h", "tolerance", "identity_encoder", "input_dim",
                     "hidden_dims", "embed_dim", "num_classes", "batch", "temperature"},
                    "gradcheck.");
        read_field(obj, "states", cfg.gradcheck.states, "gradcheck.");
        read_field(obj, "h", cfg.gradcheck.h, "gradcheck.");
        read_field(obj, "tolerance", cfg.gradcheck.tolerance, "gradcheck.");
        read_field(obj, "identity_encoder", cfg.gradcheck.identity_encoder, "gradcheck.");
        read_field(obj, "input_dim", cfg.gradcheck.encoder.input_dim, "gradcheck.");
        read_field(obj, "hidden_dims", cfg.gradcheck.encoder.hidden_dims, "gradcheck.");
        read_field(obj, "embed_dim", cfg.gradcheck.encoder.embed_dim, "gradcheck.");
        read_field(obj, "num_classes", cfg.gradcheck.num_classes, "gradcheck.");
        read_field(obj, "batch", cfg.gradcheck.batch, "gradcheck.");
        read_field(obj, "temperature", cfg.gradcheck.temperature, "gradcheck.");
    }

    cfg.gradcheck.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config '" + path + "'");
    }
    nlohmann::json json;
    try {
        json = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    RunConfig cfg = config_from_json(json);
    cfg.validate();
    return cfg;
}

nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json eval_attacks = nlohmann::json::array();
    for (const AttackSpec& spec : cfg.eval_attacks) {
        eval_attacks.push_back(attack_spec_to_json(spec));
    }
    return {
        {"format_version", cfg.format_version},
        {"seed", cfg.seed},
        {"out_dir", cfg.out_dir},
        {"model",
         {{"input_dim", cfg.model.input_dim},
          {"hidden_dims", cfg.model.hidden_dims},
          {"embed_dim", cfg.model.embed_dim},
          {"temperature", cfg.temperature}}},
        {"data",
         {{"source", cfg.data_source},
          {"path", cfg.data_path},
          {"num_classes", cfg.data.num_classes},
          {"input_dim", cfg.data.input_dim},
          {"samples_per_class", cfg.data.samples_per_class},
          {"embed_dim", cfg.data.embed_dim},
          {"center_scale", cfg.data.center_scale},
          {"noise_sigma", cfg.data.noise_sigma},
          {"seed", cfg.data.seed},
          {"prototype_linkage", cfg.data.prototype_linkage},
          {"holdout_fraction", cfg.holdout_fraction},
          {"transfer_sets", cfg.transfer_sets}}},
        {"train",
         {{"alpha", cfg.train.loss.alpha},
          {"beta", cfg.train.loss.beta},
          {"detach_weight", cfg.train.loss.detach_weight},
          {"kl_direction", kl_direction_name(cfg.train.loss.kl_direction)},
          {"ce_on_adv", cfg.train.loss.ce_on_adv},
          {"learning_rate", cfg.train.learning_rate},
          {"momentum", cfg.train.momentum},
          {"weight_decay", cfg.train.weight_decay},
          {"batch_size", cfg.train.batch_size},
          {"epochs", cfg.train.epochs},
          {"pretrain_epochs", cfg.pretrain_epochs},
          {"checkpoint_every", cfg.checkpoint_every},
          {"inner_attack",
           {{"epsilon", cfg.train.inner_attack.epsilon},
            {"steps", cfg.train.inner_attack.steps},
            {"step_size", cfg.train.inner_attack.step_size},
            {"random_start", cfg.train.inner_attack.random_start},
            {"clamp_min", cfg.train.inner_attack.clamp_min},
            {"clamp_max", cfg.train.inner_attack.clamp_max}}}}},
        {"eval",
         {{"attacks", eval_attacks},
          {"batch_size", cfg.eval_batch_size},
          {"checkpoint", cfg.checkpoint_path}}},
        {"attack", attack_spec_to_json(cfg.attack)},
        {"gradcheck",
         {{"states", cfg.gradcheck.states},
          {"h", cfg.gradcheck.h},
          {"tolerance", cfg.gradcheck.tolerance},
          {"identity_encoder", cfg.gradcheck.identity_encoder},
          {"input_dim", cfg.gradcheck.encoder.input_dim},
          {"hidden_dims", cfg.gradcheck.encoder.hidden_dims},
          {"embed_dim", cfg.gradcheck.encoder.embed_dim},
          {"num_classes", cfg.gradcheck.num_classes},
          {"batch", cfg.gradcheck.batch},
          {"temperature", cfg.gradcheck.temperature}}},
    };
}

std::string config_digest(const RunConfig& cfg) {
    // The digest identifies the experiment, not where its artifacts land.
    nlohmann::json canonical = config_to_json(cfg);
    canonical.erase("out_dir");
    char buffer[17];
    std::snprintf(buffer, sizeof buffer, "%016llx",
                  static_cast<unsigned long long>(fnv1a(canonical.dump())));
    return std::string(buffer);
}

} // namespace caw
