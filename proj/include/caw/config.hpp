#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caw/data.hpp"
#include "caw/eval.hpp"
#include "caw/gradcheck.hpp"
#include "caw/model.hpp"
#include "caw/training.hpp"
#include "json.hpp"

namespace caw {

/// Full run configuration with documented defaults (the published training
/// recipe: SGD lr 1e-4, momentum 0.9, batch 128, PGD-2 with eps = 1/255,
/// alpha = 6, beta = 3). Unknown keys anywhere in the JSON are rejected.
struct RunConfig {
    int format_version = 1;
    std::uint64_t seed = 0;
    std::string out_dir = "caw-out";

    EncoderConfig model{64, {128, 128}, 32};
    double temperature = 0.07;

    // data
    std::string data_source = "synthetic"; // "synthetic" | "file"
    std::string data_path;                 // when source == "file"
    SyntheticDatasetSpec data;
    double holdout_fraction = 0.2;
    std::size_t transfer_sets = 2;

    // train
    TrainConfig train;
    std::size_t pretrain_epochs = 20;
    std::size_t checkpoint_every = 1; // epochs

    // eval
    std::vector<AttackSpec> eval_attacks;
    std::size_t eval_batch_size = 256;
    std::string checkpoint_path; // input for eval/attack; defaults to out_dir/model.caw

    // attack subcommand
    AttackSpec attack;

    // gradcheck
    GradcheckOptions gradcheck;

    void validate() const;
};

/// Defaults only (no file).
RunConfig default_config();

/// Parse from a JSON file; missing keys fall back to defaults, unknown keys
/// throw ConfigError naming the offending key.
RunConfig load_config(const std::string& path);
RunConfig config_from_json(const nlohmann::json& json);

/// Canonical JSON rendering of a config (every field explicit, sorted keys).
nlohmann::json config_to_json(const RunConfig& config);

/// FNV-1a 64 hex digest of the canonical JSON; embedded in every artifact.
std::string config_digest(const RunConfig& config);

} // namespace caw
