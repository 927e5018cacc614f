#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "caw/attacks.hpp"
#include "caw/data.hpp"
#include "caw/model.hpp"
#include "caw/training.hpp"
#include "json.hpp"

namespace caw {

struct AttackSpec {
    AttackKind kind = AttackKind::pgd;
    AttackConfig config;

    std::string label() const; // e.g. "pgd-20@0.05"
};

struct RobustEntry {
    std::string attack;
    double epsilon = 0.0;
    int steps = 0;
    double accuracy = 0.0;
};

struct EvalReport {
    std::string dataset;
    double clean_accuracy = 0.0;
    std::vector<RobustEntry> robust;
    std::size_t sample_count = 0;
    std::uint64_t seed = 0;
    std::string config_digest;
};

/// Clean accuracy via predict plus robust accuracy (fraction still
/// correctly classified on x_adv) per attack config. Read-only on the
/// model; deterministic given the seed.
EvalReport evaluate(const DualEncoderModel& model, const Dataset& dataset,
                    const std::vector<AttackSpec>& attacks, std::size_t batch_size = 256,
                    std::uint64_t seed = 0, const std::string& config_digest = "");

struct AblationArm {
    std::string name; // "L_CE", "+L_CA", "+L_Reg"
    double alpha = 0.0;
    double beta = 0.0;
    double robust_accuracy = 0.0; // under the first attack spec
    double clean_accuracy = 0.0;
    double average = 0.0;
    EvalReport report;
    std::vector<TrainLogRecord> train_records;
};

struct AblationReport {
    std::vector<AblationArm> arms; // exactly the three component arms
    std::uint64_t seed = 0;
    std::string config_digest;
};

/// Trains the three component arms - (alpha=0, beta=0), (alpha, 0),
/// (alpha, beta) - from the same seed, the same initial parameters, and
/// the same frozen snapshot, then evaluates each identically.
AblationReport run_ablation(const EncoderConfig& encoder_cfg, double temperature,
                            const TrainConfig& base_cfg, std::size_t pretrain_epochs,
                            const Dataset& train_set, const Dataset& eval_set,
                            const std::vector<AttackSpec>& attacks,
                            const std::string& config_digest = "");

/// Accuracies rounded to 4 decimal places in machine output.
nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const AblationReport& report);

/// JSON-lines record for one train step; deterministic fields only (the
/// wall-clock diagnostic is deliberately excluded).
nlohmann::json to_json(const TrainLogRecord& record);

/// Paper-style table: methods as rows, datasets as columns, percentages
/// with two decimals.
std::string reports_to_csv(
    const std::vector<std::pair<std::string, std::vector<EvalReport>>>& methods);

} // namespace caw
