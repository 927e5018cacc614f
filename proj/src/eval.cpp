#include "caw/eval.hpp"

#include <cmath>
#include <sstream>

#include "caw/rng.hpp"

namespace caw {

namespace {

double round_to(double v, int places) {
    const double scale = std::pow(10.0, places);
    return std::round(v * scale) / scale;
}

std::string format_eps(double eps) {
    std::ostringstream os;
    os << eps;
    return os.str();
}

} // namespace

std::string AttackSpec::label() const {
    const int effective_steps = kind == AttackKind::fgsm ? 1 : config.steps;
    return attack_kind_name(kind) + "-" + std::to_string(effective_steps) + "@" +
           format_eps(config.epsilon);
}

EvalReport evaluate(const DualEncoderModel& model, const Dataset& dataset,
                    const std::vector<AttackSpec>& attacks, std::size_t batch_size,
                    std::uint64_t seed, const std::string& config_digest) {
    if (batch_size == 0) {
        throw ConfigError("evaluate: batch_size must be >= 1");
    }
    if (dataset.prototypes.embed_dim != model.tuned().embed_dim()) {
        throw DimensionError("evaluate: dataset prototypes do not match the model embed dim");
    }
    const std::size_t n = dataset.size();
    const std::size_t d = dataset.spec.input_dim;

    // Classification happens against the dataset's own prototype set, so
    // held-out ("zero-shot") prototype sets evaluate transfer.
    DualEncoderModel head(model.tuned().snapshot(true), dataset.prototypes,
                          model.temperature());
    head.restore_frozen(model.frozen().snapshot(false));

    EvalReport report;
    report.dataset = dataset.name;
    report.sample_count = n;
    report.seed = seed;
    report.config_digest = config_digest;

    auto slice = [&](std::size_t start, std::size_t count) {
        std::vector<double> xb(count * d);
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                xb[i * d + j] = dataset.x.at(start + i, j);
            }
        }
        return Tensor::from_data({count, d}, std::move(xb));
    };

    std::size_t clean_correct = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t b = std::min(batch_size, n - start);
        Labels pred = predict(head, slice(start, b));
        for (std::size_t i = 0; i < b; ++i) {
            clean_correct += pred[i] == dataset.y[start + i] ? 1 : 0;
        }
    }
    report.clean_accuracy = n == 0 ? 0.0 : static_cast<double>(clean_correct) / n;

    Rng seed_stream(seed ^ 0xe5a1ULL);
    for (std::size_t a = 0; a < attacks.size(); ++a) {
        const AttackSpec& spec = attacks[a];
        std::size_t robust_correct = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < n; start += batch_size, ++batch_index) {
            const std::size_t b = std::min(batch_size, n - start);
            Labels yb(dataset.y.begin() + static_cast<std::ptrdiff_t>(start),
                      dataset.y.begin() + static_cast<std::ptrdiff_t>(start + b));
            AttackResult res =
                run_attack(spec.kind, head, slice(start, b), yb, spec.config,
                           seed_stream.fork(a * 1000003 + batch_index).next_u64());
            for (std::uint8_t flipped : res.success_mask) {
                robust_correct += flipped ? 0 : 1;
            }
        }
        RobustEntry entry;
        entry.attack = spec.label();
        entry.epsilon = spec.config.epsilon;
        entry.steps = spec.kind == AttackKind::fgsm ? 1 : spec.config.steps;
        entry.accuracy = n == 0 ? 0.0 : static_cast<double>(robust_correct) / n;
        report.robust.push_back(entry);
    }
    return report;
}

AblationReport run_ablation(const EncoderConfig& encoder_cfg, double temperature,
                            const TrainConfig& base_cfg, std::size_t pretrain_epochs,
                            const Dataset& train_set, const Dataset& eval_set,
                            const std::vector<AttackSpec>& attacks,
                            const std::string& config_digest) {
    base_cfg.validate();
    if (attacks.empty()) {
        throw ConfigError("run_ablation: needs at least one evaluation attack");
    }

    // Shared starting point: seeded init, clean pre-training, snapshot.
    DualEncoderModel base(ImageEncoder::random_init(encoder_cfg, base_cfg.seed),
                          train_set.prototypes, temperature);
    if (pretrain_epochs > 0) {
        fit(base, train_set, clean_variant(base_cfg, pretrain_epochs));
    }
    base.snapshot_frozen(/*force=*/true);

    struct ArmSpec {
        const char* name;
        double alpha;
        double beta;
    };
    const ArmSpec arm_specs[3] = {
        {"L_CE", 0.0, 0.0},
        {"+L_CA", base_cfg.loss.alpha, 0.0},
        {"+L_Reg", base_cfg.loss.alpha, base_cfg.loss.beta},
    };

    AblationReport report;
    report.seed = base_cfg.seed;
    report.config_digest = config_digest;
    for (const ArmSpec& spec : arm_specs) {
        DualEncoderModel arm = base.deep_copy();
        TrainConfig cfg = base_cfg;
        cfg.loss.alpha = spec.alpha;
        cfg.loss.beta = spec.beta;
        FitResult fit_result = fit(arm, train_set, cfg);

        AblationArm out;
        out.name = spec.name;
        out.alpha = spec.alpha;
        out.beta = spec.beta;
        out.report = evaluate(arm, eval_set, attacks, 256, base_cfg.seed, config_digest);
        out.robust_accuracy = out.report.robust.front().accuracy;
        out.clean_accuracy = out.report.clean_accuracy;
        out.average = (out.robust_accuracy + out.clean_accuracy) / 2.0;
        out.train_records = std::move(fit_result.records);
        report.arms.push_back(std::move(out));
    }
    return report;
}

nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json robust = nlohmann::json::array();
    for (const RobustEntry& entry : report.robust) {
        robust.push_back({{"attack", entry.attack},
                          {"epsilon", entry.epsilon},
                          {"steps", entry.steps},
                          {"accuracy", round_to(entry.accuracy, 4)}});
    }
    return {{"dataset", report.dataset},
            {"clean_accuracy", round_to(report.clean_accuracy, 4)},
            {"robust", robust},
            {"sample_count", report.sample_count},
            {"seed", report.seed},
            {"config_digest", report.config_digest}};
}

nlohmann::json to_json(const AblationReport& report) {
    nlohmann::json arms = nlohmann::json::array();
    for (const AblationArm& arm : report.arms) {
        arms.push_back({{"name", arm.name},
                        {"alpha", arm.alpha},
                        {"beta", arm.beta},
                        {"robust_accuracy", round_to(arm.robust_accuracy, 4)},
                        {"clean_accuracy", round_to(arm.clean_accuracy, 4)},
                        {"average", round_to(arm.average, 4)},
                        {"report", to_json(arm.report)}});
    }
    return {{"arms", arms}, {"seed", report.seed}, {"config_digest", report.config_digest}};
}

nlohmann::json to_json(const TrainLogRecord& record) {
    return {{"epoch", record.epoch},
            {"step", record.step},
            {"ce", record.loss.l_ce},
            {"ca", record.loss.l_ca},
            {"reg", record.loss.l_reg},
            {"total", record.loss.l_total},
            {"mean_weight", record.loss.mean_confidence_weight},
            {"attack_success", record.attack_success_rate}};
}

std::string reports_to_csv(
    const std::vector<std::pair<std::string, std::vector<EvalReport>>>& methods) {
    std::ostringstream os;
    os << "method";
    if (!methods.empty()) {
        for (const EvalReport& report : methods.front().second) {
            os << "," << report.dataset << ":clean";
            for (const RobustEntry& entry : report.robust) {
                os << "," << report.dataset << ":" << entry.attack;
            }
        }
    }
    os << "\n";
    char buffer[32];
    for (const auto& [method, reports] : methods) {
        os << method;
        for (const EvalReport& report : reports) {
            std::snprintf(buffer, sizeof buffer, ",%.2f", report.clean_accuracy * 100.0);
            os << buffer;
            for (const RobustEntry& entry : report.robust) {
                std::snprintf(buffer, sizeof buffer, ",%.2f", entry.accuracy * 100.0);
                os << buffer;
            }
        }
        os << "\n";
    }
    return os.str();
}

} // namespace caw
