#include "caw/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "caw/rng.hpp"

namespace caw {

namespace {

std::atomic<std::uint64_t> g_zero_grad_steps{0};

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

enum class Objective { cross_entropy, cw_margin };

Tensor objective_value(Objective obj, const DualEncoderModel& model, const Tensor& x_t,
                       const Labels& y) {
    Tensor logits = zero_shot_logits(encode(model.tuned(), x_t), model.prototypes().vectors,
                                     model.temperature());
    switch (obj) {
    case Objective::cross_entropy:
        return cross_entropy_with_logits(logits, y);
    case Objective::cw_margin:
        return mean(cw_margin(logits, y));
    }
    throw ContractError("unknown attack objective");
}

void zero_param_grads(const ImageEncoder& encoder) {
    for (const Tensor& p : encoder.parameters()) {
        Tensor(p).zero_grad();
    }
}

AttackResult run_pgd(Objective obj, const DualEncoderModel& model, const Tensor& x,
                     const Labels& y, const AttackConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (x.ndim() != 2) {
        throw DimensionError("attack: input must be a [batch, dim] matrix");
    }
    const std::size_t n = x.size();
    std::vector<double> clean(x.data().begin(), x.data().end());
    std::vector<double> adv = clean;

    auto project = [&](std::vector<double>& v) {
        for (std::size_t i = 0; i < n; ++i) {
            const double delta = clamp(v[i] - clean[i], -cfg.epsilon, cfg.epsilon);
            v[i] = clamp(clean[i] + delta, cfg.clamp_min, cfg.clamp_max);
        }
    };

    if (cfg.random_start && cfg.epsilon > 0.0) {
        Rng rng(seed);
        for (std::size_t i = 0; i < n; ++i) {
            adv[i] += rng.uniform(-cfg.epsilon, cfg.epsilon);
        }
        project(adv);
    }

    AttackResult result;
    result.loss_trace.reserve(static_cast<std::size_t>(cfg.steps) + 1);
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor x_t = Tensor::from_data(x.shape(), adv, /*requires_grad=*/true);
        Tensor loss = objective_value(obj, model, x_t, y);
        result.loss_trace.push_back(loss.item());
        loss.backward();
        auto g = x_t.grad();
        bool any_nonzero = false;
        for (std::size_t i = 0; i < n; ++i) {
            const double s = sign(g[i]);
            any_nonzero = any_nonzero || s != 0.0;
            adv[i] += cfg.step_size * s;
        }
        if (!any_nonzero) {
            g_zero_grad_steps.fetch_add(1);
        }
        project(adv);
        zero_param_grads(model.tuned());
    }

    result.x_adv = Tensor::from_data(x.shape(), std::move(adv));
    {
        NoGradGuard no_grad;
        result.loss_trace.push_back(objective_value(obj, model, result.x_adv, y).item());
    }
    Labels predicted = predict(model, result.x_adv);
    result.success_mask.resize(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        result.success_mask[i] = predicted[i] != y[i] ? 1 : 0;
    }
    return result;
}

} // namespace

namespace diagnostics {
std::uint64_t zero_gradient_steps() { return g_zero_grad_steps.load(); }
void reset_zero_gradient_steps() { g_zero_grad_steps.store(0); }
} // namespace diagnostics

std::string attack_kind_name(AttackKind kind) {
    switch (kind) {
    case AttackKind::fgsm:
        return "fgsm";
    case AttackKind::pgd:
        return "pgd";
    case AttackKind::cw:
        return "cw";
    }
    throw ContractError("unknown attack kind");
}

AttackKind attack_kind_from_name(const std::string& name) {
    if (name == "fgsm") {
        return AttackKind::fgsm;
    }
    if (name == "pgd") {
        return AttackKind::pgd;
    }
    if (name == "cw") {
        return AttackKind::cw;
    }
    throw ConfigError("unknown attack kind '" + name + "'");
}

void AttackConfig::validate() const {
    if (epsilon < 0.0 || !std::isfinite(epsilon)) {
        throw ConfigError("attack epsilon must be >= 0");
    }
    if (steps < 1) {
        throw ConfigError("attack steps must be >= 1");
    }
    if (step_size < 0.0 || !std::isfinite(step_size)) {
        throw ConfigError("attack step_size must be >= 0");
    }
    if (!(clamp_min < clamp_max)) {
        throw ConfigError("attack clamp range must satisfy clamp_min < clamp_max");
    }
}

AttackResult pgd_attack(const DualEncoderModel& model, const Tensor& x, const Labels& y,
                        const AttackConfig& cfg, std::uint64_t seed) {
    return run_pgd(Objective::cross_entropy, model, x, y, cfg, seed);
}

AttackResult fgsm_attack(const DualEncoderModel& model, const Tensor& x, const Labels& y,
                         double epsilon) {
    AttackConfig cfg;
    cfg.epsilon = epsilon;
    cfg.steps = 1;
    cfg.step_size = epsilon;
    cfg.random_start = false;
    return pgd_attack(model, x, y, cfg);
}

AttackResult cw_pgd_attack(const DualEncoderModel& model, const Tensor& x, const Labels& y,
                           const AttackConfig& cfg, std::uint64_t seed) {
    return run_pgd(Objective::cw_margin, model, x, y, cfg, seed);
}

Tensor project_linf(const Tensor& x_adv, const Tensor& x, double epsilon, double clamp_min,
                    double clamp_max) {
    if (x_adv.shape() != x.shape()) {
        throw DimensionError("project_linf: shape mismatch");
    }
    std::vector<double> out(x_adv.data().begin(), x_adv.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double delta = clamp(out[i] - x.data()[i], -epsilon, epsilon);
        out[i] = clamp(x.data()[i] + delta, clamp_min, clamp_max);
    }
    return Tensor::from_data(x.shape(), std::move(out));
}

AttackResult run_attack(AttackKind kind, const DualEncoderModel& model, const Tensor& x,
                        const Labels& y, const AttackConfig& cfg, std::uint64_t seed) {
    switch (kind) {
    case AttackKind::fgsm:
        return fgsm_attack(model, x, y, cfg.epsilon);
    case AttackKind::pgd:
        return pgd_attack(model, x, y, cfg, seed);
    case AttackKind::cw:
        return cw_pgd_attack(model, x, y, cfg, seed);
    }
    throw ContractError("unknown attack kind");
}

} // namespace caw
