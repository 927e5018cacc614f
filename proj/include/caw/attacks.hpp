#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caw/model.hpp"
#include "caw/tensor.hpp"

namespace caw {

enum class AttackNorm { linf };
enum class AttackKind { fgsm, pgd, cw };

std::string attack_kind_name(AttackKind kind);
AttackKind attack_kind_from_name(const std::string& name);

struct AttackConfig {
    double epsilon = 1.0 / 255.0; // l-inf budget in input units
    int steps = 2;
    double step_size = 1.0 / 255.0; // convention: step size equals the budget
    AttackNorm norm = AttackNorm::linf;
    bool random_start = false;
    double clamp_min = 0.0;
    double clamp_max = 1.0;

    /// epsilon == 0 is the allowed degenerate no-op attack.
    void validate() const;
};

struct AttackResult {
    Tensor x_adv; // within eps of x and inside [clamp_min, clamp_max]
    /// Objective at the start point plus after each projected step
    /// (steps + 1 entries).
    std::vector<double> loss_trace;
    /// Per-sample: prediction on x_adv differs from the true label.
    std::vector<std::uint8_t> success_mask;
};

/// Iterated sign-gradient ascent on the cross-entropy objective against the
/// tuned encoder, projected into the l-inf epsilon ball around x and clamped
/// to the valid range after every step. Model parameters are never touched.
/// `seed` only matters when cfg.random_start is set.
AttackResult pgd_attack(const DualEncoderModel& model, const Tensor& x, const Labels& y,
                        const AttackConfig& cfg, std::uint64_t seed = 0);

/// Single-step special case: pgd_attack with steps=1, step_size=epsilon,
/// random_start=false.
AttackResult fgsm_attack(const DualEncoderModel& model, const Tensor& x, const Labels& y,
                         double epsilon);

/// PGD on the margin objective max_{j != y} logit_j - logit_y (kappa = 0)
/// instead of cross-entropy; same projection and clamping regime.
AttackResult cw_pgd_attack(const DualEncoderModel& model, const Tensor& x, const Labels& y,
                           const AttackConfig& cfg, std::uint64_t seed = 0);

/// Elementwise clip of (x_adv - x) into [-eps, eps], re-added to x, then
/// clamped to [clamp_min, clamp_max]. Idempotent.
Tensor project_linf(const Tensor& x_adv, const Tensor& x, double epsilon, double clamp_min,
                    double clamp_max);

/// Dispatch by attack kind; fgsm ignores cfg.steps/step_size and uses
/// cfg.epsilon for both.
AttackResult run_attack(AttackKind kind, const DualEncoderModel& model, const Tensor& x,
                        const Labels& y, const AttackConfig& cfg, std::uint64_t seed = 0);

namespace diagnostics {
/// PGD steps whose objective gradient vanished everywhere (sign(0) == 0).
std::uint64_t zero_gradient_steps();
void reset_zero_gradient_steps();
} // namespace diagnostics

} // namespace caw
