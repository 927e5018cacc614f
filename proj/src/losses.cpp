#include "caw/losses.hpp"

#include <cmath>

namespace caw {

std::string kl_direction_name(KlDirection dir) {
    return dir == KlDirection::adv_first ? "adv_first" : "clean_first";
}

KlDirection kl_direction_from_name(const std::string& name) {
    if (name == "adv_first") {
        return KlDirection::adv_first;
    }
    if (name == "clean_first") {
        return KlDirection::clean_first;
    }
    throw ConfigError("unknown kl_direction '" + name + "'");
}

void CawConfig::validate() const {
    if (alpha < 0.0 || !std::isfinite(alpha)) {
        throw ConfigError("alpha must be >= 0");
    }
    if (beta < 0.0 || !std::isfinite(beta)) {
        throw ConfigError("beta must be >= 0");
    }
}

Tensor cross_entropy_loss(const Tensor& logits, const Labels& y) {
    return cross_entropy_with_logits(logits, y);
}

std::pair<Tensor, Tensor> prediction_distributions(const DualEncoderModel& model,
                                                   const Tensor& x_clean, const Tensor& x_adv,
                                                   const Tensor& prototypes, double tau) {
    if (x_clean.shape() != x_adv.shape()) {
        throw DimensionError("prediction_distributions: clean/adversarial batches must align "
                             "sample by sample");
    }
    Tensor p_adv = softmax_rows(
        zero_shot_logits(encode(model.tuned(), x_adv), prototypes, tau));
    Tensor p_clean;
    {
        // Frozen parameters are untracked, but detaching the result keeps
        // the clean path out of the graph even if x_clean itself is.
        NoGradGuard no_grad;
        p_clean = softmax_rows(
            zero_shot_logits(encode(model.frozen(), x_clean), prototypes, tau));
    }
    return {p_adv, p_clean.detach()};
}

Tensor true_label_prob(const Tensor& p_adv, const Labels& y) {
    return gather_rows(p_adv, y);
}

Tensor confidence_aware_loss(const Tensor& p_adv, const Tensor& p_clean, const Labels& y,
                             bool detach_weight, KlDirection kl_direction) {
    Tensor weight = rsub_scalar(1.0, true_label_prob(p_adv, y));
    if (detach_weight) {
        weight = weight.detach();
    }
    Tensor kl = kl_direction == KlDirection::adv_first
                    ? kl_divergence_rows(p_adv, p_clean)
                    : kl_divergence_rows(p_clean, p_adv);
    return mean(mul(kl, weight));
}

Tensor feature_reg_loss(const DualEncoderModel& model, const Tensor& x_adv) {
    Tensor tuned_features = encode(model.tuned(), x_adv);
    Tensor frozen_features;
    {
        NoGradGuard no_grad;
        frozen_features = encode(model.frozen(), x_adv);
    }
    return mean(l2_norm_rows(sub(tuned_features, frozen_features.detach())));
}

LossResult total_loss(const DualEncoderModel& model, const Tensor& x_clean,
                      const Tensor& x_adv, const Labels& y, const CawConfig& cfg) {
    cfg.validate();
    if (x_clean.shape() != x_adv.shape()) {
        throw DimensionError("total_loss: clean/adversarial batches must align");
    }
    const Tensor& prototypes = model.prototypes().vectors;
    const double tau = model.temperature();

    Tensor ce_input = cfg.ce_on_adv ? x_adv : x_clean;
    Tensor adv_logits = zero_shot_logits(encode(model.tuned(), x_adv), prototypes, tau);
    Tensor ce = cfg.ce_on_adv
                    ? cross_entropy_loss(adv_logits, y)
                    : cross_entropy_loss(
                          zero_shot_logits(encode(model.tuned(), ce_input), prototypes, tau),
                          y);

    LossResult result;
    result.breakdown.l_ce = ce.item();
    Tensor total = ce;

    Tensor p_adv = softmax_rows(adv_logits);
    {
        // Diagnostic only; no graph involvement.
        NoGradGuard no_grad;
        Tensor w = rsub_scalar(1.0, gather_rows(p_adv.detach(), y));
        result.breakdown.mean_confidence_weight = mean(w).item();
    }

    if (cfg.alpha > 0.0) {
        Tensor p_clean;
        {
            NoGradGuard no_grad;
            p_clean = softmax_rows(
                zero_shot_logits(encode(model.frozen(), x_clean), prototypes, tau));
        }
        Tensor ca = confidence_aware_loss(p_adv, p_clean.detach(), y, cfg.detach_weight,
                                          cfg.kl_direction);
        result.breakdown.l_ca = ca.item();
        total = add(total, mul_scalar(ca, cfg.alpha));
    }

    if (cfg.beta > 0.0) {
        Tensor reg = feature_reg_loss(model, x_adv);
        result.breakdown.l_reg = reg.item();
        total = add(total, mul_scalar(reg, cfg.beta));
    }

    result.total = total;
    result.breakdown.l_total = total.item();
    if (!std::isfinite(result.breakdown.l_total)) {
        throw NumericError("total_loss: non-finite loss (ce=" +
                           std::to_string(result.breakdown.l_ce) +
                           " ca=" + std::to_string(result.breakdown.l_ca) +
                           " reg=" + std::to_string(result.breakdown.l_reg) + ")");
    }
    return result;
}

} // namespace caw
