#pragma once

#include <string>
#include <utility>

#include "caw/model.hpp"
#include "caw/tensor.hpp"

namespace caw {

enum class KlDirection { adv_first, clean_first };

std::string kl_direction_name(KlDirection dir);
KlDirection kl_direction_from_name(const std::string& name);

struct CawConfig {
    double alpha = 6.0; // weight on the confidence-aware term
    double beta = 3.0;  // weight on the feature regularizer
    /// Treat the confidence weight 1 - P_adv[i, y_i] as a constant during
    /// gradient computation.
    bool detach_weight = true;
    KlDirection kl_direction = KlDirection::adv_first;
    /// Evaluate the cross-entropy term on adversarial inputs (the
    /// adversarial fine-tuning objective); clean-input CE is kept for
    /// ablation.
    bool ce_on_adv = true;

    void validate() const;
};

struct LossBreakdown {
    double l_ce = 0.0;
    double l_ca = 0.0;
    double l_reg = 0.0;
    double l_total = 0.0;
    double mean_confidence_weight = 0.0; // mean of 1 - P_adv[i, y_i]
};

/// Numeric breakdown plus the graph root for the backward pass.
struct LossResult {
    Tensor total;
    LossBreakdown breakdown;
};

/// Mean over the batch of -log softmax(logits)[i, y_i]. Expects logits
/// that are already temperature-scaled (zero_shot_logits output).
Tensor cross_entropy_loss(const Tensor& logits, const Labels& y);

/// P_adv from the TUNED encoder on x_adv; P_clean from the FROZEN encoder
/// on x_clean, detached so no gradient reaches the frozen path. Both use
/// the same cosine/tau head as classification.
std::pair<Tensor, Tensor> prediction_distributions(const DualEncoderModel& model,
                                                   const Tensor& x_clean, const Tensor& x_adv,
                                                   const Tensor& prototypes, double tau);

/// P_adv[i, y_i], the adversarial probability of the true label.
Tensor true_label_prob(const Tensor& p_adv, const Labels& y);

/// Mean over samples of per-row KL (argument order per kl_direction)
/// scaled by the confidence weight w_i = 1 - P_adv[i, y_i].
Tensor confidence_aware_loss(const Tensor& p_adv, const Tensor& p_clean, const Labels& y,
                             bool detach_weight = true,
                             KlDirection kl_direction = KlDirection::adv_first);

/// Mean over samples of || f(x_adv)_tuned - f(x_adv)_frozen ||_2 on raw
/// (pre-normalization) embeddings, frozen path detached.
Tensor feature_reg_loss(const DualEncoderModel& model, const Tensor& x_adv);

/// l_total = l_ce + alpha * l_ca + beta * l_reg. The alpha==0 / beta==0
/// subgraphs are skipped entirely so the CE-only configuration reduces to
/// plain cross-entropy training bit-for-bit.
LossResult total_loss(const DualEncoderModel& model, const Tensor& x_clean,
                      const Tensor& x_adv, const Labels& y, const CawConfig& cfg);

} // namespace caw
