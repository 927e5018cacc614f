#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "caw/attacks.hpp"
#include "caw/data.hpp"
#include "caw/losses.hpp"
#include "caw/model.hpp"

namespace caw {

struct TrainConfig {
    CawConfig loss;                 // alpha, beta, detach_weight, kl_direction, ce_on_adv
    double learning_rate = 1e-4;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t batch_size = 128;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    AttackConfig inner_attack;      // defaults: PGD-2 with eps = step = 1/255

    /// learning_rate == 0 is allowed (no-op updates, logs only).
    void validate() const;
};

/// SGD-with-momentum buffers: v <- momentum * v + g; theta <- theta - lr * v.
struct OptimizerState {
    std::vector<std::vector<double>> velocity; // mirrors parameter shapes
    std::uint64_t step = 0;

    static OptimizerState for_model(const DualEncoderModel& model);
};

struct TrainLogRecord {
    std::size_t epoch = 0;
    std::size_t step = 0; // global, strictly increasing
    LossBreakdown loss;
    double attack_success_rate = 0.0;
    /// In-memory diagnostic only; serialized logs omit it so same-seed
    /// reruns stay byte-identical.
    double wall_ms = 0.0;
};

/// Seed for the inner attack at a given optimizer step (only consumed when
/// the inner attack uses a random start). Exposed so replay oracles can
/// reproduce the exact x_adv of any step.
std::uint64_t inner_attack_seed(std::uint64_t train_seed, std::uint64_t step);

/// The visitation order fit uses for one epoch (seeded Fisher-Yates over
/// 0..n-1, independent per epoch).
std::vector<std::size_t> epoch_shuffle(std::uint64_t seed, std::size_t epoch, std::size_t n);

/// One inner-max/outer-min step: PGD on the cross-entropy objective, the
/// combined loss on (x, x_adv), one SGD-momentum update of the tuned
/// parameters. Frozen parameters and prototypes are untouched. Throws
/// NumericError (with a loss dump) on a non-finite loss.
TrainLogRecord train_step(DualEncoderModel& model, OptimizerState& opt, const Tensor& x,
                          const Labels& y, const TrainConfig& cfg);

using CheckpointHook =
    std::function<void(const DualEncoderModel&, const OptimizerState&, std::size_t epoch)>;

struct FitResult {
    std::vector<TrainLogRecord> records;
};

/// epochs x ceil(N / batch) train steps over per-epoch seeded shuffles.
/// Fully deterministic under a fixed (seed, config, dataset). The hook, when
/// set, runs at the end of every epoch.
FitResult fit(DualEncoderModel& model, const Dataset& dataset, const TrainConfig& cfg,
              const CheckpointHook& on_epoch_end = nullptr);

/// Copies the tuned parameters into the frozen slot (the reference model
/// for the confidence-aware and regularizer terms). Re-snapshotting after
/// training steps requires force.
void snapshot_frozen(DualEncoderModel& model, bool force = false);

/// Clean pre-training variant of a config: no auxiliary terms, degenerate
/// inner attack, cross-entropy on the clean batch.
TrainConfig clean_variant(TrainConfig cfg, std::size_t epochs);

} // namespace caw
