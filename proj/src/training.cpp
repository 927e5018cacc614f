#include "caw/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "caw/rng.hpp"

namespace caw {

void TrainConfig::validate() const {
    loss.validate();
    inner_attack.validate();
    if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be >= 0");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("momentum must be in [0, 1)");
    }
    if (weight_decay < 0.0 || !std::isfinite(weight_decay)) {
        throw ConfigError("weight_decay must be >= 0");
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size must be >= 1");
    }
}

OptimizerState OptimizerState::for_model(const DualEncoderModel& model) {
    OptimizerState state;
    for (const Tensor& p : model.tuned().parameters()) {
        state.velocity.emplace_back(p.size(), 0.0);
    }
    return state;
}

std::uint64_t inner_attack_seed(std::uint64_t train_seed, std::uint64_t step) {
    return Rng(train_seed ^ 0xa77ac4ULL).fork(step).next_u64();
}

std::vector<std::size_t> epoch_shuffle(std::uint64_t seed, std::size_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(seed ^ 0x73687566ULL).fork(epoch); // "shuf"
    rng.shuffle(order);
    return order;
}

namespace {

void zero_param_grads(const ImageEncoder& encoder) {
    for (const Tensor& p : encoder.parameters()) {
        Tensor(p).zero_grad();
    }
}

std::pair<Tensor, double> inner_maximization(DualEncoderModel& model, const Tensor& x,
                                             const Labels& y, const TrainConfig& cfg,
                                             std::uint64_t step) {
    const AttackConfig& atk = cfg.inner_attack;
    if (atk.epsilon == 0.0 && !atk.random_start) {
        // Degenerate budget: x_adv == x exactly; skip the PGD loop.
        Labels pred = predict(model, x);
        std::size_t flipped = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            flipped += pred[i] != y[i] ? 1 : 0;
        }
        return {x.clone(), y.empty() ? 0.0 : static_cast<double>(flipped) / y.size()};
    }
    AttackResult res = pgd_attack(model, x, y, atk, inner_attack_seed(cfg.seed, step));
    double success = 0.0;
    for (std::uint8_t f : res.success_mask) {
        success += f;
    }
    return {res.x_adv, res.success_mask.empty() ? 0.0 : success / res.success_mask.size()};
}

} // namespace

TrainLogRecord train_step(DualEncoderModel& model, OptimizerState& opt, const Tensor& x,
                          const Labels& y, const TrainConfig& cfg) {
    cfg.validate();
    if (x.ndim() != 2 || x.rows() == 0) {
        throw DimensionError("train_step: batch must be a nonempty matrix");
    }
    auto& params = model.tuned().parameters();
    if (opt.velocity.size() != params.size()) {
        throw ContractError("train_step: optimizer state does not match the model");
    }
    const auto t0 = std::chrono::steady_clock::now();

    auto [x_adv, attack_success] = inner_maximization(model, x, y, cfg, opt.step);

    zero_param_grads(model.tuned());
    LossResult loss = total_loss(model, x, x_adv, y, cfg.loss);
    loss.total.backward();

    for (std::size_t t = 0; t < params.size(); ++t) {
        auto theta = params[t].data_mut();
        auto& v = opt.velocity[t];
        const bool has_grad = params[t].has_grad();
        auto g = has_grad ? params[t].grad() : std::span<const double>{};
        for (std::size_t i = 0; i < theta.size(); ++i) {
            double grad = has_grad ? g[i] : 0.0;
            if (cfg.weight_decay != 0.0) {
                grad += cfg.weight_decay * theta[i];
            }
            v[i] = cfg.momentum * v[i] + grad;
            theta[i] -= cfg.learning_rate * v[i];
        }
    }
    zero_param_grads(model.tuned());

    ++opt.step;
    model.note_train_step();

    TrainLogRecord record;
    record.step = opt.step;
    record.loss = loss.breakdown;
    record.attack_success_rate = attack_success;
    record.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    return record;
}

FitResult fit(DualEncoderModel& model, const Dataset& dataset, const TrainConfig& cfg,
              const CheckpointHook& on_epoch_end) {
    cfg.validate();
    const std::size_t n = dataset.size();
    const std::size_t d = dataset.x.ndim() == 2 ? dataset.x.cols() : 0;
    OptimizerState opt = OptimizerState::for_model(model);
    FitResult result;
    if (cfg.epochs == 0) {
        return result;
    }
    if (n == 0) {
        throw DimensionError("fit: dataset is empty");
    }

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_shuffle(cfg.seed, epoch, n);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, n - start);
            std::vector<double> xb(b * d);
            Labels yb(b);
            for (std::size_t i = 0; i < b; ++i) {
                const std::size_t src = order[start + i];
                for (std::size_t j = 0; j < d; ++j) {
                    xb[i * d + j] = dataset.x.at(src, j);
                }
                yb[i] = dataset.y[src];
            }
            TrainLogRecord record =
                train_step(model, opt, Tensor::from_data({b, d}, std::move(xb)), yb, cfg);
            record.epoch = epoch;
            result.records.push_back(record);
        }
        if (on_epoch_end) {
            on_epoch_end(model, opt, epoch);
        }
    }
    return result;
}

void snapshot_frozen(DualEncoderModel& model, bool force) { model.snapshot_frozen(force); }

TrainConfig clean_variant(TrainConfig cfg, std::size_t epochs) {
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    cfg.loss.ce_on_adv = true; // x_adv == x under the degenerate attack
    cfg.inner_attack.epsilon = 0.0;
    cfg.inner_attack.step_size = 0.0;
    cfg.inner_attack.steps = 1;
    cfg.inner_attack.random_start = false;
    cfg.epochs = epochs;
    return cfg;
}

} // namespace caw
