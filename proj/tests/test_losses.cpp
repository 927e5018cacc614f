#include <cmath>

#include "caw/attacks.hpp"
#include "caw/losses.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace caw;
using namespace caw::testing;

namespace {

DualEncoderModel make_model(std::uint64_t seed, std::size_t c = 3, std::size_t d_in = 4,
                            std::size_t d_e = 4) {
    EncoderConfig cfg{d_in, {6}, d_e};
    return DualEncoderModel(ImageEncoder::random_init(cfg, seed),
                            ClassPrototypeSet::make(c, d_e, seed + 1), 0.07);
}

// Per-sample high-precision log-sum-exp cross-entropy oracle.
double ce_oracle(const Tensor& logits, const Labels& y) {
    const std::size_t b = logits.rows(), c = logits.cols();
    long double total = 0.0L;
    for (std::size_t i = 0; i < b; ++i) {
        long double m = logits.at(i, 0);
        for (std::size_t j = 0; j < c; ++j) {
            m = std::max<long double>(m, logits.at(i, j));
        }
        long double denom = 0.0L;
        for (std::size_t j = 0; j < c; ++j) {
            denom += expl(static_cast<long double>(logits.at(i, j)) - m);
        }
        total += m + logl(denom) - logits.at(i, static_cast<std::size_t>(y[i]));
    }
    return static_cast<double>(total / b);
}

double kl_row_oracle(std::span<const double> p, std::span<const double> q) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += static_cast<long double>(p[i]) *
               (logl(std::max<long double>(p[i], 1e-12L)) -
                logl(std::max<long double>(q[i], 1e-12L)));
    }
    return static_cast<double>(acc);
}

// Gradient of a scalar loss with respect to every tuned parameter, via
// central differences over in-place parameter mutation.
std::vector<std::vector<double>> fd_param_grads(DualEncoderModel& model,
                                                const std::function<double()>& loss_value,
                                                double h = 1e-5) {
    std::vector<std::vector<double>> grads;
    for (Tensor& p : model.tuned().parameters()) {
        std::vector<double> g(p.size());
        auto values = p.data_mut();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + h;
            const double hi = loss_value();
            values[i] = original - h;
            const double lo = loss_value();
            values[i] = original;
            g[i] = (hi - lo) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

} // namespace

TEST_SUITE("losses") {

TEST_CASE("cross entropy of uniform logits is ln C") {
    Tensor logits = Tensor::from_rows({{0.3, 0.3, 0.3, 0.3}, {-1, -1, -1, -1}});
    Labels y = {2, 0};
    CHECK(cross_entropy_loss(logits, y).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy vanishes for confidently correct logits") {
    Tensor logits = Tensor::from_rows({{60.0, 0.0, 0.0}});
    Labels y = {0};
    CHECK(cross_entropy_loss(logits, y).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross entropy matches the per-sample log-sum-exp oracle") {
    Rng rng(40);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor logits = random_tensor({5, 4}, rng, -4, 4, false);
        Labels y = random_labels(5, 4, rng);
        CHECK(cross_entropy_loss(logits, y).item() ==
              doctest::Approx(ce_oracle(logits, y)).epsilon(1e-12));
    }
}

TEST_CASE("identical pipelines give identical distributions") {
    DualEncoderModel model = make_model(50);
    Rng rng(51);
    Tensor x = random_tensor({6, 4}, rng, 0, 1, false);
    auto [p_adv, p_clean] = prediction_distributions(model, x, x.clone(),
                                                     model.prototypes().vectors,
                                                     model.temperature());
    CHECK(bitwise_equal(p_adv.data(), p_clean.data()));
}

TEST_CASE("orthogonal feature with symmetric prototypes gives the uniform pair") {
    ClassPrototypeSet protos;
    protos.num_classes = 2;
    protos.embed_dim = 3;
    protos.vectors = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}});
    protos.names = {"a", "b"};
    DualEncoderModel model(ImageEncoder::identity(3), protos, 0.07);
    Tensor x = Tensor::from_rows({{0, 0, 1}});
    auto [p_adv, p_clean] =
        prediction_distributions(model, x, x.clone(), protos.vectors, 0.07);
    CHECK(p_adv.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p_adv.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p_clean.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("distributions match the encode/logits/softmax pipeline recomposition") {
    DualEncoderModel model = make_model(52);
    // Make the tuned encoder diverge from the snapshot.
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.1;
        }
    }
    Rng rng(53);
    Tensor x_clean = random_tensor({5, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({5, 4}, rng, 0, 1, false);
    auto [p_adv, p_clean] = prediction_distributions(model, x_clean, x_adv,
                                                     model.prototypes().vectors,
                                                     model.temperature());
    NoGradGuard no_grad;
    Tensor expect_adv = softmax_rows(zero_shot_logits(
        encode(model.tuned(), x_adv), model.prototypes().vectors, model.temperature()));
    Tensor expect_clean = softmax_rows(zero_shot_logits(
        encode(model.frozen(), x_clean), model.prototypes().vectors, model.temperature()));
    CHECK(bitwise_equal(p_adv.data(), expect_adv.data()));
    CHECK(bitwise_equal(p_clean.data(), expect_clean.data()));
}

TEST_CASE("misaligned clean/adversarial batches are rejected") {
    DualEncoderModel model = make_model(54);
    CHECK_THROWS_AS(prediction_distributions(model, Tensor::zeros({3, 4}),
                                             Tensor::zeros({4, 4}),
                                             model.prototypes().vectors, 0.07),
                    DimensionError);
}

TEST_CASE("the clean distribution carries no gradient") {
    DualEncoderModel model = make_model(55);
    Rng rng(56);
    Tensor x = random_tensor({4, 4}, rng, 0, 1, false);
    auto [p_adv, p_clean] = prediction_distributions(model, x, x.clone(),
                                                     model.prototypes().vectors,
                                                     model.temperature());
    CHECK(p_adv.tracked());
    CHECK_FALSE(p_clean.tracked());
    ComputeGraph::current().clear();
}

TEST_CASE("true label probability gathers the right cells") {
    Tensor one_hot = Tensor::from_rows({{0, 1, 0}});
    CHECK(true_label_prob(one_hot, {1}).data()[0] == 1.0);
    Tensor uniform = Tensor::from_rows({{0.2, 0.2, 0.2, 0.2, 0.2}});
    CHECK(true_label_prob(uniform, {3}).data()[0] == doctest::Approx(0.2));
    Rng rng(57);
    Tensor p = random_stochastic(6, 4, rng, false);
    Labels y = random_labels(6, 4, rng);
    Tensor gathered = true_label_prob(p, y);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(gathered.data()[i] == p.at(i, static_cast<std::size_t>(y[i])));
        CHECK(gathered.data()[i] >= 0.0);
        CHECK(gathered.data()[i] <= 1.0);
    }
    CHECK_THROWS_AS(true_label_prob(p, Labels{0, 1, 2, 3, 0, 9}), DomainError);
}

TEST_CASE("confidence-aware loss is zero for matching distributions") {
    Rng rng(58);
    Tensor p = random_stochastic(4, 3, rng, false);
    CHECK(confidence_aware_loss(p, p.clone(), {0, 1, 2, 0}).item() == 0.0);
}

TEST_CASE("a fully confident sample is down-weighted to zero") {
    Tensor p_adv = Tensor::from_rows({{1.0, 0.0}});
    Tensor p_clean = Tensor::from_rows({{0.5, 0.5}});
    // KL is ln 2 but the weight 1 - P_adv[0,0] is 0.
    CHECK(kl_divergence_rows(p_adv, p_clean).data()[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(confidence_aware_loss(p_adv, p_clean, {0}).item() == 0.0);
}

TEST_CASE("confidence-aware loss matches the term-by-term oracle in both directions") {
    Rng rng(59);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor p_adv = random_stochastic(5, 4, rng, false);
        Tensor p_clean = random_stochastic(5, 4, rng, false);
        Labels y = random_labels(5, 4, rng);
        long double expect_adv_first = 0.0L, expect_clean_first = 0.0L;
        for (std::size_t i = 0; i < 5; ++i) {
            const double w = 1.0 - p_adv.at(i, static_cast<std::size_t>(y[i]));
            expect_adv_first +=
                kl_row_oracle(p_adv.data().subspan(i * 4, 4),
                              p_clean.data().subspan(i * 4, 4)) *
                w;
            expect_clean_first +=
                kl_row_oracle(p_clean.data().subspan(i * 4, 4),
                              p_adv.data().subspan(i * 4, 4)) *
                w;
        }
        CHECK(confidence_aware_loss(p_adv, p_clean, y, true, KlDirection::adv_first).item() ==
              doctest::Approx(static_cast<double>(expect_adv_first / 5)).epsilon(1e-12));
        CHECK(
            confidence_aware_loss(p_adv, p_clean, y, true, KlDirection::clean_first).item() ==
            doctest::Approx(static_cast<double>(expect_clean_first / 5)).epsilon(1e-12));
    }
}

TEST_CASE("feature regularizer is zero at the snapshot") {
    DualEncoderModel model = make_model(60);
    Rng rng(61);
    Tensor x = random_tensor({5, 4}, rng, 0, 1, false);
    CHECK(feature_reg_loss(model, x).item() == 0.0);
}

TEST_CASE("feature regularizer reproduces the 3-4-5 norm") {
    EncoderConfig cfg{3, {}, 4}; // single linear layer
    ImageEncoder enc = ImageEncoder::random_init(cfg, 62);
    // Zero weights: output rows equal the bias.
    auto w = enc.parameters()[0].data_mut();
    std::fill(w.begin(), w.end(), 0.0);
    auto b = enc.parameters()[1].data_mut();
    std::fill(b.begin(), b.end(), 0.0);
    DualEncoderModel model(std::move(enc), ClassPrototypeSet::make(2, 4, 63), 0.07);
    // Shift the tuned bias after the snapshot: difference is [3,4,0,0].
    auto bias = model.tuned().parameters()[1].data_mut();
    bias[0] = 3.0;
    bias[1] = 4.0;
    Tensor x = Tensor::zeros({6, 3});
    CHECK(feature_reg_loss(model, x).item() == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("feature regularizer matches a per-sample norm oracle") {
    DualEncoderModel model = make_model(64);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.21;
        }
    }
    Rng rng(65);
    Tensor x = random_tensor({7, 4}, rng, 0, 1, false);
    double expect = 0.0;
    {
        NoGradGuard no_grad;
        Tensor tuned_f = encode(model.tuned(), x);
        Tensor frozen_f = encode(model.frozen(), x);
        for (std::size_t i = 0; i < 7; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                const double d = tuned_f.at(i, j) - frozen_f.at(i, j);
                acc += d * d;
            }
            expect += std::sqrt(acc);
        }
        expect /= 7.0;
    }
    CHECK(feature_reg_loss(model, x).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("alpha=beta=0 reduces the total to plain cross-entropy") {
    DualEncoderModel model = make_model(66);
    Rng rng(67);
    Tensor x = random_tensor({5, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({5, 4}, rng, 0, 1, false);
    Labels y = random_labels(5, 3, rng);
    CawConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    LossResult res = total_loss(model, x, x_adv, y, cfg);
    CHECK(res.breakdown.l_total == res.breakdown.l_ce);
    CHECK(res.breakdown.l_ca == 0.0);
    CHECK(res.breakdown.l_reg == 0.0);
    ComputeGraph::current().clear();
}

TEST_CASE("at the initialization state the auxiliary terms vanish") {
    DualEncoderModel model = make_model(68);
    Rng rng(69);
    Tensor x = random_tensor({5, 4}, rng, 0, 1, false);
    Labels y = random_labels(5, 3, rng);
    CawConfig cfg; // alpha=6, beta=3 defaults
    LossResult res = total_loss(model, x, x.clone(), y, cfg);
    CHECK(res.breakdown.l_ca == 0.0);
    CHECK(res.breakdown.l_reg == 0.0);
    CHECK(res.breakdown.l_total == res.breakdown.l_ce);
    ComputeGraph::current().clear();
}

TEST_CASE("total equals ce + alpha*ca + beta*reg at the documented weights") {
    Rng rng(70);
    for (int rep = 0; rep < 50; ++rep) {
        DualEncoderModel model = make_model(700 + rep);
        for (auto& p : model.tuned().parameters()) {
            for (double& v : p.data_mut()) {
                v += 0.1;
            }
        }
        Tensor x = random_tensor({4, 4}, rng, 0, 1, false);
        Tensor x_adv = random_tensor({4, 4}, rng, 0, 1, false);
        Labels y = random_labels(4, 3, rng);
        CawConfig cfg;
        cfg.alpha = 6.0;
        cfg.beta = 3.0;
        LossResult res = total_loss(model, x, x_adv, y, cfg);
        const double expect = res.breakdown.l_ce + cfg.alpha * res.breakdown.l_ca +
                              cfg.beta * res.breakdown.l_reg;
        CHECK(std::abs(res.breakdown.l_total - expect) <= 1e-10);
        CHECK(res.breakdown.l_ca >= -1e-9);
        CHECK(res.breakdown.l_reg >= 0.0);
        CHECK(res.breakdown.mean_confidence_weight >= 0.0);
        CHECK(res.breakdown.mean_confidence_weight <= 1.0);
        ComputeGraph::current().clear();
    }
}

TEST_CASE("total is positively homogeneous in (alpha, beta)") {
    DualEncoderModel model = make_model(71);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.15;
        }
    }
    Rng rng(72);
    Tensor x = random_tensor({4, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({4, 4}, rng, 0, 1, false);
    Labels y = random_labels(4, 3, rng);
    CawConfig cfg;
    cfg.alpha = 2.5;
    cfg.beta = 1.25;
    CawConfig doubled = cfg;
    doubled.alpha *= 2.0;
    doubled.beta *= 2.0;
    LossResult base = total_loss(model, x, x_adv, y, cfg);
    LossResult twice = total_loss(model, x, x_adv, y, doubled);
    CHECK(std::abs((twice.breakdown.l_total - twice.breakdown.l_ce) -
                   2.0 * (base.breakdown.l_total - base.breakdown.l_ce)) <= 1e-10);
    ComputeGraph::current().clear();
}

TEST_CASE("no gradient ever reaches frozen parameters or prototypes") {
    DualEncoderModel model = make_model(73);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.1;
        }
    }
    Rng rng(74);
    Tensor x = random_tensor({4, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({4, 4}, rng, 0, 1, false);
    Labels y = random_labels(4, 3, rng);
    LossResult res = total_loss(model, x, x_adv, y, CawConfig{});
    res.total.backward();
    for (const Tensor& p : model.tuned().parameters()) {
        CHECK(p.has_grad());
    }
    for (const Tensor& p : model.frozen().parameters()) {
        CHECK_FALSE(p.has_grad());
    }
    CHECK_FALSE(model.prototypes().vectors.has_grad());
    for (const Tensor& p : model.tuned().parameters()) {
        Tensor(p).zero_grad();
    }
}

TEST_CASE("loss components are permutation-invariant over the batch") {
    DualEncoderModel model = make_model(75);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.1;
        }
    }
    Rng rng(76);
    const std::size_t b = 6;
    Tensor x = random_tensor({b, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({b, 4}, rng, 0, 1, false);
    Labels y = random_labels(b, 3, rng);
    LossResult base = total_loss(model, x, x_adv, y, CawConfig{});
    // Reverse the batch.
    auto permute = [&](const Tensor& t) {
        std::vector<double> v(t.size());
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                v[i * 4 + j] = t.at(b - 1 - i, j);
            }
        }
        return Tensor::from_data({b, 4}, std::move(v));
    };
    Labels y_rev(y.rbegin(), y.rend());
    LossResult perm = total_loss(model, permute(x), permute(x_adv), y_rev, CawConfig{});
    CHECK(perm.breakdown.l_ce == doctest::Approx(base.breakdown.l_ce).epsilon(1e-12));
    CHECK(perm.breakdown.l_ca == doctest::Approx(base.breakdown.l_ca).epsilon(1e-12));
    CHECK(perm.breakdown.l_reg == doctest::Approx(base.breakdown.l_reg).epsilon(1e-12));
    ComputeGraph::current().clear();
}

TEST_CASE("backward of the total loss matches finite differences over parameters") {
    // The tensor-module contract exercised end to end: a random 2-class,
    // 4-dim model with every loss term active.
    DualEncoderModel model = make_model(77, 2, 4, 4);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.12;
        }
    }
    Rng rng(78);
    Tensor x = random_tensor({3, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({3, 4}, rng, 0, 1, false);
    Labels y = random_labels(3, 2, rng);
    CawConfig cfg;
    cfg.detach_weight = false; // full gradient path

    LossResult res = total_loss(model, x, x_adv, y, cfg);
    res.total.backward();
    std::vector<std::vector<double>> analytic;
    for (const Tensor& p : model.tuned().parameters()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
        Tensor(p).zero_grad();
    }

    auto loss_value = [&] {
        NoGradGuard no_grad;
        return total_loss(model, x, x_adv, y, cfg).breakdown.l_total;
    };
    auto fd = fd_param_grads(model, loss_value);
    for (std::size_t t = 0; t < analytic.size(); ++t) {
        CHECK(max_rel_err(analytic[t], fd[t]) < 1e-4);
    }
}

TEST_CASE("detached weights behave as constants in the gradient") {
    DualEncoderModel model = make_model(79, 3, 4, 4);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.1;
        }
    }
    Rng rng(80);
    Tensor x = random_tensor({4, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({4, 4}, rng, 0, 1, false);
    Labels y = random_labels(4, 3, rng);
    const Tensor& protos = model.prototypes().vectors;
    const double tau = model.temperature();

    // Analytic gradient of l_ca with detached weights.
    auto [p_adv, p_clean] = prediction_distributions(model, x, x_adv, protos, tau);
    confidence_aware_loss(p_adv, p_clean, y, /*detach_weight=*/true).backward();
    std::vector<std::vector<double>> analytic;
    for (const Tensor& p : model.tuned().parameters()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
        Tensor(p).zero_grad();
    }

    // Frozen numeric weights captured at the base state.
    std::vector<double> weights;
    {
        NoGradGuard no_grad;
        auto [pa, pc] = prediction_distributions(model, x, x_adv, protos, tau);
        for (std::size_t i = 0; i < 4; ++i) {
            weights.push_back(1.0 - pa.at(i, static_cast<std::size_t>(y[i])));
        }
    }
    auto weight_frozen_value = [&] {
        NoGradGuard no_grad;
        auto [pa, pc] = prediction_distributions(model, x, x_adv, protos, tau);
        Tensor kl = kl_divergence_rows(pa, pc);
        double acc = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            acc += kl.data()[i] * weights[i];
        }
        return acc / 4.0;
    };
    auto fd = fd_param_grads(model, weight_frozen_value);
    for (std::size_t t = 0; t < analytic.size(); ++t) {
        CHECK(max_rel_err(analytic[t], fd[t]) < 1e-4);
    }
}

TEST_CASE("the finite-difference op cross-checks backward on the confidence-aware loss") {
    // The oracle checking the oracle: finite_diff_grad against backward,
    // here with respect to the adversarial input batch.
    DualEncoderModel model = make_model(81, 3, 4, 4);
    for (auto& p : model.tuned().parameters()) {
        for (double& v : p.data_mut()) {
            v += 0.1;
        }
    }
    Rng rng(82);
    Tensor x_clean = random_tensor({3, 4}, rng, 0, 1, false);
    Tensor x_adv = random_tensor({3, 4}, rng, 0, 1, true);
    Labels y = random_labels(3, 3, rng);
    const Tensor& protos = model.prototypes().vectors;
    const double tau = model.temperature();

    auto build = [&](const Tensor& v) {
        auto [p_adv, p_clean] = prediction_distributions(model, x_clean, v, protos, tau);
        return confidence_aware_loss(p_adv, p_clean, y, /*detach_weight=*/false);
    };
    build(x_adv).backward();
    Tensor fd = finite_diff_grad([&](const Tensor& v) { return build(v).item(); }, x_adv,
                                 1e-5);
    CHECK(max_rel_err(x_adv.grad(), fd.data()) < 1e-4);
    for (const Tensor& p : model.tuned().parameters()) {
        Tensor(p).zero_grad();
    }
}

TEST_CASE("caw config validation") {
    CawConfig cfg;
    cfg.alpha = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.alpha = 6.0;
    cfg.beta = -0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

} // TEST_SUITE
