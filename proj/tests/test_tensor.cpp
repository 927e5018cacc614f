#include <cmath>

#include "caw/tensor.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace caw;
using namespace caw::testing;

namespace {

// Independent long-double softmax used as the high-precision oracle.
std::vector<double> softmax_oracle(const std::vector<double>& row) {
    long double m = row[0];
    for (double v : row) {
        m = std::max<long double>(m, v);
    }
    long double denom = 0.0L;
    std::vector<long double> e(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        e[i] = expl(static_cast<long double>(row[i]) - m);
        denom += e[i];
    }
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = static_cast<double>(e[i] / denom);
    }
    return out;
}

// Term-by-term long-double KL with the same 1e-12 floor.
double kl_oracle(std::span<const double> p, std::span<const double> q) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const long double pv = p[i];
        const long double qv = q[i];
        acc += pv * (logl(std::max<long double>(pv, 1e-12L)) -
                     logl(std::max<long double>(qv, 1e-12L)));
    }
    return static_cast<double>(acc);
}

} // namespace

TEST_SUITE("tensor") {

TEST_CASE("softmax of a constant row is uniform") {
    Tensor t = softmax_rows(Tensor::from_rows({{0.0, 0.0, 0.0}}));
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(t.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax analytic two-class case") {
    Tensor t = softmax_rows(Tensor::from_rows({{std::log(2.0), 0.0}}));
    CHECK(t.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(t.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax survives extreme logits and matches the long-double oracle") {
    Tensor t = softmax_rows(Tensor::from_rows({{1000.0, 0.0}}));
    CHECK(std::isfinite(t.at(0, 0)));
    auto oracle = softmax_oracle({1000.0, 0.0});
    CHECK(t.at(0, 0) == doctest::Approx(oracle[0]).epsilon(1e-12));
    CHECK(t.at(0, 1) == doctest::Approx(oracle[1]).epsilon(1e-12));
    CHECK(t.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one within 1e-9 even for ranges above 700") {
    Rng rng(101);
    for (int rep = 0; rep < 100; ++rep) {
        const double scale = rep % 2 == 0 ? 1.0 : 1000.0;
        Tensor logits = random_tensor({4, 7}, rng, -scale, scale, false);
        Tensor p = softmax_rows(logits);
        for (std::size_t i = 0; i < 4; ++i) {
            double rowsum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                const double v = p.at(i, j);
                CHECK(v >= 0.0);
                rowsum += v;
            }
            CHECK(std::abs(rowsum - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("softmax rejects empty input") {
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({0, 3})), DimensionError);
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({3, 0})), DimensionError);
}

TEST_CASE("kl of identical distributions is exactly zero") {
    Tensor p = Tensor::from_rows({{0.5, 0.5}, {0.125, 0.875}});
    Tensor kl = kl_divergence_rows(p, p.clone());
    CHECK(kl.data()[0] == 0.0);
    CHECK(kl.data()[1] == 0.0);
}

TEST_CASE("kl closed form: point mass vs uniform") {
    Tensor p = Tensor::from_rows({{1.0, 0.0}});
    Tensor q = Tensor::from_rows({{0.5, 0.5}});
    Tensor kl = kl_divergence_rows(p, q);
    CHECK(kl.data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("kl matches term-by-term high-precision oracle on random rows") {
    Rng rng(202);
    for (int rep = 0; rep < 100; ++rep) {
        Tensor p = random_stochastic(3, 5, rng, false);
        Tensor q = random_stochastic(3, 5, rng, false);
        Tensor kl = kl_divergence_rows(p, q);
        for (std::size_t i = 0; i < 3; ++i) {
            const double expect =
                kl_oracle(p.data().subspan(i * 5, 5), q.data().subspan(i * 5, 5));
            CHECK(kl.data()[i] == doctest::Approx(expect).epsilon(1e-12));
            CHECK(kl.data()[i] >= -1e-9);
        }
    }
}

TEST_CASE("kl rejects shape mismatches and non-stochastic rows") {
    Tensor p = Tensor::from_rows({{0.5, 0.5}});
    CHECK_THROWS_AS(kl_divergence_rows(p, Tensor::from_rows({{0.2, 0.3, 0.5}})),
                    DimensionError);
    CHECK_THROWS_AS(kl_divergence_rows(p, Tensor::from_rows({{0.9, 0.3}})), DomainError);
    CHECK_THROWS_AS(kl_divergence_rows(Tensor::from_rows({{-0.2, 1.2}}), p), DomainError);
}

TEST_CASE("backward of sum gives all-ones") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(x).backward();
    for (double g : x.grad()) {
        CHECK(g == 1.0);
    }
}

TEST_CASE("backward of sum of squares") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    sum(mul(x, x)).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
    CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("backward rejects non-scalar roots") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(y.backward(), ContractError);
    ComputeGraph::current().clear();
}

TEST_CASE("backward twice consumes the graph") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor root = sum(mul(x, x));
    root.backward();
    CHECK_THROWS_AS(root.backward(), GraphConsumedError);
}

TEST_CASE("backward of an untracked root is a contract error") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, false);
    Tensor root = sum(x);
    CHECK_THROWS_AS(root.backward(), ContractError);
}

TEST_CASE("finite differences of sum of squares at x=3") {
    Tensor x = Tensor::from_data({1}, {3.0});
    Tensor g = finite_diff_grad([](const Tensor& v) { return sum(mul(v, v)).item(); }, x, 1e-5);
    CHECK(g.data()[0] == doctest::Approx(6.0).epsilon(1e-6));
}

TEST_CASE("finite differences of a constant are zero") {
    Tensor x = Tensor::from_data({4}, {1, 2, 3, 4});
    Tensor g = finite_diff_grad([](const Tensor&) { return 7.5; }, x, 1e-5);
    for (double v : g.data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("finite differences reject non-finite evaluations and bad h") {
    Tensor x = Tensor::from_data({1}, {1.0});
    CHECK_THROWS_AS(
        finite_diff_grad([](const Tensor&) { return std::nan(""); }, x, 1e-5),
        NumericError);
    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.0),
                    ContractError);
}

TEST_CASE("gradients match finite differences per op over 100 seeded cases") {
    struct OpCase {
        const char* name;
        Shape shape;
        double lo, hi;
        double h;
        std::function<Tensor(const Tensor&, Rng&)> build;
    };
    // Each builder folds the op output into a scalar through a fixed
    // random weighting so generic upstream gradients are exercised.
    auto weighted = [](const Tensor& t, Rng& rng) {
        Tensor w = random_tensor(t.shape(), rng, -1.0, 1.0, false);
        return sum(mul(t, w));
    };
    std::vector<OpCase> cases = {
        {"add", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(add(x, random_tensor({3, 4}, rng, -2, 2, false)), rng);
         }},
        {"sub", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(sub(random_tensor({3, 4}, rng, -2, 2, false), x), rng);
         }},
        {"mul", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(mul(x, random_tensor({3, 4}, rng, -2, 2, false)), rng);
         }},
        {"add_scalar", {5}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(add_scalar(x, 1.37), rng); }},
        {"mul_scalar", {5}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(mul_scalar(x, -2.21), rng); }},
        {"rsub_scalar", {5}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(rsub_scalar(0.8, x), rng); }},
        {"matmul_lhs", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(matmul(x, random_tensor({4, 2}, rng, -2, 2, false)), rng);
         }},
        {"matmul_rhs", {4, 2}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(matmul(random_tensor({3, 4}, rng, -2, 2, false), x), rng);
         }},
        {"matmul_nt_lhs", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(matmul_nt(x, random_tensor({5, 4}, rng, -2, 2, false)), rng);
         }},
        {"matmul_nt_rhs", {5, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(matmul_nt(random_tensor({3, 4}, rng, -2, 2, false), x), rng);
         }},
        {"transpose", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(transpose(x), rng); }},
        {"add_row_broadcast_x", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(add_row_broadcast(x, random_tensor({4}, rng, -2, 2, false)), rng);
         }},
        {"add_row_broadcast_row", {4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) {
             return weighted(add_row_broadcast(random_tensor({3, 4}, rng, -2, 2, false), x),
                             rng);
         }},
        {"tanh", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(tanh(x), rng); }},
        {"exp", {3, 4}, -2, 2, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(exp(x), rng); }},
        {"log", {3, 4}, 0.1, 3.0, 1e-6,
         [&](const Tensor& x, Rng& rng) { return weighted(log(x), rng); }},
        {"sum", {3, 4}, -2, 2, 1e-5, [&](const Tensor& x, Rng&) { return sum(x); }},
        {"mean", {3, 4}, -2, 2, 1e-5, [&](const Tensor& x, Rng&) { return mean(x); }},
        {"softmax_rows", {3, 5}, -3, 3, 1e-5,
         [&](const Tensor& x, Rng& rng) { return weighted(softmax_rows(x), rng); }},
        {"l2_norm_rows", {3, 4}, 0.3, 2.0, 1e-6,
         [&](const Tensor& x, Rng& rng) { return weighted(l2_norm_rows(x), rng); }},
        {"normalize_rows", {3, 4}, 0.3, 2.0, 1e-6,
         [&](const Tensor& x, Rng& rng) { return weighted(normalize_rows(x), rng); }},
    };
    for (const auto& op : cases) {
        CAPTURE(op.name);
        Rng rng(9000 + std::hash<std::string>{}(op.name) % 1000);
        double worst = 0.0;
        for (int rep = 0; rep < 100; ++rep) {
            Tensor x = random_tensor(op.shape, rng, op.lo, op.hi, true);
            Rng weights = rng.fork(rep);
            auto build = [&](const Tensor& v) {
                Rng w = weights;
                return op.build(v, w);
            };
            worst = std::max(worst, check_gradient(build, x, op.h));
        }
        CHECK_MESSAGE(worst < 1e-4, op.name << " max rel err " << worst);
    }
}

TEST_CASE("gradients match finite differences for label-indexed ops") {
    Rng rng(77);
    double worst_ce = 0.0, worst_gather = 0.0, worst_margin = 0.0, worst_kl_p = 0.0,
           worst_kl_q = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        Labels y = random_labels(4, 5, rng);
        {
            Tensor logits = random_tensor({4, 5}, rng, -3, 3, true);
            worst_ce = std::max(
                worst_ce,
                check_gradient(
                    [&](const Tensor& v) { return cross_entropy_with_logits(v, y); }, logits));
        }
        {
            Tensor p = random_tensor({4, 5}, rng, 0.1, 1.0, true);
            Rng w = rng.fork(rep);
            Tensor weights = random_tensor({4}, w, -1, 1, false);
            worst_gather = std::max(
                worst_gather, check_gradient(
                                  [&](const Tensor& v) {
                                      return sum(mul(gather_rows(v, y), weights));
                                  },
                                  p));
        }
        {
            Tensor logits = random_tensor({4, 5}, rng, -3, 3, true);
            worst_margin = std::max(
                worst_margin,
                check_gradient([&](const Tensor& v) { return mean(cw_margin(v, y)); }, logits));
        }
        {
            // KL through both arguments; h below the 1e-6 stochasticity slack.
            Tensor p = random_stochastic(3, 4, rng, true);
            Tensor q = random_stochastic(3, 4, rng, false);
            worst_kl_p = std::max(
                worst_kl_p,
                check_gradient(
                    [&](const Tensor& v) { return mean(kl_divergence_rows(v, q)); }, p, 1e-7));
            Tensor p2 = random_stochastic(3, 4, rng, false);
            Tensor q2 = random_stochastic(3, 4, rng, true);
            worst_kl_q = std::max(
                worst_kl_q,
                check_gradient(
                    [&](const Tensor& v) { return mean(kl_divergence_rows(p2, v)); }, q2,
                    1e-7));
        }
    }
    CHECK_MESSAGE(worst_ce < 1e-4, "cross_entropy_with_logits rel err " << worst_ce);
    CHECK_MESSAGE(worst_gather < 1e-4, "gather_rows rel err " << worst_gather);
    CHECK_MESSAGE(worst_margin < 1e-4, "cw_margin rel err " << worst_margin);
    CHECK_MESSAGE(worst_kl_p < 1e-4, "kl p-side rel err " << worst_kl_p);
    CHECK_MESSAGE(worst_kl_q < 1e-4, "kl q-side rel err " << worst_kl_q);
}

TEST_CASE("detach blocks gradient flow") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor d = mul(x, x).detach();
    CHECK_FALSE(d.tracked());
    Tensor y = Tensor::from_data({3}, {1, 1, 1}, true);
    sum(mul(d, y)).backward();
    CHECK_FALSE(x.has_grad());
    CHECK(y.grad()[0] == 1.0);
    CHECK(y.grad()[2] == 9.0);
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    {
        NoGradGuard guard;
        Tensor y = sum(mul(x, x));
        CHECK_FALSE(y.tracked());
        CHECK(ComputeGraph::current().size() == 0);
    }
}

TEST_CASE("forward evaluation is deterministic bit for bit") {
    Rng rng(31337);
    Tensor a = random_tensor({6, 8}, rng, -2, 2, false);
    Tensor b = random_tensor({8, 3}, rng, -2, 2, false);
    auto run = [&] {
        Tensor out = softmax_rows(matmul(tanh(a), b));
        return std::vector<double>(out.data().begin(), out.data().end());
    };
    auto first = run();
    auto second = run();
    CHECK(bitwise_equal(first, second));
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    Tensor x = Tensor::from_data({2}, {3.0, 4.0}, true);
    Tensor y = mul(x, x);
    // root = sum(y) + sum(y) -> d/dx = 4x
    Tensor root = add(sum(y), sum(y));
    root.backward();
    CHECK(x.grad()[0] == doctest::Approx(12.0));
    CHECK(x.grad()[1] == doctest::Approx(16.0));
}

TEST_CASE("empty-batch matmul yields an empty result") {
    Tensor x = Tensor::zeros({0, 4});
    Tensor w = Tensor::zeros({4, 2});
    Tensor out = matmul(x, w);
    CHECK(out.rows() == 0);
    CHECK(out.cols() == 2);
    CHECK(out.size() == 0);
}

TEST_CASE("data_mut is rejected on graph nodes") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(y.data_mut(), ContractError);
    ComputeGraph::current().clear();
}

} // TEST_SUITE
