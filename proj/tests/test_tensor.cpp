#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dape/adam.hpp"
#include "dape/ops.hpp"
#include "dape/rng.hpp"
#include "gradcheck.hpp"

using namespace dape;
using dape::testing::gradcheck;

namespace {

// loss = sum(x * w) with fixed weights keeps every output entry relevant
Tensor weighted_sum(const Tensor& x, const Tensor& w) { return sum_all(mul(x, w)); }

Tensor fixed_weights(const std::vector<int>& shape, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(shape, 1.0, rng);
}

}  // namespace

TEST_CASE("matmul identity and annihilating products") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(eye, m);
    for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(m.data()[i]));

    Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 0});
    Tensor b = Tensor::from_data({2, 2}, {0, 0, 0, 1});
    Tensor zero = matmul(a, b);
    for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::runtime_error);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    Tensor a = Tensor::randn({3, 4}, 1.0, rng, true);
    Tensor b = Tensor::randn({4, 2}, 1.0, rng, true);
    auto taped = [&] { return sum_all(matmul(a, b)); };
    auto plain = [&] {
        double s = 0.0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 2; ++j)
                for (int k = 0; k < 4; ++k) s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
        return s;
    };
    auto result = gradcheck({a, b}, {"a", "b"}, taped, plain);
    CHECK(result.max_rel_error < 1e-6);
}

TEST_CASE("softmax symmetric and single-entry rows") {
    Tensor x = Tensor::from_data({2}, {0.0, 0.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y.data()[0] == doctest::Approx(0.5));
    CHECK(y.data()[1] == doctest::Approx(0.5));

    Tensor z = Tensor::from_data({2}, {5.0, 123.0});
    std::vector<std::uint8_t> keep{1, 0};
    Tensor m = softmax_lastdim(z, keep);
    CHECK(m.data()[0] == 1.0);
    CHECK(m.data()[1] == 0.0);
}

TEST_CASE("softmax frozen values") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y.data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-10));
    CHECK(y.data()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-10));
    CHECK(y.data()[2] == doctest::Approx(0.66524095577482190).epsilon(1e-10));
}

TEST_CASE("softmax rows sum to one and masked entries are exact zeros") {
    Rng rng(3);
    Tensor x = Tensor::randn({4, 6}, 2.0, rng);
    std::vector<std::uint8_t> keep(6, 1);
    keep[2] = 0;
    keep[5] = 0;
    Tensor y = softmax_lastdim(x, keep);
    for (int r = 0; r < 4; ++r) {
        double sum = 0.0;
        for (int j = 0; j < 6; ++j) sum += y.data()[r * 6 + j];
        CHECK(std::abs(sum - 1.0) < 1e-12);
        CHECK(y.data()[r * 6 + 2] == 0.0);
        CHECK(y.data()[r * 6 + 5] == 0.0);
    }
}

TEST_CASE("fully masked softmax row is a degenerate-row error") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    std::vector<std::uint8_t> keep{0, 0, 1, 1};
    CHECK_THROWS_WITH_AS(softmax_lastdim(x, keep), doctest::Contains("degenerate row"),
                         std::runtime_error);
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(5);
    Tensor x = Tensor::randn({3, 5}, 2.0, rng, true);
    Tensor w = fixed_weights({3, 5}, 77);
    std::vector<std::uint8_t> keep{1, 1, 0, 1, 1};
    auto taped = [&] { return weighted_sum(softmax_lastdim(x, keep), w); };
    auto plain = [&] {
        double total = 0.0;
        for (int r = 0; r < 3; ++r) {
            double mx = -1e300, denom = 0.0;
            for (int j = 0; j < 5; ++j)
                if (keep[j]) mx = std::max(mx, x.data()[r * 5 + j]);
            for (int j = 0; j < 5; ++j)
                if (keep[j]) denom += std::exp(x.data()[r * 5 + j] - mx);
            for (int j = 0; j < 5; ++j)
                if (keep[j])
                    total += std::exp(x.data()[r * 5 + j] - mx) / denom * w.data()[r * 5 + j];
        }
        return total;
    };
    auto result = gradcheck({x}, {"x"}, taped, plain);
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("leaky relu boundary and both branches") {
    Tensor x = Tensor::from_data({3}, {0.0, 3.0, -2.0});
    Tensor y = leaky_relu(x, 0.01);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 3.0);
    CHECK(y.data()[2] == doctest::Approx(-0.02));
    CHECK_THROWS_AS(leaky_relu(x, 1.5), std::runtime_error);
}

TEST_CASE("layer norm maps constant rows to zero under eps") {
    Tensor x = Tensor::full({2, 4}, 3.25);
    Tensor gamma = Tensor::full({4}, 1.0);
    Tensor beta = Tensor::zeros({4});
    Tensor y = layer_norm(x, gamma, beta, 1e-5);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("layer norm leaves a normalized row in place") {
    Tensor x = Tensor::from_data({1, 2}, {1.0, -1.0});
    Tensor gamma = Tensor::full({2}, 1.0);
    Tensor beta = Tensor::zeros({2});
    Tensor y = layer_norm(x, gamma, beta, 1e-12);
    CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layer norm gradient matches finite differences") {
    Rng rng(9);
    Tensor x = Tensor::randn({4, 8}, 1.0, rng, true);
    Tensor gamma = Tensor::randn({8}, 0.5, rng, true);
    Tensor beta = Tensor::randn({8}, 0.5, rng, true);
    Tensor w = fixed_weights({4, 8}, 13);
    const double eps = 1e-5;
    auto taped = [&] { return weighted_sum(layer_norm(x, gamma, beta, eps), w); };
    auto plain = [&] {
        double total = 0.0;
        for (int r = 0; r < 4; ++r) {
            double mean = 0.0, var = 0.0;
            for (int j = 0; j < 8; ++j) mean += x.data()[r * 8 + j];
            mean /= 8;
            for (int j = 0; j < 8; ++j) {
                double c = x.data()[r * 8 + j] - mean;
                var += c * c;
            }
            var /= 8;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < 8; ++j)
                total += ((x.data()[r * 8 + j] - mean) * inv * gamma.data()[j] + beta.data()[j]) *
                         w.data()[r * 8 + j];
        }
        return total;
    };
    auto result = gradcheck({x, gamma, beta}, {"x", "gamma", "beta"}, taped, plain);
    CHECK(result.max_rel_error < 1e-5);
}

TEST_CASE("cross entropy frozen values") {
    Tensor uniform = Tensor::zeros({1, 4});
    Tensor loss = cross_entropy(uniform, {1}, {1});
    CHECK(loss.value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(loss.value() == doctest::Approx(1.38629436).epsilon(1e-7));

    Tensor hot = Tensor::zeros({1, 3});
    hot.data()[2] = 1e9;
    CHECK(cross_entropy(hot, {2}, {1}).value() == doctest::Approx(0.0));

    Tensor row = Tensor::from_data({1, 3}, {1.0, 2.0, 3.0});
    CHECK(cross_entropy(row, {2}, {1}).value() == doctest::Approx(0.40760596).epsilon(1e-7));
}

TEST_CASE("cross entropy error paths") {
    Tensor logits = Tensor::zeros({2, 3});
    CHECK_THROWS_WITH_AS(cross_entropy(logits, {0, 1}, {0, 0}), doctest::Contains("degenerate"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(cross_entropy(logits, {0, 7}, {1, 1}), doctest::Contains("index error"),
                         std::runtime_error);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(21);
    Tensor logits = Tensor::randn({4, 5}, 1.5, rng, true);
    std::vector<int> targets{0, 3, 2, 4};
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    auto taped = [&] { return cross_entropy(logits, targets, mask); };
    auto plain = [&] {
        double total = 0.0;
        int scored = 0;
        for (int r = 0; r < 4; ++r) {
            if (!mask[r]) continue;
            double mx = -1e300, denom = 0.0;
            for (int j = 0; j < 5; ++j) mx = std::max(mx, logits.data()[r * 5 + j]);
            for (int j = 0; j < 5; ++j) denom += std::exp(logits.data()[r * 5 + j] - mx);
            total += mx + std::log(denom) - logits.data()[r * 5 + targets[r]];
            ++scored;
        }
        return total / scored;
    };
    auto result = gradcheck({logits}, {"logits"}, taped, plain);
    CHECK(result.max_rel_error < 1e-6);
}

TEST_CASE("backward on sum gives ones and accumulates fan-out") {
    Rng rng(2);
    Tensor x = Tensor::randn({2, 3}, 1.0, rng, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum_all(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);

    // loss = sum(x*x): fan-out of x through both mul operands gives 2x
    Tensor y = Tensor::from_data({2}, {2.0, -3.0}, true);
    Tape tape2;
    {
        TapeScope scope(tape2);
        tape2.backward(sum_all(mul(y, y)));
    }
    CHECK(y.grad()[0] == doctest::Approx(4.0));
    CHECK(y.grad()[1] == doctest::Approx(-6.0));
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x = Tensor::zeros({2, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("scalar"), std::runtime_error);
}

TEST_CASE("elementwise and broadcast gradients match finite differences") {
    Rng rng(31);
    Tensor a = Tensor::randn({2, 3, 4}, 1.0, rng, true);
    Tensor b = Tensor::randn({3, 4}, 1.0, rng, true);
    Tensor w = fixed_weights({2, 3, 4}, 41);
    auto taped = [&] { return weighted_sum(add_bcast(a, b), w); };
    auto plain = [&] {
        double s = 0.0;
        for (int i = 0; i < 24; ++i) s += (a.data()[i] + b.data()[i % 12]) * w.data()[i];
        return s;
    };
    auto result = gradcheck({a, b}, {"a", "b"}, taped, plain);
    CHECK(result.max_rel_error < 1e-6);
}

TEST_CASE("gelu gradient matches finite differences") {
    Rng rng(17);
    Tensor x = Tensor::randn({3, 3}, 1.2, rng, true);
    Tensor w = fixed_weights({3, 3}, 18);
    auto taped = [&] { return weighted_sum(gelu(x), w); };
    auto plain = [&] {
        double s = 0.0;
        for (int i = 0; i < 9; ++i) {
            double v = x.data()[i];
            s += 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))) * w.data()[i];
        }
        return s;
    };
    auto result = gradcheck({x}, {"x"}, taped, plain);
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("bmm pair matches a brute-force contraction") {
    Rng rng(23);
    Tensor q = Tensor::randn({2, 2, 3, 4}, 1.0, rng, true);
    Tensor k = Tensor::randn({2, 2, 5, 4}, 1.0, rng, true);
    Tensor scores = bmm_nt(q, k);
    REQUIRE(scores.shape() == std::vector<int>{2, 2, 3, 5});
    for (int s = 0; s < 4; ++s)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) {
                double expect = 0.0;
                for (int c = 0; c < 4; ++c)
                    expect += q.data()[(s * 3 + i) * 4 + c] * k.data()[(s * 5 + j) * 4 + c];
                CHECK(scores.data()[(s * 3 + i) * 5 + j] == doctest::Approx(expect).epsilon(1e-12));
            }

    Tensor v = Tensor::randn({2, 2, 5, 4}, 1.0, rng, true);
    Tensor w = fixed_weights({2, 2, 3, 4}, 55);
    auto taped = [&] { return weighted_sum(bmm_nn(bmm_nt(q, k), v), w); };
    auto plain = [&] {
        double total = 0.0;
        for (int s = 0; s < 4; ++s)
            for (int i = 0; i < 3; ++i)
                for (int c = 0; c < 4; ++c) {
                    double cell = 0.0;
                    for (int j = 0; j < 5; ++j) {
                        double score = 0.0;
                        for (int d = 0; d < 4; ++d)
                            score += q.data()[(s * 3 + i) * 4 + d] * k.data()[(s * 5 + j) * 4 + d];
                        cell += score * v.data()[(s * 5 + j) * 4 + c];
                    }
                    total += cell * w.data()[(s * 3 + i) * 4 + c];
                }
        return total;
    };
    auto result = gradcheck({q, k, v}, {"q", "k", "v"}, taped, plain);
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("head split/merge round trip and channel stacking layout") {
    Rng rng(29);
    Tensor x = Tensor::randn({2, 3, 8}, 1.0, rng);
    Tensor heads = split_heads(x, 4);
    REQUIRE(heads.shape() == std::vector<int>{2, 4, 3, 2});
    Tensor back = merge_heads(heads);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);

    Tensor attn = Tensor::randn({2, 3, 2, 2}, 1.0, rng);
    Tensor bias = Tensor::randn({3, 2, 2}, 1.0, rng);
    Tensor rows = stack_channels(attn, bias);
    REQUIRE(rows.shape() == std::vector<int>{8, 6});
    // row (b, i, j) carries attn channels then bias channels
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                for (int h = 0; h < 3; ++h) {
                    std::size_t row = (std::size_t(b) * 4 + i * 2 + j);
                    CHECK(rows.data()[row * 6 + h] ==
                          attn.data()[((std::size_t(b) * 3 + h) * 2 + i) * 2 + j]);
                    CHECK(rows.data()[row * 6 + 3 + h] ==
                          bias.data()[(std::size_t(h) * 2 + i) * 2 + j]);
                }

    Tensor planes = unstack_channels(stack_channels(attn), 2, 2, 2);
    for (std::size_t i = 0; i < attn.numel(); ++i) CHECK(planes.data()[i] == attn.data()[i]);
}

TEST_CASE("channel stacking gradients match finite differences") {
    Rng rng(37);
    Tensor attn = Tensor::randn({2, 2, 2, 2}, 1.0, rng, true);
    Tensor bias = Tensor::randn({2, 2, 2}, 1.0, rng, true);
    Tensor w = fixed_weights({8, 4}, 61);
    auto taped = [&] { return weighted_sum(stack_channels(attn, bias), w); };
    auto plain = [&] {
        double s = 0.0;
        for (int b = 0; b < 2; ++b)
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) {
                    std::size_t row = std::size_t(b) * 4 + i * 2 + j;
                    for (int h = 0; h < 2; ++h) {
                        s += attn.data()[((std::size_t(b) * 2 + h) * 2 + i) * 2 + j] *
                             w.data()[row * 4 + h];
                        s += bias.data()[(std::size_t(h) * 2 + i) * 2 + j] * w.data()[row * 4 + 2 + h];
                    }
                }
        return s;
    };
    auto result = gradcheck({attn, bias}, {"attn", "bias"}, taped, plain);
    CHECK(result.max_rel_error < 1e-6);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
    Tensor table = Tensor::from_data({3, 2}, {0, 1, 10, 11, 20, 21}, true);
    Tensor out = embedding(table, {2, 0, 2}, 1, 3);
    CHECK(out.data()[0] == 20.0);
    CHECK(out.data()[2] == 0.0);
    CHECK(out.data()[4] == 20.0);
    CHECK_THROWS_WITH_AS(embedding(table, {3}, 1, 1), doctest::Contains("index error"),
                         std::runtime_error);

    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum_all(embedding(table, {2, 0, 2}, 1, 3)));
    }
    CHECK(table.grad()[0] == 1.0);  // row 0 used once
    CHECK(table.grad()[2] == 0.0);  // row 1 unused
    CHECK(table.grad()[4] == 2.0);  // row 2 used twice
}

TEST_CASE("adam leaves parameters unchanged on zero gradients") {
    Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    p.grad();  // allocate zeros
    std::vector<Tensor> params{p};
    std::vector<AdamState> states(1);
    adam_step(params, states, AdamConfig{});
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == -2.0);
    CHECK(p.data()[2] == 0.5);
}

TEST_CASE("adam first step matches the hand-evaluated update") {
    Tensor p = Tensor::from_data({1}, {0.7}, true);
    p.grad()[0] = 1.0;
    std::vector<Tensor> params{p};
    std::vector<AdamState> states(1);
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.eps = 1e-8;
    adam_step(params, states, cfg);
    // bias-corrected mhat = vhat = 1 -> step of lr/(1 + eps)
    CHECK(p.data()[0] == doctest::Approx(0.7 - 0.1).epsilon(1e-7));
    CHECK(p.grad()[0] == 0.0);  // grads zeroed afterwards
    CHECK(states[0].step == 1);
}

TEST_CASE("adam converges on a convex scalar objective") {
    Tensor w = Tensor::from_data({1}, {0.0}, true);
    std::vector<Tensor> params{w};
    std::vector<AdamState> states(1);
    AdamConfig cfg;
    cfg.lr = 0.3;
    for (int step = 0; step < 100; ++step) {
        w.grad()[0] = 2.0 * (w.data()[0] - 3.0);
        adam_step(params, states, cfg);
    }
    CHECK(std::abs(w.data()[0] - 3.0) < 0.1);
}

TEST_CASE("adam on a missing gradient is a contract error") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    std::vector<Tensor> params{p};
    std::vector<AdamState> states(1);
    CHECK_THROWS_WITH_AS(adam_step(params, states, AdamConfig{}), doctest::Contains("contract"),
                         std::runtime_error);
}

TEST_CASE("adam second moments stay non-negative") {
    Rng rng(43);
    Tensor p = Tensor::randn({16}, 1.0, rng, true);
    std::vector<Tensor> params{p};
    std::vector<AdamState> states(1);
    AdamConfig cfg;
    for (int step = 0; step < 20; ++step) {
        for (std::size_t i = 0; i < p.numel(); ++i) p.grad()[i] = rng.normal(0.0, 2.0);
        adam_step(params, states, cfg);
        for (double v : states[0].v) CHECK(v >= 0.0);
    }
}

TEST_CASE("rng streams are deterministic and forked streams decorrelate") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng base(7);
    Rng f1 = base.fork(1), f2 = base.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());

    Rng c(55), d(55);
    Tensor t1 = Tensor::randn({32}, 1.0, c);
    Tensor t2 = Tensor::randn({32}, 1.0, d);
    for (std::size_t i = 0; i < 32; ++i) CHECK(t1.data()[i] == t2.data()[i]);
}

TEST_CASE("inference mode records nothing") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y = scale(x, 3.0);  // no tape active
    CHECK_FALSE(y.requires_grad());
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor z = scale(x, 3.0);
        CHECK(z.requires_grad());
        CHECK(tape.size() == 1);
    }
}

TEST_CASE("dropout keeps expectation and scales kept entries") {
    Rng rng(71);
    Tensor x = Tensor::full({10000}, 1.0);
    Tensor y = dropout(x, 0.25, rng);
    double mean = 0.0;
    int zeros = 0;
    for (double v : y.data()) {
        mean += v;
        zeros += v == 0.0;
        if (v != 0.0) CHECK(v == doctest::Approx(1.0 / 0.75));
    }
    mean /= static_cast<double>(y.numel());
    CHECK(mean == doctest::Approx(1.0).epsilon(0.03));
    CHECK(zeros > 2000);
    CHECK(zeros < 3000);
}
