#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "lssf/ops.hpp"
#include "support/gradcheck.hpp"

using namespace lssf;
using lssf::testing::grad_check;

namespace {

template <typename T>
Tensor<T> t4(int n, int h, int w, int c, std::vector<T> data) {
    return Tensor<T>({n, h, w, c}, std::move(data));
}

}  // namespace

TEST_CASE("conv2d sliding-window oracle on all-ones input") {
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>::full({1, 3, 3, 1}, 1.0), false);
    Var k = tape.leaf(Tensor<double>::full({3, 3, 1, 1}, 1.0), false);
    Var b = tape.leaf(Tensor<double>::zeros({1}), false);
    Var y = conv2d(tape, x, k, b);
    const auto& out = tape.val(y);
    REQUIRE(out.shape == std::vector<int>({1, 3, 3, 1}));
    // corners see 4 taps, edges 6, center 9
    CHECK(out[0] == doctest::Approx(4.0));
    CHECK(out[1] == doctest::Approx(6.0));
    CHECK(out[2] == doctest::Approx(4.0));
    CHECK(out[3] == doctest::Approx(6.0));
    CHECK(out[4] == doctest::Approx(9.0));
    CHECK(out[8] == doctest::Approx(4.0));
}

TEST_CASE("conv2d zero kernel gives constant bias") {
    Tape<double> tape;
    std::mt19937_64 rng(1);
    Var x = tape.leaf(random_uniform<double>({2, 4, 4, 3}, rng), false);
    Var k = tape.leaf(Tensor<double>::zeros({3, 3, 3, 2}), false);
    Var b = tape.leaf(Tensor<double>({2}, {0.5, -1.5}), false);
    const auto& out = tape.val(conv2d(tape, x, k, b));
    for (int64_t i = 0; i < out.size(); i += 2) {
        CHECK(out[i] == 0.5);
        CHECK(out[i + 1] == -1.5);
    }
}

TEST_CASE("conv2d 1x1 identity kernel is the identity map, bit-exact") {
    Tape<double> tape;
    std::mt19937_64 rng(2);
    Tensor<double> xt = random_uniform<double>({1, 5, 5, 3}, rng);
    Tensor<double> kt = Tensor<double>::zeros({1, 1, 3, 3});
    for (int c = 0; c < 3; ++c) kt[c * 3 + c] = 1.0;
    Var x = tape.leaf(xt, false);
    Var k = tape.leaf(kt, false);
    const auto& out = tape.val(conv2d(tape, x, k, Var{}));
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == xt[i]);
}

TEST_CASE("conv2d rejects bad inputs") {
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>::zeros({1, 4, 4, 3}), false);
    Var k = tape.leaf(Tensor<double>::zeros({3, 3, 2, 4}), false);
    CHECK_THROWS_AS(conv2d(tape, x, k, Var{}), std::invalid_argument);
    Var k2 = tape.leaf(Tensor<double>::zeros({3, 3, 3, 4}), false);
    CHECK_THROWS_AS(conv2d(tape, x, k2, Var{}, 0), std::invalid_argument);
}

TEST_CASE("batch_norm closed-form and trivial cases") {
    RunningStats<double> stats{Tensor<double>::zeros({1}), Tensor<double>::full({1}, 1.0)};

    SUBCASE("zero input, identity stats, infer") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>::zeros({1, 2, 2, 1}), false);
        Var g = tape.leaf(Tensor<double>::full({1}, 1.0), false);
        Var b = tape.leaf(Tensor<double>::zeros({1}), false);
        const auto& out = tape.val(batch_norm(tape, x, g, b, &stats.mean, &stats.var, Mode::Infer));
        for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(0.0));
    }
    SUBCASE("gamma 0, beta c gives constant c") {
        Tape<double> tape;
        std::mt19937_64 rng(3);
        Var x = tape.leaf(random_uniform<double>({2, 2, 2, 1}, rng), false);
        Var g = tape.leaf(Tensor<double>::zeros({1}), false);
        Var b = tape.leaf(Tensor<double>::full({1}, 2.5), false);
        const auto& out = tape.val(batch_norm(tape, x, g, b, &stats.mean, &stats.var, Mode::Train));
        for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(2.5));
    }
    SUBCASE("batch {1,3} normalizes to {-1,1} as eps -> 0") {
        Tape<double> tape;
        Var x = tape.leaf(t4<double>(2, 1, 1, 1, {1.0, 3.0}), false);
        Var g = tape.leaf(Tensor<double>::full({1}, 1.0), false);
        Var b = tape.leaf(Tensor<double>::zeros({1}), false);
        const auto& out = tape.val(batch_norm(tape, x, g, b, &stats.mean, &stats.var, Mode::Train, 0.9, 1e-12));
        CHECK(out[0] == doctest::Approx(-1.0));
        CHECK(out[1] == doctest::Approx(1.0));
        // running stats updated toward batch mean 2, var 1
        CHECK(stats.mean[0] == doctest::Approx(0.2));
    }
    SUBCASE("eps <= 0 rejected") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>::zeros({1, 2, 2, 1}), false);
        Var g = tape.leaf(Tensor<double>::full({1}, 1.0), false);
        Var b = tape.leaf(Tensor<double>::zeros({1}), false);
        CHECK_THROWS_AS(batch_norm(tape, x, g, b, &stats.mean, &stats.var, Mode::Infer, 0.9, 0.0), std::invalid_argument);
    }
}

TEST_CASE("activations") {
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>({4}, {-2.0, 3.0, 0.0, 10.0}), false);
    const auto& r = tape.val(relu(tape, x));
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 3.0);
    const auto& s = tape.val(sigmoid(tape, x));
    CHECK(s[2] == doctest::Approx(0.5));
    for (int64_t i = 0; i < s.size(); ++i) {
        CHECK(s[i] > 0.0);
        CHECK(s[i] < 1.0);
    }
    const auto& g = tape.val(gelu(tape, x));
    CHECK(g[2] == doctest::Approx(0.0));
}

TEST_CASE("maxpool2") {
    SUBCASE("2x2 window") {
        Tape<double> tape;
        Var x = tape.leaf(t4<double>(1, 2, 2, 1, {1, 2, 3, 4}), false);
        CHECK(tape.val(maxpool2(tape, x))[0] == 4.0);
    }
    SUBCASE("constant input stays constant") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>::full({1, 4, 4, 2}, 3.25), false);
        const auto& out = tape.val(maxpool2(tape, x));
        for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 3.25);
    }
    SUBCASE("4x4 ramp window-max oracle") {
        std::vector<double> ramp(16);
        for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = i;
        Tape<double> tape;
        Var x = tape.leaf(t4<double>(1, 4, 4, 1, ramp), false);
        const auto& out = tape.val(maxpool2(tape, x));
        CHECK(out[0] == 5.0);
        CHECK(out[1] == 7.0);
        CHECK(out[2] == 13.0);
        CHECK(out[3] == 15.0);
    }
    SUBCASE("odd spatial dims rejected") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>::zeros({1, 3, 4, 1}), false);
        CHECK_THROWS_AS(maxpool2(tape, x), std::invalid_argument);
    }
}

TEST_CASE("upsample2") {
    SUBCASE("single pixel replicates") {
        Tape<double> tape;
        Var x = tape.leaf(t4<double>(1, 1, 1, 1, {1.0}), false);
        const auto& out = tape.val(upsample2(tape, x));
        REQUIRE(out.shape == std::vector<int>({1, 2, 2, 1}));
        for (int64_t i = 0; i < 4; ++i) CHECK(out[i] == 1.0);
    }
    SUBCASE("block replication index oracle") {
        Tape<double> tape;
        Var x = tape.leaf(t4<double>(1, 2, 2, 1, {1, 2, 3, 4}), false);
        const auto& out = tape.val(upsample2(tape, x));
        std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
        for (int64_t i = 0; i < 16; ++i) CHECK(out[i] == expect[static_cast<size_t>(i)]);
    }
    SUBCASE("maxpool2 after upsample2 is the identity for all inputs") {
        std::mt19937_64 rng(4);
        for (int trial = 0; trial < 10; ++trial) {
            Tape<double> tape;
            Tensor<double> xt = random_uniform<double>({2, 3, 5, 4}, rng);
            Var x = tape.leaf(xt, false);
            const auto& out = tape.val(maxpool2(tape, upsample2(tape, x)));
            REQUIRE(out.shape == xt.shape);
            for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == xt[i]);
        }
    }
}

TEST_CASE("matmul, softmax, layer_norm, dropout, concat basics") {
    Tape<double> tape;
    Var a = tape.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}), false);
    Var b = tape.leaf(Tensor<double>({2, 1}, {1, 1}), false);
    const auto& mm = tape.val(matmul(tape, a, b));
    CHECK(mm[0] == 3.0);
    CHECK(mm[1] == 7.0);

    Var c = tape.leaf(Tensor<double>::full({1, 4}, 2.0), false);
    const auto& sm = tape.val(softmax(tape, c, -1));
    for (int64_t i = 0; i < 4; ++i) CHECK(sm[i] == doctest::Approx(0.25));

    std::mt19937_64 rng(5);
    Var d = tape.leaf(random_uniform<double>({3, 7}, rng, -3.0, 3.0), false);
    const auto& sm2 = tape.val(softmax(tape, d, -1));
    for (int r = 0; r < 3; ++r) {
        double sum = 0;
        for (int j = 0; j < 7; ++j) {
            CHECK(sm2[r * 7 + j] >= 0.0);
            sum += sm2[r * 7 + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }

    Tensor<double> xt = random_uniform<double>({2, 3}, rng);
    Var x = tape.leaf(xt, false);
    const auto& dr = tape.val(dropout(tape, x, 0.5, Mode::Infer, nullptr));
    for (int64_t i = 0; i < dr.size(); ++i) CHECK(dr[i] == xt[i]);

    Var g = tape.leaf(Tensor<double>::full({3}, 1.0), false);
    Var be = tape.leaf(Tensor<double>::zeros({3}), false);
    const auto& ln = tape.val(layer_norm(tape, x, g, be));
    for (int r = 0; r < 2; ++r) {
        double sum = 0;
        for (int j = 0; j < 3; ++j) sum += ln[r * 3 + j];
        CHECK(sum == doctest::Approx(0.0));
    }

    Var p = tape.leaf(Tensor<double>({1, 2}, {1, 2}), false);
    Var q = tape.leaf(Tensor<double>({1, 3}, {3, 4, 5}), false);
    const auto& cc = tape.val(concat(tape, {p, q}, 1));
    REQUIRE(cc.shape == std::vector<int>({1, 5}));
    for (int j = 0; j < 5; ++j) CHECK(cc[j] == j + 1.0);

    CHECK_THROWS_AS(matmul(tape, a, tape.leaf(Tensor<double>::zeros({3, 2}), false)), std::invalid_argument);
}

TEST_CASE("channel_shuffle permutation oracle") {
    SUBCASE("n=4 g=2 gives [0,2,1,3]") {
        auto perm = shuffle_permutation(4, 2);
        CHECK(perm == std::vector<int>({0, 2, 1, 3}));
    }
    SUBCASE("g=1 and g=n are identities") {
        for (int n : {1, 3, 8, 16}) {
            auto p1 = shuffle_permutation(n, 1);
            auto pn = shuffle_permutation(n, n);
            for (int j = 0; j < n; ++j) {
                CHECK(p1[static_cast<size_t>(j)] == j);
                CHECK(pn[static_cast<size_t>(j)] == j);
            }
        }
    }
    SUBCASE("matches reshape-transpose-flatten index oracle and is a bijection, all g|n, n<=64") {
        for (int n = 1; n <= 64; ++n)
            for (int g = 1; g <= n; ++g) {
                if (n % g != 0) continue;
                auto perm = shuffle_permutation(n, g);
                // independent oracle: place indices into (g, n/g), transpose, flatten
                std::vector<int> mat(static_cast<size_t>(n));
                int per = n / g;
                for (int i = 0; i < n; ++i) mat[static_cast<size_t>(i)] = i;
                std::vector<int> oracle(static_cast<size_t>(n));
                for (int r = 0; r < per; ++r)
                    for (int cc = 0; cc < g; ++cc) oracle[static_cast<size_t>(r * g + cc)] = mat[static_cast<size_t>(cc * per + r)];
                CHECK(perm == oracle);
                std::vector<bool> seen(static_cast<size_t>(n), false);
                for (int j : perm) {
                    CHECK(!seen[static_cast<size_t>(j)]);
                    seen[static_cast<size_t>(j)] = true;
                }
            }
    }
    SUBCASE("shuffle moves values without altering them") {
        std::mt19937_64 rng(6);
        Tape<double> tape;
        Tensor<double> xt = random_uniform<double>({1, 2, 2, 12}, rng);
        Var x = tape.leaf(xt, false);
        const auto& out = tape.val(channel_shuffle(tape, x, 3));
        std::vector<double> in_sorted(xt.data), out_sorted(out.data);
        std::sort(in_sorted.begin(), in_sorted.end());
        std::sort(out_sorted.begin(), out_sorted.end());
        CHECK(in_sorted == out_sorted);
    }
    SUBCASE("g does not divide n is rejected") {
        CHECK_THROWS_AS(shuffle_permutation(10, 3), std::invalid_argument);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("loss = sum(x) gives all-ones grad") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>::full({2, 2}, 5.0), true);
        tape.backward(sum_all(tape, x));
        const auto& g = tape.grad(x);
        for (int64_t i = 0; i < 4; ++i) CHECK(g[i] == 1.0);
    }
    SUBCASE("loss = sum(x*x) at [1,2] gives [2,4]") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>({2}, {1, 2}), true);
        tape.backward(sum_all(tape, mul(tape, x, x)));
        CHECK(tape.grad(x)[0] == doctest::Approx(2.0));
        CHECK(tape.grad(x)[1] == doctest::Approx(4.0));
    }
    SUBCASE("backward on non-scalar rejected") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>::zeros({2, 2}), true);
        CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    }
    SUBCASE("repeated backward accumulates") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>({1}, {3.0}), true);
        Var loss = sum_all(tape, mul(tape, x, x));
        tape.backward(loss);
        tape.backward(loss);
        CHECK(tape.grad(x)[0] == doctest::Approx(12.0));
    }
}

TEST_CASE("non-finite forward values are an error") {
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>({1}, {0.0}), false);
    CHECK_THROWS_AS(log_op(tape, x), std::runtime_error);
}

TEST_CASE("finite-difference checks for every primitive") {
    std::mt19937_64 rng(42);

    SUBCASE("conv2d") {
        for (int trial = 0; trial < 3; ++trial) {
            auto res = grad_check(
                [](Tape<double>& t, const std::vector<Var>& v) {
                    return sum_all(t, mul(t, conv2d(t, v[0], v[1], v[2]), conv2d(t, v[0], v[1], v[2])));
                },
                {random_uniform<double>({2, 4, 4, 3}, rng), random_uniform<double>({3, 3, 3, 2}, rng),
                 random_uniform<double>({2}, rng)});
            CHECK(res.max_rel_err < 1e-6);
        }
    }
    SUBCASE("conv2d stride 2 valid") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                return sum_all(t, mul(t, conv2d(t, v[0], v[1], v[2], 2, Padding::Valid),
                                      conv2d(t, v[0], v[1], v[2], 2, Padding::Valid)));
            },
            {random_uniform<double>({1, 5, 5, 2}, rng), random_uniform<double>({3, 3, 2, 2}, rng),
             random_uniform<double>({2}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("depthwise_conv2d") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var y = depthwise_conv2d(t, v[0], v[1]);
                return sum_all(t, mul(t, y, y));
            },
            {random_uniform<double>({1, 4, 4, 3}, rng), random_uniform<double>({3, 3, 3}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("batch_norm train") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                RunningStats<double> st{Tensor<double>::zeros({3}), Tensor<double>::full({3}, 1.0)};
                Var y = batch_norm(t, v[0], v[1], v[2], &st.mean, &st.var, Mode::Train);
                return sum_all(t, mul(t, y, y));
            },
            {random_uniform<double>({2, 3, 3, 3}, rng), random_uniform<double>({3}, rng, 0.5, 1.5),
             random_uniform<double>({3}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("batch_norm infer") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                RunningStats<double> st{Tensor<double>({3}, {0.1, -0.2, 0.3}), Tensor<double>({3}, {1.0, 2.0, 0.5})};
                Var y = batch_norm(t, v[0], v[1], v[2], &st.mean, &st.var, Mode::Infer);
                return sum_all(t, mul(t, y, y));
            },
            {random_uniform<double>({2, 3, 3, 3}, rng), random_uniform<double>({3}, rng, 0.5, 1.5),
             random_uniform<double>({3}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("layer_norm") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var y = layer_norm(t, v[0], v[1], v[2]);
                return sum_all(t, mul(t, y, y));
            },
            {random_uniform<double>({2, 2, 2, 4}, rng), random_uniform<double>({4}, rng, 0.5, 1.5),
             random_uniform<double>({4}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("activations, pool, upsample, softmax, matmul, shuffle, gates") {
        // inputs nudged away from relu/maxpool kinks
        Tensor<double> x = random_uniform<double>({1, 4, 4, 4}, rng);
        for (auto& v : x.data) v += (v >= 0 ? 0.2 : -0.2);
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var h = relu(t, v[0]);
                h = maxpool2(t, h);
                h = upsample2(t, h);
                h = gelu(t, h);
                h = channel_shuffle(t, h, 2);
                Var gate = slice_channels(t, h, 0, 1);
                Var rest = slice_channels(t, h, 0, 4);
                h = mul_gate(t, gate, rest);
                Var pooled = global_avg_pool(t, h);
                h = add(t, h, broadcast_spatial(t, pooled, 4, 4));
                h = sigmoid(t, h);
                Var m = reshape(t, h, {4 * 4, 4});
                m = matmul(t, permute(t, m, {1, 0}), m);
                m = softmax(t, m, -1);
                return mean_all(t, mul(t, m, m));
            },
            {x});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("batched matmul with shared right operand") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var y = matmul(t, v[0], v[1]);  // [B,m,k]x[k,n]
                Var z = matmul(t, v[0], v[2]);  // [B,m,k]x[B,k,n]
                return add(t, sum_all(t, mul(t, y, y)), sum_all(t, mul(t, z, z)));
            },
            {random_uniform<double>({2, 3, 4}, rng), random_uniform<double>({4, 5}, rng),
             random_uniform<double>({2, 4, 3}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("losses-style scalar chain") {
        auto res = grad_check(
            [](Tape<double>& t, const std::vector<Var>& v) {
                Var p = sigmoid(t, v[0]);
                Var cl = clamp(t, p, 1e-7, 1.0 - 1e-7);
                Var lg = log_op(t, cl);
                return neg(t, mean_all(t, lg));
            },
            {random_uniform<double>({2, 3, 3, 1}, rng)});
        CHECK(res.max_rel_err < 1e-6);
    }
}
