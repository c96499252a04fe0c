#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "hylm/tensor.hpp"
#include "testutil.hpp"

using namespace hylm;
using T = Tensor<double>;

namespace {

T random_tensor(Shape shape, RngStream& rng, bool requires_grad = false) {
    return T::gaussian(std::move(shape), rng, 1.0, requires_grad);
}

// Brute-force data-controlled operator: y[i,c] = sum_{j<=i} alpha(i,j,c) x[j,c]
// with alpha(i,j,c) = sum_s C[i,s] (prod_{k=j+1..i} exp(A[c,s] dt[k,c])) B[j,s] dt[j,c].
std::vector<double> scan_by_materialization(const T& x, const T& dt, const T& B, const T& C,
                                            const T& A) {
    const std::size_t L = x.rows(), Cw = x.cols(), S = B.cols();
    std::vector<double> y(L * Cw, 0.0);
    for (std::size_t c = 0; c < Cw; ++c) {
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double alpha = 0.0;
                for (std::size_t s = 0; s < S; ++s) {
                    double prod = 1.0;
                    for (std::size_t k = j + 1; k <= i; ++k) {
                        prod *= std::exp(A.at(c, s) * dt.at(k, c));
                    }
                    alpha += C.at(i, s) * prod * B.at(j, s) * dt.at(j, c);
                }
                y[i * Cw + c] += alpha * x.at(j, c);
            }
        }
    }
    return y;
}

} // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    T id = T::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    RngStream rng(7);
    T m = random_tensor({3, 3}, rng);
    auto prod = matmul(id, m);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(prod.value()[i] == doctest::Approx(m.value()[i]).epsilon(1e-15));
    }

    T a = T::from({2, 2}, {1, 2, 3, 4});
    T b = T::from({2, 1}, {1, 1});
    auto c = matmul(a, b);
    CHECK(c.at(0, 0) == 3.0);
    CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul shape error names both shapes") {
    T a = T::zeros({2, 3});
    T b = T::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradient: d sum(a*b) / da = ones * b^T") {
    RngStream rng(11);
    T a = random_tensor({4, 5}, rng, true);
    T b = random_tensor({5, 2}, rng, true);
    auto loss = sum(matmul(a, b));
    backward(loss);
    // expected dA = ones(4x2) * b^T, i.e. dA[i,p] = sum_j b[p,j]
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t p = 0; p < 5; ++p) {
            double expect = b.at(p, 0) + b.at(p, 1);
            CHECK(a.grad()[i * 5 + p] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    // and against central differences
    auto res = testutil::grad_check({a, b}, [&] { return sum(matmul(a, b)); });
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("matmul linearity within 1e-12") {
    RngStream rng(3);
    T a = random_tensor({6, 4}, rng);
    T b = random_tensor({4, 5}, rng);
    T c = random_tensor({4, 5}, rng);
    auto lhs = matmul(a, add(b, c));
    auto rhs = add(matmul(a, b), matmul(a, c));
    CHECK(testutil::max_abs_diff(lhs.value(), rhs.value()) <= 1e-12);
}

TEST_CASE("softmax_rows basics") {
    T x = T::from({1, 3}, {0, 0, 0});
    auto y = softmax_rows(x);
    for (int j = 0; j < 3; ++j) {
        CHECK(y.value()[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }

    T big = T::from({1, 2}, {1000, 0});
    auto yb = softmax_rows(big);
    CHECK(std::isfinite(yb.value()[0]));
    CHECK(yb.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(yb.value()[1] < 1e-300);

    // direct exp/sum-exp evaluation as the oracle
    T v = T::from({1, 3}, {1, 2, 3});
    auto yv = softmax_rows(v);
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    CHECK(yv.value()[0] == doctest::Approx(e1 / z).epsilon(1e-14));
    CHECK(yv.value()[1] == doctest::Approx(e2 / z).epsilon(1e-14));
    CHECK(yv.value()[2] == doctest::Approx(e3 / z).epsilon(1e-14));
    CHECK(yv.value()[0] == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(yv.value()[1] == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(yv.value()[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax_rows mask semantics") {
    T x = T::from({2, 3}, {5, 1, 2, 0, 0, 0});
    BoolMat mask(2, 3, true);
    mask.at(0, 0) = 0;
    auto y = softmax_rows(x, &mask);
    CHECK(y.at(0, 0) == 0.0); // exactly zero
    CHECK(y.at(0, 1) + y.at(0, 2) == doctest::Approx(1.0).epsilon(1e-12));

    // each row sums to one
    for (std::size_t i = 0; i < 2; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            s += y.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }

    BoolMat dead(1, 2, false);
    T x2 = T::from({1, 2}, {1, 2});
    CHECK_THROWS_AS(softmax_rows(x2, &dead), DegenerateRowError);
}

TEST_CASE("softmax masked entries are never read") {
    // Changing a masked-out input must leave the output bitwise identical.
    T x1 = T::from({1, 3}, {1.0, 2.0, 3.0});
    T x2 = T::from({1, 3}, {1.0, 2.0, 999.0});
    BoolMat mask(1, 3, true);
    mask.at(0, 2) = 0;
    auto y1 = softmax_rows(x1, &mask);
    auto y2 = softmax_rows(x2, &mask);
    CHECK(y1.value()[0] == y2.value()[0]);
    CHECK(y1.value()[1] == y2.value()[1]);
}

TEST_CASE("softplus values and overflow safety") {
    T x = T::from({3}, {0.0, 100.0, -3.0});
    auto y = softplus(x);
    CHECK(y.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(y.value()[1] == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(std::isfinite(y.value()[1]));
    CHECK(y.value()[2] == doctest::Approx(std::log1p(std::exp(-3.0))).epsilon(1e-14));
    CHECK(y.value()[2] == doctest::Approx(0.04859).epsilon(1e-3));
}

TEST_CASE("backward basics") {
    T p = T::from({4}, {1, 2, 3, 4}, true);
    auto loss = sum(p);
    backward(loss);
    for (int i = 0; i < 4; ++i) {
        CHECK(p.grad()[i] == 1.0);
    }

    T q = T::from({2}, {1, -2}, true);
    auto loss2 = sum(mul(q, q));
    backward(loss2);
    CHECK(q.grad()[0] == doctest::Approx(2.0));
    CHECK(q.grad()[1] == doctest::Approx(-4.0));

    CHECK_THROWS_AS(backward(p), ContractError); // non-scalar

    // repeated backward accumulates
    q.zero_grad();
    auto loss3 = sum(mul(q, q));
    backward(loss3);
    backward(loss3);
    CHECK(q.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("unused parameter grad is exactly zero") {
    T used = T::from({2}, {1, 2}, true);
    T unused = T::from({3}, {5, 6, 7}, true);
    auto loss = sum(used);
    backward(loss);
    for (int i = 0; i < 3; ++i) {
        CHECK(unused.grad()[i] == 0.0);
    }
}

TEST_CASE("rng determinism is bitwise") {
    RngStream a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    RngStream c(42), d(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(c.gaussian() == d.gaussian());
    }
}

TEST_CASE("gradient check: random op compositions (<= 64 elements)") {
    RngStream rng(2024);
    // composition 1: rmsnorm -> mul_rowvec -> matmul -> softmax -> sum
    {
        T x = random_tensor({4, 6}, rng, true);
        T g = T::filled({6}, 1.0, true);
        T v = random_tensor({6}, rng, true);
        T w = random_tensor({6, 3}, rng, true);
        auto f = [&] {
            auto h = rmsnorm_rows(x, g, 1e-6);
            h = mul_rowvec(h, v);
            auto z = matmul(h, w);
            return sum(mul(softmax_rows(z), z));
        };
        auto res = testutil::grad_check({x, g, v, w}, f);
        CHECK(res.max_rel_err <= 1e-4);
    }
    // composition 2: silu/softplus/exp mixture
    {
        T x = random_tensor({3, 5}, rng, true);
        T y = random_tensor({3, 5}, rng, true);
        auto f = [&] { return mean(mul(silu(x), softplus(add(x, y)))); };
        auto res = testutil::grad_check({x, y}, f);
        CHECK(res.max_rel_err <= 1e-4);
    }
    // composition 3: structural ops
    {
        T x = random_tensor({4, 8}, rng, true);
        auto f = [&] {
            auto a = slice_cols(x, 0, 4);
            auto b = slice_cols(x, 4, 8);
            auto cat = concat_rows(std::vector<T>{a, b});
            return sum(mul(cat, cat));
        };
        auto res = testutil::grad_check({x}, f);
        CHECK(res.max_rel_err <= 1e-4);
    }
    // composition 4: rope + transpose + cross entropy
    {
        T x = random_tensor({3, 8}, rng, true);
        std::vector<long> pos{0, 1, 2};
        auto f = [&] {
            auto r = rope_rows(x, pos, 4, 10000.0);
            auto logits = matmul(r, transpose(r));
            return cross_entropy_rows(logits, {0, 1, 2}, std::vector<double>{1, 1, 1});
        };
        auto res = testutil::grad_check({x}, f);
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("causal_conv1d matches direct convolution and grads") {
    RngStream rng(5);
    T x = random_tensor({6, 3}, rng, true);
    T w = random_tensor({3, 4}, rng, true);
    T b = random_tensor({3}, rng, true);
    auto y = causal_conv1d(x, w, b);
    // direct check at (i=0): only k=3 taps into x[0]
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(y.at(0, c) ==
              doctest::Approx(b.value()[c] + w.at(c, 3) * x.at(0, c)).epsilon(1e-12));
    }
    auto res = testutil::grad_check({x, w, b}, [&] { return sum(mul(causal_conv1d(x, w, b),
                                                                    causal_conv1d(x, w, b))); });
    CHECK(res.max_rel_err <= 1e-4);

    // tail continuation: conv over [head; tail carried] == conv over full input
    T full = random_tensor({8, 3}, rng);
    auto y_full = causal_conv1d(full, w, b);
    auto head = T::from({5, 3}, {full.value().begin(), full.value().begin() + 15});
    auto rest = T::from({3, 3}, {full.value().begin() + 15, full.value().end()});
    std::vector<double> tail(full.value().begin() + (5 - 3) * 3, full.value().begin() + 15);
    auto y_head = causal_conv1d(head, w, b);
    auto y_rest = causal_conv1d(rest, w, b, &tail);
    for (std::size_t i = 0; i < 5 * 3; ++i) {
        CHECK(y_head.value()[i] == doctest::Approx(y_full.value()[i]).epsilon(1e-13));
    }
    for (std::size_t i = 0; i < 3 * 3; ++i) {
        CHECK(y_rest.value()[i] == doctest::Approx(y_full.value()[15 + i]).epsilon(1e-13));
    }
}

TEST_CASE("ssm_scan: L=1 from zero state equals C*dt*B*x (empty product = 1)") {
    RngStream rng(9);
    T x = random_tensor({1, 2}, rng);
    T dt = T::from({1, 2}, {0.7, 1.3});
    T B = random_tensor({1, 3}, rng);
    T C = random_tensor({1, 3}, rng);
    T A = random_tensor({2, 3}, rng);
    auto y = ssm_scan(x, dt, B, C, A);
    for (std::size_t c = 0; c < 2; ++c) {
        double expect = 0;
        for (std::size_t s = 0; s < 3; ++s) {
            expect += C.at(0, s) * dt.at(0, c) * B.at(0, s) * x.at(0, c);
        }
        CHECK(y.at(0, c) == doctest::Approx(expect).epsilon(1e-13));
    }
}

TEST_CASE("ssm_scan: A -> -inf limit is memoryless") {
    RngStream rng(13);
    T x = random_tensor({5, 2}, rng);
    T dt = T::filled({5, 2}, 0.9);
    T B = random_tensor({5, 3}, rng);
    T C = random_tensor({5, 3}, rng);
    T A = T::filled({2, 3}, -1e9); // exp(A*dt) == 0
    auto y = ssm_scan(x, dt, B, C, A);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
            double expect = 0;
            for (std::size_t s = 0; s < 3; ++s) {
                expect += C.at(i, s) * dt.at(i, c) * B.at(i, s) * x.at(i, c);
            }
            CHECK(y.at(i, c) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("ssm_scan equals brute-force alpha materialization") {
    RngStream rng(17);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t L = 2 + rng.below(14), C = 1 + rng.below(6), S = 1 + rng.below(5);
        T x = random_tensor({L, C}, rng);
        T dtp = random_tensor({L, C}, rng);
        auto dt = softplus(dtp);
        T B = random_tensor({L, S}, rng);
        T Cm = random_tensor({L, S}, rng);
        T A = T::gaussian({C, S}, rng, 1.0);
        for (auto& a : A.value_mut()) {
            a = -std::abs(a) - 0.05;
        }
        auto y = ssm_scan(x, dt, B, Cm, A);
        auto ref = scan_by_materialization(x, dt, B, Cm, A);
        CHECK(testutil::max_rel_diff(y.value(), ref) <= 1e-10);
    }
}

TEST_CASE("ssm_scan streaming: chunked with carried state equals whole") {
    RngStream rng(19);
    const std::size_t L = 10, C = 3, S = 4;
    T x = random_tensor({L, C}, rng);
    T dt = softplus(random_tensor({L, C}, rng));
    T B = random_tensor({L, S}, rng);
    T Cm = random_tensor({L, S}, rng);
    T A = T::gaussian({C, S}, rng, 0.5);
    for (auto& a : A.value_mut()) {
        a = -std::abs(a) - 0.05;
    }
    auto whole = ssm_scan(x, dt, B, Cm, A);

    auto piece = [&](const T& t, std::size_t r0, std::size_t r1) {
        return slice_rows(t, r0, r1).detached();
    };
    std::vector<double> state;
    auto y1 = ssm_scan(piece(x, 0, 4), piece(dt, 0, 4), piece(B, 0, 4), piece(Cm, 0, 4), A,
                       static_cast<const std::vector<double>*>(nullptr), &state);
    auto y2 = ssm_scan(piece(x, 4, L), piece(dt, 4, L), piece(B, 4, L), piece(Cm, 4, L), A,
                       &state, static_cast<std::vector<double>*>(nullptr));
    for (std::size_t i = 0; i < 4 * C; ++i) {
        CHECK(y1.value()[i] == doctest::Approx(whole.value()[i]).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < (L - 4) * C; ++i) {
        CHECK(y2.value()[i] == doctest::Approx(whole.value()[4 * C + i]).epsilon(1e-12));
    }
}

TEST_CASE("ssm_scan gradients vs finite differences") {
    RngStream rng(23);
    const std::size_t L = 5, C = 2, S = 3;
    T x = random_tensor({L, C}, rng, true);
    T dtp = random_tensor({L, C}, rng, true);
    T B = random_tensor({L, S}, rng, true);
    T Cm = random_tensor({L, S}, rng, true);
    T Alog = T::gaussian({C, S}, rng, 0.3, true);
    auto f = [&] {
        auto A = neg(exp(Alog)); // decay in (0,1)
        auto y = ssm_scan(x, softplus(dtp), B, Cm, A);
        return sum(mul(y, y));
    };
    auto res = testutil::grad_check({x, dtp, B, Cm, Alog}, f);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("rmsnorm scale invariance up to epsilon") {
    RngStream rng(29);
    T x = random_tensor({3, 8}, rng);
    T g = T::filled({8}, 1.0);
    auto y = rmsnorm_rows(x, g, 1e-6);
    for (double c : {0.5, 2.0, 10.0}) {
        auto yc = rmsnorm_rows(scale(x, c), g, 1e-6);
        CHECK(testutil::max_abs_diff(y.value(), yc.value()) <= 1e-5);
    }
}

TEST_CASE("no-grad mode builds no graph") {
    T x = T::from({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = sum(mul(x, x));
    CHECK(!y.requires_grad());
    CHECK(y.node()->parents.empty());
}
