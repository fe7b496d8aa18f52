#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ceat/gradcheck.hpp"
#include "ceat/tensor.hpp"

using namespace ceat;
using Catch::Approx;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = u(rng);
    return t;
}

Tensor eval(Var v) { return v.value(); }

}  // namespace

TEST_CASE("tensor rejects inconsistent storage", "[tensor]") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
    CHECK(Tensor::scalar(3.0).item() == 3.0);
    CHECK_THROWS_AS(Tensor({2}).item(), UsageError);
}

TEST_CASE("matmul identity, annihilator and triple-loop oracle", "[tensor][matmul]") {
    Tape t;
    const Tensor b = random_tensor({2, 5}, 1);
    CHECK(eval(matmul(t.constant(Tensor({2, 2}, {1, 0, 0, 1})), t.constant(b))) == b);

    const Tensor b32 = random_tensor({3, 2}, 2);
    CHECK(eval(matmul(t.constant(Tensor({2, 3})), t.constant(b32))) == Tensor({2, 2}));

    const Tensor a = random_tensor({2, 3}, 3);
    const Tensor c = eval(matmul(t.constant(a), t.constant(b32)));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double ref = 0.0;
            for (std::size_t k = 0; k < 3; ++k) ref += a[i * 3 + k] * b32[k * 2 + j];
            CHECK(std::fabs(c[i * 2 + j] - ref) <= 1e-12);
        }

    CHECK_THROWS_AS(matmul(t.constant(a), t.constant(a)), DimensionError);
}

TEST_CASE("matmul backward is dC·Bᵀ and Aᵀ·dC", "[tensor][matmul]") {
    Tape t;
    const Tensor a = random_tensor({2, 3}, 4), b = random_tensor({3, 4}, 5);
    Var av = t.leaf(a, true), bv = t.leaf(b, true);
    backward(sum(matmul(av, bv)));
    const Tensor ga = av.grad(), gb = bv.grad();
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            double ref = 0.0;
            for (std::size_t j = 0; j < 4; ++j) ref += b[k * 4 + j];
            CHECK(ga[i * 3 + k] == Approx(ref).epsilon(1e-14));
        }
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 4; ++j) CHECK(gb[k * 4 + j] == Approx(a[k] + a[3 + k]).epsilon(1e-14));
}

TEST_CASE("conv2d zero kernel, identity kernel and direct-loop oracle", "[tensor][conv]") {
    Tape t;
    const Tensor x = random_tensor({2, 2, 4, 4}, 6);
    CHECK(eval(conv2d(t.constant(x), t.constant(Tensor({3, 2, 3, 3})))) == Tensor({2, 3, 4, 4}));

    Tensor ident({2, 2, 3, 3});
    ident[(0 * 2 + 0) * 9 + 4] = 1.0;
    ident[(1 * 2 + 1) * 9 + 4] = 1.0;
    CHECK(eval(conv2d(t.constant(x), t.constant(ident))) == x);

    const Tensor x1 = random_tensor({1, 1, 4, 4}, 7), k = random_tensor({1, 1, 3, 3}, 8);
    const Tensor y = eval(conv2d(t.constant(x1), t.constant(k)));
    for (int n = 0; n < 1; ++n)
        for (int f = 0; f < 1; ++f)
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) {
                    double ref = 0.0;
                    for (int dr = -1; dr <= 1; ++dr)
                        for (int dc = -1; dc <= 1; ++dc) {
                            const int rr = r + dr, cc = c + dc;
                            if (rr < 0 || rr >= 4 || cc < 0 || cc >= 4) continue;
                            ref += x1[rr * 4 + cc] * k[(dr + 1) * 3 + (dc + 1)];
                        }
                    CHECK(std::fabs(y[r * 4 + c] - ref) <= 1e-12);
                }

    CHECK_THROWS_AS(conv2d(t.constant(x), t.constant(Tensor({1, 3, 3, 3}))), DimensionError);
}

TEST_CASE("relu forward and subgradient at zero", "[tensor]") {
    Tape t;
    Var x = t.leaf(Tensor({3}, {-1, 0, 2}), true);
    Var y = relu(x);
    CHECK(y.value() == Tensor({3}, {0, 0, 2}));
    backward(sum(y));
    CHECK(x.grad() == Tensor({3}, {0, 0, 1}));

    const Tensor pos = random_tensor({5}, 9, 0.0, 1.0);
    CHECK(eval(relu(t.constant(pos))) == pos);

    const Tensor away({4}, {-0.7, -0.2, 0.3, 0.9});
    auto f = [](const Tensor& v) {
        Tape tp;
        return sum(relu(tp.constant(v))).value().item();
    };
    Tape tg;
    Var xv = tg.leaf(away, true);
    backward(sum(relu(xv)));
    CHECK(max_relative_error(xv.grad(), finite_difference_gradient(f, away, 1e-5)) < 1e-9);
}

TEST_CASE("softmax symmetry, shift invariance and closed form", "[tensor][softmax]") {
    const Tensor uniform({2, 4}, 0.3);
    const Tensor pu = softmax_rows(uniform);
    for (double v : pu.values()) CHECK(v == Approx(0.25).epsilon(1e-15));

    const Tensor z = random_tensor({3, 5}, 10, -4, 4);
    Tensor shifted = z;
    for (auto& v : shifted.values()) v += 17.5;
    const Tensor p = softmax_rows(z), q = softmax_rows(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::fabs(p[i] - q[i]) <= 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) s += p[r * 5 + c];
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }

    const Tensor closed = softmax_rows(Tensor({1, 2}, {0.0, std::log(3.0)}));
    CHECK(std::fabs(closed[0] - 0.25) <= 1e-12);
    CHECK(std::fabs(closed[1] - 0.75) <= 1e-12);
}

TEST_CASE("cross entropy limits and direct formula", "[tensor][loss]") {
    Tape t;
    const std::vector<int> y{1};
    CHECK(cross_entropy(t.constant(Tensor({1, 3}, {0, 50, 0})), y).value().item() < 1e-9);
    const std::vector<int> y2{0, 3};
    CHECK(cross_entropy(t.constant(Tensor({2, 4}, 1.5)), y2).value().item() == Approx(std::log(4.0)).epsilon(1e-14));

    const Tensor z = random_tensor({3, 4}, 11, -3, 3);
    const std::vector<int> labels{2, 0, 3};
    const Tensor p = softmax_rows(z);
    double ref = 0.0;
    for (std::size_t r = 0; r < 3; ++r) ref -= std::log(p[r * 4 + static_cast<std::size_t>(labels[r])]);
    ref /= 3.0;
    CHECK(std::fabs(cross_entropy(t.constant(z), labels).value().item() - ref) <= 1e-12);

    const std::vector<int> bad{4, 0, 0};
    CHECK_THROWS_AS(cross_entropy(t.constant(z), bad), InputError);
}

TEST_CASE("cross entropy gradient is (p - onehot)/N", "[tensor][loss]") {
    Tape t;
    const Tensor z = random_tensor({3, 4}, 12, -2, 2);
    const std::vector<int> labels{1, 1, 0};
    Var zv = t.leaf(z, true);
    backward(cross_entropy(zv, labels));
    const Tensor g = zv.grad(), p = softmax_rows(z);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            const double onehot = static_cast<int>(c) == labels[r] ? 1.0 : 0.0;
            CHECK(g[r * 4 + c] == Approx((p[r * 4 + c] - onehot) / 3.0).epsilon(1e-13));
        }
}

TEST_CASE("elementwise ops and their derivatives", "[tensor]") {
    Tape t;
    CHECK(eval(square(t.constant(Tensor({2}, {-2, 3})))) == Tensor({2}, {4, 9}));
    CHECK(eval(exp(t.constant(Tensor({3})))) == Tensor({3}, 1.0));
    CHECK_THROWS_AS(add(t.constant(Tensor({2})), t.constant(Tensor({3}))), DimensionError);

    const Tensor x = random_tensor({6}, 13, -2, 2);
    auto f = [](const Tensor& v) {
        Tape tp;
        return sum(exp(tp.constant(v))).value().item();
    };
    Tape tg;
    Var xv = tg.leaf(x, true);
    backward(sum(exp(xv)));
    CHECK(max_relative_error(xv.grad(), finite_difference_gradient(f, x, 1e-5)) < 1e-6);

    Tape ta;
    Var a = ta.leaf(Tensor({3}, {-1.5, 0.0, 2.0}), true);
    backward(sum(abs(a)));
    CHECK(a.grad() == Tensor({3}, {-1, 0, 1}));
}

TEST_CASE("reductions match loop oracles", "[tensor][reduce]") {
    Tape t;
    CHECK(mean(t.constant(Tensor({3}, {1, 2, 3}))).value().item() == 2.0);
    CHECK(sum(t.constant(Tensor({4}))).value().item() == 0.0);

    const Tensor x = random_tensor({3, 4}, 14);
    const Tensor rows = eval(sum(t.constant(x), 1));
    const Tensor cols = eval(mean(t.constant(x), 0));
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += x[r * 4 + c];
        CHECK(rows[r] == s);
    }
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 3; ++r) s += x[r * 4 + c];
        CHECK(cols[c] == s / 3.0);
    }
    CHECK_THROWS_AS(sum(t.constant(x), 2), InputError);
}

TEST_CASE("backward basics and misuse", "[tensor][backward]") {
    const Tensor x = random_tensor({5}, 15);
    {
        Tape t;
        Var v = t.leaf(x, true);
        backward(sum(v));
        CHECK(v.grad() == Tensor({5}, 1.0));
    }
    {
        Tape t;
        Var v = t.leaf(x, true);
        backward(sum(square(v)));
        for (std::size_t i = 0; i < 5; ++i) CHECK(v.grad()[i] == 2.0 * x[i]);
    }
    Tape t;
    Var v = t.leaf(x, true);
    CHECK_THROWS_AS(backward(square(v)), UsageError);
    Var root = sum(v);
    backward(root);
    CHECK_THROWS_AS(backward(root), UsageError);
    t.zero_grad();
    CHECK_NOTHROW(backward(root));
}

TEST_CASE("a node consumed k times accumulates the sum of k partials", "[tensor][backward][property]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Tensor x = random_tensor({4}, 100 + seed);
        Tape t;
        Var v = t.leaf(x, true);
        Var a = square(v), b = exp(v), c = scale(v, 3.0);
        backward(sum(add(add(a, b), c)));
        const Tensor together = v.grad();

        Tensor separate({4});
        for (int which = 0; which < 3; ++which) {
            Tape s;
            Var w = s.leaf(x, true);
            Var part = which == 0 ? square(w) : which == 1 ? exp(w) : scale(w, 3.0);
            backward(sum(part));
            for (std::size_t i = 0; i < 4; ++i) separate[i] += w.grad()[i];
        }
        for (std::size_t i = 0; i < 4; ++i) CHECK(together[i] == Approx(separate[i]).epsilon(1e-15));
    }
}

TEST_CASE("finite differences on analytic functions", "[tensor][fd]") {
    const Tensor x = random_tensor({4}, 16);
    const Tensor g = finite_difference_gradient([](const Tensor& v) {
        double s = 0.0;
        for (double e : v.values()) s += e;
        return s;
    }, x, 1e-5);
    for (double e : g.values()) CHECK(e == Approx(1.0).epsilon(1e-9));
    const Tensor sq = finite_difference_gradient([](const Tensor& v) { return v[0] * v[0]; }, Tensor({1}, {3.0}), 1e-5);
    CHECK(std::fabs(sq[0] - 6.0) <= 1e-6);
    CHECK_THROWS_AS(finite_difference_gradient([](const Tensor&) { return 0.0; }, x, 0.0), InputError);
}

TEST_CASE("two-layer MLP loss gradients match finite differences", "[tensor][fd]") {
    const Tensor x = random_tensor({4, 6}, 17, 0, 1);
    Tensor w1 = random_tensor({6, 5}, 18), w2 = random_tensor({5, 3}, 19);
    const std::vector<int> y{0, 2, 1, 2};
    auto loss = [&](const Tensor& a, const Tensor& b) {
        Tape t;
        return cross_entropy(matmul(relu(matmul(t.constant(x), t.constant(a))), t.constant(b)), y).value().item();
    };
    Tape t;
    Var a = t.leaf(w1, true), b = t.leaf(w2, true);
    backward(cross_entropy(matmul(relu(matmul(t.constant(x), a)), b), y));
    CHECK(max_relative_error(a.grad(), finite_difference_gradient([&](const Tensor& v) { return loss(v, w2); }, w1,
                                                                  1e-5)) < 1e-4);
    CHECK(max_relative_error(b.grad(), finite_difference_gradient([&](const Tensor& v) { return loss(w1, v); }, w2,
                                                                  1e-5)) < 1e-4);
}

TEST_CASE("gradcheck suite passes on seeded MLP and CNN instances", "[tensor][fd][property]") {
    const auto result = gradcheck_suite(10, 0);
    REQUIRE(result.trials.size() == 20);
    for (const auto& trial : result.trials) {
        CHECK(trial.parameters <= 5000);
        CHECK(trial.worst() < 1e-4);
    }
    CHECK(result.passed());
}

TEST_CASE("ops are deterministic", "[tensor][property]") {
    const Tensor x = random_tensor({2, 1, 4, 4}, 20), k = random_tensor({2, 1, 3, 3}, 21);
    Tape a, b;
    CHECK(eval(softmax(reshape(conv2d(a.constant(x), a.constant(k)), {2, 32}))) ==
          eval(softmax(reshape(conv2d(b.constant(x), b.constant(k)), {2, 32}))));
}
