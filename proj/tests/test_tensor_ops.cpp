#include <doctest.h>

#include <cmath>

#include "nfuse/ops.hpp"
#include "nfuse/rng.hpp"

using nfuse::Shape;
using nfuse::Tensor;

namespace {

Tensor<double> rand64(Shape s, nfuse::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(nfuse::shape_numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(std::move(s), std::move(v));
}

}  // namespace

TEST_CASE("elementwise add and shape errors") {
    Tensor<float> a({2}, {1.f, 2.f});
    Tensor<float> b({2}, {3.f, 4.f});
    Tensor<float> c = add(a, b);
    CHECK(c.vals() == std::vector<float>{4.f, 6.f});

    Tensor<float> bad({3}, {1.f, 2.f, 3.f});
    CHECK_THROWS_WITH_AS(add(a, bad), doctest::Contains("(2)"), nfuse::ShapeError);
    CHECK_THROWS_WITH_AS(add(a, bad), doctest::Contains("(3)"), nfuse::ShapeError);
}

TEST_CASE("reshape preserves row-major order bitwise") {
    std::vector<float> v(24);
    for (std::size_t i = 0; i < 24; ++i) v[i] = static_cast<float>(i) * 0.5f;
    Tensor<float> t({2, 3, 4}, v);
    Tensor<float> r = reshape(t, {2, 12});
    CHECK(r.shape == Shape{2, 12});
    CHECK(r.vals() == v);
    CHECK_THROWS_AS(reshape(t, {5, 5}), nfuse::ShapeError);
}

TEST_CASE("concat then split is an exact roundtrip") {
    nfuse::Rng rng(7);
    std::vector<float> av(2 * 3 * 2), bv(2 * 5 * 2);
    for (auto& x : av) x = static_cast<float>(rng.uniform(-10, 10));
    for (auto& x : bv) x = static_cast<float>(rng.uniform(-10, 10));
    Tensor<float> a({2, 3, 2}, av);
    Tensor<float> b({2, 5, 2}, bv);
    Tensor<float> cat = nfuse::concat<float>({a, b}, 1);
    auto parts = split(cat, 1, {3, 5});
    CHECK(parts[0].vals() == av);  // bitwise
    CHECK(parts[1].vals() == bv);
    CHECK_THROWS_AS(split(cat, 1, {4, 5}), nfuse::ShapeError);
    CHECK_THROWS_AS(split(cat, 5, {3, 5}), nfuse::ShapeError);
}

TEST_CASE("matmul basics") {
    Tensor<float> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    nfuse::Rng rng(3);
    std::vector<float> xv(9);
    for (auto& x : xv) x = static_cast<float>(rng.uniform(-2, 2));
    Tensor<float> x({3, 3}, xv);
    CHECK(matmul(eye, x).vals() == xv);

    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    Tensor<float> ones({2, 1}, {1, 1});
    Tensor<float> c = matmul(a, ones);
    CHECK(c.vals() == std::vector<float>{3.f, 7.f});

    Tensor<float> bad({3, 2}, {0, 0, 0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(matmul(a, bad), doctest::Contains("inner dimensions"), nfuse::ShapeError);
}

TEST_CASE("softmax examples") {
    Tensor<float> single({1}, {3.7f});
    CHECK(softmax_axis(single, 0).vals()[0] == 1.0f);  // exactly

    Tensor<double> two({2}, {1.0, 2.0});
    auto s = softmax_axis(two, 0);
    CHECK(s.vals()[0] == doctest::Approx(0.26894).epsilon(1e-4));
    CHECK(s.vals()[1] == doctest::Approx(0.73106).epsilon(1e-4));

    Tensor<double> big({2}, {1000.0, 1000.0});
    auto sb = softmax_axis(big, 0);  // must not overflow
    CHECK(sb.vals()[0] == doctest::Approx(0.5));
    CHECK(sb.vals()[1] == doctest::Approx(0.5));

    CHECK_THROWS_AS(softmax_axis(two, 3), nfuse::ShapeError);
}

TEST_CASE("softmax slices sum to 1 for extreme magnitudes") {
    nfuse::Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> t = rand64({3, 5}, rng, -1e4, 1e4);
        auto s = softmax_axis(t, 1);
        for (std::size_t r = 0; r < 3; ++r) {
            double sum = 0;
            for (std::size_t c = 0; c < 5; ++c) sum += s.vals()[r * 5 + c];
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm examples") {
    Tensor<double> x({3}, {1, 2, 3});
    Tensor<double> g = Tensor<double>::full({3}, 1.0);
    Tensor<double> b = Tensor<double>::zeros({3});
    auto y = layer_norm(x, g, b, 1e-5);
    CHECK(y.vals()[0] == doctest::Approx(-1.22474).epsilon(1e-3));
    CHECK(y.vals()[1] == doctest::Approx(0.0).epsilon(1e-4));
    CHECK(y.vals()[2] == doctest::Approx(1.22474).epsilon(1e-3));

    Tensor<double> c({4}, {5, 5, 5, 5});
    Tensor<double> g4 = Tensor<double>::full({4}, 1.0);
    Tensor<double> b4 = Tensor<double>::zeros({4});
    auto yc = layer_norm(c, g4, b4, 1e-5);
    for (double v : yc.vals()) CHECK(std::abs(v) < 1e-6);

    auto y7 = layer_norm(x, Tensor<double>::zeros({3}), Tensor<double>::full({3}, 7.0), 1e-5);
    for (double v : y7.vals()) CHECK(v == 7.0);

    CHECK_THROWS_AS(layer_norm(x, Tensor<double>::zeros({2}), b, 1e-5), nfuse::ShapeError);
}

TEST_CASE("max_axis breaks ties at the lowest index") {
    Tensor<double> t({4}, {2.0, 5.0, 5.0, 1.0});
    nfuse::Tape<double> tape;
    Tensor<double> w = tape.watch(t);
    auto loss = sum_all(max_axis(w, 0));
    auto grads = tape.backward(loss);
    CHECK(grads.at(w.node).vals() == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("backward analytic examples") {
    // loss = sum(x * x) -> grad 2x
    nfuse::Tape<double> tape;
    Tensor<double> x = tape.watch(Tensor<double>({3}, {1, 2, 3}));
    auto grads = tape.backward(sum_all(mul(x, x)));
    CHECK(grads.at(x.node).vals() == std::vector<double>{2, 4, 6});

    // loss = sum(A . B) -> dA = ones . B^T
    nfuse::Tape<double> tape2;
    Tensor<double> a = tape2.watch(Tensor<double>({2, 2}, {1, 1, 1, 1}));
    Tensor<double> b({2, 2}, {1, 2, 3, 4});
    auto g2 = tape2.backward(sum_all(matmul(a, b)));
    CHECK(g2.at(a.node).vals() == std::vector<double>{3, 7, 3, 7});

    // non-scalar loss rejected
    nfuse::Tape<double> tape3;
    Tensor<double> y = tape3.watch(Tensor<double>({2}, {1, 2}));
    auto z = mul(y, y);
    CHECK_THROWS_AS(tape3.backward(z), nfuse::ShapeError);

    // loss not on the given tape
    nfuse::Tape<double> tape4;
    CHECK_THROWS_AS(tape4.backward(sum_all(b)), nfuse::TensorError);
}

TEST_CASE("gradient accumulates over multiple consumers") {
    nfuse::Tape<double> tape;
    Tensor<double> x = tape.watch(Tensor<double>({2}, {3, 4}));
    auto loss = sum_all(add(mul(x, x), x));  // d/dx (x^2 + x) = 2x + 1
    auto grads = tape.backward(loss);
    CHECK(grads.at(x.node).vals() == std::vector<double>{7, 9});
}

TEST_CASE("finite_difference_grad examples") {
    // f(x) = x^2 at 3 -> 6
    auto sq = [](const Tensor<double>& t) { return t.vals()[0] * t.vals()[0]; };
    Tensor<double> x3 = Tensor<double>::scalar(3.0);
    CHECK(nfuse::finite_difference_grad<double>(sq, x3).vals()[0] == doctest::Approx(6.0).epsilon(1e-6));

    // f(x) = sum(exp(x)) at [0, 1] -> [1, e]
    auto se = [](const Tensor<double>& t) {
        return std::exp(t.vals()[0]) + std::exp(t.vals()[1]);
    };
    Tensor<double> x01({2}, {0.0, 1.0});
    auto g = nfuse::finite_difference_grad<double>(se, x01);
    CHECK(g.vals()[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(g.vals()[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-4));

    // softmax-then-first-component matches the closed-form Jacobian row
    auto sf = [](const Tensor<double>& t) { return softmax_axis(t, 0).vals()[0]; };
    Tensor<double> x12({2}, {1.0, 2.0});
    auto gs = nfuse::finite_difference_grad<double>(sf, x12);
    auto s = softmax_axis(x12, 0);
    double s1 = s.vals()[0], s2 = s.vals()[1];
    CHECK(gs.vals()[0] == doctest::Approx(s1 * (1 - s1)).epsilon(1e-5));
    CHECK(gs.vals()[1] == doctest::Approx(-s1 * s2).epsilon(1e-5));
}

TEST_CASE("overflow is detected and reported") {
    Tensor<double> huge({1}, {1e300});
    CHECK_THROWS_AS((void)nfuse::exp(huge), nfuse::NumericError);
}

TEST_CASE("ops are deterministic given identical inputs") {
    nfuse::Rng rng(99);
    Tensor<double> a = rand64({4, 4}, rng);
    Tensor<double> b = rand64({4, 4}, rng);
    auto r1 = matmul(softmax_axis(a, 1), gelu(b));
    auto r2 = matmul(softmax_axis(a, 1), gelu(b));
    CHECK(r1.vals() == r2.vals());  // bitwise
}
