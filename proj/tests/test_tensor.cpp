#include <catch2/catch_amalgamated.hpp>

#include "fap/tensor.hpp"
#include "oracles.hpp"

using namespace fap;

TEST_CASE("softmax basics") {
    Tensor x = Tensor::from_data({2}, {0.0, 0.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y.values()[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(y.values()[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax sums to one and is shift invariant") {
    Rng rng(11);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> v(5);
        for (auto& e : v) e = rng.uniform(-5, 5);
        Tensor a = Tensor::from_data({5}, v);
        double c = rng.uniform(-3, 3);
        std::vector<double> vs = v;
        for (auto& e : vs) e += c;
        Tensor b = Tensor::from_data({5}, vs);
        Tensor ya = softmax_lastdim(a), yb = softmax_lastdim(b);
        double sum = 0;
        for (double e : ya.values()) sum += e;
        CHECK(std::abs(sum - 1.0) < 1e-12);
        for (int i = 0; i < 5; ++i) CHECK(std::abs(ya.values()[i] - yb.values()[i]) < 1e-12);
    }
}

TEST_CASE("l2 normalize 3-4-5") {
    Tensor x = Tensor::from_data({2}, {3.0, 4.0});
    Tensor y = l2_normalize_lastdim(x);
    CHECK(y.values()[0] == Catch::Approx(0.6).margin(1e-15));
    CHECK(y.values()[1] == Catch::Approx(0.8).margin(1e-15));
    CHECK_THROWS(l2_normalize_lastdim(Tensor::zeros({3})));
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(5);
    Tensor a = Tensor::randn({2, 3}, rng);
    Tensor b = Tensor::randn({3, 4}, rng);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 4});
    auto expect = oracles::matmul_naive(a.values(), b.values(), 2, 3, 4);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(c.values()[i] == Catch::Approx(expect[i]).margin(1e-12));
    CHECK_THROWS(matmul(a, a));
}

TEST_CASE("backward of quadratic") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    x.set_leaf();
    Tensor out = sum_all(mul(x, x));
    backward(out);
    auto g = x.grad();
    CHECK(g[0] == Catch::Approx(2.0));
    CHECK(g[1] == Catch::Approx(4.0));
    CHECK(g[2] == Catch::Approx(6.0));
}

TEST_CASE("constant output gives zero gradients") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    x.set_leaf();
    Tensor c = Tensor::scalar(7.0);
    backward(c);
    auto g = x.grad();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("double backward on a consumed trace throws") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    x.set_leaf();
    Tensor out = sum_all(mul(x, x));
    backward(out);
    CHECK_THROWS(backward(out));
}

TEST_CASE("finite differences across the op suite") {
    Rng rng(42);
    SECTION("elementwise and reductions") {
        std::vector<Tensor> leaves = {Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)};
        for (auto& l : leaves) l.set_leaf();
        auto build = [&]() {
            Tensor a = leaves[0], b = leaves[1];
            Tensor t = add(mul(a, b), sub(a, b));
            t = gelu(t);
            t = scalar_add(scalar_mul(t, 0.7), 0.1);
            return mean_all(exp_(scalar_mul(t, 0.3)));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("matmul, transpose, reshape, concat, slice") {
        std::vector<Tensor> leaves = {Tensor::randn({2, 3}, rng), Tensor::randn({3, 4}, rng)};
        for (auto& l : leaves) l.set_leaf();
        auto build = [&]() {
            Tensor c = matmul(leaves[0], leaves[1]);             // (2,4)
            Tensor t = transpose(c);                             // (4,2)
            Tensor cc = concat({c, transpose(t)}, 0);            // (4,4)
            Tensor s = slice(cc, 1, 1, 2);                       // (4,2)
            return sum_all(mul(reshape(s, {8}), reshape(s, {8})));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("bmm and permute") {
        std::vector<Tensor> leaves = {Tensor::randn({2, 3, 4}, rng), Tensor::randn({2, 4, 2}, rng)};
        for (auto& l : leaves) l.set_leaf();
        auto build = [&]() {
            Tensor c = bmm(leaves[0], leaves[1]);        // (2,3,2)
            Tensor p = permute(c, {1, 0, 2});            // (3,2,2)
            return mean_all(mul(p, p));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("softmax, log_softmax, log") {
        std::vector<Tensor> leaves = {Tensor::randn({4, 5}, rng)};
        leaves[0].set_leaf();
        auto build = [&]() {
            Tensor s = softmax_lastdim(leaves[0]);
            Tensor ls = log_softmax_lastdim(leaves[0]);
            return sum_all(add(mul(s, ls), log_(scalar_add(s, 1.0))));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("layer_norm") {
        std::vector<Tensor> leaves = {Tensor::randn({3, 6}, rng), Tensor::randn({6}, rng, 0.5),
                                      Tensor::randn({6}, rng, 0.5)};
        for (auto& l : leaves) l.set_leaf();
        auto build = [&]() {
            Tensor y = layer_norm(leaves[0], scalar_add(leaves[1], 1.0), leaves[2]);
            return mean_all(mul(y, y));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("l2_normalize") {
        std::vector<Tensor> leaves = {Tensor::randn({3, 5}, rng)};
        leaves[0].set_leaf();
        auto build = [&]() {
            Tensor y = l2_normalize_lastdim(leaves[0]);
            Tensor w = Tensor::from_data({3, 5}, std::vector<double>(15, 0.3));
            return sum_all(mul(y, w));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("add_bias, tile0, take_per_row, take_token, sum_lastdim") {
        std::vector<Tensor> leaves = {Tensor::randn({2, 3, 4}, rng), Tensor::randn({4}, rng),
                                      Tensor::randn({3, 4}, rng)};
        for (auto& l : leaves) l.set_leaf();
        auto build = [&]() {
            Tensor x = add(add_bias(leaves[0], leaves[1]), tile0(leaves[2], 2));
            Tensor tok = take_token(x, {1, 2});                   // (2,4)
            Tensor row = take_per_row(tok, {0, 3});               // (2,)
            return add(mean_all(row), mean_all(sum_lastdim(x)));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("embedding_rows") {
        std::vector<Tensor> leaves = {Tensor::randn({5, 3}, rng)};
        leaves[0].set_leaf();
        auto build = [&]() {
            Tensor e = embedding_rows(leaves[0], {0, 2, 2, 4, 1, 3}, 2, 3);
            return mean_all(mul(e, e));
        };
        CHECK(oracles::check_gradients(leaves, build, rng));
    }
    SECTION("clamp passes gradient strictly inside the interval only") {
        Tensor x = Tensor::from_data({4}, {-2.0, 0.3, 0.5, 2.0});
        x.set_leaf();
        Tensor out = sum_all(clamp(x, 0.0, 1.0));
        backward(out);
        auto g = x.grad();
        CHECK(g[0] == 0.0);
        CHECK(g[1] == 1.0);
        CHECK(g[2] == 1.0);
        CHECK(g[3] == 0.0);
    }
}

TEST_CASE("sign is forward-only") {
    Tensor x = Tensor::from_data({3}, {-0.5, 0.0, 2.0});
    x.set_leaf();
    Tensor s = sign(x);
    CHECK(s.values() == std::vector<double>{-1.0, 0.0, 1.0});
    CHECK_FALSE(s.needs_grad());
}

TEST_CASE("determinism: identical op sequence is bit-identical") {
    auto run = []() {
        Rng rng(99);
        Tensor a = Tensor::randn({8, 8}, rng);
        Tensor b = Tensor::randn({8, 8}, rng);
        Tensor c = softmax_lastdim(matmul(a, b));
        return mean_all(layer_norm(c, Tensor::full({8}, 1.0), Tensor::zeros({8}))).value();
    };
    double r1 = run(), r2 = run();
    CHECK(r1 == r2);
}

TEST_CASE("shape errors are reported") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS(add(a, b));
    CHECK_THROWS(reshape(a, {4, 4}));
    CHECK_THROWS(slice(a, 1, 2, 3));
    CHECK_THROWS(concat({a, b}, 0));
}
