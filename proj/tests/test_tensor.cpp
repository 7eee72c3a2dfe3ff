// Autograd engine tests: fixed-value cases, finite-difference oracles for
// every differentiable primitive, accumulation and determinism properties.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "diffrate/rng.hpp"
#include "diffrate/tensor.hpp"

using namespace diffrate;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, bool requires_grad = true,
                     double lo = -2.0, double hi = 2.0) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

// Central finite differences of a scalar-valued function of several leaves.
std::vector<std::vector<double>> numeric_grads(
    const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> leaves,
    double h = 1e-5) {
    std::vector<std::vector<double>> grads;
    for (size_t li = 0; li < leaves.size(); ++li) {
        std::vector<double> g(leaves[li].data().size());
        for (size_t i = 0; i < g.size(); ++i) {
            double orig = leaves[li].data()[i];
            leaves[li].data_mut()[i] = orig + h;
            double up = f(leaves).value();
            leaves[li].data_mut()[i] = orig - h;
            double dn = f(leaves).value();
            leaves[li].data_mut()[i] = orig;
            g[i] = (up - dn) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

void check_against_fd(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      std::vector<Tensor> leaves, double rel_tol = 1e-6) {
    Tensor out = f(leaves);
    backward(out);
    auto fd = numeric_grads(f, leaves);
    for (size_t li = 0; li < leaves.size(); ++li) {
        const auto& g = leaves[li].grad();
        for (size_t i = 0; i < g.size(); ++i) {
            double denom = std::max(1.0, std::abs(fd[li][i]));
            CHECK(std::abs(g[i] - fd[li][i]) / denom <= rel_tol);
        }
    }
}

}  // namespace

TEST_CASE("matmul identity") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(a, eye);
    CHECK(c.at(0, 0) == 1.0);
    CHECK(c.at(0, 1) == 2.0);
    CHECK(c.at(1, 0) == 3.0);
    CHECK(c.at(1, 1) == 4.0);
}

TEST_CASE("row softmax symmetry and mean reduce") {
    Tensor x({3}, {0, 0, 0});
    Tensor y = row_softmax(x);
    for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Tensor m = mean_all(Tensor({3}, {2, 4, 6}));
    CHECK(m.value() == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("backward of sum is ones") {
    Tensor x({3}, {1.5, -2.0, 7.0}, true);
    backward(sum_all(x));
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward mean of squares, frozen hand values") {
    Tensor x({3}, {1, 2, 3}, true);
    backward(mean_all(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(x.grad()[2] == doctest::Approx(2.0).epsilon(1e-12));
    // cross-check against central differences
    check_against_fd([](const std::vector<Tensor>& in) { return mean_all(mul(in[0], in[0])); },
                     {Tensor({3}, {1, 2, 3}, true)});
}

TEST_CASE("softmax then pick first, analytic jacobian") {
    Tensor x({2}, {0, 0}, true);
    Tensor y = row_softmax(x);
    backward(sum_all(gather_rows(y, {0})));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("ste passthrough contracts") {
    SUBCASE("value is hard, gradient goes to soft") {
        Tensor hard({2}, {1, 0});
        Tensor soft({2}, {0.9, 0.2}, true);
        Tensor out = ste_passthrough(hard, soft);
        CHECK(out.at(0) == 1.0);
        CHECK(out.at(1) == 0.0);
        Tensor c({2}, {3.0, -5.0});
        backward(sum_all(mul(out, c)));
        CHECK(soft.grad()[0] == 3.0);
        CHECK(soft.grad()[1] == -5.0);
    }
    SUBCASE("gradient to hard is identically zero") {
        Tensor hard({2}, {1, 0}, true);
        Tensor soft({2}, {0.9, 0.2}, true);
        backward(sum_all(ste_passthrough(hard, soft)));
        CHECK(hard.grad()[0] == 0.0);
        CHECK(hard.grad()[1] == 0.0);
        CHECK(soft.grad()[0] == 1.0);
        CHECK(soft.grad()[1] == 1.0);
    }
    SUBCASE("hard == soft acts as identity") {
        Tensor x({3}, {0.5, -1.0, 2.0}, true);
        Tensor out = ste_passthrough(x, x);
        CHECK(out.at(0) == 0.5);
        backward(sum_all(out));
        CHECK(x.grad()[0] == 1.0);
        CHECK(x.grad()[1] == 1.0);
        CHECK(x.grad()[2] == 1.0);
    }
    SUBCASE("shape mismatch rejected") {
        CHECK_THROWS(ste_passthrough(Tensor({2}, {1, 0}), Tensor({3}, {1, 0, 0})));
    }
}

TEST_CASE("finite differences across all smooth primitives") {
    Rng rng(20240601);
    const int rounds = 100;
    for (int r = 0; r < rounds; ++r) {
        // matmul + add + mul + scale chain
        {
            Tensor a = random_tensor(rng, {3, 4});
            Tensor b = random_tensor(rng, {4, 2});
            Tensor c = random_tensor(rng, {3, 2});
            check_against_fd(
                [](const std::vector<Tensor>& in) {
                    return mean_all(mul(add(matmul(in[0], in[1]), in[2]), in[2]));
                },
                {a, b, c});
        }
        // softmax / layer_norm / gelu
        {
            Tensor x = random_tensor(rng, {2, 5});
            Tensor g = random_tensor(rng, {5}, true, 0.5, 1.5);
            Tensor b2 = random_tensor(rng, {5});
            check_against_fd(
                [](const std::vector<Tensor>& in) {
                    return mean_all(gelu(layer_norm(row_softmax(in[0]), in[1], in[2])));
                },
                {x, g, b2});
        }
        // exp/log/cosh/square with positive domain for log
        {
            Tensor x = random_tensor(rng, {4}, true, 0.2, 3.0);
            check_against_fd(
                [](const std::vector<Tensor>& in) {
                    return sum_all(add(log(in[0]), square(cosh(scale(in[0], 0.3)))));
                },
                {x});
            Tensor y = random_tensor(rng, {4});
            check_against_fd(
                [](const std::vector<Tensor>& in) { return mean_all(exp(in[0])); }, {y});
        }
        // structural ops: transpose, concat, gather, scatter, rowwise add
        {
            Tensor x = random_tensor(rng, {3, 3});
            Tensor y = random_tensor(rng, {2, 3});
            Tensor v = random_tensor(rng, {4});
            check_against_fd(
                [](const std::vector<Tensor>& in) {
                    Tensor cat = concat_rows({in[0], in[1]});
                    Tensor g = gather_rows(cat, {4, 0, 2, 0});
                    Tensor s = scatter_rows(g, {1, 3}, in[1]);
                    return mean_all(add_rowwise(transpose(s), in[2]));
                },
                {x, y, v});
        }
        // gather_cols / concat_cols / max_of away from ties
        {
            Tensor a = random_tensor(rng, {2, 3});
            Tensor b = random_tensor(rng, {2, 3});
            bool tied = false;
            for (int i = 0; i < 6; ++i)
                if (std::abs(a.data()[i] - b.data()[i]) < 1e-3) tied = true;
            if (!tied) {
                check_against_fd(
                    [](const std::vector<Tensor>& in) {
                        Tensor m = max_of(in[0], in[1]);
                        Tensor cc = concat_cols({m, in[0]});
                        return mean_all(gather_cols(cc, {1, 4, 0}));
                    },
                    {a, b});
            }
        }
    }
}

TEST_CASE("gradient accumulation across branches equals fused expression") {
    Rng rng(7);
    Tensor x = random_tensor(rng, {4});
    // branched: y = sum(x*x) + sum(3x)
    Tensor branched = add(sum_all(mul(x, x)), sum_all(scale(x, 3.0)));
    backward(branched);
    std::vector<double> g1 = x.grad();

    Tensor x2({4}, x.data(), true);
    // fused: same function written once per element
    Tensor fused = sum_all(add(mul(x2, x2), scale(x2, 3.0)));
    backward(fused);
    for (int i = 0; i < 4; ++i) CHECK(g1[i] == doctest::Approx(x2.grad()[i]).epsilon(1e-15));
}

TEST_CASE("determinism: identical seeds give bit-identical values and grads") {
    auto run = [] {
        Rng rng(99);
        Tensor a = random_tensor(rng, {4, 4});
        Tensor b = random_tensor(rng, {4, 4});
        Tensor out = mean_all(gelu(matmul(row_softmax(a), b)));
        backward(out);
        std::vector<double> all;
        all.push_back(out.value());
        all.insert(all.end(), a.grad().begin(), a.grad().end());
        all.insert(all.end(), b.grad().begin(), b.grad().end());
        return all;
    };
    auto r1 = run();
    auto r2 = run();
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("error paths") {
    CHECK_THROWS(add(Tensor({2}, {1, 2}), Tensor({3}, {1, 2, 3})));
    CHECK_THROWS(matmul(Tensor({2, 3}, 0.0), Tensor({2, 3}, 0.0)));
    CHECK_THROWS(backward(Tensor({2}, {1, 2}, true)));  // non-scalar root
    Tensor bad({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS(scale(bad, 1.0));
    Tensor inf({1}, {std::numeric_limits<double>::infinity()});
    CHECK_THROWS(add(inf, Tensor({1}, {1.0})));
    CHECK_THROWS(scatter_rows(Tensor({3, 2}, 0.0), {1, 1}, Tensor({2, 2}, 0.0)));
}

TEST_CASE("tape entries are topologically ordered") {
    Tensor x({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    Tensor z = sum_all(add(y, x));
    GradientTape tape = GradientTape::of(z);
    REQUIRE(tape.entries.size() == 3);
    for (size_t i = 0; i < tape.entries.size(); ++i) {
        for (uint64_t in_id : tape.entries[i].input_ids) {
            for (size_t j = i; j < tape.entries.size(); ++j)
                CHECK(tape.entries[j].output_id != in_id);
        }
    }
}

TEST_CASE("max_of routes subgradient to the larger input") {
    Tensor a = Tensor::scalar(2.0, true);
    Tensor b = Tensor::scalar(1.0, true);
    backward(sum_all(max_of(a, b)));
    CHECK(a.grad()[0] == 1.0);
    CHECK(b.grad()[0] == 0.0);
}

TEST_CASE("detach blocks gradient flow") {
    Tensor x({2}, {1, 2}, true);
    Tensor d = detach(mul(x, x));
    CHECK_FALSE(d.needs_grad());
    Tensor out = sum_all(add(mul(x, x), d));
    backward(out);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}
