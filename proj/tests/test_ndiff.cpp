#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "peclr/graph.hpp"
#include "peclr/rng.hpp"

using namespace peclr;
using nd::Graph;
using nd::NamedTensors;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// scalar-output wrapper: mean of whatever the builder returns
template <typename Builder>
double checked_grad(Builder&& build, double step = 1e-5) {
    Graph g;
    int out = build(g);
    g.mark_output("y", g.mean(out));
    auto res = nd::grad_check(g, {}, step);
    REQUIRE(res.checked > 0);
    return res.max_rel_error;
}

}  // namespace

TEST_CASE("dense identity weights pass input through") {
    Graph g;
    int x = g.input("x", {1, 2});
    int w = g.param("w", Tensor({2, 2}, {1, 0, 0, 1}));
    int b = g.param("b", Tensor({2}));
    g.mark_output("y", g.dense(x, w, b));
    auto out = g.forward({{"x", Tensor({1, 2}, {1, 2})}});
    CHECK(out.at("y")[0] == 1.0);
    CHECK(out.at("y")[1] == 2.0);
}

TEST_CASE("relu clamps negatives") {
    Graph g;
    int x = g.input("x", {2});
    g.mark_output("y", g.relu(x));
    auto out = g.forward({{"x", Tensor({2}, {-1, 2})}});
    CHECK(out.at("y")[0] == 0.0);
    CHECK(out.at("y")[1] == 2.0);
}

TEST_CASE("conv with all-zero kernel gives all-zero map") {
    Rng rng(3);
    Graph g;
    int x = g.input("x", {1, 2, 8, 8});
    int w = g.param("w", Tensor({4, 2, 3, 3}));
    int b = g.param("b", Tensor({4}));
    g.mark_output("y", g.conv3x3(x, w, b, 1));
    auto out = g.forward({{"x", random_tensor({1, 2, 8, 8}, rng)}});
    for (std::size_t i = 0; i < out.at("y").size(); ++i) CHECK(out.at("y")[i] == 0.0);
}

TEST_CASE("forward rejects shape mismatch and reports non-finite nodes") {
    Graph g;
    int x = g.input("x", {2});
    g.mark_output("y", g.log(x));
    CHECK_THROWS_AS(g.forward({{"x", Tensor({3})}}), std::invalid_argument);
    CHECK_THROWS_AS(g.forward({{"x", Tensor({2}, {-1.0, 1.0})}}), NumericError);
    try {
        g.forward({{"x", Tensor({2}, {-1.0, 1.0})}});
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("node") != std::string::npos);
    }
}

TEST_CASE("backward of x*x is 2x") {
    Graph g;
    int x = g.param("x", Tensor::scalar(3.0));
    g.mark_output("y", g.mul(x, x));
    g.forward({});
    auto grads = g.backward({{"y", Tensor::scalar(1.0)}});
    CHECK(grads.at("x")[0] == Catch::Approx(6.0));
}

TEST_CASE("backward of sum(relu(x)) at (-1,2) is (0,1)") {
    Graph g;
    int x = g.param("x", Tensor({2}, {-1, 2}));
    g.mark_output("y", g.sum(g.relu(x)));
    g.forward({});
    auto grads = g.backward({{"y", Tensor::scalar(1.0)}});
    CHECK(grads.at("x")[0] == 0.0);
    CHECK(grads.at("x")[1] == 1.0);
}

TEST_CASE("backward before forward is an error") {
    Graph g;
    int x = g.param("x", Tensor::scalar(1.0));
    g.mark_output("y", g.mul(x, x));
    CHECK_THROWS_AS(g.backward({{"y", Tensor::scalar(1.0)}}), std::logic_error);
}

TEST_CASE("parameters unreachable from the seeded output get zero gradients") {
    Graph g;
    int x = g.param("x", Tensor::scalar(2.0));
    int unused = g.param("unused", Tensor({3}, {1, 2, 3}));
    (void)unused;
    g.mark_output("y", g.mul(x, x));
    g.forward({});
    auto grads = g.backward({{"y", Tensor::scalar(1.0)}});
    for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at("unused")[i] == 0.0);
}

TEST_CASE("backward is linear in output grads") {
    Rng rng(11);
    Graph g;
    int x = g.param("x", random_tensor({4, 5}, rng));
    int w = g.param("w", random_tensor({3, 5}, rng));
    int b = g.param("b", random_tensor({3}, rng));
    g.mark_output("y", g.dense(g.relu(x), w, b));
    g.forward({});
    Tensor gout = random_tensor({4, 3}, rng);
    auto g1 = g.backward({{"y", gout}});
    Tensor gout2 = gout;
    for (std::size_t i = 0; i < gout2.size(); ++i) gout2[i] *= 2.0;
    auto g2 = g.backward({{"y", gout2}});
    for (const auto& [name, t] : g1)
        for (std::size_t i = 0; i < t.size(); ++i)
            CHECK(std::abs(g2.at(name)[i] - 2.0 * t[i]) < 1e-12);
}

TEST_CASE("determinism: identical graph and inputs give bitwise-identical outputs") {
    Rng rng(5);
    Tensor x = random_tensor({2, 3, 16, 16}, rng);
    auto run = [&]() {
        Rng prng(99);
        Graph g;
        int xi = g.input("x", {2, 3, 16, 16});
        int w = g.param("w", random_tensor({4, 3, 3, 3}, prng));
        int b = g.param("b", random_tensor({4}, prng));
        int fcw = g.param("fcw", random_tensor({2, 4 * 8 * 8}, prng, -0.1, 0.1));
        int fcb = g.param("fcb", Tensor({2}));
        int h = g.flatten(g.relu(g.conv3x3(xi, w, b, 2)));
        g.mark_output("y", g.dense(h, fcw, fcb));
        return g.forward({{"x", x}}).at("y");
    };
    Tensor a = run(), b = run();
    REQUIRE(a.same_shape(b));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("grad_check on a linear graph is exact to 1e-8") {
    Rng rng(7);
    Graph g;
    int w = g.param("w", random_tensor({1, 6}, rng));
    int x = g.constant(random_tensor({1, 6}, rng));
    g.mark_output("y", g.sum(g.mul(w, x)));
    auto res = nd::grad_check(g, {}, 1e-5);
    CHECK(res.max_rel_error < 1e-8);
}

TEST_CASE("grad_check flags a relu kink as skipped, not failed") {
    Graph g;
    int x = g.param("x", Tensor({2}, {0.0, 1.0}));
    g.mark_output("y", g.sum(g.relu(x)));
    auto res = nd::grad_check(g, {}, 1e-5);
    REQUIRE(res.skipped.size() == 1);
    CHECK(res.skipped[0].second == 0);
    CHECK(res.max_rel_error < 1e-8);
}

TEST_CASE("grad_check rejects nonpositive step") {
    Graph g;
    int x = g.param("x", Tensor::scalar(1.0));
    g.mark_output("y", g.mul(x, x));
    CHECK_THROWS_AS(nd::grad_check(g, {}, 0.0), std::invalid_argument);
}

TEST_CASE("every primitive passes an isolated gradient check") {
    Rng rng(21);

    SECTION("dense") {
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({3, 4}, rng));
                  int w = g.param("w", random_tensor({5, 4}, rng));
                  int b = g.param("b", random_tensor({5}, rng));
                  return g.dense(x, w, b);
              }) < 1e-4);
    }
    SECTION("conv3x3 stride 1 and 2") {
        for (int stride : {1, 2}) {
            CHECK(checked_grad([&](Graph& g) {
                      int x = g.param("x", random_tensor({2, 2, 8, 8}, rng));
                      int w = g.param("w", random_tensor({3, 2, 3, 3}, rng));
                      int b = g.param("b", random_tensor({3}, rng));
                      return g.conv3x3(x, w, b, stride);
                  }) < 1e-4);
        }
    }
    SECTION("relu away from kinks") {
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({6}, rng, 0.5, 2.0));
                  int s = g.param("s", random_tensor({6}, rng, -2.0, -0.5));
                  return g.concat(g.relu(x), g.relu(s), 0);
              }) < 1e-4);
    }
    SECTION("mean_pool2") {
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({1, 2, 4, 4}, rng));
                  return g.mean_pool2(x);
              }) < 1e-4);
    }
    SECTION("add elementwise and bias broadcast") {
        CHECK(checked_grad([&](Graph& g) {
                  int a = g.param("a", random_tensor({3, 4}, rng));
                  int b = g.param("b", random_tensor({3, 4}, rng));
                  return g.add(a, b);
              }) < 1e-4);
        CHECK(checked_grad([&](Graph& g) {
                  int a = g.param("a", random_tensor({3, 4}, rng));
                  int b = g.param("b", random_tensor({4}, rng));
                  return g.add(a, b);
              }) < 1e-4);
    }
    SECTION("mul elementwise and scalar broadcast") {
        CHECK(checked_grad([&](Graph& g) {
                  int a = g.param("a", random_tensor({2, 3}, rng));
                  int b = g.param("b", random_tensor({2, 3}, rng));
                  return g.mul(a, b);
              }) < 1e-4);
        CHECK(checked_grad([&](Graph& g) {
                  int a = g.param("a", random_tensor({2, 3}, rng));
                  int b = g.param("b", random_tensor({1}, rng));
                  return g.mul(a, b);
              }) < 1e-4);
    }
    SECTION("matmul all transpose combinations") {
        for (bool ta : {false, true})
            for (bool tb : {false, true}) {
                CHECK(checked_grad([&](Graph& g) {
                          int a = g.param("a", random_tensor(ta ? Shape{4, 3} : Shape{3, 4}, rng));
                          int b = g.param("b", random_tensor(tb ? Shape{5, 4} : Shape{4, 5}, rng));
                          return g.matmul(a, b, ta, tb);
                      }) < 1e-4);
            }
    }
    SECTION("sum full and per axis") {
        CHECK(checked_grad([&](Graph& g) {
                  return g.sum(g.param("x", random_tensor({3, 4}, rng)));
              }) < 1e-4);
        for (int axis : {0, 1}) {
            CHECK(checked_grad([&](Graph& g) {
                      return g.sum(g.param("x", random_tensor({3, 4}, rng)), axis);
                  }) < 1e-4);
        }
    }
    SECTION("mean") {
        CHECK(checked_grad([&](Graph& g) {
                  return g.mean(g.param("x", random_tensor({7}, rng)));
              }) < 1e-4);
    }
    SECTION("l2_normalize") {
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({3, 5}, rng, 0.3, 1.5));
                  int m = g.constant(random_tensor({3, 5}, rng));
                  return g.mul(g.l2_normalize(x), m);
              }) < 1e-4);
    }
    SECTION("log and exp") {
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({5}, rng, 0.5, 2.0));
                  return g.log(x);
              }) < 1e-4);
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({5}, rng));
                  return g.exp(x);
              }) < 1e-4);
    }
    SECTION("softmax over both axes") {
        for (int axis : {0, 1}) {
            CHECK(checked_grad([&](Graph& g) {
                      int x = g.param("x", random_tensor({3, 4}, rng));
                      int m = g.constant(random_tensor({3, 4}, rng));
                      return g.mul(g.softmax(x, axis), m);
                  }) < 1e-4);
        }
    }
    SECTION("concat both axes") {
        for (int axis : {0, 1}) {
            CHECK(checked_grad([&](Graph& g) {
                      int a = g.param("a", random_tensor({2, 3}, rng));
                      int b = g.param("b", random_tensor(axis == 0 ? Shape{4, 3} : Shape{2, 5}, rng));
                      int m = g.constant(random_tensor(axis == 0 ? Shape{6, 3} : Shape{2, 8}, rng));
                      return g.mul(g.concat(a, b, axis), m);
                  }) < 1e-4);
        }
    }
    SECTION("reshape and flatten") {
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({2, 3, 2}, rng));
                  int m = g.constant(random_tensor({3, 4}, rng));
                  return g.mul(g.reshape(x, {3, 4}), m);
              }) < 1e-4);
        CHECK(checked_grad([&](Graph& g) {
                  int x = g.param("x", random_tensor({2, 3, 2, 2}, rng));
                  int m = g.constant(random_tensor({2, 12}, rng));
                  return g.mul(g.flatten(x), m);
              }) < 1e-4);
    }
}

TEST_CASE("random 2-layer MLP with cosine-similarity head matches finite differences") {
    Rng rng(42);
    Graph g;
    int x = g.constant(random_tensor({2, 6}, rng));
    int w1 = g.param("w1", random_tensor({8, 6}, rng, -0.5, 0.5));
    int b1 = g.param("b1", random_tensor({8}, rng, -0.1, 0.1));
    int w2 = g.param("w2", random_tensor({4, 8}, rng, -0.5, 0.5));
    int b2 = g.param("b2", random_tensor({4}, rng, -0.1, 0.1));
    int z = g.dense(g.relu(g.dense(x, w1, b1)), w2, b2);  // [2,4]
    int zn = g.l2_normalize(z);
    int sims = g.matmul(zn, zn, false, true);  // [2,2]
    Tensor pick({2, 2});
    pick[1] = 1.0;  // entry (0,1): cos(z_0, z_1)
    g.mark_output("y", g.sum(g.mul(sims, g.constant(pick))));
    auto res = nd::grad_check(g, {}, 1e-5);
    CHECK(res.max_rel_error < 1e-4);
}
