#include <doctest.h>

#include <cmath>

#include "posnegdm/optimizer.hpp"
#include "posnegdm/tensor.hpp"

using namespace posnegdm;

using T = Tensor<double>;

TEST_CASE("matmul identity and zero cases") {
    auto eye = T::from({2, 2}, {1, 0, 0, 1});
    auto b = T::from({2, 2}, {3, 4, 5, 6});
    auto c = matmul(eye, b);
    CHECK(c.values() == std::vector<double>{3, 4, 5, 6});

    auto z = T::zeros({2, 3});
    auto b2 = T::from({3, 2}, {1, 2, 3, 4, 5, 6});
    auto c2 = matmul(z, b2);
    for (double v : c2.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape error names both shapes") {
    auto a = T::zeros({2, 3});
    auto b = T::zeros({2, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient of sum(a*b) wrt a matches finite differences") {
    RngStream rng(7, "test_matmul");
    std::vector<double> av(6), bv(6);
    for (auto& v : av) v = rng.normal();
    for (auto& v : bv) v = rng.normal();
    auto a = T::from({2, 3}, av, true);
    auto b = T::from({3, 2}, bv, true);
    std::vector<NamedParam<double>> params{{"a", a}, {"b", b}};
    auto loss = [&]() { return sum_all(matmul(a, b)); };
    CHECK(grad_check_fd<double>(loss, params) <= 1e-4);
    // grad of sum(a*b) wrt a is ones * b^T
    zero_grads(params);
    backward(loss());
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < 3; ++k) {
            double expected = bv[k * 2] + bv[k * 2 + 1];
            CHECK(a.grad()[i * 3 + k] == doctest::Approx(expected).epsilon(1e-12));
        }
}

TEST_CASE("softmax_rows values and stability") {
    auto x = T::from({3, 3}, {0, 0, 0, 1000, 0, -1000, std::log(1.0), std::log(3.0), -1e9});
    auto y = softmax_rows(x);
    CHECK(y.values()[0] == doctest::Approx(1.0 / 3));
    CHECK(y.values()[3] == doctest::Approx(1.0));
    CHECK(y.values()[4] == doctest::Approx(0.0));
    for (double v : y.values()) CHECK(std::isfinite(v));
    // hand computation e^0/(e^0+e^{ln3})
    auto two = softmax_rows(T::from({1, 2}, {std::log(1.0), std::log(3.0)}));
    CHECK(two.values()[0] == doctest::Approx(0.25));
    CHECK(two.values()[1] == doctest::Approx(0.75));
    // rows sum to 1
    for (int r = 0; r < 3; ++r)
        CHECK(y.values()[r * 3] + y.values()[r * 3 + 1] + y.values()[r * 3 + 2] ==
              doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax_rows invariant to constant row shift") {
    RngStream rng(3, "test_softmax_shift");
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.normal(0, 3);
        auto base = softmax_rows(T::from({1, 5}, v));
        double c = rng.normal(0, 10);
        for (auto& x : v) x += c;
        auto shifted = softmax_rows(T::from({1, 5}, v));
        for (int i = 0; i < 5; ++i)
            CHECK(base.values()[i] == doctest::Approx(shifted.values()[i]).epsilon(1e-6));
    }
}

TEST_CASE("layer_norm hand cases") {
    auto gain = T::from({1, 3}, {1, 1, 1});
    auto bias = T::from({1, 3}, {0, 0, 0});
    auto y = layer_norm(T::from({1, 3}, {5, 5, 5}), gain, bias);
    for (double v : y.values()) CHECK(v == doctest::Approx(0.0));

    auto g2 = T::from({1, 2}, {1, 1});
    auto b2 = T::from({1, 2}, {0, 0});
    auto y2 = layer_norm(T::from({1, 2}, {-1, 1}), g2, b2);
    CHECK(y2.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y2.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

    auto g0 = T::from({1, 3}, {0, 0, 0});
    auto b3 = T::from({1, 3}, {2, -1, 7});
    auto y3 = layer_norm(T::from({1, 3}, {3, 1, 4}), g0, b3);
    CHECK(y3.values() == std::vector<double>{2, -1, 7});
}

TEST_CASE("relu and dropout contracts") {
    auto y = relu(T::from({1, 3}, {-2, 0, 3}));
    CHECK(y.values() == std::vector<double>{0, 0, 3});

    auto x = T::from({1, 4}, {1, -2, 3, -4});
    RngStream rng(1, "drop");
    CHECK(dropout(x, 0.0, true, &rng).values() == x.values());
    // eval mode is identity and never reads the RNG
    uint64_t before = RngStream(9, "probe").next_u64();
    RngStream probe(9, "probe");
    auto e = dropout(x, 0.1, false, &probe);
    CHECK(e.values() == x.values());
    CHECK(probe.next_u64() == before);
    CHECK_THROWS_AS(dropout(x, 1.0, true, &rng), std::invalid_argument);

    // train-mode survivors scaled by 1/(1-rate)
    auto big = T::zeros({100, 10});
    std::fill(big.values().begin(), big.values().end(), 1.0);
    auto d = dropout(big, 0.5, true, &rng);
    for (double v : d.values()) CHECK((v == 0.0 || v == doctest::Approx(2.0)));
}

TEST_CASE("embedding_lookup gathers rows and routes gradients to them only") {
    auto table = T::from({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7}, true);
    auto y = embedding_lookup(table, {2, 0, 2});
    CHECK(y.values() == std::vector<double>{4, 5, 0, 1, 4, 5});
    backward(sum_all(y));
    CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2, 0, 0});
    CHECK_THROWS_AS(embedding_lookup(table, {4}), std::out_of_range);
}

TEST_CASE("cross_entropy_mean hand cases") {
    // uniform logits over 25 classes
    auto logits = T::zeros({2, 25});
    CHECK(cross_entropy_mean(logits, {3, 17}).value() ==
          doctest::Approx(std::log(25.0)).epsilon(1e-9));
    // near-certain true class
    auto conf = T::zeros({1, 3});
    conf.values()[1] = 50.0;
    CHECK(cross_entropy_mean(conf, {1}).value() == doctest::Approx(0.0).epsilon(1e-9));
    // logits [ln1, ln3], target 1 -> -ln 0.75
    auto two = T::from({1, 2}, {std::log(1.0), std::log(3.0)});
    CHECK(cross_entropy_mean(two, {1}).value() == doctest::Approx(-std::log(0.75)).epsilon(1e-9));
    CHECK_THROWS_AS(cross_entropy_mean(two, {2}), std::out_of_range);
}

TEST_CASE("mse_mean hand cases") {
    auto a = T::from({2, 2}, {1, 2, 3, 4});
    CHECK(mse_mean(a, a).value() == 0.0);
    auto ones = T::from({2, 2}, {1, 1, 1, 1});
    CHECK(mse_mean(ones, T::zeros({2, 2})).value() == doctest::Approx(1.0));
    auto p = T::from({1, 2}, {1, 2});
    CHECK(mse_mean(p, T::zeros({1, 2})).value() == doctest::Approx(2.5));
    CHECK_THROWS_AS(mse_mean(p, T::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("backward basics") {
    auto x = T::from({2, 3}, {1, -2, 3, 0.5, 2, -1}, true);
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    // mse_mean(x, 0) with x=[2] -> grad 4
    auto x2 = T::from({1, 1}, {2}, true);
    backward(mse_mean(x2, T::zeros({1, 1})));
    CHECK(x2.grad()[0] == doctest::Approx(4.0));

    // identity chain grad is 1
    auto x3 = T::from({1, 4}, {1, 2, 3, 4}, true);
    auto y3 = add(x3, T::zeros({1, 4}));
    backward(sum_all(y3));
    for (double g : x3.grad()) CHECK(g == doctest::Approx(1.0));

    // non-scalar root rejected
    CHECK_THROWS_AS(backward(x), std::logic_error);

    // repeated backward accumulates; reset is explicit
    auto x4 = T::from({1}, {3}, true);
    auto l = mul(x4, x4);
    backward(l);
    backward(l);
    CHECK(x4.grad()[0] == doctest::Approx(12.0));
    x4.zero_grad();
    backward(l);
    CHECK(x4.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("grad_check_fd on ops: 10 random instances each stay under 1e-4") {
    RngStream rng(42, "test_ops_fd");
    for (int trial = 0; trial < 10; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(3));
        int d = 2 + static_cast<int>(rng.uniform_int(4));
        std::vector<double> xv(n * d), gv(d), bv(d), wv(d * 3);
        for (auto& v : xv) v = rng.normal();
        for (auto& v : gv) v = rng.normal(1, 0.2);
        for (auto& v : bv) v = rng.normal(0, 0.3);
        for (auto& v : wv) v = rng.normal(0, 0.5);
        auto x = T::from({n, d}, xv, true);
        auto g = T::from({1, d}, gv, true);
        auto b = T::from({1, d}, bv, true);
        auto w = T::from({d, 3}, wv, true);
        std::vector<int> targets(n);
        for (auto& t : targets) t = static_cast<int>(rng.uniform_int(3));
        std::vector<NamedParam<double>> params{{"x", x}, {"g", g}, {"b", b}, {"w", w}};
        auto loss = [&]() {
            auto h = layer_norm(x, g, b);
            auto sm = softmax_rows(relu(h));
            auto logits = matmul(sm, w);
            return add(cross_entropy_mean(logits, targets),
                       mse_mean(softplus(h), sigmoid(h)));
        };
        CHECK(grad_check_fd<double>(loss, params) <= 1e-4);
    }
}

TEST_CASE("grad_check_fd trivial quadratic") {
    auto theta = T::from({1}, {1.0}, true);
    std::vector<NamedParam<double>> params{{"theta", theta}};
    auto loss = [&]() { return mul(theta, theta); };
    GradCheckOptions opt;
    opt.eps = 1e-5;
    CHECK(grad_check_fd<double>(loss, params, opt) <= 1e-8);
    CHECK_THROWS_AS((grad_check_fd<double>(loss, params, GradCheckOptions{1e-2})),
                    std::invalid_argument);
}

TEST_CASE("cross_entropy_mean over random logits passes the fd oracle") {
    RngStream rng(5, "test_ce_fd");
    std::vector<double> lv(4 * 25);
    for (auto& v : lv) v = rng.normal(0, 2);
    auto logits = T::from({4, 25}, lv, true);
    std::vector<int> targets{0, 24, 7, 13};
    std::vector<NamedParam<double>> params{{"logits", logits}};
    auto loss = [&]() { return cross_entropy_mean(logits, targets); };
    CHECK(grad_check_fd<double>(loss, params) <= 1e-4);
}

TEST_CASE("clamp_max blocks gradient beyond the cap") {
    auto x = T::from({3, 1}, {1.0, 5.0, 9.0}, true);
    auto y = clamp_max(x, 4.0);
    CHECK(y.values() == std::vector<double>{1, 4, 4});
    backward(sum_all(y));
    CHECK(x.grad() == std::vector<double>{1, 0, 0});
}

TEST_CASE("mean_masked_rows and mse_masked_rows") {
    auto x = T::from({4, 1}, {1, 2, 3, 4}, true);
    auto m = mean_masked_rows(x, {1, 0, 0, 1});
    CHECK(m.value() == doctest::Approx(2.5));
    backward(m);
    CHECK(x.grad() == std::vector<double>{0.5, 0, 0, 0.5});
    CHECK(mean_masked_rows(x, {0, 0, 0, 0}).value() == 0.0);

    auto p = T::from({2, 2}, {1, 1, 9, 9}, true);
    auto t = T::zeros({2, 2});
    CHECK(mse_masked_rows(p, t, {1, 0}).value() == doctest::Approx(1.0));
    CHECK_THROWS_AS(mse_masked_rows(p, t, {0, 0}), std::logic_error);
}
