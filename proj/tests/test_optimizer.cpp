#include <doctest.h>

#include "posnegdm/optimizer.hpp"

using namespace posnegdm;
using T = Tensor<double>;

TEST_CASE("adam leaves params unchanged for zero grads and zero weight decay") {
    auto p = T::from({1, 3}, {1, 2, 3}, true);
    p.node()->ensure_grad();
    std::vector<NamedParam<double>> params{{"p", p}};
    OptimizerState<double> st;
    st.weight_decay = 0;
    adam_step_with_warmup(params, st);
    CHECK(p.values() == std::vector<double>{1, 2, 3});
    CHECK(st.step_count == 1);
}

TEST_CASE("warmup schedule is linear and warmup 0 means base lr") {
    OptimizerState<double> st;
    st.base_lr = 1e-4;
    st.warmup_steps = 10000;
    CHECK(st.effective_lr(5000) == doctest::Approx(5e-5));
    CHECK(st.effective_lr(10000) == doctest::Approx(1e-4));
    CHECK(st.effective_lr(20000) == doctest::Approx(1e-4));
    st.warmup_steps = 0;
    CHECK(st.effective_lr(1) == doctest::Approx(1e-4));
}

TEST_CASE("adam with constant positive grad decreases a scalar param monotonically") {
    auto p = T::from({1}, {5.0}, true);
    std::vector<NamedParam<double>> params{{"p", p}};
    OptimizerState<double> st;
    st.base_lr = 0.01;
    st.weight_decay = 0;
    double prev = p.values()[0];
    for (int i = 0; i < 50; ++i) {
        p.node()->ensure_grad();
        p.grad()[0] = 1.0;
        adam_step_with_warmup(params, st);
        CHECK(p.values()[0] < prev);
        prev = p.values()[0];
    }
}

TEST_CASE("adam rejects NaN gradients naming the parameter") {
    auto p = T::from({1}, {1.0}, true);
    p.node()->ensure_grad();
    p.grad()[0] = std::nan("");
    std::vector<NamedParam<double>> params{{"theta_bad", p}};
    OptimizerState<double> st;
    CHECK_THROWS_WITH_AS(adam_step_with_warmup(params, st), doctest::Contains("theta_bad"),
                         std::runtime_error);
}

TEST_CASE("decoupled weight decay shrinks params even with zero grad") {
    auto p = T::from({1}, {10.0}, true);
    p.node()->ensure_grad();
    std::vector<NamedParam<double>> params{{"p", p}};
    OptimizerState<double> st;
    st.base_lr = 0.1;
    st.weight_decay = 0.5;
    adam_step_with_warmup(params, st);
    // param multiplied by (1 - lr*wd) = 0.95, Adam delta is 0
    CHECK(p.values()[0] == doctest::Approx(9.5));
}
