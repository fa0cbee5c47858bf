#include "oracles.hpp"

#include <resfim/optim.hpp>

#include <doctest.h>

#include <cmath>

using namespace resfim;

namespace {

const LayoutPtr& scalar_layout()
{
    static const LayoutPtr layout = oracle::make_layout({1});
    return layout;
}

ParameterVector scalar(double v) { return ParameterVector(scalar_layout(), Eigen::VectorXd::Constant(1, v)); }
GradientVector scalar_grad(double v) { return GradientVector(scalar_layout(), Eigen::VectorXd::Constant(1, v)); }

} // namespace

TEST_CASE("adam leaves parameters unchanged under a zero gradient")
{
    AdamState state;
    const auto p = adam_step(scalar(0.7), scalar_grad(0.0), state, {});
    CHECK(p.values[0] == 0.7);
    CHECK(state.step == 1);
}

TEST_CASE("first adam step moves by about the learning rate")
{
    AdamState state;
    const auto p = adam_step(scalar(0.0), scalar_grad(1.0), state, AdamHyper{1e-3});
    CHECK(p.values[0] == doctest::Approx(-1e-3).epsilon(1e-6));
}

TEST_CASE("adam matches the textbook recurrence over several steps")
{
    AdamState state;
    AdamHyper h;
    h.lr = 0.01;
    ParameterVector p = scalar(1.0);
    double w = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 5; ++t) {
        const double g = 2.0 * w;
        m = h.beta1 * m + (1 - h.beta1) * g;
        v = h.beta2 * v + (1 - h.beta2) * g * g;
        const double mh = m / (1 - std::pow(h.beta1, t)), vh = v / (1 - std::pow(h.beta2, t));
        w -= h.lr * mh / (std::sqrt(vh) + h.eps);
        p = adam_step(p, scalar_grad(2.0 * p.values[0]), state, h);
        CHECK(p.values[0] == doctest::Approx(w).epsilon(1e-14));
    }
}

TEST_CASE("ten sgd steps on w^2 follow the closed form")
{
    ParameterVector p = scalar(1.0);
    for (int i = 0; i < 10; ++i) p = sgd_step(p, scalar_grad(2.0 * p.values[0]), 0.1);
    CHECK(p.values[0] == doctest::Approx(std::pow(0.8, 10)).epsilon(1e-14));
}

TEST_CASE("optimizers reject mismatched layouts")
{
    const Model other = sequential({dense_layer("classifier", "fc", 1, 1)}, 1, 1);
    AdamState state;
    CHECK_THROWS_AS(adam_step(scalar(0.0), GradientVector::zeros(other.layout()), state, {}), LayoutMismatch);
    CHECK_THROWS_AS(sgd_step(scalar(0.0), GradientVector::zeros(other.layout()), 0.1), LayoutMismatch);
}
