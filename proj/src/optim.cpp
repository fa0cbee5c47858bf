#include <resfim/optim.hpp>

#include <cmath>

namespace resfim {

ParameterVector adam_step(const ParameterVector& params, const GradientVector& grads, AdamState& state,
                          const AdamHyper& hyper)
{
    require_same_layout(params, grads, "adam_step");
    const Index n = params.size();
    if (state.step == 0) {
        state.m = Eigen::VectorXd::Zero(n);
        state.v = Eigen::VectorXd::Zero(n);
    } else if (state.m.size() != n) {
        throw LayoutMismatch("adam_step: optimizer state does not match parameter count");
    }
    ++state.step;
    const auto& g = grads.values.array();
    state.m = hyper.beta1 * state.m.array() + (1.0 - hyper.beta1) * g;
    state.v = hyper.beta2 * state.v.array() + (1.0 - hyper.beta2) * g.square();
    const double c1 = 1.0 - std::pow(hyper.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(hyper.beta2, double(state.step));
    ParameterVector out = params;
    out.values.array() -= hyper.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + hyper.eps);
    return out;
}

ParameterVector sgd_step(const ParameterVector& params, const GradientVector& grads, double lr)
{
    require_same_layout(params, grads, "sgd_step");
    ParameterVector out = params;
    out.values -= lr * grads.values;
    return out;
}

} // namespace resfim
