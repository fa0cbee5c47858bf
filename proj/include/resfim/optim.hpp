#pragma once

#include <resfim/nn.hpp>

namespace resfim {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long step = 0;
};

/// Bias-corrected Adam. The state is lazily sized on first use.
ParameterVector adam_step(const ParameterVector& params, const GradientVector& grads, AdamState& state,
                          const AdamHyper& hyper);

ParameterVector sgd_step(const ParameterVector& params, const GradientVector& grads, double lr);

} // namespace resfim
