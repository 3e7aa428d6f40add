#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace semstyle::testing {

/// Receives one line per compared derivative.
using GradLog = std::function<void(const std::string&)>;

/// Central difference of a scalar function of one tensor entry, evaluated in
/// float32 with the result accumulated in double by the caller.
inline double central_difference(torch::Tensor param, int64_t flat_index, double step,
                                 const std::function<double()>& loss) {
    torch::NoGradGuard guard;
    auto flat = param.view({-1});
    const float original = flat[flat_index].item<float>();
    flat[flat_index] = original + static_cast<float>(step);
    const double up = loss();
    flat[flat_index] = original - static_cast<float>(step);
    const double down = loss();
    flat[flat_index] = original;
    // the perturbation actually applied is the float32-representable one
    const double applied = static_cast<double>(original + static_cast<float>(step)) -
                           static_cast<double>(original - static_cast<float>(step));
    return (up - down) / applied;
}

inline double relative_error(double a, double b) {
    const double denom = std::max(std::abs(a), std::abs(b));
    return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

/// Compares autograd against central differences on the entries of
/// `param` with the largest gradient magnitude. `loss` must rebuild the
/// graph from scratch on every call. Returns the worst relative error.
inline double gradient_check(torch::Tensor param, const std::function<torch::Tensor()>& loss, int entries = 3,
                             double step = 1e-3, const GradLog& log = {}) {
    if (param.grad().defined()) param.mutable_grad().zero_();
    param.set_requires_grad(true);
    loss().backward();
    auto grad = param.grad().detach().clone().view({-1});
    auto order = grad.abs().argsort(/*stable=*/true, /*dim=*/0, /*descending=*/true);
    double worst = 0.0;
    for (int i = 0; i < entries && i < order.size(0); ++i) {
        auto idx = order[i].item<int64_t>();
        double fd = central_difference(param.detach(), idx, step, [&] {
            torch::NoGradGuard guard;
            return loss().item<double>();
        });
        double ad = grad[idx].item<double>();
        double err = relative_error(fd, ad);
        if (log)
            log("entry " + std::to_string(idx) + ": autograd " + std::to_string(ad) + ", central difference " +
                std::to_string(fd) + ", rel err " + std::to_string(err));
        worst = std::max(worst, err);
    }
    return worst;
}

/// Directional form of the check: the derivative of the loss along the unit
/// gradient direction of the whole tensor equals the gradient norm. Central
/// differences use a perturbation of `step` along that direction.
inline double directional_gradient_check(torch::Tensor param, const std::function<torch::Tensor()>& loss,
                                         double step = 1e-3, const GradLog& log = {}) {
    if (param.grad().defined()) param.mutable_grad().zero_();
    param.set_requires_grad(true);
    loss().backward();
    auto grad = param.grad().detach().clone();
    const double norm = grad.norm().item<double>();
    auto direction = grad / norm;
    auto eval = [&](double eps) {
        torch::NoGradGuard guard;
        auto saved = param.detach().clone();
        param.detach().add_(direction * eps);
        double v = loss().item<double>();
        param.detach().copy_(saved);
        return v;
    };
    const double fd = (eval(step) - eval(-step)) / (2.0 * step);
    const double err = relative_error(fd, norm);
    if (log)
        log("directional derivative: autograd " + std::to_string(norm) + ", central difference " + std::to_string(fd) +
            ", rel err " + std::to_string(err));
    return err;
}

}  // namespace semstyle::testing
