#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "propot/autodiff.hpp"
#include "propot/rng.hpp"
#include "propot/tensor.hpp"

namespace propot::testing {

// Central-difference gradient check. `build` must construct the loss on a
// fresh tape from the current parameter values. Returns the worst relative
// error max |g_fd - g| / max(1, |g_fd|, |g|) over all parameter elements.
inline double gradcheck(const std::vector<Param*>& params,
                        const std::function<Var(Tape&)>& build, double h = 1e-4) {
    for (Param* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = build(tape);
        tape.backward(loss);
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Param* p : params) analytic.push_back(p->grad);

    auto eval = [&]() {
        Tape tape;
        return scalar(build(tape));
    };

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params[pi];
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + h;
            const double lp = eval();
            p.value[i] = orig - h;
            const double lm = eval();
            p.value[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double g = analytic[pi][i];
            const double rel = std::fabs(fd - g) / std::max({1.0, std::fabs(fd), std::fabs(g)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace propot::testing
