#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "modal_audit/toymlm.hpp"

namespace oracle {

// Worst relative error between the analytic gradient of the toy model and a
// central finite difference, over every parameter of a small instance.
inline double toy_gradient_check(std::uint32_t d = 8, std::uint32_t layers = 2, double h = 1e-5) {
    using namespace modal_audit;
    toy::ToyConfig c;
    c.d = d;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_ff = 2 * d;
    c.round_residual = false;
    toy::TaskSpec spec;
    c.d_visual = spec.d_visual;
    const auto model = toy::init_model(c, 3);
    const auto ds = toy::generate(spec, 5, 4, 0.9, "grad");
    const auto opts = toy::option_token_ids(spec);
    std::vector<toy::ToyInput> batch;
    std::vector<std::uint16_t> gold;
    for (const auto& s : ds.samples) {
        batch.push_back(toy::make_input(s, opts));
        gold.push_back(s.gold);
    }
    std::vector<double> p(model.params.begin(), model.params.end()), grad;
    toy::loss_and_grad(c, p, batch, gold, &grad);
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double lp = toy::loss_and_grad(c, p, batch, gold, nullptr);
        p[i] = orig - h;
        const double lm = toy::loss_and_grad(c, p, batch, gold, nullptr);
        p[i] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        // Gradients below the finite-difference noise floor are compared absolutely.
        const double rel = std::abs(fd - grad[i]) / std::max(1e-6, std::abs(fd) + std::abs(grad[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace oracle
