#pragma once
// Central-difference gradient verification. The callable rebuilds the scalar
// loss from the current leaf values, so perturbing a leaf and re-evaluating
// yields the matching finite difference. Coordinates can be subsampled
// deterministically for large parameter sets.

#include <functional>

#include "somnus/ops.hpp"

namespace somnus {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t coords_checked = 0;
    std::string worst_input;
};

inline GradCheckReport grad_check(const std::function<Tensor()>& fn,
                                  const std::vector<std::pair<std::string, Tensor>>& inputs,
                                  double eps = 1e-5,
                                  std::size_t max_coords_per_input = 0,
                                  std::uint64_t seed = 17) {
    Tensor loss = fn();
    if (loss.numel() != 1) throw ShapeError("grad_check: loss must be scalar");
    for (auto& [name, t] : inputs) t.zero_grad();
    loss.backward();

    std::vector<std::vector<double>> grads;
    grads.reserve(inputs.size());
    for (auto& [name, t] : inputs) {
        if (t.grad().size() != t.numel())
            throw Error("grad_check: input '" + name + "' received no gradient");
        grads.push_back(t.grad());
    }

    GradCheckReport rep;
    Rng rng(seed);
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        Tensor t = inputs[ii].second;
        auto& vals = t.mutable_values();
        std::vector<Index> coords;
        if (max_coords_per_input == 0 || vals.size() <= max_coords_per_input) {
            coords.resize(vals.size());
            for (Index i = 0; i < vals.size(); ++i) coords[i] = i;
        } else {
            std::vector<Index> all(vals.size());
            for (Index i = 0; i < vals.size(); ++i) all[i] = i;
            for (std::size_t i = 0; i < max_coords_per_input; ++i)
                std::swap(all[i], all[i + rng.index(all.size() - i)]);
            coords.assign(all.begin(), all.begin() + static_cast<long>(max_coords_per_input));
        }
        for (Index c : coords) {
            double keep = vals[c];
            double f1, f2;
            {
                NoGrad ng;
                vals[c] = keep + eps;
                f1 = fn().item();
                vals[c] = keep - eps;
                f2 = fn().item();
            }
            vals[c] = keep;
            double num = (f1 - f2) / (2.0 * eps);
            double ana = grads[ii][c];
            double abs_err = std::fabs(num - ana);
            double rel = abs_err / std::max({std::fabs(num), std::fabs(ana), 1e-2});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = inputs[ii].first;
            }
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            ++rep.coords_checked;
        }
    }
    return rep;
}

}  // namespace somnus
