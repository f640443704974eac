#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "psvdd/numerics/autograd.hpp"

namespace psvdd::numerics {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moment accumulators for a fixed, ordered list of parameters.
template <typename T>
struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<Tensor<T>> first_moment;
    std::vector<Tensor<T>> second_moment;
};

template <typename T>
AdamState<T> make_adam_state(std::span<const Var<T>> params, AdamConfig config = {});

/// One bias-corrected Adam update. Gradients are left in place.
template <typename T>
void adam_step(std::span<Var<T>> params, AdamState<T>& state);

template <typename T>
void zero_grads(std::span<Var<T>> params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace psvdd::numerics
