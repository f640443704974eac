#include "psvdd/numerics/optim.hpp"

#include <cmath>

namespace psvdd::numerics {

template <typename T>
AdamState<T> make_adam_state(std::span<const Var<T>> params, AdamConfig config) {
    AdamState<T> state;
    state.config = config;
    for (const auto& p : params) {
        state.first_moment.emplace_back(p.shape());
        state.second_moment.emplace_back(p.shape());
    }
    return state;
}

template <typename T>
void adam_step(std::span<Var<T>> params, AdamState<T>& state) {
    if (params.size() != state.first_moment.size()) {
        throw ArgumentError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                            " parameters, got " + std::to_string(params.size()));
    }
    const auto& c = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& value = params[i].mutable_value();
        const Tensor<T>& grad = params[i].grad();
        Tensor<T>& m = state.first_moment[i];
        Tensor<T>& v = state.second_moment[i];
        if (grad.shape() != value.shape() || m.shape() != value.shape()) {
            throw DimensionError("adam_step: parameter " + std::to_string(i) + " shape changed");
        }
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = grad[j];
            const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = c.learning_rate * (mj / correction1) / (std::sqrt(vj / correction2) + c.epsilon);
            value[j] = static_cast<T>(value[j] - update);
        }
    }
}

template AdamState<float> make_adam_state(std::span<const Var<float>>, AdamConfig);
template AdamState<double> make_adam_state(std::span<const Var<double>>, AdamConfig);
template void adam_step(std::span<Var<float>>, AdamState<float>&);
template void adam_step(std::span<Var<double>>, AdamState<double>&);

}  // namespace psvdd::numerics
