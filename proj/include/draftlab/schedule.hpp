#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "draftlab/tensor.hpp"

namespace draftlab {

// Discrete signal/noise schedule over training timesteps t = 0..n_train,
// with alpha_t^2 + sigma_t^2 = 1, plus the sampler sub-grid.
struct NoiseSchedule {
    int n_train = 1000;
    std::vector<double> alphas;       // indexed 0..n_train, strictly decreasing, alphas[0] == 1
    std::vector<int> sampler_grid;    // S+1 indices into alphas; grid[0] == 0, grid[S] == n_train

    static constexpr double kAlphaFloor = 1e-2;

    double alpha(int t) const { return alphas.at(static_cast<size_t>(t)); }
    double sigma(int t) const {
        double a = alpha(t);
        return std::sqrt(1.0 - a * a);
    }
    int steps() const { return static_cast<int>(sampler_grid.size()) - 1; }
};

// Cosine signal schedule (offset s = 0.008), normalized so alpha_0 == 1 and
// clamped below. Clamped tail indices are linearly interpolated down to the
// floor so the sequence stays strictly decreasing with alpha_{n_train} == floor.
inline NoiseSchedule make_schedule(int n_train = 1000, int sampler_steps = 50) {
    if (n_train < 1 || sampler_steps < 1 || sampler_steps > n_train)
        throw std::invalid_argument("make_schedule: need 1 <= S <= n_train");

    NoiseSchedule sched;
    sched.n_train = n_train;
    sched.alphas.resize(static_cast<size_t>(n_train) + 1);

    const double pi = 3.14159265358979323846;
    const double s = 0.008;
    const double f0 = std::cos(s / (1.0 + s) * pi / 2.0);
    int first_clamped = -1;
    for (int t = 0; t <= n_train; ++t) {
        double a = std::cos((static_cast<double>(t) / n_train + s) / (1.0 + s) * pi / 2.0) / f0;
        if (a <= NoiseSchedule::kAlphaFloor && first_clamped < 0) first_clamped = t;
        sched.alphas[static_cast<size_t>(t)] = a;
    }
    sched.alphas[0] = 1.0;
    if (first_clamped >= 0) {
        double top = sched.alphas[static_cast<size_t>(first_clamped) - 1];
        int span = n_train - first_clamped + 1;
        for (int t = first_clamped; t <= n_train; ++t) {
            double u = static_cast<double>(t - first_clamped + 1) / span;
            sched.alphas[static_cast<size_t>(t)] = top + u * (NoiseSchedule::kAlphaFloor - top);
        }
    }

    sched.sampler_grid.resize(static_cast<size_t>(sampler_steps) + 1);
    for (int k = 0; k <= sampler_steps; ++k)
        sched.sampler_grid[static_cast<size_t>(k)] =
            static_cast<int>(std::llround(static_cast<double>(k) * n_train / sampler_steps));
    return sched;
}

// alpha_t * x0 + sigma_t * eps
template <class T>
Tensor<T> forward_noise(Tape<T>& tape, const NoiseSchedule& sched, Tensor<T> x0, int t, Tensor<T> eps) {
    if (t < 0 || t > sched.n_train) throw std::invalid_argument("forward_noise: t out of range");
    if (x0.shape() != eps.shape()) throw std::invalid_argument("forward_noise: shape mismatch");
    return tape.axpby(static_cast<T>(sched.alpha(t)), x0, static_cast<T>(sched.sigma(t)), eps);
}

}  // namespace draftlab
