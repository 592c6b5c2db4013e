#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "draftlab/denoiser.hpp"
#include "draftlab/finetune.hpp"
#include "draftlab/sampler.hpp"
#include "draftlab/schedule.hpp"
#include "draftlab/tensor.hpp"

namespace draftlab {

struct DoodlConfig {
    int steps = 20;
    double lr = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double guidance_w = 7.5;
    bool renormalize = true;  // keep ||x_T|| at sqrt(dim) after each update
    bool checkpoint = true;
};

template <class T>
struct DoodlResult {
    std::vector<T> best_x_T;
    std::vector<T> best_x0;
    double best_reward = 0.0;
    double initial_reward = 0.0;
    std::vector<double> reward_history;  // one entry per evaluated latent
};

// Optimizes the initial latent x_T by gradient ascent on the reward through the
// full sampling chain, with model weights frozen. Adam on x_T; the latent is
// rescaled to the typical prior norm after each update so it stays on the shell
// the sampler was trained for.
template <class T>
DoodlResult<T> doodl_optimize(const DenoiserParams<T>& params, const NoiseSchedule& sched, Context c,
                              std::vector<T> x_T, const RewardCallable<T>& reward, const DoodlConfig& cfg) {
    if (cfg.steps < 1) throw std::invalid_argument("doodl_optimize: steps must be >= 1");
    const size_t dim = x_T.size();
    const double target_norm = std::sqrt(static_cast<double>(dim));

    DoodlResult<T> res;
    res.best_reward = -std::numeric_limits<double>::infinity();
    std::vector<double> m(dim, 0.0), v(dim, 0.0);

    auto evaluate = [&](bool with_grad, std::vector<T>* grad_out) {
        Tape<T> tape;
        SampleConfig sc;
        sc.guidance_w = cfg.guidance_w;
        sc.checkpoint = cfg.checkpoint;
        sc.train_latent = with_grad;
        sc.stop_grad_step = with_grad ? sched.steps() : 0;
        SampleTrace<T> trace = sample(tape, params, sched, c, x_T, sc);
        Tensor<T> r = reward(tape, trace.x0, c);
        double r_val = static_cast<double>(r.item());
        if (with_grad) {
            tape.backward(tape.neg(r));
            *grad_out = tape.grad_of(trace.x_T_leaf.id);
        }
        res.reward_history.push_back(r_val);
        if (r_val > res.best_reward) {
            res.best_reward = r_val;
            res.best_x_T = x_T;
            res.best_x0 = trace.x0_value;
        }
        return r_val;
    };

    for (int it = 1; it <= cfg.steps; ++it) {
        std::vector<T> grad;
        double r_val = evaluate(true, &grad);
        if (it == 1) res.initial_reward = r_val;

        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(it));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(it));
        for (size_t i = 0; i < dim; ++i) {
            double gi = static_cast<double>(grad[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
            x_T[i] = static_cast<T>(static_cast<double>(x_T[i]) - cfg.lr * upd);
        }
        if (cfg.renormalize) {
            double nn = 0.0;
            for (T x : x_T) nn += static_cast<double>(x) * static_cast<double>(x);
            nn = std::sqrt(nn);
            if (nn > 0) {
                T s = static_cast<T>(target_norm / nn);
                for (T& x : x_T) x *= s;
            }
        }
    }
    evaluate(false, nullptr);
    return res;
}

}  // namespace draftlab
