#pragma once

#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "draftlab/denoiser.hpp"
#include "draftlab/rng.hpp"
#include "draftlab/schedule.hpp"
#include "draftlab/tensor.hpp"

namespace draftlab {

enum class LoraWindow { All, LastM, FirstM };

struct SampleConfig {
    double guidance_w = 7.5;
    int stop_grad_step = 0;    // K: gradient covers the last K sampler steps; 0 = no gradient
    bool checkpoint = true;    // wrap each differentiable step in a checkpoint segment
    bool verify_replay = false;
    bool train_lora = false;   // adapters receive gradients
    bool train_latent = false; // x_T receives gradients (latent optimization)
    bool refl_mode = false;    // early exit returning xhat0 at step refl_step
    int refl_step = 0;
    LoraWindow window = LoraWindow::All;
    int window_m = 0;
};

template <class T>
struct SampleTrace {
    // latents[k] is x at sampler step k (k = S down to 0); latents[S] == x_T
    std::vector<std::vector<T>> latents;
    std::vector<std::vector<T>> xhat0_per_step;  // indexed by step k, entries for executed steps
    std::vector<T> x0_value;
    Tensor<T> x0;            // on the caller's tape when a gradient path was requested
    Tensor<T> x_T_leaf;      // set when the initial latent itself is trained
    int stop_grad_step = 0;
    double guidance_w = 0.0;
};

// One DDIM update given precomputed noise prediction:
// xhat0 = (x_t - sigma_hi * eps) / alpha_hi;  x_prev = alpha_lo * xhat0 + sigma_lo * eps.
template <class T>
std::pair<Tensor<T>, Tensor<T>> ddim_combine(Tape<T>& tape, Tensor<T> x_t, Tensor<T> eps, double alpha_hi,
                                             double sigma_hi, double alpha_lo, double sigma_lo) {
    Tensor<T> xhat0 = tape.axpby(static_cast<T>(1.0 / alpha_hi), x_t, static_cast<T>(-sigma_hi / alpha_hi), eps);
    Tensor<T> x_prev = tape.axpby(static_cast<T>(alpha_lo), xhat0, static_cast<T>(sigma_lo), eps);
    return {x_prev, xhat0};
}

// Sampler step k uses schedule indices (grid[k], grid[k-1]); the denoiser is
// called once (twice with guidance) and its output reused in both formulas.
template <class T>
std::pair<Tensor<T>, Tensor<T>> ddim_step(DenoiserBind<T>& bind, const NoiseSchedule& sched, Tensor<T> x_t,
                                          Context c, int k, T w) {
    if (k < 1 || k > sched.steps()) throw std::invalid_argument("ddim_step: step out of range");
    int t_hi = sched.sampler_grid[static_cast<size_t>(k)];
    int t_lo = sched.sampler_grid[static_cast<size_t>(k) - 1];
    Tensor<T> eps = cfg_eps(bind, x_t, c, t_hi, w);
    return ddim_combine(bind.tape(), x_t, eps, sched.alpha(t_hi), sched.sigma(t_hi), sched.alpha(t_lo),
                        sched.sigma(t_lo));
}

namespace detail {

inline bool adapters_active(const SampleConfig& cfg, int k, int S) {
    switch (cfg.window) {
        case LoraWindow::All: return true;
        case LoraWindow::LastM: return k <= cfg.window_m;
        case LoraWindow::FirstM: return k > S - cfg.window_m;
    }
    return true;
}

}  // namespace detail

// Runs the DDIM chain per the unified fine-tuning recipe. With
// stop_grad_step = K the latent entering step K is a fresh (stop-gradient)
// leaf, so backprop covers exactly the last K steps. In refl_mode the loop
// terminates at refl_step returning the one-step prediction as x_0.
template <class T>
SampleTrace<T> sample(Tape<T>& tape, const DenoiserParams<T>& params, const NoiseSchedule& sched, Context c,
                      const std::vector<T>& x_T, const SampleConfig& cfg,
                      const std::vector<Tensor<T>>* shared_lora_leaves = nullptr) {
    const int S = sched.steps();
    int K = cfg.stop_grad_step;
    if (K < 0 || K > S) throw std::invalid_argument("sample: stop_grad_step must be in [0, S]");
    if (cfg.refl_mode && (cfg.refl_step < 1 || cfg.refl_step > S))
        throw std::invalid_argument("sample: refl_step must be in [1, S]");
    const bool want_grad = cfg.train_lora || cfg.train_latent;
    const int grad_from = cfg.refl_mode ? cfg.refl_step : K;  // steps <= grad_from run on the main tape

    SampleTrace<T> trace;
    trace.stop_grad_step = K;
    trace.guidance_w = cfg.guidance_w;
    trace.latents.assign(static_cast<size_t>(S) + 1, {});
    trace.xhat0_per_step.assign(static_cast<size_t>(S) + 1, {});
    trace.latents[static_cast<size_t>(S)] = x_T;

    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    const T w = static_cast<T>(cfg.guidance_w);

    DenoiserBind<T> main_bind(tape, params, false, cfg.train_lora, true);
    std::vector<Tensor<T>> lora_leaves;
    if (cfg.train_lora && params.has_adaptation()) {
        if (shared_lora_leaves) {
            lora_leaves = *shared_lora_leaves;
            main_bind.override_lora_leaves(lora_leaves);
        } else {
            lora_leaves = main_bind.lora_leaves();
        }
    }

    std::vector<T> x_val = x_T;
    Tensor<T> x_cur;  // valid once the differentiable suffix starts
    bool on_tape = false;

    for (int k = S; k >= 1; --k) {
        bool adapters_here = detail::adapters_active(cfg, k, S);
        bool diff_step = want_grad && k <= grad_from;

        if (cfg.refl_mode && k == cfg.refl_step) {
            // stop_grad on the incoming latent, one differentiable xhat0, break
            Tensor<T> x_in = tape.leaf(img_shape, x_val, false);
            int t_hi = sched.sampler_grid[static_cast<size_t>(k)];
            DenoiserBind<T> bind(tape, params, false, cfg.train_lora, adapters_here);
            if (cfg.train_lora && !lora_leaves.empty()) bind.override_lora_leaves(lora_leaves);
            Tensor<T> eps = cfg_eps(bind, x_in, c, t_hi, w);
            Tensor<T> xhat0 = tape.axpby(static_cast<T>(1.0 / sched.alpha(t_hi)), x_in,
                                         static_cast<T>(-sched.sigma(t_hi) / sched.alpha(t_hi)), eps);
            trace.xhat0_per_step[static_cast<size_t>(k)] = xhat0.value();
            trace.x0 = xhat0;
            trace.x0_value = xhat0.value();
            trace.latents[0] = trace.x0_value;
            return trace;
        }

        if (!diff_step) {
            // forward only, off-tape; interior freed with the scratch tape
            Tape<T> scratch;
            Tensor<T> x_in = scratch.leaf(img_shape, x_val, false);
            DenoiserBind<T> bind(scratch, params, false, false, adapters_here);
            auto [x_prev, xhat0] = ddim_step(bind, sched, x_in, c, k, w);
            x_val = x_prev.value();
            trace.xhat0_per_step[static_cast<size_t>(k)] = xhat0.value();
            trace.latents[static_cast<size_t>(k) - 1] = x_val;
            continue;
        }

        if (!on_tape) {
            // entering the differentiable suffix; stop_grad unless the whole
            // chain is differentiable and the initial latent itself is trained
            bool leaf_grad = cfg.train_latent && k == S;
            x_cur = tape.leaf(img_shape, x_val, leaf_grad);
            if (leaf_grad) trace.x_T_leaf = x_cur;
            on_tape = true;
        }

        if (cfg.checkpoint) {
            std::vector<Tensor<T>> seg_inputs;
            seg_inputs.push_back(x_cur);
            for (auto& l : lora_leaves) seg_inputs.push_back(l);
            const DenoiserParams<T>* pp = &params;
            const NoiseSchedule* ps = &sched;
            int step_k = k;
            auto fn = [pp, ps, c, step_k, w, adapters_here,
                       use_lora = cfg.train_lora && !lora_leaves.empty()](
                          Tape<T>& sub, const std::vector<Tensor<T>>& ins) -> std::vector<Tensor<T>> {
                DenoiserBind<T> bind(sub, *pp, false, false, adapters_here);
                if (use_lora)
                    bind.override_lora_leaves(std::vector<Tensor<T>>(ins.begin() + 1, ins.end()));
                auto [x_prev, xhat0] = ddim_step(bind, *ps, ins[0], c, step_k, w);
                return {x_prev, xhat0};
            };
            auto outs = tape.checkpoint_segment(fn, seg_inputs, cfg.verify_replay);
            x_cur = outs[0];
            trace.xhat0_per_step[static_cast<size_t>(k)] = outs[1].value();
        } else {
            // fresh bind per step so the adapted weights are rebuilt exactly
            // like a checkpoint segment would rebuild them; sharing one bind
            // across steps would route all steps' weight cotangents through a
            // single matmul backward, changing the floating-point summation
            // order relative to the checkpointed path
            DenoiserBind<T> bind(tape, params, false, cfg.train_lora, adapters_here);
            if (cfg.train_lora && !lora_leaves.empty()) bind.override_lora_leaves(lora_leaves);
            auto [x_prev, xhat0] = ddim_step(bind, sched, x_cur, c, k, w);
            x_cur = x_prev;
            trace.xhat0_per_step[static_cast<size_t>(k)] = xhat0.value();
        }
        trace.latents[static_cast<size_t>(k) - 1] = x_cur.value();
    }

    if (on_tape) {
        trace.x0 = x_cur;
        trace.x0_value = x_cur.value();
    } else {
        trace.x0_value = x_val;
        trace.x0 = tape.leaf(img_shape, x_val, false);
    }
    return trace;
}

// DDPM-style stochastic sampler (evaluation only, no gradient support).
// eta = 0 reproduces the DDIM trajectory exactly.
template <class T>
SampleTrace<T> ancestral_sample(const DenoiserParams<T>& params, const NoiseSchedule& sched, Context c,
                                const std::vector<T>& x_T, double guidance_w, const Rng& rng, uint64_t draw_index,
                                double eta = 1.0) {
    const int S = sched.steps();
    SampleTrace<T> trace;
    trace.guidance_w = guidance_w;
    trace.latents.assign(static_cast<size_t>(S) + 1, {});
    trace.xhat0_per_step.assign(static_cast<size_t>(S) + 1, {});
    trace.latents[static_cast<size_t>(S)] = x_T;

    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    std::vector<T> x_val = x_T;
    const uint64_t tag = Rng::hash_tag("ancestral_noise");

    for (int k = S; k >= 1; --k) {
        int t_hi = sched.sampler_grid[static_cast<size_t>(k)];
        int t_lo = sched.sampler_grid[static_cast<size_t>(k) - 1];
        double a_hi = sched.alpha(t_hi), s_hi = sched.sigma(t_hi);
        double a_lo = sched.alpha(t_lo), s_lo = sched.sigma(t_lo);

        Tape<T> scratch;
        Tensor<T> x_in = scratch.leaf(img_shape, x_val, false);
        DenoiserBind<T> bind(scratch, params, false, false, true);
        Tensor<T> eps = cfg_eps(bind, x_in, c, t_hi, static_cast<T>(guidance_w));

        double sig_t = s_hi > 0 ? eta * (s_lo / s_hi) * std::sqrt(std::max(0.0, 1.0 - (a_hi * a_hi) / (a_lo * a_lo)))
                                : 0.0;
        Tensor<T> x_prev, xhat0;
        if (sig_t == 0.0) {
            // shares the deterministic update code so eta=0 matches DDIM exactly
            std::tie(x_prev, xhat0) = ddim_combine(scratch, x_in, eps, a_hi, s_hi, a_lo, s_lo);
        } else {
            xhat0 = scratch.axpby(static_cast<T>(1.0 / a_hi), x_in, static_cast<T>(-s_hi / a_hi), eps);
            double dir = std::sqrt(std::max(0.0, s_lo * s_lo - sig_t * sig_t));
            x_prev = scratch.axpby(static_cast<T>(a_lo), xhat0, static_cast<T>(dir), eps);
            std::vector<T> z(x_val.size());
            rng.fill_normal(z, tag, (draw_index << 8) | static_cast<uint64_t>(k), 0);
            Tensor<T> zt = scratch.leaf(img_shape, z, false);
            x_prev = scratch.axpby(T(1), x_prev, static_cast<T>(sig_t), zt);
        }
        x_val = x_prev.value();
        trace.xhat0_per_step[static_cast<size_t>(k)] = xhat0.value();
        trace.latents[static_cast<size_t>(k) - 1] = x_val;
    }
    trace.x0_value = x_val;
    return trace;
}

// Applies adapters only inside the given window of sampler steps
// (LastM: final M steps; FirstM: first M steps), base parameters elsewhere.
template <class T>
SampleTrace<T> lora_window_sample(Tape<T>& tape, const DenoiserParams<T>& params, const NoiseSchedule& sched,
                                  Context c, const std::vector<T>& x_T, double guidance_w, LoraWindow window,
                                  int window_m) {
    if (window_m < 0 || window_m > sched.steps())
        throw std::invalid_argument("lora_window_sample: window must be in [0, S]");
    SampleConfig cfg;
    cfg.guidance_w = guidance_w;
    cfg.window = window;
    cfg.window_m = window_m;
    return sample(tape, params, sched, c, x_T, cfg);
}

}  // namespace draftlab
