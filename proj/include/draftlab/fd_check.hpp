#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "draftlab/finetune.hpp"
#include "draftlab/sampler.hpp"

namespace draftlab {

struct FdModeReport {
    double max_rel_err = 0.0;
    double loss_gap = 0.0;  // |oracle loss at the base point - analytic loss|
    double max_abs_err = 0.0;
    double grad_inf_norm = 0.0;
    double worst_g = 0.0;   // analytic and FD values at the worst relative entry
    double worst_fd = 0.0;
};

// Central finite differences of the per-mode training objective over every
// adapter parameter, compared against the analytic gradient.
//
// A truncated gradient is not the gradient of the plain end-to-end objective:
// it is the exact gradient of a frozen-prefix objective in which the chain up
// to the cut (and every stop-gradient input) is held at its base-parameter
// value. The oracle therefore precomputes the latent entering the cut and any
// stop-gradient quantities once with the unperturbed parameters, and only the
// differentiable suffix is re-evaluated at the perturbed points. For the full
// backprop mode the prefix is empty and this reduces to the plain objective.
template <class T>
FdModeReport fd_check_mode(const DenoiserParams<T>& params, const NoiseSchedule& sched,
                           const FinetuneConfig& cfg, const RewardCallable<T>& reward, Context c,
                           const Rng& rng, double fd_eps) {
    if (cfg.beta_kl > 0.0) throw std::invalid_argument("fd_check_mode: beta_kl is not supported");
    const int S = sched.steps();
    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    const size_t dim = static_cast<size_t>(numel(img_shape));
    const T w = static_cast<T>(cfg.guidance_w);

    // analytic gradient for a single-sample batch at step 0
    std::vector<Context> contexts = {c};
    GradMap<T> analytic;
    MetricsRecord rec = reward_grad_step(params, sched, cfg, reward, contexts, rng, 0, analytic);

    // base-parameter forward pass; reproduces the same latent draw
    std::vector<T> x_T(dim);
    rng.fill_normal(x_T, Rng::hash_tag("x_T"), 0, 0);
    Tape<T> fwd;
    SampleConfig fwd_cfg;
    fwd_cfg.guidance_w = cfg.guidance_w;
    SampleTrace<T> trace0 = sample(fwd, params, sched, c, x_T, fwd_cfg);

    bool refl = cfg.mode == FinetuneMode::Refl;
    int cut = S;
    switch (cfg.mode) {
        case FinetuneMode::Draft: cut = S; break;
        case FinetuneMode::DraftK: cut = cfg.K; break;
        case FinetuneMode::DraftLV: cut = 1; break;
        case FinetuneMode::Refl:
            cut = static_cast<int>(rng.randint(Rng::hash_tag("refl_t"), 0, 0, 1, std::min(cfg.refl_m, S)));
            break;
    }
    std::vector<T> x_stop = trace0.latents[static_cast<size_t>(cut)];
    std::vector<T> x0_base = trace0.x0_value;

    int lv_n = cfg.mode == FinetuneMode::DraftLV ? cfg.lv_samples : 0;
    std::vector<std::vector<T>> lv_eps(static_cast<size_t>(lv_n), std::vector<T>(dim));
    for (int j = 0; j < lv_n; ++j)
        rng.fill_normal(lv_eps[static_cast<size_t>(j)], Rng::hash_tag("lv_eps"), 0,
                        static_cast<size_t>(j) * dim);

    auto loss_of = [&](const DenoiserParams<T>& p) {
        Tape<T> tape;
        Tensor<T> obj;
        if (refl) {
            Tensor<T> x_in = tape.leaf(img_shape, x_stop, false);
            DenoiserBind<T> bind(tape, p, false, false, true);
            int t_hi = sched.sampler_grid[static_cast<size_t>(cut)];
            Tensor<T> eps = cfg_eps(bind, x_in, c, t_hi, w);
            Tensor<T> xhat0 = tape.axpby(static_cast<T>(1.0 / sched.alpha(t_hi)), x_in,
                                         static_cast<T>(-sched.sigma(t_hi) / sched.alpha(t_hi)), eps);
            obj = reward(tape, xhat0, c);
        } else {
            Tensor<T> x = tape.leaf(img_shape, x_stop, false);
            for (int k = cut; k >= 1; --k) {
                DenoiserBind<T> bind(tape, p, false, false, true);
                x = ddim_step(bind, sched, x, c, k, w).first;
            }
            obj = reward(tape, x, c);
            if (lv_n > 0) {
                int t1 = sched.sampler_grid[1];
                T a1 = static_cast<T>(sched.alpha(t1));
                T s1 = static_cast<T>(sched.sigma(t1));
                Tensor<T> x0c = tape.leaf(img_shape, x0_base, false);
                for (int j = 0; j < lv_n; ++j) {
                    Tensor<T> eps = tape.leaf(img_shape, lv_eps[static_cast<size_t>(j)], false);
                    Tensor<T> x1 = tape.axpby(a1, x0c, s1, eps);
                    DenoiserBind<T> bind(tape, p, false, false, true);
                    Tensor<T> eps_pred = cfg_eps(bind, x1, c, t1, w);
                    Tensor<T> xhat0 = tape.axpby(T(1) / a1, x1, -s1 / a1, eps_pred);
                    obj = tape.add(obj, reward(tape, xhat0, c));
                }
                if (cfg.normalize_lv)
                    obj = tape.scalar_affine(obj, T(1) / static_cast<T>(lv_n + 1), T(0));
            }
        }
        return -static_cast<double>(obj.item());
    };

    FdModeReport report;
    report.loss_gap = std::abs(loss_of(params) - rec.loss);
    for (const auto& [name, g] : analytic)
        for (T v : g) report.grad_inf_norm = std::max(report.grad_inf_norm, std::abs(static_cast<double>(v)));
    // scale-aware relative error: entries many orders of magnitude below the
    // gradient scale are pure finite-difference noise, so the denominator is
    // floored at a small fraction of the infinity norm
    const double floor = 1e-6 * report.grad_inf_norm + 1e-12;
    for (const auto& [layer, a] : params.adapters) {
        for (int part = 0; part < 2; ++part) {
            size_t n = part == 0 ? a.A.size() : a.B.size();
            const std::vector<T>& g = analytic.at("lora/" + layer + (part == 0 ? "/A" : "/B"));
            for (size_t i = 0; i < n; ++i) {
                DenoiserParams<T> p = params;
                std::vector<T>& target = part == 0 ? p.adapters.at(layer).A : p.adapters.at(layer).B;
                T orig = target[i];
                target[i] = orig + static_cast<T>(fd_eps);
                double fp = loss_of(p);
                target[i] = orig - static_cast<T>(fd_eps);
                double fm = loss_of(p);
                double fd = (fp - fm) / (2.0 * fd_eps);
                double rel = std::abs(static_cast<double>(g[i]) - fd) /
                             std::max({std::abs(static_cast<double>(g[i])), std::abs(fd), floor});
                report.max_abs_err = std::max(report.max_abs_err, std::abs(static_cast<double>(g[i]) - fd));
                if (rel > report.max_rel_err) {
                    report.worst_g = static_cast<double>(g[i]);
                    report.worst_fd = fd;
                }
                report.max_rel_err = std::max(report.max_rel_err, rel);
            }
        }
    }
    return report;
}

}  // namespace draftlab
