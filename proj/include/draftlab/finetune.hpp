#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "draftlab/denoiser.hpp"
#include "draftlab/rewards.hpp"
#include "draftlab/rng.hpp"
#include "draftlab/sampler.hpp"
#include "draftlab/schedule.hpp"
#include "draftlab/tensor.hpp"

namespace draftlab {

enum class FinetuneMode { Draft, DraftK, DraftLV, Refl };

inline FinetuneMode parse_mode(const std::string& s) {
    if (s == "draft") return FinetuneMode::Draft;
    if (s == "draft-k") return FinetuneMode::DraftK;
    if (s == "draft-lv") return FinetuneMode::DraftLV;
    if (s == "refl") return FinetuneMode::Refl;
    throw std::invalid_argument("unknown fine-tuning mode: " + s);
}

inline std::string mode_name(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::Draft: return "draft";
        case FinetuneMode::DraftK: return "draft-k";
        case FinetuneMode::DraftLV: return "draft-lv";
        case FinetuneMode::Refl: return "refl";
    }
    return "?";
}

struct FinetuneConfig {
    FinetuneMode mode = FinetuneMode::DraftK;
    int K = 1;            // truncation depth for draft-k
    int lv_samples = 2;   // extra one-step terms for draft-lv
    int refl_m = 20;      // refl stops at a step drawn uniformly from [1, m]
    double guidance_w = 7.5;
    double lr = 4e-4;
    int batch = 4;
    int steps = 2000;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    double beta_kl = 0.0;
    int lora_rank = 8;
    bool lr_decay = false;
    bool normalize_lv = false;  // divide the draft-lv objective by lv_samples + 1
    bool checkpoint = true;
};

struct MetricsRecord {
    int64_t step = 0;
    double loss = std::numeric_limits<double>::quiet_NaN();
    double reward_mean = std::numeric_limits<double>::quiet_NaN();
    double reward_std = std::numeric_limits<double>::quiet_NaN();
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
    double lr = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = std::numeric_limits<double>::quiet_NaN();
};

template <class T>
using GradMap = std::map<std::string, std::vector<T>>;

template <class T>
using ParamRefs = std::vector<std::pair<std::string, std::vector<T>*>>;

template <class T>
using RewardCallable = std::function<Tensor<T>(Tape<T>&, Tensor<T>, Context)>;

// A labeled training image in [0,1], CHW layout.
template <class T>
struct LabeledImage {
    std::vector<T> image;
    int class_id = 0;
    double area = 0.0;  // foreground area fraction, target for the scorer
};

// ----- parameter views -----------------------------------------------------

template <class T>
ParamRefs<T> lora_param_refs(DenoiserParams<T>& p) {
    ParamRefs<T> refs;
    for (auto& [name, a] : p.adapters) {
        refs.emplace_back("lora/" + name + "/A", &a.A);
        refs.emplace_back("lora/" + name + "/B", &a.B);
    }
    return refs;
}

template <class T>
ParamRefs<T> base_param_refs(DenoiserParams<T>& p) {
    ParamRefs<T> refs;
    for (auto& [name, e] : p.base) refs.emplace_back(name, &e.data);
    return refs;
}

template <class T>
double grad_global_norm(const GradMap<T>& grads) {
    double sq = 0.0;
    for (const auto& [k, g] : grads)
        for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(sq);
}

// Scales all gradients so the global norm is at most c; returns the pre-clip norm.
template <class T>
double clip_gradients(GradMap<T>& grads, double c) {
    double norm = grad_global_norm(grads);
    if (c > 0 && norm > c) {
        T s = static_cast<T>(c / norm);
        for (auto& [k, g] : grads)
            for (T& v : g) v *= s;
    }
    return norm;
}

template <class T>
std::vector<double> flatten_grads(const GradMap<T>& grads) {
    std::vector<double> flat;
    for (const auto& [k, g] : grads)
        for (T v : g) flat.push_back(static_cast<double>(v));
    return flat;
}

// ----- optimizer -----------------------------------------------------------

// AdamW with decoupled weight decay, global-norm clipping, and an optional
// inverse square root learning rate decay: multiplier = min(10 / sqrt(t), 1).
template <class T>
class AdamW {
public:
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    bool lr_decay = false;

    int64_t steps_done() const { return t_; }

    double lr_multiplier(int64_t step) const {
        if (!lr_decay) return 1.0;
        return std::min(10.0 / std::sqrt(static_cast<double>(step)), 1.0);
    }

    // Applies one update in place; returns the pre-clip gradient norm.
    double step(const ParamRefs<T>& refs, GradMap<T>& grads) {
        ++t_;
        double norm = clip_gradients(grads, clip_norm);
        double lr_t = lr * lr_multiplier(t_);
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (auto& [name, pv] : refs) {
            auto git = grads.find(name);
            if (git == grads.end()) throw std::invalid_argument("AdamW: missing gradient for " + name);
            const auto& g = git->second;
            std::vector<T>& p = *pv;
            if (g.size() != p.size()) throw std::invalid_argument("AdamW: gradient size mismatch for " + name);
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(p.size(), 0.0);
                v.assign(p.size(), 0.0);
            }
            for (size_t i = 0; i < p.size(); ++i) {
                double gi = static_cast<double>(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                double upd = mhat / (std::sqrt(vhat) + eps) + weight_decay * static_cast<double>(p[i]);
                p[i] = static_cast<T>(static_cast<double>(p[i]) - lr_t * upd);
            }
        }
        return norm;
    }

private:
    int64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// ----- denoising pretraining ----------------------------------------------

// One step of the standard denoising objective: t ~ U{1..n_train},
// loss = mean((eps - eps_theta(alpha_t x0 + sigma_t eps, t))^2), averaged over
// the batch. Conditioning is dropped with probability context_dropout so the
// model also learns the unconditional branch. Updates base weights in place.
template <class T>
double pretrain_step(DenoiserParams<T>& params, const NoiseSchedule& sched,
                     const std::vector<const LabeledImage<T>*>& batch, const Rng& rng, int64_t step,
                     AdamW<T>& opt, double context_dropout = 0.1) {
    if (batch.empty()) throw std::invalid_argument("pretrain_step: empty batch");
    const uint64_t tag_t = Rng::hash_tag("pretrain_t");
    const uint64_t tag_eps = Rng::hash_tag("pretrain_eps");
    const uint64_t tag_drop = Rng::hash_tag("pretrain_drop");
    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    const size_t dim = static_cast<size_t>(numel(img_shape));

    Tape<T> tape;
    DenoiserBind<T> bind(tape, params, true, false, false);
    Tensor<T> total = tape.scalar(T(0));
    for (size_t i = 0; i < batch.size(); ++i) {
        const LabeledImage<T>& ex = *batch[i];
        if (ex.image.size() != dim) throw std::invalid_argument("pretrain_step: image size mismatch");
        int t = static_cast<int>(rng.randint(tag_t, static_cast<uint64_t>(step), i, 1, sched.n_train));
        Context c{ex.class_id};
        if (rng.uniform(tag_drop, static_cast<uint64_t>(step), i) < context_dropout) c = Context::null();
        std::vector<T> eps_v(dim);
        rng.fill_normal(eps_v, tag_eps, static_cast<uint64_t>(step), i * dim);
        Tensor<T> x0 = tape.leaf(img_shape, ex.image, false);
        Tensor<T> eps = tape.leaf(img_shape, eps_v, false);
        Tensor<T> x_t = forward_noise(tape, sched, x0, t, eps);
        Tensor<T> pred = eps_theta(bind, x_t, c, t);
        Tensor<T> d = tape.sub(pred, eps);
        total = tape.add(total, tape.mean_all(tape.mul(d, d)));
    }
    Tensor<T> loss = tape.scalar_affine(total, T(1) / static_cast<T>(batch.size()), T(0));
    double loss_val = static_cast<double>(loss.item());
    tape.backward(loss);

    GradMap<T> grads;
    for (const auto& [name, leaf] : bind.cached()) grads[name] = tape.grad_of(leaf.id);
    opt.step(base_param_refs(params), grads);
    return loss_val;
}

// ----- reward fine-tuning -------------------------------------------------

// ||eps_adapted - eps_base||^2 at a given latent; gradients flow only through
// the adapted branch.
template <class T>
Tensor<T> kl_penalty(Tape<T>& tape, const DenoiserParams<T>& params, const std::vector<Tensor<T>>& lora_leaves,
                     const NoiseSchedule& sched, const std::vector<T>& x_in_val, Context c, int t_hi, T w) {
    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    Tensor<T> x_in = tape.leaf(img_shape, x_in_val, false);
    DenoiserBind<T> ft_bind(tape, params, false, true, true);
    if (!lora_leaves.empty()) ft_bind.override_lora_leaves(lora_leaves);
    Tensor<T> eps_ft = cfg_eps(ft_bind, x_in, c, t_hi, w);

    Tape<T> scratch;
    Tensor<T> x_s = scratch.leaf(img_shape, x_in_val, false);
    DenoiserBind<T> pre_bind(scratch, params, false, false, false);
    Tensor<T> eps_pre = cfg_eps(pre_bind, x_s, c, t_hi, w);
    Tensor<T> pre_leaf = tape.leaf(img_shape, eps_pre.value(), false);

    Tensor<T> d = tape.sub(eps_ft, pre_leaf);
    return tape.sum_all(tape.mul(d, d));
}

// One gradient step of the unified reward fine-tuning recipe. Builds the
// adapter gradient of loss = -(1/batch) * sum_i objective_i, where the
// objective is the reward at x_0 plus mode-specific extras:
//   draft     backprop through the whole chain (K = S)
//   draft-k   stop gradient before the last K steps
//   draft-lv  K = 1 plus lv_samples re-noise / one-step-denoise reward terms
//   refl      stop at a random step in [1, m] and score the one-step estimate
// Does not apply an update; fills reward statistics into the returned record.
template <class T>
MetricsRecord reward_grad_step(const DenoiserParams<T>& params, const NoiseSchedule& sched,
                               const FinetuneConfig& cfg, const RewardCallable<T>& reward,
                               const std::vector<Context>& contexts, const Rng& rng, int64_t step,
                               GradMap<T>& grads_out) {
    if (contexts.empty()) throw std::invalid_argument("reward_grad_step: empty batch");
    if (!params.has_adaptation()) throw std::invalid_argument("reward_grad_step: no adapters to train");
    if (!params.merged_deltas.empty())
        throw std::invalid_argument("reward_grad_step: merged deltas are not trainable");
    const int S = sched.steps();
    const uint64_t tag_xT = Rng::hash_tag("x_T");
    const uint64_t tag_refl = Rng::hash_tag("refl_t");
    const uint64_t tag_lv = Rng::hash_tag("lv_eps");
    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    const size_t dim = static_cast<size_t>(numel(img_shape));
    const T w = static_cast<T>(cfg.guidance_w);

    Tape<T> tape;
    DenoiserBind<T> leaf_bind(tape, params, false, true, true);
    std::vector<Tensor<T>> lora_leaves = leaf_bind.lora_leaves();
    DenoiserBind<T> lv_bind(tape, params, false, true, true);
    lv_bind.override_lora_leaves(lora_leaves);

    Tensor<T> total = tape.scalar(T(0));
    std::vector<double> reward_vals;
    for (size_t i = 0; i < contexts.size(); ++i) {
        Context c = contexts[i];
        std::vector<T> x_T(dim);
        rng.fill_normal(x_T, tag_xT, static_cast<uint64_t>(step), i * dim);

        SampleConfig sc;
        sc.guidance_w = cfg.guidance_w;
        sc.checkpoint = cfg.checkpoint;
        sc.train_lora = true;
        switch (cfg.mode) {
            case FinetuneMode::Draft: sc.stop_grad_step = S; break;
            case FinetuneMode::DraftK:
                if (cfg.K < 1 || cfg.K > S) throw std::invalid_argument("reward_grad_step: K must be in [1, S]");
                sc.stop_grad_step = cfg.K;
                break;
            case FinetuneMode::DraftLV: sc.stop_grad_step = 1; break;
            case FinetuneMode::Refl: {
                if (cfg.refl_m < 1) throw std::invalid_argument("reward_grad_step: refl_m must be >= 1");
                int m = std::min(cfg.refl_m, S);
                sc.refl_mode = true;
                sc.refl_step = static_cast<int>(rng.randint(tag_refl, static_cast<uint64_t>(step), i, 1, m));
                break;
            }
        }
        SampleTrace<T> trace = sample(tape, params, sched, c, x_T, sc, &lora_leaves);
        Tensor<T> r = reward(tape, trace.x0, c);
        reward_vals.push_back(static_cast<double>(r.item()));
        Tensor<T> obj = r;

        if (cfg.mode == FinetuneMode::DraftLV && cfg.lv_samples > 0) {
            int t1 = sched.sampler_grid[1];
            T a1 = static_cast<T>(sched.alpha(t1));
            T s1 = static_cast<T>(sched.sigma(t1));
            Tensor<T> x0sg = tape.stop_grad(trace.x0);
            for (int j = 0; j < cfg.lv_samples; ++j) {
                std::vector<T> eps_v(dim);
                rng.fill_normal(eps_v, tag_lv, static_cast<uint64_t>(step),
                                (i * static_cast<size_t>(cfg.lv_samples) + static_cast<size_t>(j)) * dim);
                Tensor<T> eps = tape.leaf(img_shape, eps_v, false);
                Tensor<T> x1 = tape.axpby(a1, x0sg, s1, eps);
                Tensor<T> eps_pred = cfg_eps(lv_bind, x1, c, t1, w);
                Tensor<T> xhat0 = tape.axpby(T(1) / a1, x1, -s1 / a1, eps_pred);
                obj = tape.add(obj, reward(tape, xhat0, c));
            }
            if (cfg.normalize_lv)
                obj = tape.scalar_affine(obj, T(1) / static_cast<T>(cfg.lv_samples + 1), T(0));
        }

        if (cfg.beta_kl > 0.0) {
            int last_k = sc.refl_mode ? sc.refl_step : 1;
            int t_hi = sched.sampler_grid[static_cast<size_t>(last_k)];
            Tensor<T> kl = kl_penalty(tape, params, lora_leaves, sched,
                                      trace.latents[static_cast<size_t>(last_k)], c, t_hi, w);
            obj = tape.axpby(T(1), obj, static_cast<T>(-cfg.beta_kl), kl);
        }
        total = tape.add(total, obj);
    }

    Tensor<T> loss = tape.scalar_affine(total, T(-1) / static_cast<T>(contexts.size()), T(0));
    double loss_val = static_cast<double>(loss.item());
    tape.backward(loss);

    grads_out.clear();
    size_t li = 0;
    for (const auto& [name, a] : params.adapters) {
        (void)a;
        grads_out["lora/" + name + "/A"] = tape.grad_of(lora_leaves[li].id);
        grads_out["lora/" + name + "/B"] = tape.grad_of(lora_leaves[li + 1].id);
        li += 2;
    }

    MetricsRecord rec;
    rec.step = step;
    rec.loss = loss_val;
    double mean = 0.0;
    for (double v : reward_vals) mean += v;
    mean /= static_cast<double>(reward_vals.size());
    double var = 0.0;
    for (double v : reward_vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(reward_vals.size());
    rec.reward_mean = mean;
    rec.reward_std = std::sqrt(var);
    return rec;
}

// One full fine-tuning step: gradient, clip, AdamW update. Returns metrics
// with the pre-clip gradient norm and effective learning rate filled in.
template <class T>
MetricsRecord finetune_step(DenoiserParams<T>& params, const NoiseSchedule& sched, const FinetuneConfig& cfg,
                            const RewardCallable<T>& reward, const std::vector<Context>& contexts,
                            const Rng& rng, int64_t step, AdamW<T>& opt) {
    GradMap<T> grads;
    MetricsRecord rec = reward_grad_step(params, sched, cfg, reward, contexts, rng, step, grads);
    rec.grad_norm = opt.step(lora_param_refs(params), grads);
    rec.lr = opt.lr * opt.lr_multiplier(opt.steps_done());
    return rec;
}

// ----- truncation diagnostics ----------------------------------------------

struct KDiagnostic {
    int K = 0;
    double grad_norm = 0.0;
    double cos_to_k1 = 0.0;
};

// Gradient norm and cosine similarity to the K = 1 gradient for each requested
// truncation depth, holding the noise draws fixed across depths.
template <class T>
std::vector<KDiagnostic> k_diagnostics(const DenoiserParams<T>& params, const NoiseSchedule& sched,
                                       const FinetuneConfig& base_cfg, const RewardCallable<T>& reward,
                                       const std::vector<Context>& contexts, const std::vector<int>& Ks,
                                       const Rng& rng, int64_t step) {
    auto grads_for = [&](int K) {
        FinetuneConfig cfg = base_cfg;
        cfg.mode = FinetuneMode::DraftK;
        cfg.K = K;
        GradMap<T> grads;
        reward_grad_step(params, sched, cfg, reward, contexts, rng, step, grads);
        return flatten_grads(grads);
    };
    std::vector<double> g1 = grads_for(1);
    double n1 = 0.0;
    for (double v : g1) n1 += v * v;
    n1 = std::sqrt(n1);

    std::vector<KDiagnostic> out;
    for (int K : Ks) {
        std::vector<double> g = K == 1 ? g1 : grads_for(K);
        double nk = 0.0, dot = 0.0;
        for (size_t i = 0; i < g.size(); ++i) {
            nk += g[i] * g[i];
            dot += g[i] * g1[i];
        }
        nk = std::sqrt(nk);
        KDiagnostic d;
        d.K = K;
        d.grad_norm = nk;
        d.cos_to_k1 = nk > 0 && n1 > 0 ? dot / (nk * n1) : 0.0;
        out.push_back(d);
    }
    return out;
}

}  // namespace draftlab
