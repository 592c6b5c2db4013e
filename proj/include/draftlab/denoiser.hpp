#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "draftlab/rng.hpp"
#include "draftlab/schedule.hpp"
#include "draftlab/tensor.hpp"

namespace draftlab {

// Conditioning signal: a class id, or the unconditional (null) token.
struct Context {
    static constexpr int kNull = -1;
    int class_id = kNull;

    static Context null() { return {kNull}; }
    bool is_null() const { return class_id == kNull; }
};

struct ModelConfig {
    int image_size = 24;
    int in_channels = 3;
    int channels = 32;
    int blocks = 4;
    int emb_dim = 32;
    int n_classes = 8;

    static ModelConfig micro() {
        ModelConfig c;
        c.image_size = 8;
        c.channels = 6;
        c.blocks = 1;
        c.emb_dim = 8;
        c.n_classes = 2;
        return c;
    }
};

template <class T>
struct ParamEntry {
    Shape shape;
    std::vector<T> data;
};

template <class T>
using ParamStore = std::map<std::string, ParamEntry<T>>;

template <class T>
struct LoraAdapter {
    std::string layer_name;
    int rank = 0;
    int d_out = 0, d_in = 0;
    std::vector<T> A;  // [rank, d_in]
    std::vector<T> B;  // [d_out, rank], zero at init so the adapted model equals the base
};

// Frozen base weights plus named LoRA adapters; during fine-tuning only the
// adapter factors (or merged deltas from lora_mix) receive gradients.
template <class T>
struct DenoiserParams {
    ModelConfig cfg;
    ParamStore<T> base;
    std::map<std::string, LoraAdapter<T>> adapters;
    std::map<std::string, std::vector<T>> merged_deltas;  // layer -> [d_out*d_in], from lora_mix
    T lora_scale = T(1);

    bool has_adaptation() const { return !adapters.empty() || !merged_deltas.empty(); }
};

inline std::vector<std::string> adapted_layer_names(const ModelConfig& cfg) {
    std::vector<std::string> names = {"conv_in.w", "conv_out.w"};
    for (int i = 0; i < cfg.blocks; ++i) {
        std::string p = "block" + std::to_string(i) + ".";
        names.push_back(p + "conv1.w");
        names.push_back(p + "conv2.w");
        names.push_back(p + "tproj.w");
        names.push_back(p + "cproj.w");
    }
    return names;
}

template <class T>
DenoiserParams<T> init_denoiser(const ModelConfig& cfg, const Rng& rng) {
    DenoiserParams<T> p;
    p.cfg = cfg;
    uint64_t tag = Rng::hash_tag("denoiser_init");
    uint64_t counter = 0;
    auto add = [&](const std::string& name, Shape shape, double std_dev) {
        ParamEntry<T> e;
        e.shape = shape;
        e.data.resize(static_cast<size_t>(numel(shape)));
        for (auto& v : e.data) v = static_cast<T>(std_dev * rng.normal(tag, 0, counter++));
        p.base[name] = std::move(e);
    };
    int ch = cfg.channels, emb = cfg.emb_dim, cin = cfg.in_channels;
    add("conv_in.w", {ch, cin * 9}, 1.0 / std::sqrt(cin * 9.0));
    add("conv_in.b", {ch}, 0.0);
    for (int i = 0; i < cfg.blocks; ++i) {
        std::string pre = "block" + std::to_string(i) + ".";
        add(pre + "conv1.w", {ch, ch * 9}, 1.0 / std::sqrt(ch * 9.0));
        add(pre + "conv1.b", {ch}, 0.0);
        add(pre + "conv2.w", {ch, ch * 9}, 0.5 / std::sqrt(ch * 9.0));
        add(pre + "conv2.b", {ch}, 0.0);
        add(pre + "tproj.w", {ch, emb}, 1.0 / std::sqrt(static_cast<double>(emb)));
        add(pre + "tproj.b", {ch}, 0.0);
        add(pre + "cproj.w", {ch, emb}, 1.0 / std::sqrt(static_cast<double>(emb)));
        add(pre + "cproj.b", {ch}, 0.0);
    }
    add("conv_out.w", {cin, ch * 9}, 0.1 / std::sqrt(ch * 9.0));
    add("conv_out.b", {cin}, 0.0);
    // one extra row for the null token
    add("class_emb", {cfg.n_classes + 1, emb}, 1.0);
    return p;
}

// Fresh adapters with B == 0, so the adapted model equals the base model.
template <class T>
void init_lora(DenoiserParams<T>& p, int rank, const Rng& rng) {
    p.adapters.clear();
    p.merged_deltas.clear();
    uint64_t tag = Rng::hash_tag("lora_init");
    uint64_t counter = 0;
    for (const auto& name : adapted_layer_names(p.cfg)) {
        const auto& e = p.base.at(name);
        LoraAdapter<T> a;
        a.layer_name = name;
        a.d_out = e.shape[0];
        a.d_in = e.shape[1];
        a.rank = std::min(rank, std::min(a.d_out, a.d_in));
        a.A.resize(static_cast<size_t>(a.rank) * a.d_in);
        for (auto& v : a.A) v = static_cast<T>(rng.normal(tag, 0, counter++) / std::sqrt(static_cast<double>(a.d_in)));
        a.B.assign(static_cast<size_t>(a.d_out) * a.rank, T(0));
        p.adapters[name] = std::move(a);
    }
}

template <class T>
DenoiserParams<T> lora_scale_set(DenoiserParams<T> p, T alpha) {
    p.lora_scale = alpha;
    return p;
}

// Mixes two adapter sets into explicit per-layer deltas:
// delta = alpha * (B_a A_a) + beta * (B_b A_b). Operating on the product keeps
// the combination linear in each model's contribution.
template <class T>
DenoiserParams<T> lora_mix(const DenoiserParams<T>& a, const DenoiserParams<T>& b, T alpha, T beta) {
    if (a.adapters.size() != b.adapters.size()) throw std::invalid_argument("lora_mix: adapter sets differ");
    DenoiserParams<T> out = a;
    out.adapters.clear();
    out.merged_deltas.clear();
    out.lora_scale = T(1);
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    for (const auto& [name, ad_a] : a.adapters) {
        auto it = b.adapters.find(name);
        if (it == b.adapters.end()) throw std::invalid_argument("lora_mix: layer missing in second set: " + name);
        const auto& ad_b = it->second;
        if (ad_a.rank != ad_b.rank || ad_a.d_out != ad_b.d_out || ad_a.d_in != ad_b.d_in)
            throw std::invalid_argument("lora_mix: mismatched adapter dims for " + name);
        Eigen::Map<const Mat> Aa(ad_a.A.data(), ad_a.rank, ad_a.d_in), Ba(ad_a.B.data(), ad_a.d_out, ad_a.rank);
        Eigen::Map<const Mat> Ab(ad_b.A.data(), ad_b.rank, ad_b.d_in), Bb(ad_b.B.data(), ad_b.d_out, ad_b.rank);
        Mat d = alpha * (Ba * Aa) + beta * (Bb * Ab);
        std::vector<T> delta(d.data(), d.data() + d.size());
        out.merged_deltas[name] = std::move(delta);
    }
    return out;
}

// Binds one parameter set to one tape, building effective weights on demand
// and caching them so repeated denoiser calls on the tape share leaves.
template <class T>
class DenoiserBind {
public:
    DenoiserBind(Tape<T>& tape, const DenoiserParams<T>& params, bool train_base = false, bool train_lora = false,
                 bool use_adapters = true)
        : tape_(&tape), params_(&params), train_base_(train_base), train_lora_(train_lora),
          use_adapters_(use_adapters) {}

    // Adapter factor leaves in fixed (sorted) layer order: A then B per layer.
    std::vector<Tensor<T>> lora_leaves() {
        std::vector<Tensor<T>> out;
        for (const auto& [name, ad] : params_->adapters) {
            ensure_lora(name, ad);
            out.push_back(lora_[name].first);
            out.push_back(lora_[name].second);
        }
        return out;
    }

    // Rebind adapter factors to externally supplied tensors (checkpoint replay).
    void override_lora_leaves(const std::vector<Tensor<T>>& leaves) {
        size_t i = 0;
        for (const auto& [name, ad] : params_->adapters) {
            (void)ad;
            lora_[name] = {leaves.at(i), leaves.at(i + 1)};
            i += 2;
        }
    }

    Tensor<T> weight(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        const auto& e = params_->base.at(name);
        Tensor<T> w = tape_->leaf_ref(e.shape, &e.data, train_base_);
        if (use_adapters_ && params_->lora_scale != T(0)) {
            T s = params_->lora_scale;
            auto mit = params_->merged_deltas.find(name);
            if (mit != params_->merged_deltas.end()) {
                Tensor<T> d = tape_->leaf_ref(e.shape, &mit->second, false);
                w = s == T(1) ? tape_->add(w, d) : tape_->axpby(T(1), w, s, d);
            } else {
                auto ait = params_->adapters.find(name);
                if (ait != params_->adapters.end()) {
                    ensure_lora(name, ait->second);
                    Tensor<T> d = tape_->matmul(lora_[name].second, lora_[name].first);
                    Tensor<T> d2 = tape_->reshape(d, e.shape);
                    w = s == T(1) ? tape_->add(w, d2) : tape_->axpby(T(1), w, s, d2);
                }
            }
        }
        cache_[name] = w;
        return w;
    }

    Tensor<T> raw(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        const auto& e = params_->base.at(name);
        Tensor<T> w = tape_->leaf_ref(e.shape, &e.data, train_base_);
        cache_[name] = w;
        return w;
    }

    Tape<T>& tape() { return *tape_; }
    const DenoiserParams<T>& params() const { return *params_; }
    const std::map<std::string, Tensor<T>>& cached() const { return cache_; }

private:
    void ensure_lora(const std::string& name, const LoraAdapter<T>& ad) {
        if (lora_.count(name)) return;
        Tensor<T> A = tape_->leaf_ref({ad.rank, ad.d_in}, &ad.A, train_lora_);
        Tensor<T> B = tape_->leaf_ref({ad.d_out, ad.rank}, &ad.B, train_lora_);
        lora_[name] = {A, B};
    }

    Tape<T>* tape_;
    const DenoiserParams<T>* params_;
    bool train_base_, train_lora_, use_adapters_;
    std::map<std::string, Tensor<T>> cache_;
    std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> lora_;  // A, B
};

template <class T>
std::vector<T> sinusoidal_embedding(int t, int dim) {
    std::vector<T> e(static_cast<size_t>(dim));
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        e[static_cast<size_t>(i)] = static_cast<T>(std::sin(t * freq));
        e[static_cast<size_t>(half + i)] = static_cast<T>(std::cos(t * freq));
    }
    return e;
}

// Predicted noise eps(x_t, c, t). Small conditional residual conv net:
// conv_in, `blocks` residual blocks with time/class channel biases, conv_out.
template <class T>
Tensor<T> eps_theta(DenoiserBind<T>& bind, Tensor<T> x_t, Context c, int t) {
    Tape<T>& tape = bind.tape();
    const ModelConfig& cfg = bind.params().cfg;
    if (c.class_id >= cfg.n_classes) throw std::invalid_argument("eps_theta: class id out of range");

    Tensor<T> temb = tape.leaf({cfg.emb_dim, 1}, sinusoidal_embedding<T>(t, cfg.emb_dim), false);
    int row = c.is_null() ? cfg.n_classes : c.class_id;
    Tensor<T> cemb = tape.reshape(tape.embed_row(bind.raw("class_emb"), row), {cfg.emb_dim, 1});

    Tensor<T> h = tape.add_row_bias(tape.conv3x3(x_t, bind.weight("conv_in.w")), bind.raw("conv_in.b"));
    for (int i = 0; i < cfg.blocks; ++i) {
        std::string pre = "block" + std::to_string(i) + ".";
        Tensor<T> tb = tape.add_row_bias(tape.matmul(bind.weight(pre + "tproj.w"), temb), bind.raw(pre + "tproj.b"));
        Tensor<T> cb = tape.add_row_bias(tape.matmul(bind.weight(pre + "cproj.w"), cemb), bind.raw(pre + "cproj.b"));
        Tensor<T> cond = tape.add(tb, cb);
        Tensor<T> h1 = tape.add_row_bias(tape.conv3x3(h, bind.weight(pre + "conv1.w")), bind.raw(pre + "conv1.b"));
        h1 = tape.add_row_bias(h1, cond);
        h1 = tape.silu(h1);
        Tensor<T> h2 = tape.add_row_bias(tape.conv3x3(h1, bind.weight(pre + "conv2.w")), bind.raw(pre + "conv2.b"));
        h = tape.add(h, h2);
    }
    h = tape.silu(h);
    return tape.add_row_bias(tape.conv3x3(h, bind.weight("conv_out.w")), bind.raw("conv_out.b"));
}

// Classifier-free guidance: (1+w) * eps(x, c, t) - w * eps(x, null, t).
// w == 0 short-circuits to the conditional branch.
template <class T>
Tensor<T> cfg_eps(DenoiserBind<T>& bind, Tensor<T> x_t, Context c, int t, T w) {
    if (c.is_null()) throw std::invalid_argument("cfg_eps: context must be conditional");
    Tensor<T> cond = eps_theta(bind, x_t, c, t);
    if (w == T(0)) return cond;
    Tensor<T> uncond = eps_theta(bind, x_t, Context::null(), t);
    return bind.tape().axpby(T(1) + w, cond, -w, uncond);
}

template <class T>
int64_t count_params(const ParamStore<T>& store) {
    int64_t n = 0;
    for (const auto& [k, e] : store) n += numel(e.shape);
    return n;
}

template <class T>
int64_t count_lora_params(const DenoiserParams<T>& p) {
    int64_t n = 0;
    for (const auto& [k, a] : p.adapters) n += static_cast<int64_t>(a.A.size() + a.B.size());
    return n;
}

}  // namespace draftlab
