#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "draftlab/denoiser.hpp"
#include "draftlab/tensor.hpp"

namespace draftlab {

// ----- differentiable JPEG round trip ------------------------------------

namespace jpeg {

// Annex K base tables, zig-zag free (row-major).
inline const int kLumaBase[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline const int kChromaBase[64] = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

template <class T>
std::vector<T> quant_table(bool chroma, int quality) {
    if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg: quality must be in [1, 100]");
    double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
    const int* base = chroma ? kChromaBase : kLumaBase;
    std::vector<T> t(64);
    for (int i = 0; i < 64; ++i) {
        int q = static_cast<int>(std::floor((base[i] * scale + 50.0) / 100.0));
        t[static_cast<size_t>(i)] = static_cast<T>(std::min(255, std::max(1, q)));
    }
    return t;
}

}  // namespace jpeg

// Differentiable JPEG round trip on an image in [0,1]: RGB->YCbCr, 8x8 DCT,
// quantize (straight-through rounding), dequantize, inverse DCT, back to RGB.
// No chroma subsampling and no entropy coding; those do not change d(c(x)).
template <class T>
Tensor<T> jpeg_roundtrip(Tape<T>& tape, Tensor<T> x01, int quality = 50) {
    const Shape& s = x01.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] % 8 != 0 || s[2] % 8 != 0)
        throw std::invalid_argument("jpeg_roundtrip: need [3,H,W] with H,W multiples of 8");
    int H = s[1], W = s[2];
    int64_t HW = static_cast<int64_t>(H) * W;

    // forward color transform, already centered: [Y-128, Cb-128, Cr-128]
    std::vector<T> M = {T(0.299), T(0.587), T(0.114), T(-0.168736), T(-0.331264), T(0.5),
                        T(0.5),   T(-0.418688), T(-0.081312)};
    std::vector<T> Minv = {T(1), T(0), T(1.402), T(1), T(-0.344136), T(-0.714136), T(1), T(1.772), T(0)};
    Tensor<T> Mt = tape.leaf({3, 3}, M, false);
    Tensor<T> Mit = tape.leaf({3, 3}, Minv, false);

    Tensor<T> x255 = tape.scalar_affine(x01, T(255), T(0));
    Tensor<T> ycc = tape.matmul(Mt, tape.reshape(x255, {3, static_cast<int>(HW)}));
    ycc = tape.add_row_bias(ycc, tape.leaf({3}, {T(-128), T(0), T(0)}, false));
    Tensor<T> coeffs = tape.block_dct8(tape.reshape(ycc, {3, H, W}));

    auto luma = jpeg::quant_table<T>(false, quality);
    auto chroma = jpeg::quant_table<T>(true, quality);
    std::vector<T> qt, iqt;
    qt.reserve(192);
    iqt.reserve(192);
    for (int c = 0; c < 3; ++c) {
        const auto& t = c == 0 ? luma : chroma;
        for (int i = 0; i < 64; ++i) {
            qt.push_back(T(1) / t[static_cast<size_t>(i)]);
            iqt.push_back(t[static_cast<size_t>(i)]);
        }
    }
    Tensor<T> quantized = tape.round_ste(tape.block_scale8(coeffs, qt));
    Tensor<T> rec_centered = tape.block_idct8(tape.block_scale8(quantized, iqt));

    Tensor<T> rgb255 = tape.matmul(Mit, tape.reshape(rec_centered, {3, static_cast<int>(HW)}));
    rgb255 = tape.add_row_bias(rgb255, tape.leaf({3}, {T(128), T(128), T(128)}, false));
    return tape.reshape(tape.scalar_affine(rgb255, T(1) / T(255), T(0)), {3, H, W});
}

// r(x0) = -||x0 - d(c(clamp(x0)))||^2, always <= 0. The codec sees the
// clamped image, but the distance is taken from the raw input so pixels
// outside [0,1] still receive a gradient pulling them toward the decoded
// image instead of a dead zero from the clamp.
template <class T>
Tensor<T> jpeg_reward(Tape<T>& tape, Tensor<T> x0, int quality = 50) {
    Tensor<T> xc = tape.clamp01(x0);
    Tensor<T> rec = jpeg_roundtrip(tape, xc, quality);
    Tensor<T> d = tape.sub(x0, rec);
    return tape.neg(tape.sum_all(tape.mul(d, d)));
}

template <class T>
Tensor<T> incompressibility_reward(Tape<T>& tape, Tensor<T> x0, int quality = 50) {
    return tape.neg(jpeg_reward(tape, x0, quality));
}

// ----- rotational anti-correlation ----------------------------------------

// (1/3) * sum over 90/180/270-degree rotations of ||x - Rot(x)||^2.
template <class T>
Tensor<T> rotation_anticorr_reward(Tape<T>& tape, Tensor<T> x0) {
    Tensor<T> total = tape.scalar(T(0));
    for (int k = 1; k <= 3; ++k) {
        Tensor<T> d = tape.sub(x0, tape.rot90(x0, k));
        total = tape.add(total, tape.sum_all(tape.mul(d, d)));
    }
    return tape.scalar_affine(total, T(1) / T(3), T(0));
}

// ----- small frozen prediction heads (classifier, scorer) -----------------

// Conv backbone with a linear head; used both for the toy classifier behind
// the adversarial reward and the toy scorer standing in for an aesthetic model.
struct HeadNetConfig {
    int image_size = 24;
    int in_channels = 3;
    int channels = 16;
    int n_out = 8;
};

template <class T>
struct HeadNet {
    HeadNetConfig cfg;
    ParamStore<T> params;
};

template <class T>
HeadNet<T> init_head_net(const HeadNetConfig& cfg, const Rng& rng, const std::string& init_tag) {
    HeadNet<T> net;
    net.cfg = cfg;
    uint64_t tag = Rng::hash_tag(init_tag);
    uint64_t counter = 0;
    auto add = [&](const std::string& name, Shape shape, double std_dev) {
        ParamEntry<T> e;
        e.shape = shape;
        e.data.resize(static_cast<size_t>(numel(shape)));
        for (auto& v : e.data) v = static_cast<T>(std_dev * rng.normal(tag, 0, counter++));
        net.params[name] = std::move(e);
    };
    add("conv1.w", {cfg.channels, cfg.in_channels * 9}, 1.0 / std::sqrt(cfg.in_channels * 9.0));
    add("conv1.b", {cfg.channels}, 0.0);
    add("conv2.w", {cfg.channels, cfg.channels * 9}, 1.0 / std::sqrt(cfg.channels * 9.0));
    add("conv2.b", {cfg.channels}, 0.0);
    add("head.w", {cfg.n_out, cfg.channels}, 1.0 / std::sqrt(static_cast<double>(cfg.channels)));
    add("head2.w", {cfg.n_out, cfg.channels}, 1.0 / std::sqrt(static_cast<double>(cfg.channels)));
    add("head.b", {cfg.n_out}, 0.0);
    return net;
}

// Creates one tape leaf per head-net parameter, shared across forward calls so
// batched training accumulates gradients into a single leaf per weight.
template <class T>
class HeadNetBind {
public:
    HeadNetBind(Tape<T>& tape, const HeadNet<T>& net, bool trainable) : tape_(&tape), net_(&net) {
        for (const auto& [name, e] : net.params) leaves_[name] = tape.leaf_ref(e.shape, &e.data, trainable);
    }

    Tensor<T> leaf(const std::string& name) const { return leaves_.at(name); }
    const std::map<std::string, Tensor<T>>& leaves() const { return leaves_; }
    const HeadNet<T>& net() const { return *net_; }
    Tape<T>& tape() { return *tape_; }

private:
    Tape<T>* tape_;
    const HeadNet<T>* net_;
    std::map<std::string, Tensor<T>> leaves_;
};

// Returns logits (or regression outputs) of shape [n_out, 1].
template <class T>
Tensor<T> head_net_forward(HeadNetBind<T>& bind, Tensor<T> x) {
    Tape<T>& tape = bind.tape();
    const HeadNetConfig& cfg = bind.net().cfg;
    auto w = [&](const std::string& n) { return bind.leaf(n); };
    Tensor<T> h = tape.silu(tape.add_row_bias(tape.conv3x3(x, w("conv1.w")), w("conv1.b")));
    h = tape.silu(tape.add_row_bias(tape.conv3x3(h, w("conv2.w")), w("conv2.b")));
    // first and second spatial moments per channel; the second moment keeps
    // edge-density information that plain mean pooling averages away
    int hw = cfg.image_size * cfg.image_size;
    Tensor<T> ones = tape.leaf({hw, 1}, std::vector<T>(static_cast<size_t>(hw), T(1)), false);
    Tensor<T> flat = tape.reshape(h, {cfg.channels, hw});
    Tensor<T> mean = tape.scalar_affine(tape.matmul(flat, ones), T(1) / static_cast<T>(hw), T(0));
    Tensor<T> mean_sq = tape.scalar_affine(tape.matmul(tape.mul(flat, flat), ones), T(1) / static_cast<T>(hw), T(0));
    Tensor<T> logits = tape.add(tape.matmul(w("head.w"), mean), tape.matmul(w("head2.w"), mean_sq));
    return tape.add_row_bias(logits, w("head.b"));
}

template <class T>
Tensor<T> head_net_forward(Tape<T>& tape, const HeadNet<T>& net, Tensor<T> x, bool trainable) {
    HeadNetBind<T> bind(tape, net, trainable);
    return head_net_forward(bind, x);
}

// Log-odds of the target class: logit_t - logsumexp over the other logits,
// i.e. log(p_t / (1 - p_t)). Monotone in the target probability like the
// log-likelihood, but it does not saturate: once the classifier is confident,
// log p_t underflows to exactly zero in 32-bit and its gradient vanishes,
// while the log-odds keeps a usable training signal. Classifier weights stay
// frozen.
template <class T>
Tensor<T> classifier_reward(Tape<T>& tape, const HeadNet<T>& classifier, Tensor<T> x0, int target_class) {
    const int n = classifier.cfg.n_out;
    if (target_class < 0 || target_class >= n)
        throw std::invalid_argument("classifier_reward: target class out of range");
    Tensor<T> logits = head_net_forward(tape, classifier, x0, false);
    if (n == 1) return tape.pick(logits, 0);
    // logsumexp over the non-target logits via a masked log-softmax: with the
    // target logit pushed to -1e9, lse_others = masked[j] - log_softmax(masked)[j]
    // for any remaining index j, and masked[j] == logits[j] there
    std::vector<T> mask(static_cast<size_t>(n), T(0));
    mask[static_cast<size_t>(target_class)] = T(-1e9);
    Tensor<T> masked = tape.add(logits, tape.leaf({n}, mask, false));
    Tensor<T> logsoft = tape.log_softmax_rows(tape.reshape(masked, {1, n}));
    const int j = target_class == 0 ? 1 : 0;
    return tape.add(tape.sub(tape.pick(logits, target_class), tape.pick(logits, j)), tape.pick(logsoft, j));
}

template <class T>
int classify(const HeadNet<T>& classifier, const std::vector<T>& image) {
    Tape<T> tape;
    Tensor<T> x = tape.leaf({classifier.cfg.in_channels, classifier.cfg.image_size, classifier.cfg.image_size},
                            image, false);
    const auto& v = head_net_forward(tape, classifier, x, false).value();
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

// Frozen regressor scoring a known generative attribute (foreground area
// fraction mapped to [1, 10]).
template <class T>
Tensor<T> scorer_reward(Tape<T>& tape, const HeadNet<T>& scorer, Tensor<T> x0) {
    if (scorer.cfg.n_out != 1) throw std::invalid_argument("scorer_reward: scorer must have one output");
    Tensor<T> out = head_net_forward(tape, scorer, x0, false);
    return tape.pick(out, 0);
}

// ----- reward registry ------------------------------------------------------

template <class T>
struct RewardFn {
    std::string name;
    double weight = 1.0;
    std::function<Tensor<T>(Tape<T>&, Tensor<T>, Context)> fn;
};

template <class T>
Tensor<T> combine_rewards(Tape<T>& tape, const std::vector<RewardFn<T>>& rewards, Tensor<T> x0, Context c) {
    if (rewards.empty()) throw std::invalid_argument("combine_rewards: empty reward list");
    Tensor<T> total = rewards[0].fn(tape, x0, c);
    if (rewards[0].weight != 1.0) total = tape.scalar_affine(total, static_cast<T>(rewards[0].weight), T(0));
    for (size_t i = 1; i < rewards.size(); ++i)
        total = tape.axpby(T(1), total, static_cast<T>(rewards[i].weight), rewards[i].fn(tape, x0, c));
    return total;
}

}  // namespace draftlab
