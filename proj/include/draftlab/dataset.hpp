#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "draftlab/finetune.hpp"
#include "draftlab/rng.hpp"

namespace draftlab {

// Class id = shape * 4 + color; shape in {circle, square}, color in
// {red, green, blue, yellow}.
inline constexpr int kNumShapeClasses = 8;

inline const char* class_name(int class_id) {
    static const char* names[kNumShapeClasses] = {"red circle",  "green circle", "blue circle",  "yellow circle",
                                                  "red square",  "green square", "blue square",  "yellow square"};
    if (class_id < 0 || class_id >= kNumShapeClasses) throw std::invalid_argument("class_name: id out of range");
    return names[class_id];
}

template <class T>
struct SyntheticDataset {
    uint64_t seed = 0;
    int image_size = 24;
    std::vector<LabeledImage<T>> items;
};

namespace detail {

inline void foreground_color(int color, double rgb[3]) {
    switch (color) {
        case 0: rgb[0] = 0.90; rgb[1] = 0.15; rgb[2] = 0.15; break;  // red
        case 1: rgb[0] = 0.15; rgb[1] = 0.80; rgb[2] = 0.20; break;  // green
        case 2: rgb[0] = 0.20; rgb[1] = 0.25; rgb[2] = 0.90; break;  // blue
        default: rgb[0] = 0.90; rgb[1] = 0.85; rgb[2] = 0.15; break; // yellow
    }
}

}  // namespace detail

// One anti-aliased shape at a random position and scale on a smooth gradient
// background. Coverage comes from a signed distance to the shape boundary,
// ramped over one pixel. Pixel math runs in double and is cast at the end.
template <class T>
LabeledImage<T> render_example(uint64_t seed, uint64_t index, int class_id, int image_size = 24) {
    if (class_id < 0 || class_id >= kNumShapeClasses) throw std::invalid_argument("render_example: bad class id");
    Rng rng(seed);
    const uint64_t tag = Rng::hash_tag("dataset");
    auto u = [&](uint64_t slot) { return rng.uniform(tag, index, slot); };

    const int W = image_size, H = image_size;
    const int shape = class_id / 4, color = class_id % 4;

    double fg[3];
    detail::foreground_color(color, fg);
    double bg0[3], bg_dx[3];
    double theta = u(0) * 2.0 * 3.14159265358979323846;
    double gx = std::cos(theta), gy = std::sin(theta);
    for (int ch = 0; ch < 3; ++ch) {
        bg0[ch] = 0.30 + 0.40 * u(1 + static_cast<uint64_t>(ch));
        bg_dx[ch] = -0.15 + 0.30 * u(4 + static_cast<uint64_t>(ch));
    }

    double area_target = 0.07 + 0.41 * u(7);  // leaves slack so rendered area stays in [0.05, 0.5]
    double half_extent;  // circle radius or square half side, in pixels
    if (shape == 0) {
        half_extent = std::sqrt(area_target * W * H / 3.14159265358979323846);
    } else {
        half_extent = std::sqrt(area_target * W * H) / 2.0;
    }
    double margin = half_extent + 1.0;
    double span = std::max(0.0, W - 2.0 * margin);
    double cx = margin + span * u(8);
    double cy = margin + span * u(9);

    LabeledImage<T> ex;
    ex.class_id = class_id;
    ex.image.resize(static_cast<size_t>(3) * W * H);
    double covered = 0.0;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double d;  // signed distance to boundary, negative inside
            if (shape == 0) {
                d = std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy)) - half_extent;
            } else {
                double dx = std::abs(px - cx) - half_extent;
                double dy = std::abs(py - cy) - half_extent;
                double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
                d = std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
            }
            double cov = std::clamp(0.5 - d, 0.0, 1.0);
            covered += cov;
            double proj = ((px / W) - 0.5) * gx + ((py / H) - 0.5) * gy;
            for (int ch = 0; ch < 3; ++ch) {
                double bg = std::clamp(bg0[ch] + bg_dx[ch] * (proj + 0.5) * 2.0, 0.0, 1.0);
                double v = bg + cov * (fg[ch] - bg);
                ex.image[static_cast<size_t>(ch) * W * H + static_cast<size_t>(y) * W + x] = static_cast<T>(v);
            }
        }
    }
    ex.area = covered / (W * H);
    return ex;
}

// Label-balanced deterministic dataset: item i has class i mod 8.
template <class T>
SyntheticDataset<T> gen_dataset(uint64_t seed, int n, int image_size = 24) {
    if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
    SyntheticDataset<T> ds;
    ds.seed = seed;
    ds.image_size = image_size;
    ds.items.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        ds.items.push_back(render_example<T>(seed, static_cast<uint64_t>(i), i % kNumShapeClasses, image_size));
    return ds;
}

// Maps foreground area fraction to a score in [1, 10] (the attribute the toy
// scorer regresses).
inline double area_score(double area) {
    double t = std::clamp((area - 0.05) / 0.45, 0.0, 1.0);
    return 1.0 + 9.0 * t;
}

template <class T>
double dataset_mean_pixel(const SyntheticDataset<T>& ds) {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& ex : ds.items) {
        for (T v : ex.image) sum += static_cast<double>(v);
        count += ex.image.size();
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace draftlab
