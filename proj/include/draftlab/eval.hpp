#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "draftlab/rewards.hpp"
#include "draftlab/sampler.hpp"

namespace draftlab {

struct RewardSummary {
    double mean = 0.0;
    double std_dev = 0.0;
    std::vector<double> per_class_mean;
};

struct EvalSummary {
    int n_samples = 0;  // per class
    std::map<std::string, RewardSummary> rewards;
};

// Samples n_samples images per class from a fixed seed pool and scores them
// with every reward; the model is never differentiated.
template <class T>
EvalSummary eval_model(const DenoiserParams<T>& params, const NoiseSchedule& sched,
                       const std::vector<RewardFn<T>>& rewards, int n_samples, double guidance_w,
                       uint64_t eval_seed) {
    if (n_samples < 1) throw std::invalid_argument("eval_model: n_samples must be >= 1");
    if (rewards.empty()) throw std::invalid_argument("eval_model: empty reward list");
    Rng rng(eval_seed);
    const uint64_t tag = Rng::hash_tag("eval_x_T");
    Shape img_shape = {params.cfg.in_channels, params.cfg.image_size, params.cfg.image_size};
    const size_t dim = static_cast<size_t>(numel(img_shape));
    const int n_classes = params.cfg.n_classes;

    std::map<std::string, std::vector<std::vector<double>>> vals;  // reward -> [class][sample]
    for (const auto& r : rewards) vals[r.name].assign(static_cast<size_t>(n_classes), {});

    SampleConfig sc;
    sc.guidance_w = guidance_w;
    for (int cls = 0; cls < n_classes; ++cls) {
        for (int s = 0; s < n_samples; ++s) {
            std::vector<T> x_T(dim);
            rng.fill_normal(x_T, tag, static_cast<uint64_t>(cls), static_cast<size_t>(s) * dim);
            Tape<T> tape;
            Context c{cls};
            SampleTrace<T> trace = sample(tape, params, sched, c, x_T, sc);
            for (const auto& r : rewards) {
                Tape<T> rt;
                Tensor<T> x0 = rt.leaf(img_shape, trace.x0_value, false);
                vals[r.name][static_cast<size_t>(cls)].push_back(static_cast<double>(r.fn(rt, x0, c).item()));
            }
        }
    }

    EvalSummary out;
    out.n_samples = n_samples;
    for (const auto& r : rewards) {
        RewardSummary rs;
        double sum = 0.0;
        size_t count = 0;
        for (const auto& per_class : vals[r.name]) {
            double csum = 0.0;
            for (double v : per_class) csum += v;
            rs.per_class_mean.push_back(csum / static_cast<double>(per_class.size()));
            sum += csum;
            count += per_class.size();
        }
        rs.mean = sum / static_cast<double>(count);
        double var = 0.0;
        for (const auto& per_class : vals[r.name])
            for (double v : per_class) var += (v - rs.mean) * (v - rs.mean);
        rs.std_dev = std::sqrt(var / static_cast<double>(count));
        out.rewards[r.name] = rs;
    }
    return out;
}

}  // namespace draftlab
