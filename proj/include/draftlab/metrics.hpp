#pragma once

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "draftlab/finetune.hpp"

namespace draftlab {

// Wall-clock time is excluded from metrics unless DRAFT_LAB_TIMING=1, so
// repeated runs with the same config and seed produce identical files.
inline bool timing_enabled() {
    const char* v = std::getenv("DRAFT_LAB_TIMING");
    return v && std::string(v) == "1";
}

// One JSON object per record, fixed key order, NaN fields omitted.
inline std::string metrics_to_json(const MetricsRecord& rec) {
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    if (!std::isnan(rec.loss)) j["loss"] = rec.loss;
    if (!std::isnan(rec.reward_mean)) j["reward_mean"] = rec.reward_mean;
    if (!std::isnan(rec.reward_std)) j["reward_std"] = rec.reward_std;
    if (!std::isnan(rec.grad_norm)) j["grad_norm"] = rec.grad_norm;
    if (!std::isnan(rec.lr)) j["lr"] = rec.lr;
    if (timing_enabled() && !std::isnan(rec.wall_ms)) j["wall_ms"] = rec.wall_ms;
    return j.dump();
}

class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("MetricsWriter: cannot open " + path);
    }

    void write(const MetricsRecord& rec) {
        out_ << metrics_to_json(rec) << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace draftlab
