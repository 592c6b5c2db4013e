#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "draftlab/denoiser.hpp"
#include "draftlab/rewards.hpp"

namespace draftlab {

// File layout: one line of UTF-8 JSON, a newline, then raw little-endian
// tensor payloads. The header object holds "meta" (free-form) and "tensors"
// (name -> {shape, dtype, offset}), offsets relative to the payload start.
// std::map key order makes the bytes reproducible.

template <class T>
struct NamedTensor {
    Shape shape;
    std::vector<T> data;
};

template <class T>
using NamedTensors = std::map<std::string, NamedTensor<T>>;

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else static_assert(sizeof(T) == 0, "unsupported dtype");
}

template <class T>
void save_tensors(const std::string& path, const NamedTensors<T>& tensors,
                  const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["meta"] = meta;
    nlohmann::json tj = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (static_cast<size_t>(numel(t.shape)) != t.data.size())
            throw std::invalid_argument("save_tensors: shape/data mismatch for " + name);
        tj[name] = {{"shape", t.shape}, {"dtype", dtype_name<T>()}, {"offset", offset}};
        offset += t.data.size() * sizeof(T);
    }
    header["tensors"] = tj;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tensors: cannot open " + path);
    out << header.dump() << "\n";
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!out) throw std::runtime_error("save_tensors: write failed for " + path);
}

template <class T>
NamedTensors<T> load_tensors(const std::string& path, nlohmann::json* meta_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tensors: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_tensors: missing header in " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    if (meta_out) *meta_out = header.value("meta", nlohmann::json::object());

    std::streampos payload_start = in.tellg();
    NamedTensors<T> out;
    for (const auto& [name, entry] : header.at("tensors").items()) {
        std::string dtype = entry.at("dtype").template get<std::string>();
        if (dtype != dtype_name<T>())
            throw std::runtime_error("load_tensors: dtype mismatch for " + name + " in " + path + " (file has " +
                                     dtype + ", expected " + dtype_name<T>() + ")");
        NamedTensor<T> t;
        t.shape = entry.at("shape").template get<Shape>();
        t.data.resize(static_cast<size_t>(numel(t.shape)));
        uint64_t offset = entry.at("offset").template get<uint64_t>();
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(T)));
        if (!in) throw std::runtime_error("load_tensors: truncated payload for " + name + " in " + path);
        out[name] = std::move(t);
    }
    return out;
}

// ----- denoiser + adapters ---------------------------------------------------

template <class T>
void save_denoiser(const std::string& path, const DenoiserParams<T>& p) {
    NamedTensors<T> tensors;
    for (const auto& [name, e] : p.base) tensors[name] = {e.shape, e.data};
    for (const auto& [name, a] : p.adapters) {
        tensors["lora/" + name + "/A"] = {{a.rank, a.d_in}, a.A};
        tensors["lora/" + name + "/B"] = {{a.d_out, a.rank}, a.B};
    }
    for (const auto& [name, d] : p.merged_deltas)
        tensors["lora/" + name + "/delta"] = {p.base.at(name).shape, d};
    nlohmann::json meta = {{"kind", "denoiser"},
                           {"image_size", p.cfg.image_size},
                           {"in_channels", p.cfg.in_channels},
                           {"channels", p.cfg.channels},
                           {"blocks", p.cfg.blocks},
                           {"emb_dim", p.cfg.emb_dim},
                           {"n_classes", p.cfg.n_classes},
                           {"lora_scale", static_cast<double>(p.lora_scale)}};
    save_tensors(path, tensors, meta);
}

template <class T>
DenoiserParams<T> load_denoiser(const std::string& path) {
    nlohmann::json meta;
    NamedTensors<T> tensors = load_tensors<T>(path, &meta);
    if (meta.value("kind", "") != "denoiser") throw std::runtime_error("load_denoiser: wrong checkpoint kind in " + path);
    DenoiserParams<T> p;
    p.cfg.image_size = meta.at("image_size").get<int>();
    p.cfg.in_channels = meta.at("in_channels").get<int>();
    p.cfg.channels = meta.at("channels").get<int>();
    p.cfg.blocks = meta.at("blocks").get<int>();
    p.cfg.emb_dim = meta.at("emb_dim").get<int>();
    p.cfg.n_classes = meta.at("n_classes").get<int>();
    p.lora_scale = static_cast<T>(meta.value("lora_scale", 1.0));
    for (auto& [name, t] : tensors) {
        if (name.rfind("lora/", 0) == 0) {
            std::string rest = name.substr(5);
            size_t slash = rest.rfind('/');
            if (slash == std::string::npos) throw std::runtime_error("load_denoiser: bad adapter name " + name);
            std::string layer = rest.substr(0, slash);
            std::string part = rest.substr(slash + 1);
            if (part == "delta") {
                p.merged_deltas[layer] = std::move(t.data);
            } else {
                auto& a = p.adapters[layer];
                a.layer_name = layer;
                if (part == "A") {
                    a.rank = t.shape[0];
                    a.d_in = t.shape[1];
                    a.A = std::move(t.data);
                } else if (part == "B") {
                    a.d_out = t.shape[0];
                    a.rank = t.shape[1];
                    a.B = std::move(t.data);
                } else {
                    throw std::runtime_error("load_denoiser: bad adapter part in " + name);
                }
            }
        } else {
            p.base[name] = ParamEntry<T>{t.shape, std::move(t.data)};
        }
    }
    return p;
}

// ----- prediction heads ------------------------------------------------------

template <class T>
void save_head_net(const std::string& path, const HeadNet<T>& net) {
    NamedTensors<T> tensors;
    for (const auto& [name, e] : net.params) tensors[name] = {e.shape, e.data};
    nlohmann::json meta = {{"kind", "head_net"},
                           {"image_size", net.cfg.image_size},
                           {"in_channels", net.cfg.in_channels},
                           {"channels", net.cfg.channels},
                           {"n_out", net.cfg.n_out}};
    save_tensors(path, tensors, meta);
}

template <class T>
HeadNet<T> load_head_net(const std::string& path) {
    nlohmann::json meta;
    NamedTensors<T> tensors = load_tensors<T>(path, &meta);
    if (meta.value("kind", "") != "head_net") throw std::runtime_error("load_head_net: wrong checkpoint kind in " + path);
    HeadNet<T> net;
    net.cfg.image_size = meta.at("image_size").get<int>();
    net.cfg.in_channels = meta.at("in_channels").get<int>();
    net.cfg.channels = meta.at("channels").get<int>();
    net.cfg.n_out = meta.at("n_out").get<int>();
    for (auto& [name, t] : tensors) net.params[name] = ParamEntry<T>{t.shape, std::move(t.data)};
    return net;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_file_bytes: cannot open " + path);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace draftlab
