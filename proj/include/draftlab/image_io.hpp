#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace draftlab {

// Binary portable pixmap, 8-bit, max-val 255. Input is CHW in [0,1]; values
// outside the range are clamped.
template <class T>
void write_ppm(const std::string& path, const std::vector<T>& chw, int height, int width) {
    if (chw.size() != static_cast<size_t>(3) * height * width)
        throw std::invalid_argument("write_ppm: expected 3*H*W values");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << width << " " << height << "\n255\n";
    const size_t plane = static_cast<size_t>(height) * width;
    for (size_t p = 0; p < plane; ++p) {
        for (int ch = 0; ch < 3; ++ch) {
            double v = static_cast<double>(chw[static_cast<size_t>(ch) * plane + p]);
            int b = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            out.put(static_cast<char>(b));
        }
    }
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

template <class T>
std::vector<T> read_ppm(const std::string& path, int* height_out = nullptr, int* width_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w < 1 || h < 1)
        throw std::runtime_error("read_ppm: unsupported format in " + path);
    in.get();  // single whitespace byte after the header
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<unsigned char> raw(plane * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error("read_ppm: truncated file " + path);
    std::vector<T> chw(plane * 3);
    for (size_t p = 0; p < plane; ++p)
        for (int ch = 0; ch < 3; ++ch)
            chw[static_cast<size_t>(ch) * plane + p] = static_cast<T>(raw[p * 3 + static_cast<size_t>(ch)] / 255.0);
    if (height_out) *height_out = h;
    if (width_out) *width_out = w;
    return chw;
}

}  // namespace draftlab
