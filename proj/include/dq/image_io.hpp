#pragma once

#include <algorithm>
#include <fstream>
#include <string>

#include "dq/tensor.hpp"

namespace dq {

// Binary PGM (P5) writers for single-channel images in model space [-1, 1].
// Deterministic byte-for-byte: fixed header, fixed rounding.

inline uint8_t to_gray(float x) {
    float u = (x + 1.0f) * 0.5f;
    u = std::clamp(u, 0.0f, 1.0f);
    return static_cast<uint8_t>(u * 255.0f + 0.5f);
}

// imgs: [N, 1, H, W]; writes image `idx`.
inline void save_pgm(const Tensor& imgs, int idx, const std::string& path) {
    check(imgs.ndim() == 4 && imgs.dim(1) == 1, "save_pgm: want [N,1,H,W]");
    check(idx >= 0 && idx < imgs.dim(0), "save_pgm: image index out of range");
    int H = imgs.dim(2), W = imgs.dim(3);
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "cannot open for write: " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    const float* p = imgs.data() + imgs.idx4(idx, 0, 0, 0);
    for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
        uint8_t g = to_gray(p[i]);
        os.write(reinterpret_cast<const char*>(&g), 1);
    }
    os.close();
    check(os.good(), "write failed: " + path);
}

// All N images tiled into a grid with `cols` per row, 1px separator.
inline void save_pgm_grid(const Tensor& imgs, int cols, const std::string& path) {
    check(imgs.ndim() == 4 && imgs.dim(1) == 1, "save_pgm_grid: want [N,1,H,W]");
    check(cols >= 1, "save_pgm_grid: need at least one column");
    int N = imgs.dim(0), H = imgs.dim(2), W = imgs.dim(3);
    int rows = (N + cols - 1) / cols;
    int gh = rows * H + (rows - 1), gw = cols * W + (cols - 1);
    std::vector<uint8_t> canvas(static_cast<size_t>(gh) * gw, 255);
    for (int i = 0; i < N; ++i) {
        int r0 = (i / cols) * (H + 1), c0 = (i % cols) * (W + 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                canvas[static_cast<size_t>(r0 + y) * gw + c0 + x] = to_gray(imgs.at4(i, 0, y, x));
    }
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "cannot open for write: " + path);
    os << "P5\n" << gw << " " << gh << "\n255\n";
    os.write(reinterpret_cast<const char*>(canvas.data()),
             static_cast<std::streamsize>(canvas.size()));
    os.close();
    check(os.good(), "write failed: " + path);
}

}  // namespace dq
