#include "vdyn/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace vdyn {

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void write_chunk(FILE* f, const char type[4], const uint8_t* data, size_t len) {
    std::vector<uint8_t> head;
    put_u32_be(head, static_cast<uint32_t>(len));
    fwrite(head.data(), 1, 4, f);
    fwrite(type, 1, 4, f);
    if (len) fwrite(data, 1, len, f);
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (len) crc = crc32(crc, data, static_cast<uInt>(len));
    std::vector<uint8_t> tail;
    put_u32_be(tail, static_cast<uint32_t>(crc));
    fwrite(tail.data(), 1, 4, f);
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.width <= 0 || img.height <= 0) throw std::invalid_argument("write_png: empty image");
    // filter byte 0 per scanline
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.height) * (1 + static_cast<size_t>(img.width) * 3));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), img.px(0, y), img.px(0, y) + static_cast<size_t>(img.width) * 3);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw std::runtime_error("write_png: zlib compression failed");
    }
    comp.resize(comp_len);

    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("write_png: cannot open " + path);
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    fwrite(sig, 1, 8, f);
    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(img.width));
    put_u32_be(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    write_chunk(f, "IHDR", ihdr.data(), ihdr.size());
    write_chunk(f, "IDAT", comp.data(), comp.size());
    write_chunk(f, "IEND", nullptr, 0);
    std::fclose(f);
}

void write_ppm(const std::string& path, const ImageU8& img) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    std::fprintf(f, "P6\n%d %d\n255\n", img.width, img.height);
    fwrite(img.rgb.data(), 1, img.rgb.size(), f);
    std::fclose(f);
}

void write_image(const std::string& path, const ImageU8& img, bool use_ppm) {
    if (use_ppm) {
        write_ppm(path, img);
    } else {
        write_png(path, img);
    }
}

ImageU8 hstrip(const std::vector<ImageU8>& frames, uint8_t sep_value) {
    if (frames.empty()) return ImageU8();
    const int h = frames[0].height;
    int w = 0;
    for (const auto& fr : frames) w += fr.width;
    w += 2 * (static_cast<int>(frames.size()) - 1);
    ImageU8 out(w, h);
    std::fill(out.rgb.begin(), out.rgb.end(), sep_value);
    int x0 = 0;
    for (const auto& fr : frames) {
        for (int y = 0; y < std::min(h, fr.height); ++y) {
            std::memcpy(out.px(x0, y), fr.px(0, y), static_cast<size_t>(fr.width) * 3);
        }
        x0 += fr.width + 2;
    }
    return out;
}

ImageU8 heatmap_with_isolines(const std::vector<double>& grid, int rows, int cols, int upscale) {
    double peak = 0;
    for (double v : grid) peak = std::max(peak, v);
    if (peak <= 0) peak = 1.0;
    ImageU8 out(cols * upscale, rows * upscale);
    auto level = [&](int r, int c) { return grid[static_cast<size_t>(r) * cols + c] / peak; };
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            double v = level(y / upscale, x / upscale);
            // blue -> yellow -> red ramp
            double t = std::pow(v, 0.5);
            uint8_t* p = out.px(x, y);
            p[0] = static_cast<uint8_t>(std::lround(255 * std::min(1.0, 2 * t)));
            p[1] = static_cast<uint8_t>(std::lround(255 * std::min(1.0, 1.6 * t * (1.0 - 0.4 * t))));
            p[2] = static_cast<uint8_t>(std::lround(255 * std::max(0.0, 1.0 - 2.2 * t)));
        }
    }
    const double iso[4] = {0.1, 0.3, 0.5, 0.8};
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            for (double lv : iso) {
                bool above = level(r, c) >= lv;
                bool edge = (c + 1 < cols && (level(r, c + 1) >= lv) != above) ||
                            (r + 1 < rows && (level(r + 1, c) >= lv) != above);
                if (edge) {
                    for (int dy = 0; dy < upscale; ++dy) {
                        uint8_t* p = out.px(c * upscale + upscale - 1, r * upscale + dy);
                        p[0] = p[1] = p[2] = 16;
                    }
                }
            }
        }
    }
    return out;
}

ImageU8 grayscale_map(const std::vector<float>& values, int rows, int cols, int upscale) {
    float lo = values.empty() ? 0.f : values[0];
    float hi = lo;
    for (float v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float span = hi - lo > 1e-12f ? hi - lo : 1.f;
    ImageU8 out(cols * upscale, rows * upscale);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            float v = (values[static_cast<size_t>(y / upscale) * cols + x / upscale] - lo) / span;
            uint8_t g = static_cast<uint8_t>(std::lround(255 * v));
            uint8_t* p = out.px(x, y);
            p[0] = p[1] = p[2] = g;
        }
    }
    return out;
}

}  // namespace vdyn
