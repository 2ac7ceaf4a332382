#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vdyn {

/// 8-bit RGB image, row-major, 3 bytes per pixel.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;

    ImageU8() = default;
    ImageU8(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0) {}

    uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* px(int x, int y) const {
        return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

/// Writes an 8-bit RGB PNG (zlib-compressed, no interlacing).
void write_png(const std::string& path, const ImageU8& img);

/// Raw PPM (P6) fallback.
void write_ppm(const std::string& path, const ImageU8& img);

void write_image(const std::string& path, const ImageU8& img, bool use_ppm = false);

/// Horizontal strip of images with a 2px separator.
ImageU8 hstrip(const std::vector<ImageU8>& frames, uint8_t sep_value = 32);

/// Renders a non-negative grid as a heatmap with isolines at fixed fractions
/// of the maximum, upsampled for readability.
ImageU8 heatmap_with_isolines(const std::vector<double>& grid, int rows, int cols, int upscale = 8);

/// Min-max normalized grayscale rendering of one feature map.
ImageU8 grayscale_map(const std::vector<float>& values, int rows, int cols, int upscale = 1);

}  // namespace vdyn
