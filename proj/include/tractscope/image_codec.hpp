#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tractscope::acq {

// 8-bit RGB, row-major, interleaved. data.size() == width*height*3.
struct RasterImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> data;

    uint8_t* pixel(int y, int x) { return data.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* pixel(int y, int x) const {
        return data.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

// PNG or JPEG payload -> RGB8. Alpha dropped, grayscale replicated to 3
// channels, palettes expanded.
RasterImage decode_image(std::span<const uint8_t> bytes);

std::vector<uint8_t> encode_png(const RasterImage& image);

}  // namespace tractscope::acq
