#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mebinncd::detail {

struct PngPixels {
    int width = 0;
    int height = 0;
    int channels = 0;   // 1 (gray), 3 (rgb) after stripping alpha
    int bit_depth = 0;  // 8 or 16
    std::vector<std::uint16_t> samples;  // width*height*channels, native value range
};

PngPixels read_png(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, int width, int height, int bit_depth,
                    const std::vector<std::uint16_t>& samples);

}  // namespace mebinncd::detail
