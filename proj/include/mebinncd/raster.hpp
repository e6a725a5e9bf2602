#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mebinncd {

/// Inclusive axis-aligned pixel box.
struct Box {
    int min_x = 0;
    int min_y = 0;
    int max_x = -1;
    int max_y = -1;

    int width() const { return max_x - min_x + 1; }
    int height() const { return max_y - min_y + 1; }
    long long area() const { return static_cast<long long>(width()) * height(); }
    bool contains(int x, int y) const { return x >= min_x && x <= max_x && y >= min_y && y <= max_y; }
    bool operator==(const Box&) const = default;
};

/// Intersection-over-union of two inclusive boxes.
double box_iou(const Box& a, const Box& b);

/// Row-major raster of T. Base for the three concrete raster types.
template <typename T>
class Raster {
public:
    Raster() = default;
    Raster(int width, int height, T fill = T{});
    Raster(int width, int height, std::vector<T> data);

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    const T& at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    bool same_shape(int w, int h) const { return w == width_ && h == height_; }

    bool operator==(const Raster&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

/// Per-pixel anomaly probability in [0,1].
class AnomalyMap : public Raster<float> {
public:
    using Raster<float>::Raster;
    float max_value() const;
};

/// 0/1 mask.
class BinaryMask : public Raster<std::uint8_t> {
public:
    using Raster<std::uint8_t>::Raster;
    std::size_t count() const;
};

class GrayImage : public Raster<std::uint8_t> {
public:
    using Raster<std::uint8_t>::Raster;
};

/// Connected-component labeling result. Component IDs run 1..count in
/// raster-scan order of first occurrence; boxes[k-1] and areas[k-1] describe ID k.
struct RegionSet {
    int width = 0;
    int height = 0;
    std::vector<int> labels;
    int count = 0;
    std::vector<Box> boxes;
    std::vector<long long> areas;

    int label_at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    /// Mask of one component (id in 1..count).
    BinaryMask component_mask(int id) const;
};

enum class Connectivity { Four = 4, Eight = 8 };

Connectivity connectivity_from_int(int c);

RegionSet connected_components(const BinaryMask& mask, Connectivity connectivity = Connectivity::Eight);

/// Square-element erosion; out-of-image pixels count as background.
BinaryMask erode(const BinaryMask& mask, int radius);

/// Keeps every component of `marker_source` (under `connectivity`) that has at
/// least one pixel set in `seed`.
BinaryMask reconstruct(const BinaryMask& seed, const BinaryMask& marker_source, Connectivity connectivity);

BinaryMask threshold_mask(const AnomalyMap& map, float epsilon);

/// Bounding box of all set pixels, or nullopt-style empty box (max < min).
Box mask_bounds(const BinaryMask& mask);

// --- file I/O -------------------------------------------------------------

struct LoadStats {
    std::size_t clamped = 0;
};

/// Loads a 16-bit (or 8-bit) grayscale PNG or a raw "F32 w h" raster. Raw values
/// outside [0,1] are clamped and counted in `stats`.
AnomalyMap load_anomaly_map(const std::filesystem::path& path, LoadStats* stats = nullptr);
void save_anomaly_map_png(const AnomalyMap& map, const std::filesystem::path& path);
void save_anomaly_map_raw(const AnomalyMap& map, const std::filesystem::path& path);

BinaryMask load_mask(const std::filesystem::path& path);
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);

/// RGB inputs are reduced with 0.299/0.587/0.114 luminance weights.
GrayImage load_gray_image(const std::filesystem::path& path);
void save_gray_image(const GrayImage& image, const std::filesystem::path& path);

}  // namespace mebinncd
