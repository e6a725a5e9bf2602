#include "mebinncd/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "mebinncd/error.hpp"
#include "png_io.hpp"

namespace mebinncd {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::MissingFile: return "MissingFile";
        case ErrorKind::MalformedHeader: return "MalformedHeader";
        case ErrorKind::SizeMismatch: return "SizeMismatch";
        case ErrorKind::IoFailure: return "IoFailure";
        case ErrorKind::EmptyInput: return "EmptyInput";
        case ErrorKind::DegenerateHistogram: return "DegenerateHistogram";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
        case ErrorKind::MissingCache: return "MissingCache";
        case ErrorKind::AllMasked: return "AllMasked";
        case ErrorKind::BatchTooSmall: return "BatchTooSmall";
        case ErrorKind::NoLabeledItems: return "NoLabeledItems";
        case ErrorKind::ConfigMismatch: return "ConfigMismatch";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::NonFiniteCost: return "NonFiniteCost";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::PairMismatch: return "PairMismatch";
        case ErrorKind::ConfigInvalid: return "ConfigInvalid";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

double box_iou(const Box& a, const Box& b) {
    const int ix0 = std::max(a.min_x, b.min_x);
    const int iy0 = std::max(a.min_y, b.min_y);
    const int ix1 = std::min(a.max_x, b.max_x);
    const int iy1 = std::min(a.max_y, b.max_y);
    const long long inter =
        (ix1 >= ix0 && iy1 >= iy0) ? static_cast<long long>(ix1 - ix0 + 1) * (iy1 - iy0 + 1) : 0;
    const long long uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

template <typename T>
Raster<T>::Raster(int width, int height, T fill) : width_(width), height_(height) {
    if (width < 1 || height < 1) throw Error(ErrorKind::InvalidArgument, "raster dimensions must be positive");
    data_.assign(static_cast<std::size_t>(width) * height, fill);
}

template <typename T>
Raster<T>::Raster(int width, int height, std::vector<T> data)
    : width_(width), height_(height), data_(std::move(data)) {
    if (width < 1 || height < 1) throw Error(ErrorKind::InvalidArgument, "raster dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(width) * height)
        throw Error(ErrorKind::SizeMismatch, "raster payload does not match dimensions");
}

template class Raster<float>;
template class Raster<std::uint8_t>;

float AnomalyMap::max_value() const {
    const auto d = data();
    return d.empty() ? 0.0f : *std::max_element(d.begin(), d.end());
}

std::size_t BinaryMask::count() const {
    const auto d = data();
    return static_cast<std::size_t>(std::count_if(d.begin(), d.end(), [](auto v) { return v != 0; }));
}

BinaryMask RegionSet::component_mask(int id) const {
    BinaryMask m(width, height);
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == id ? 1 : 0;
    return m;
}

Connectivity connectivity_from_int(int c) {
    if (c == 4) return Connectivity::Four;
    if (c == 8) return Connectivity::Eight;
    throw Error(ErrorKind::InvalidArgument, "connectivity must be 4 or 8");
}

// Two-pass union-find labeling; final IDs follow raster order of first pixel.
RegionSet connected_components(const BinaryMask& mask, Connectivity connectivity) {
    const int w = mask.width();
    const int h = mask.height();
    RegionSet out;
    out.width = w;
    out.height = h;
    out.labels.assign(static_cast<std::size_t>(w) * h, 0);
    if (mask.empty()) return out;

    std::vector<int> parent{0};
    auto find = [&](int a) {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    };
    auto unite = [&](int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b) parent[b] = a;
        else parent[a] = b;
    };

    const bool eight = connectivity == Connectivity::Eight;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!mask.at(x, y)) continue;
            int best = 0;
            auto visit = [&](int nx, int ny) {
                if (nx < 0 || ny < 0 || nx >= w) return;
                const int l = out.labels[static_cast<std::size_t>(ny) * w + nx];
                if (!l) return;
                if (!best) best = l;
                else unite(best, l);
            };
            visit(x - 1, y);
            visit(x, y - 1);
            if (eight) {
                visit(x - 1, y - 1);
                visit(x + 1, y - 1);
            }
            if (!best) {
                best = static_cast<int>(parent.size());
                parent.push_back(best);
            }
            out.labels[static_cast<std::size_t>(y) * w + x] = best;
        }
    }

    std::vector<int> remap(parent.size(), 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int& l = out.labels[static_cast<std::size_t>(y) * w + x];
            if (!l) continue;
            const int root = find(l);
            if (!remap[root]) {
                remap[root] = ++out.count;
                out.boxes.push_back(Box{x, y, x, y});
                out.areas.push_back(0);
            }
            l = remap[root];
            Box& b = out.boxes[l - 1];
            b.min_x = std::min(b.min_x, x);
            b.min_y = std::min(b.min_y, y);
            b.max_x = std::max(b.max_x, x);
            b.max_y = std::max(b.max_y, y);
            ++out.areas[l - 1];
        }
    }
    return out;
}

// Separable running minimum: a square window is the product of a row window
// and a column window.
BinaryMask erode(const BinaryMask& mask, int radius) {
    if (radius < 0) throw Error(ErrorKind::InvalidArgument, "erosion radius must be >= 0");
    if (radius == 0 || mask.empty()) return mask;
    const int w = mask.width();
    const int h = mask.height();

    BinaryMask rows(w, h);
    for (int y = 0; y < h; ++y) {
        // run = length of consecutive ones ending at x
        std::vector<int> run(w);
        int r = 0;
        for (int x = 0; x < w; ++x) {
            r = mask.at(x, y) ? r + 1 : 0;
            run[x] = r;
        }
        for (int x = 0; x < w; ++x) {
            const int right = x + radius;
            rows.at(x, y) = (right < w && x - radius >= 0 && run[right] >= 2 * radius + 1) ? 1 : 0;
        }
    }

    BinaryMask out(w, h);
    for (int x = 0; x < w; ++x) {
        int r = 0;
        std::vector<int> run(h);
        for (int y = 0; y < h; ++y) {
            r = rows.at(x, y) ? r + 1 : 0;
            run[y] = r;
        }
        for (int y = 0; y < h; ++y) {
            const int bottom = y + radius;
            out.at(x, y) = (bottom < h && y - radius >= 0 && run[bottom] >= 2 * radius + 1) ? 1 : 0;
        }
    }
    return out;
}

BinaryMask reconstruct(const BinaryMask& seed, const BinaryMask& marker_source, Connectivity connectivity) {
    if (!seed.same_shape(marker_source.width(), marker_source.height()))
        throw Error(ErrorKind::DimensionMismatch, "reconstruct: shape mismatch");
    const RegionSet regions = connected_components(marker_source, connectivity);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(regions.count) + 1, 0);
    for (std::size_t i = 0; i < regions.labels.size(); ++i)
        if (seed[i] && regions.labels[i]) keep[regions.labels[i]] = 1;
    BinaryMask out(marker_source.width(), marker_source.height());
    for (std::size_t i = 0; i < regions.labels.size(); ++i) out[i] = keep[regions.labels[i]] && regions.labels[i];
    return out;
}

BinaryMask threshold_mask(const AnomalyMap& map, float epsilon) {
    BinaryMask m(map.width(), map.height());
    for (std::size_t i = 0; i < map.size(); ++i) m[i] = map[i] > epsilon ? 1 : 0;
    return m;
}

Box mask_bounds(const BinaryMask& mask) {
    Box b{mask.width(), mask.height(), -1, -1};
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask.at(x, y)) {
                b.min_x = std::min(b.min_x, x);
                b.min_y = std::min(b.min_y, y);
                b.max_x = std::max(b.max_x, x);
                b.max_y = std::max(b.max_y, y);
            }
    return b;
}

// --- I/O --------------------------------------------------------------------

namespace {

bool has_raw_magic(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    char magic[4] = {};
    in.read(magic, 4);
    return in.gcount() == 4 && std::memcmp(magic, "F32 ", 4) == 0;
}

AnomalyMap load_raw_map(const std::filesystem::path& path, LoadStats* stats) {
    std::ifstream in(path, std::ios::binary);
    std::string header;
    if (!std::getline(in, header)) throw Error(ErrorKind::MalformedHeader, path.string());
    std::istringstream hs(header);
    std::string tag;
    long long w = 0, h = 0;
    if (!(hs >> tag >> w >> h) || tag != "F32" || w < 1 || h < 1)
        throw Error(ErrorKind::MalformedHeader, "expected 'F32 <width> <height>' in " + path.string());
    std::string rest;
    if (hs >> rest) throw Error(ErrorKind::MalformedHeader, "trailing header tokens in " + path.string());

    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != n * 4)
        throw Error(ErrorKind::SizeMismatch, path.string() + ": payload has " + std::to_string(bytes.size()) +
                                                 " bytes, header declares " + std::to_string(n * 4));
    std::vector<float> values(n);
    std::size_t clamped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
        float v = std::bit_cast<float>(u);
        if (!(v >= 0.0f && v <= 1.0f)) {
            v = (v > 1.0f) ? 1.0f : 0.0f;  // NaN clamps to 0
            ++clamped;
        }
        values[i] = v;
    }
    if (stats) stats->clamped += clamped;
    return AnomalyMap(static_cast<int>(w), static_cast<int>(h), std::move(values));
}

std::vector<std::uint16_t> to_gray_samples(const detail::PngPixels& px) {
    if (px.channels == 1) return px.samples;
    std::vector<std::uint16_t> out(static_cast<std::size_t>(px.width) * px.height);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto* p = &px.samples[i * px.channels];
        out[i] = static_cast<std::uint16_t>(std::lround(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]));
    }
    return out;
}

}  // namespace

AnomalyMap load_anomaly_map(const std::filesystem::path& path, LoadStats* stats) {
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::MissingFile, path.string());
    if (has_raw_magic(path)) return load_raw_map(path, stats);
    const auto px = detail::read_png(path);
    const auto gray = to_gray_samples(px);
    const float scale = px.bit_depth == 16 ? 65535.0f : 255.0f;
    std::vector<float> values(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) values[i] = static_cast<float>(gray[i]) / scale;
    return AnomalyMap(px.width, px.height, std::move(values));
}

void save_anomaly_map_png(const AnomalyMap& map, const std::filesystem::path& path) {
    std::vector<std::uint16_t> s(map.size());
    for (std::size_t i = 0; i < map.size(); ++i)
        s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(map[i], 0.0f, 1.0f) * 65535.0f));
    detail::write_png_gray(path, map.width(), map.height(), 16, s);
}

void save_anomaly_map_raw(const AnomalyMap& map, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot open for writing: " + path.string());
    out << "F32 " << map.width() << ' ' << map.height() << '\n';
    for (float v : map.data()) {
        const auto u = std::bit_cast<std::uint32_t>(v);
        const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                           static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
        out.write(b, 4);
    }
    if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

BinaryMask load_mask(const std::filesystem::path& path) {
    const auto px = detail::read_png(path);
    const auto gray = to_gray_samples(px);
    std::vector<std::uint8_t> bits(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) bits[i] = gray[i] != 0 ? 1 : 0;
    return BinaryMask(px.width, px.height, std::move(bits));
}

void save_mask(const BinaryMask& mask, const std::filesystem::path& path) {
    std::vector<std::uint16_t> s(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) s[i] = mask[i] ? 255 : 0;
    detail::write_png_gray(path, mask.width(), mask.height(), 8, s);
}

GrayImage load_gray_image(const std::filesystem::path& path) {
    const auto px = detail::read_png(path);
    const auto gray = to_gray_samples(px);
    std::vector<std::uint8_t> v(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i)
        v[i] = px.bit_depth == 16 ? static_cast<std::uint8_t>(gray[i] >> 8) : static_cast<std::uint8_t>(gray[i]);
    return GrayImage(px.width, px.height, std::move(v));
}

void save_gray_image(const GrayImage& image, const std::filesystem::path& path) {
    std::vector<std::uint16_t> s(image.data().begin(), image.data().end());
    detail::write_png_gray(path, image.width(), image.height(), 8, s);
}

}  // namespace mebinncd
