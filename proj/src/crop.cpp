#include "mebinncd/crop.hpp"

#include <algorithm>
#include <cmath>

#include "mebinncd/error.hpp"

namespace mebinncd {

void CropConfig::validate() const {
    if (!(padding_frac >= 0.0)) throw Error(ErrorKind::ConfigInvalid, "padding_frac must be >= 0");
    if (!(min_size_frac > 0.0 && min_size_frac <= 1.0))
        throw Error(ErrorKind::ConfigInvalid, "min_size_frac must be in (0, 1]");
}

namespace {

// ceil that ignores floating noise from products like 10 * 1.2
int robust_ceil(double v) { return static_cast<int>(std::ceil(v - 1e-9)); }

// Start coordinate of a length-`side` window centred on [lo, hi], shifted to
// stay within [0, limit).
int place(int lo, int hi, int side, int limit) {
    const int extent = hi - lo + 1;
    int start = lo - (side - extent) / 2;
    return std::clamp(start, 0, limit - side);
}

}  // namespace

Box square_crop_box(const Box& component, int width, int height, const CropConfig& cfg) {
    const int extent = std::max(component.width(), component.height());
    int side = robust_ceil(extent * (1.0 + 2.0 * cfg.padding_frac));
    side = std::max(side, robust_ceil(cfg.min_size_frac * std::min(width, height)));
    side = std::max(side, 1);
    side = std::min(side, std::min(width, height));
    const int x0 = place(component.min_x, component.max_x, side, width);
    const int y0 = place(component.min_y, component.max_y, side, height);
    return Box{x0, y0, x0 + side - 1, y0 + side - 1};
}

std::vector<SubImageRecord> crop_regions(const GrayImage& image, const BinaryMask& mask, const AnomalyMap& map,
                                         const CropConfig& cfg, const std::string& image_id) {
    cfg.validate();
    if (!mask.same_shape(image.width(), image.height()) || !map.same_shape(image.width(), image.height()))
        throw Error(ErrorKind::DimensionMismatch, "image, mask and map must share dimensions");

    const RegionSet regions = connected_components(mask, cfg.connectivity);
    std::vector<SubImageRecord> out;
    out.reserve(regions.count);
    for (int id = 1; id <= regions.count; ++id) {
        SubImageRecord rec;
        rec.image_id = image_id;
        rec.region_index = id;
        rec.crop_box = square_crop_box(regions.boxes[id - 1], image.width(), image.height(), cfg);
        rec.area = regions.areas[id - 1];

        const Box& b = rec.crop_box;
        const int side = b.width();
        rec.sub_image = GrayImage(side, side);
        rec.sub_mask = BinaryMask(side, side);
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                rec.sub_image.at(x, y) = image.at(b.min_x + x, b.min_y + y);
                rec.sub_mask.at(x, y) = regions.label_at(b.min_x + x, b.min_y + y) == id ? 1 : 0;
            }

        const Box& cb = regions.boxes[id - 1];
        float score = 0.0f;
        for (int y = cb.min_y; y <= cb.max_y; ++y)
            for (int x = cb.min_x; x <= cb.max_x; ++x)
                if (regions.label_at(x, y) == id) score = std::max(score, map.at(x, y));
        rec.anomaly_score = score;
        out.push_back(std::move(rec));
    }
    return out;
}

GrayImage resize_bilinear(const GrayImage& image, int side) {
    if (image.width() == side && image.height() == side) return image;
    GrayImage out(side, side);
    const double sx = static_cast<double>(image.width()) / side;
    const double sy = static_cast<double>(image.height()) / side;
    for (int y = 0; y < side; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height() - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, image.height() - 1);
        const double wy = fy - y0;
        for (int x = 0; x < side; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width() - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, image.width() - 1);
            const double wx = fx - x0;
            const double top = image.at(x0, y0) * (1 - wx) + image.at(x1, y0) * wx;
            const double bottom = image.at(x0, y1) * (1 - wx) + image.at(x1, y1) * wx;
            out.at(x, y) = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bottom * wy));
        }
    }
    return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int side) {
    if (mask.width() == side && mask.height() == side) return mask;
    BinaryMask out(side, side);
    for (int y = 0; y < side; ++y) {
        const int sy = std::min(static_cast<int>((y + 0.5) * mask.height() / side), mask.height() - 1);
        for (int x = 0; x < side; ++x) {
            const int sx = std::min(static_cast<int>((x + 0.5) * mask.width() / side), mask.width() - 1);
            out.at(x, y) = mask.at(sx, sy);
        }
    }
    return out;
}

SubImageRecord resize_to_model(const SubImageRecord& record, int side) {
    if (side < 1) throw Error(ErrorKind::InvalidArgument, "resize side must be positive");
    SubImageRecord out = record;
    out.sub_image = resize_bilinear(record.sub_image, side);
    out.sub_mask = resize_nearest(record.sub_mask, side);
    return out;
}

}  // namespace mebinncd
