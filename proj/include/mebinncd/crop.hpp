#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mebinncd/raster.hpp"

namespace mebinncd {

struct CropConfig {
    /// Fraction of the square side added on each side of the box.
    double padding_frac = 0.10;
    /// Minimum crop side as a fraction of the shorter image side.
    double min_size_frac = 0.01;
    Connectivity connectivity = Connectivity::Eight;

    void validate() const;
};

struct SubImageRecord {
    std::string image_id;
    int region_index = 0;  // 1-based component ID within the image
    GrayImage sub_image;
    BinaryMask sub_mask;
    double anomaly_score = 0.0;
    long long area = 0;
    Box crop_box;
    std::optional<int> label;
};

/// Square crop box for one component box inside a width x height image.
Box square_crop_box(const Box& component, int width, int height, const CropConfig& cfg);

/// One record per connected component of `mask`, ordered by component ID.
/// `sub_mask` contains only the pixels of that component.
std::vector<SubImageRecord> crop_regions(const GrayImage& image, const BinaryMask& mask, const AnomalyMap& map,
                                         const CropConfig& cfg, const std::string& image_id = {});

GrayImage resize_bilinear(const GrayImage& image, int side);
BinaryMask resize_nearest(const BinaryMask& mask, int side);

/// Image bilinear, mask nearest-neighbour; area and score keep their
/// source-resolution values.
SubImageRecord resize_to_model(const SubImageRecord& record, int side);

}  // namespace mebinncd
