#pragma once

#include <span>
#include <vector>

#include "mebinncd/raster.hpp"

namespace mebinncd {

/// Minimum-cost perfect assignment on a square cost matrix given row-major.
/// assignment[row] = column.
struct Assignment {
    std::vector<int> assignment;
    double cost = 0.0;
};
Assignment hungarian_match(std::span<const double> cost, int k);

/// Rectangular variant: pads to a square with `pad` and returns the matched
/// column for each row (-1 when the row was matched to padding).
Assignment hungarian_match_rect(const std::vector<std::vector<double>>& cost, double pad = 0.0);

double nmi(std::span<const int> labels_true, std::span<const int> labels_pred);
double ari(std::span<const int> labels_true, std::span<const int> labels_pred);

enum class F1Variant { Macro, Micro };

struct MatchedF1 {
    double f1 = 0.0;
    /// mapping[i] = true class matched to cluster_ids[i], or -1.
    std::vector<int> cluster_ids;
    std::vector<int> class_ids;
    std::vector<int> mapping;
    std::vector<std::vector<long long>> confusion;  // [cluster][class]
};

MatchedF1 matched_f1(std::span<const int> labels_true, std::span<const int> labels_pred,
                     F1Variant variant = F1Variant::Macro);

struct ClusteringReport {
    double nmi = 0.0;
    double ari = 0.0;
    double f1 = 0.0;
    double micro_f1 = 0.0;
    MatchedF1 matching;
};

ClusteringReport clustering_report(std::span<const int> labels_true, std::span<const int> labels_pred);

struct DetectionMatch {
    int image = 0;
    int gt_region = 0;
    int pred_region = 0;
    double iou = 0.0;
};

struct DetectionReport {
    double fpr = 0.0;
    double fnr = 0.0;
    long long gt_regions = 0;
    long long pred_regions = 0;
    std::vector<DetectionMatch> matches;
};

inline constexpr double kDetectionIou = 0.1;

DetectionReport detection_rates(std::span<const BinaryMask> gt_masks, std::span<const BinaryMask> pred_masks,
                                Connectivity connectivity = Connectivity::Eight);

}  // namespace mebinncd
