#pragma once

#include <span>
#include <string>
#include <vector>

#include "mebinncd/ncd.hpp"

namespace mebinncd {

struct MergeConfig {
    double tau_alpha = 100.0;
    void validate() const;
};

enum class MergeStrategy {
    Average,       // (i) unweighted mean
    ScoreAverage,  // (ii) softmax of anomaly scores
    AreaAverage,   // (iii) softmax of sqrt(area) / tau_alpha
};

std::string to_string(MergeStrategy s);
MergeStrategy merge_strategy_from_string(const std::string& s);

struct MergeResult {
    ClassDistribution image_pred;
    std::vector<double> weights;
};

/// Area-weighted merge: weight_k = softmax_k(sqrt(area_k) / tau_alpha).
MergeResult merge_image(std::span<const ClassDistribution> predictions, std::span<const double> areas,
                        const MergeConfig& cfg);

MergeResult merge_baselines(std::span<const ClassDistribution> predictions, std::span<const double> areas,
                            std::span<const double> scores, MergeStrategy strategy, const MergeConfig& cfg);

}  // namespace mebinncd
