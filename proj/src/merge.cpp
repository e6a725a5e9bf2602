#include "mebinncd/merge.hpp"

#include <algorithm>
#include <cmath>

#include "mebinncd/error.hpp"

namespace mebinncd {

void MergeConfig::validate() const {
    if (!(tau_alpha > 0.0)) throw Error(ErrorKind::ConfigInvalid, "tau_alpha must be > 0");
}

std::string to_string(MergeStrategy s) {
    switch (s) {
        case MergeStrategy::Average: return "avg";
        case MergeStrategy::ScoreAverage: return "score";
        case MergeStrategy::AreaAverage: return "area";
    }
    return "area";
}

MergeStrategy merge_strategy_from_string(const std::string& s) {
    if (s == "avg" || s == "average") return MergeStrategy::Average;
    if (s == "score") return MergeStrategy::ScoreAverage;
    if (s == "area") return MergeStrategy::AreaAverage;
    throw Error(ErrorKind::ConfigInvalid, "merge strategy must be avg|score|area, got '" + s + "'");
}

namespace {

std::vector<double> softmax(const std::vector<double>& x) {
    const double m = *std::max_element(x.begin(), x.end());
    std::vector<double> w(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (w[i] = std::exp(x[i] - m));
    for (double& v : w) v /= s;
    return w;
}

MergeResult weighted(std::span<const ClassDistribution> predictions, std::vector<double> weights) {
    MergeResult r;
    r.image_pred.probs = Vec::Zero(predictions[0].probs.size());
    for (std::size_t k = 0; k < predictions.size(); ++k) r.image_pred.probs += weights[k] * predictions[k].probs;
    r.weights = std::move(weights);
    return r;
}

void check_inputs(std::span<const ClassDistribution> predictions, std::size_t other) {
    if (predictions.empty()) throw Error(ErrorKind::EmptyInput, "no sub-image predictions to merge");
    if (other != predictions.size()) throw Error(ErrorKind::LengthMismatch, "predictions and weights differ in length");
}

}  // namespace

MergeResult merge_image(std::span<const ClassDistribution> predictions, std::span<const double> areas,
                        const MergeConfig& cfg) {
    cfg.validate();
    check_inputs(predictions, areas.size());
    std::vector<double> logits(areas.size());
    for (std::size_t k = 0; k < areas.size(); ++k) {
        if (!(areas[k] >= 0.0)) throw Error(ErrorKind::InvalidArgument, "areas must be >= 0");
        logits[k] = std::sqrt(areas[k]) / cfg.tau_alpha;
    }
    return weighted(predictions, softmax(logits));
}

MergeResult merge_baselines(std::span<const ClassDistribution> predictions, std::span<const double> areas,
                            std::span<const double> scores, MergeStrategy strategy, const MergeConfig& cfg) {
    switch (strategy) {
        case MergeStrategy::AreaAverage: return merge_image(predictions, areas, cfg);
        case MergeStrategy::Average:
            check_inputs(predictions, areas.size());
            return weighted(predictions, std::vector<double>(predictions.size(), 1.0 / predictions.size()));
        case MergeStrategy::ScoreAverage:
            check_inputs(predictions, scores.size());
            return weighted(predictions, softmax(std::vector<double>(scores.begin(), scores.end())));
    }
    throw Error(ErrorKind::InvalidArgument, "unknown merge strategy");
}

}  // namespace mebinncd
