#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mebinncd/crop.hpp"
#include "mebinncd/mebin.hpp"
#include "mebinncd/mgvit.hpp"

namespace mebinncd {

struct TrainConfig {
    double tau_u = 0.07;
    double tau_c = 1.0;
    double tau_s = 0.1;
    double tau_t_start = 0.07;
    double tau_t_end = 0.04;
    int tau_t_warmup_epochs = 40;
    int tau_t_step_every = 4;
    double lambda = 0.3;
    double mu = 4.0;
    double plc_threshold = 0.5;
    int batch_size = 32;
    int epochs = 50;
    double learning_rate = 0.003;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    std::uint64_t seed = 0;

    void validate() const;
    /// Teacher temperature for a 0-based epoch: step-wise linear decay every
    /// tau_t_step_every epochs until tau_t_warmup_epochs, constant afterwards.
    double teacher_temperature(int epoch) const;
};

/// Probability vector over known + novel classes.
struct ClassDistribution {
    Vec probs;

    bool is_valid(double tol = 1e-9) const;
    int argmax() const;
};

Vec softmax_with_temperature(const Vec& logits, double tau);

/// Teacher pseudo label: known-class logits are closed before the softmax, so
/// their probabilities are exactly zero.
ClassDistribution pseudo_label(const Vec& teacher_logits, int num_known, double tau_t);

/// q <- w e + (1 - w) q with w = max(threshold - score, 0); e is one-hot on
/// index num_known (the reserved normal class).
ClassDistribution correct_pseudo_label(const ClassDistribution& q, double anomaly_score, int num_known,
                                       double threshold = 0.5);

/// Contrastive loss with gradients. Row j of `anchors` is scored against
/// every row of `candidates`; the denominator runs over all candidates.
struct ContrastiveResult {
    double loss = 0.0;
    std::vector<Vec> grad_anchors;
    std::vector<Vec> grad_candidates;
    int contributing = 0;  // anchors that had at least one positive
};

/// Self-supervised form: the positive of anchor j is candidate j.
ContrastiveResult loss_contrastive_self(std::span<const Vec> anchors, std::span<const Vec> candidates, double tau_u);

/// Supervised form: positives of anchor j are the other candidates with the
/// same label. Anchors with no positive are skipped.
ContrastiveResult loss_contrastive_supervised(std::span<const Vec> anchors, std::span<const Vec> candidates,
                                              std::span<const int> labels, double tau_c);

/// Mean cross-entropy -sum t log p. With `swap`, targets[j] of one view pair
/// supervise predictions of the opposite view: the inputs are split in half
/// and the halves are crossed.
double loss_classification(std::span<const ClassDistribution> student_probs,
                           std::span<const ClassDistribution> targets, bool swap = false);

/// Entropy of the mean prediction over both views.
double loss_regularizer(std::span<const ClassDistribution> probs_a, std::span<const ClassDistribution> probs_b);

// --- augmentation -------------------------------------------------------------

struct View {
    GrayImage image;
    BinaryMask mask;
};

struct AugmentParams {
    bool flip_h = false;
    bool flip_v = false;
    int rot90 = 0;           // quarter turns, 0..3
    double brightness = 1.0;  // [0.8, 1.2]
    int blur_radius = 0;     // 0 or 1
    int crop_side = 0;       // 0 = no crop; else side of the square retained
    int crop_x = 0;
    int crop_y = 0;

    static AugmentParams identity() { return {}; }
    static AugmentParams sample(int side, std::uint64_t seed);
};

View apply_augment(const GrayImage& image, const BinaryMask& mask, const AugmentParams& p);
std::pair<View, View> augment(const SubImageRecord& record, std::uint64_t seed);

// --- training -----------------------------------------------------------------

struct ItemMeta {
    std::optional<int> label;  // known-class index for labeled items
    double anomaly_score = 1.0;
};

/// Per-head pseudo-label targets for both views of every unlabeled item.
struct BatchTargets {
    std::vector<std::vector<Vec>> a;  // [item][head]
    std::vector<std::vector<Vec>> b;
};

BatchTargets compute_targets(std::span<const ForwardOutput> out_a, std::span<const ForwardOutput> out_b,
                             std::span<const ItemMeta> meta, const ModelConfig& model_cfg, const TrainConfig& cfg,
                             double tau_t);

struct LossBreakdown {
    double total = 0.0;
    double rep_u = 0.0;
    double rep_l = 0.0;
    double cls_l = 0.0;
    double cls_u = 0.0;
    double entropy = 0.0;
    std::vector<double> head_cls;  // per classifier head
};

struct BatchObjective {
    LossBreakdown loss;
    std::vector<OutputGrad> grad_a;
    std::vector<OutputGrad> grad_b;
};

/// Full objective for one batch: views `a` and `b` play the two augmented
/// views; pseudo-label targets are treated as constants.
BatchObjective batch_objective(std::span<const ForwardOutput> out_a, std::span<const ForwardOutput> out_b,
                               std::span<const ItemMeta> meta, const BatchTargets& targets,
                               const ModelConfig& model_cfg, const TrainConfig& cfg);

struct PreparedView {
    Mat patches;
    MaskVector mask;
};
PreparedView prepare_view(const View& v, const ModelConfig& cfg);

/// Loss and parameter gradient of one batch of already augmented views.
struct BatchGradient {
    LossBreakdown loss;
    std::vector<double> grad;
};
BatchGradient batch_gradient(const ModelParams& params, std::span<const PreparedView> views_a,
                             std::span<const PreparedView> views_b, std::span<const ItemMeta> meta,
                             const TrainConfig& cfg, double tau_t, const BatchTargets* fixed_targets = nullptr,
                             Exec exec = Exec::Parallel);

struct EpochRecord {
    int epoch = 0;
    double tau_t = 0.0;
    LossBreakdown mean;
    int steps = 0;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochRecord> history;
    int inference_head = 0;
};

/// Records must already be at model resolution. Labeled records carry a
/// known-class label; all others are unlabeled.
TrainResult train(std::span<const SubImageRecord> records, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Student probabilities (temperature tau_s) of one record at model resolution.
ClassDistribution predict(const ModelParams& params, const SubImageRecord& record, int head, double tau_s);

}  // namespace mebinncd
