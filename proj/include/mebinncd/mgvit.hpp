#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mebinncd/raster.hpp"

namespace mebinncd {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Additive value used for closed attention entries.
inline constexpr double kMaskedLogit = -1e9;

/// Which query rows receive the additive mask in mask-guided layers.
enum class MaskTarget { ClassToken, PatchTokens, AllTokens };

std::string to_string(MaskTarget t);
MaskTarget mask_target_from_string(const std::string& s);

struct ModelConfig {
    int input_side = 32;
    int patch_size = 8;
    int embed_dim = 32;
    int num_heads = 4;
    int num_layers = 4;
    int masked_layers = 3;
    int num_known_classes = 2;
    int num_novel_classes = 3;
    int projection_dim = 16;
    int num_heads_classifier = 2;
    int mlp_ratio = 4;
    MaskTarget mask_target = MaskTarget::ClassToken;

    int grid() const { return input_side / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int num_tokens() const { return num_patches() + 1; }
    int num_classes() const { return num_known_classes + num_novel_classes; }
    int head_dim() const { return embed_dim / num_heads; }
    int ff_dim() const { return embed_dim * mlp_ratio; }
    int projection_hidden() const { return 2 * embed_dim; }
    void validate() const;
};

struct MaskVector {
    std::vector<double> pooled;    // N+1 entries, pooled[0] == 1
    std::vector<double> additive;  // 0 where pooled > 0.5, kMaskedLogit otherwise

    static MaskVector open(int num_tokens);
};

MaskVector pool_mask(const BinaryMask& sub_mask, const ModelConfig& cfg);

/// Patch matrix (N x patch_size^2); pixels standardized to zero mean, unit variance per image.
Mat patchify(const GrayImage& image, const ModelConfig& cfg);

struct TensorSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Named tensor layout over a flat parameter buffer.
class ParamLayout {
public:
    explicit ParamLayout(const ModelConfig& cfg);

    struct Layer {
        int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    const std::vector<TensorSpec>& specs() const { return specs_; }
    std::size_t total() const { return total_; }
    const TensorSpec& spec(int index) const { return specs_[index]; }
    int find(const std::string& name) const;

    int patch_w, patch_b, cls, pos, lnf_g, lnf_b;
    int proj_w1, proj_b1, proj_w2, proj_b2, proj_w3, proj_b3;
    std::vector<Layer> layers;
    std::vector<int> head_w;  // D x C, one per classifier head

private:
    int add(std::string name, int rows, int cols);
    std::vector<TensorSpec> specs_;
    std::size_t total_ = 0;
};

struct ModelParams {
    ModelConfig config;
    std::vector<double> values;

    explicit ModelParams(const ModelConfig& cfg);
    static ModelParams initialize(const ModelConfig& cfg, std::uint64_t seed);

    const ParamLayout& layout() const { return layout_; }
    Eigen::Map<const Mat> view(int index) const;
    Eigen::Map<Mat> view(int index);

private:
    ParamLayout layout_;
};

/// Writable view of tensor `index` inside a gradient buffer laid out like `params`.
Eigen::Map<Mat> grad_view(std::span<double> grad, const ParamLayout& layout, int index);

struct ForwardOutput {
    Vec cls_token;
    std::vector<Vec> logits;  // one per classifier head
    Vec projection;           // L2-normalized
};

/// Intermediate values kept for the reverse pass.
struct ForwardCache {
    struct LayerCache {
        Mat input, ln1, q, k, v, concat, mid, ln2, pre_act, act;
        Vec ln1_rstd, ln2_rstd;
        std::vector<Mat> probs;  // per attention head, T x T
    };
    bool valid = false;
    Mat patches;
    std::vector<double> additive;
    std::vector<LayerCache> layers;
    Mat final_tokens;
    double lnf_rstd = 0.0;
    Vec lnf_hat;
    Vec cls, u1, g1, u2, g2, u3;
    double u3_norm = 0.0;
};

ForwardOutput forward(const Mat& patches, const MaskVector& mask, const ModelParams& params,
                      ForwardCache* cache = nullptr);
ForwardOutput forward(const GrayImage& image, const MaskVector& mask, const ModelParams& params,
                      ForwardCache* cache = nullptr);

/// Cotangents of the forward outputs. Empty vectors mean zero.
struct OutputGrad {
    std::vector<Vec> logits;
    Vec projection;
    Vec cls_token;
};

/// Accumulates parameter gradients into `grad` (same layout as params.values).
void backward(const ForwardCache& cache, const OutputGrad& upstream, const ModelParams& params,
              std::span<double> grad);

/// Per-head CLS attention rows of the last layer, for debugging dumps.
std::vector<std::vector<double>> cls_attention(const ForwardCache& cache);

// --- checkpoint -------------------------------------------------------------

struct Checkpoint {
    ModelParams params;
    int inference_head = 0;
    double tau_s = 0.1;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mebinncd
