#include "mebinncd/mgvit.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "mebinncd/error.hpp"

namespace mebinncd {

std::string to_string(MaskTarget t) {
    switch (t) {
        case MaskTarget::ClassToken: return "class";
        case MaskTarget::PatchTokens: return "patch";
        case MaskTarget::AllTokens: return "all";
    }
    return "class";
}

MaskTarget mask_target_from_string(const std::string& s) {
    if (s == "class") return MaskTarget::ClassToken;
    if (s == "patch") return MaskTarget::PatchTokens;
    if (s == "all") return MaskTarget::AllTokens;
    throw Error(ErrorKind::ConfigInvalid, "mask_target must be one of class|patch|all, got '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigInvalid, m); };
    if (patch_size < 1 || input_side < patch_size || input_side % patch_size != 0)
        fail("input_side must be a positive multiple of patch_size");
    if (num_heads < 1 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (masked_layers < 0 || masked_layers > num_layers) fail("masked_layers must lie in [0, num_layers]");
    if (num_known_classes < 0 || num_novel_classes < 0 || num_classes() < 1) fail("class counts invalid");
    if (projection_dim < 1 || num_heads_classifier < 1 || mlp_ratio < 1) fail("head sizes must be positive");
}

MaskVector MaskVector::open(int num_tokens) {
    MaskVector m;
    m.pooled.assign(num_tokens, 1.0);
    m.additive.assign(num_tokens, 0.0);
    return m;
}

MaskVector pool_mask(const BinaryMask& sub_mask, const ModelConfig& cfg) {
    if (!sub_mask.same_shape(cfg.input_side, cfg.input_side))
        throw Error(ErrorKind::DimensionMismatch, "sub_mask side must equal input_side");
    const int g = cfg.grid();
    const int p = cfg.patch_size;
    MaskVector m;
    m.pooled.assign(cfg.num_tokens(), 1.0);
    m.additive.assign(cfg.num_tokens(), 0.0);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            int on = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x) on += sub_mask.at(gx * p + x, gy * p + y) ? 1 : 0;
            const int t = 1 + gy * g + gx;
            m.pooled[t] = static_cast<double>(on) / (p * p);
            m.additive[t] = m.pooled[t] > 0.5 ? 0.0 : kMaskedLogit;
        }
    return m;
}

Mat patchify(const GrayImage& image, const ModelConfig& cfg) {
    if (!image.same_shape(cfg.input_side, cfg.input_side))
        throw Error(ErrorKind::DimensionMismatch, "image side must equal input_side");
    const int g = cfg.grid();
    const int p = cfg.patch_size;
    // Per-image standardization: zero mean, unit variance.
    double mean = 0.0, sq = 0.0;
    for (std::uint8_t v : image.data()) mean += v;
    mean /= static_cast<double>(image.data().size());
    for (std::uint8_t v : image.data()) sq += (v - mean) * (v - mean);
    const double inv_std = 1.0 / std::sqrt(sq / static_cast<double>(image.data().size()) + 1.0);
    Mat out(cfg.num_patches(), p * p);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    out(gy * g + gx, y * p + x) = (image.at(gx * p + x, gy * p + y) - mean) * inv_std;
    return out;
}

// --- layout -----------------------------------------------------------------

int ParamLayout::add(std::string name, int rows, int cols) {
    specs_.push_back(TensorSpec{std::move(name), rows, cols, total_});
    total_ += static_cast<std::size_t>(rows) * cols;
    return static_cast<int>(specs_.size()) - 1;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.embed_dim;
    const int f = cfg.ff_dim();
    const int ph = cfg.projection_hidden();
    patch_w = add("patch_embed.weight", cfg.patch_size * cfg.patch_size, d);
    patch_b = add("patch_embed.bias", 1, d);
    cls = add("cls_token", 1, d);
    pos = add("pos_embed", cfg.num_tokens(), d);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        Layer L{};
        L.ln1_g = add(p + "norm1.weight", 1, d);
        L.ln1_b = add(p + "norm1.bias", 1, d);
        L.wq = add(p + "attn.q.weight", d, d);
        L.bq = add(p + "attn.q.bias", 1, d);
        L.wk = add(p + "attn.k.weight", d, d);
        L.bk = add(p + "attn.k.bias", 1, d);
        L.wv = add(p + "attn.v.weight", d, d);
        L.bv = add(p + "attn.v.bias", 1, d);
        L.wo = add(p + "attn.proj.weight", d, d);
        L.bo = add(p + "attn.proj.bias", 1, d);
        L.ln2_g = add(p + "norm2.weight", 1, d);
        L.ln2_b = add(p + "norm2.bias", 1, d);
        L.w1 = add(p + "mlp.fc1.weight", d, f);
        L.b1 = add(p + "mlp.fc1.bias", 1, f);
        L.w2 = add(p + "mlp.fc2.weight", f, d);
        L.b2 = add(p + "mlp.fc2.bias", 1, d);
        layers.push_back(L);
    }
    lnf_g = add("norm.weight", 1, d);
    lnf_b = add("norm.bias", 1, d);
    proj_w1 = add("projector.0.weight", d, ph);
    proj_b1 = add("projector.0.bias", 1, ph);
    proj_w2 = add("projector.1.weight", ph, ph);
    proj_b2 = add("projector.1.bias", 1, ph);
    proj_w3 = add("projector.2.weight", ph, cfg.projection_dim);
    proj_b3 = add("projector.2.bias", 1, cfg.projection_dim);
    for (int h = 0; h < cfg.num_heads_classifier; ++h) {
        head_w.push_back(add("heads." + std::to_string(h) + ".weight", d, cfg.num_classes()));
    }
}

int ParamLayout::find(const std::string& name) const {
    for (std::size_t i = 0; i < specs_.size(); ++i)
        if (specs_[i].name == name) return static_cast<int>(i);
    return -1;
}

ModelParams::ModelParams(const ModelConfig& cfg) : config(cfg), layout_(cfg) { values.assign(layout_.total(), 0.0); }

ModelParams ModelParams::initialize(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p(cfg);
    std::mt19937_64 rng(seed);
    const auto& L = p.layout();
    auto fill_normal = [&](int idx, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : p.view(idx).reshaped()) v = dist(rng);
    };
    auto xavier = [&](int idx) {
        const auto& s = L.spec(idx);
        fill_normal(idx, std::sqrt(2.0 / (s.rows + s.cols)));
    };
    auto ones = [&](int idx) { p.view(idx).setOnes(); };

    xavier(L.patch_w);
    fill_normal(L.cls, 0.02);
    fill_normal(L.pos, 0.02);
    for (const auto& layer : L.layers) {
        ones(layer.ln1_g);
        ones(layer.ln2_g);
        for (int idx : {layer.wq, layer.wk, layer.wv, layer.wo, layer.w1, layer.w2}) xavier(idx);
    }
    ones(L.lnf_g);
    for (int idx : {L.proj_w1, L.proj_w2, L.proj_w3}) xavier(idx);
    for (int idx : L.head_w) xavier(idx);
    return p;
}

Eigen::Map<const Mat> ModelParams::view(int index) const {
    const auto& s = layout_.spec(index);
    return Eigen::Map<const Mat>(values.data() + s.offset, s.rows, s.cols);
}

Eigen::Map<Mat> ModelParams::view(int index) {
    const auto& s = layout_.spec(index);
    return Eigen::Map<Mat>(values.data() + s.offset, s.rows, s.cols);
}

Eigen::Map<Mat> grad_view(std::span<double> grad, const ParamLayout& layout, int index) {
    const auto& s = layout.spec(index);
    return Eigen::Map<Mat>(grad.data() + s.offset, s.rows, s.cols);
}

// --- forward ----------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-6;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

// Row-wise normalization; returns x_hat and fills per-row reciprocal std.
Mat layer_norm_hat(const Mat& x, Vec& rstd) {
    const int rows = static_cast<int>(x.rows());
    Mat hat(x.rows(), x.cols());
    rstd.resize(rows);
    for (int r = 0; r < rows; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        rstd[r] = 1.0 / std::sqrt(var + kLnEps);
        hat.row(r) = (x.row(r).array() - mean) * rstd[r];
    }
    return hat;
}

Mat affine_rows(const Mat& hat, const Eigen::Map<const Mat>& gamma, const Eigen::Map<const Mat>& beta) {
    Mat out = hat;
    out.array().rowwise() *= gamma.row(0).array();
    out.rowwise() += beta.row(0);
    return out;
}

// d/dx of layer norm given d/dx_hat.
Mat layer_norm_backward(const Mat& dhat, const Mat& hat, const Vec& rstd) {
    Mat dx(hat.rows(), hat.cols());
    const double n = static_cast<double>(hat.cols());
    for (int r = 0; r < hat.rows(); ++r) {
        const double mean_d = dhat.row(r).sum() / n;
        const double mean_dh = dhat.row(r).dot(hat.row(r)) / n;
        dx.row(r) = rstd[r] * (dhat.row(r).array() - mean_d - hat.row(r).array() * mean_dh);
    }
    return dx;
}

Mat apply_gelu(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

// Masked logits sit near -1e9; exp of such arguments is slow, so short-cut the underflow.
void softmax_rows(Mat& s) {
    const Eigen::Index n = s.cols();
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        double* p = s.data() + r * n;
        double m = p[0];
        for (Eigen::Index c = 1; c < n; ++c) m = std::max(m, p[c]);
        double sum = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) {
            const double d = p[c] - m;
            p[c] = d < -745.0 ? 0.0 : std::exp(d);
            sum += p[c];
        }
        for (Eigen::Index c = 0; c < n; ++c) p[c] /= sum;
    }
}

bool row_masked(MaskTarget target, int row) {
    switch (target) {
        case MaskTarget::ClassToken: return row == 0;
        case MaskTarget::PatchTokens: return row > 0;
        case MaskTarget::AllTokens: return true;
    }
    return false;
}

bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace

ForwardOutput forward(const Mat& patches, const MaskVector& mask, const ModelParams& params, ForwardCache* cache) {
    const ModelConfig& cfg = params.config;
    const ParamLayout& L = params.layout();
    const int T = cfg.num_tokens();
    const int D = cfg.embed_dim;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (patches.rows() != cfg.num_patches() || patches.cols() != cfg.patch_size * cfg.patch_size)
        throw Error(ErrorKind::DimensionMismatch, "patch matrix shape does not match model config");
    if (static_cast<int>(mask.additive.size()) != T)
        throw Error(ErrorKind::DimensionMismatch, "mask vector length must be num_patches + 1");

    if (cache) {
        cache->valid = false;
        cache->patches = patches;
        cache->additive = mask.additive;
        cache->layers.assign(cfg.num_layers, {});
    }

    Mat h(T, D);
    h.row(0) = params.view(L.cls);
    h.bottomRows(T - 1) = patches * params.view(L.patch_w);
    h.bottomRows(T - 1).rowwise() += params.view(L.patch_b).row(0);
    h += params.view(L.pos);

    const int first_masked = cfg.num_layers - cfg.masked_layers;
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& P = L.layers[l];
        Vec rstd1, rstd2;
        Mat hat1 = layer_norm_hat(h, rstd1);
        Mat a1 = affine_rows(hat1, params.view(P.ln1_g), params.view(P.ln1_b));
        Mat q = a1 * params.view(P.wq);
        q.rowwise() += params.view(P.bq).row(0);
        Mat k = a1 * params.view(P.wk);
        k.rowwise() += params.view(P.bk).row(0);
        Mat v = a1 * params.view(P.wv);
        v.rowwise() += params.view(P.bv).row(0);

        const bool masked = l >= first_masked;
        Mat concat(T, D);
        std::vector<Mat> probs;
        for (int head = 0; head < cfg.num_heads; ++head) {
            Mat s = q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() * scale;
            if (masked)
                for (int r = 0; r < T; ++r)
                    if (row_masked(cfg.mask_target, r))
                        for (int c = 0; c < T; ++c) s(r, c) += mask.additive[c];
            softmax_rows(s);
            concat.middleCols(head * dh, dh) = s * v.middleCols(head * dh, dh);
            if (cache) probs.push_back(std::move(s));
        }
        Mat mid = h + concat * params.view(P.wo);
        mid.rowwise() += params.view(P.bo).row(0);

        Mat hat2 = layer_norm_hat(mid, rstd2);
        Mat a2 = affine_rows(hat2, params.view(P.ln2_g), params.view(P.ln2_b));
        Mat pre = a2 * params.view(P.w1);
        pre.rowwise() += params.view(P.b1).row(0);
        Mat act = apply_gelu(pre);
        Mat out = mid + act * params.view(P.w2);
        out.rowwise() += params.view(P.b2).row(0);

        if (cache) {
            auto& c = cache->layers[l];
            c.input = std::move(h);
            c.ln1 = std::move(hat1);
            c.ln1_rstd = std::move(rstd1);
            c.q = std::move(q);
            c.k = std::move(k);
            c.v = std::move(v);
            c.probs = std::move(probs);
            c.concat = std::move(concat);
            c.mid = std::move(mid);
            c.ln2 = std::move(hat2);
            c.ln2_rstd = std::move(rstd2);
            c.pre_act = std::move(pre);
            c.act = std::move(act);
        }
        h = std::move(out);
    }

    Vec rstd_f;
    Mat cls_raw = h.topRows(1);
    Mat hat_f = layer_norm_hat(cls_raw, rstd_f);
    Mat cls = affine_rows(hat_f, params.view(L.lnf_g), params.view(L.lnf_b));

    Mat u1 = cls * params.view(L.proj_w1) + params.view(L.proj_b1);
    Mat g1 = apply_gelu(u1);
    Mat u2 = g1 * params.view(L.proj_w2) + params.view(L.proj_b2);
    Mat g2 = apply_gelu(u2);
    Mat u3 = g2 * params.view(L.proj_w3) + params.view(L.proj_b3);
    const double norm = std::max(u3.norm(), 1e-12);

    ForwardOutput outp;
    outp.cls_token = cls.row(0).transpose();
    outp.projection = (u3.row(0) / norm).transpose();
    // Cosine heads: unit CLS feature against unit-norm class columns.
    const double cls_norm = std::max(cls.norm(), 1e-12);
    for (int head = 0; head < cfg.num_heads_classifier; ++head) {
        const auto W = params.view(L.head_w[head]);
        Vec lg(W.cols());
        for (int k = 0; k < W.cols(); ++k) lg[k] = cls.row(0).dot(W.col(k)) / (cls_norm * std::max(W.col(k).norm(), 1e-12));
        outp.logits.push_back(std::move(lg));
    }

    bool finite = all_finite(outp.cls_token) && all_finite(outp.projection);
    for (const auto& lg : outp.logits) finite = finite && all_finite(lg);
    if (!finite) throw Error(ErrorKind::NonFiniteActivation, "forward pass produced NaN/Inf");

    if (cache) {
        cache->final_tokens = std::move(h);
        cache->lnf_rstd = rstd_f[0];
        cache->lnf_hat = hat_f.row(0).transpose();
        cache->cls = outp.cls_token;
        cache->u1 = u1.row(0).transpose();
        cache->g1 = g1.row(0).transpose();
        cache->u2 = u2.row(0).transpose();
        cache->g2 = g2.row(0).transpose();
        cache->u3 = u3.row(0).transpose();
        cache->u3_norm = norm;
        cache->valid = true;
    }
    return outp;
}

ForwardOutput forward(const GrayImage& image, const MaskVector& mask, const ModelParams& params, ForwardCache* cache) {
    return forward(patchify(image, params.config), mask, params, cache);
}

// --- backward ---------------------------------------------------------------

void backward(const ForwardCache& cache, const OutputGrad& upstream, const ModelParams& params,
              std::span<double> grad) {
    if (!cache.valid) throw Error(ErrorKind::MissingCache, "backward requires a forward pass with caching enabled");
    const ModelConfig& cfg = params.config;
    const ParamLayout& L = params.layout();
    if (grad.size() != params.values.size())
        throw Error(ErrorKind::DimensionMismatch, "gradient buffer does not match parameter count");
    const int T = cfg.num_tokens();
    const int D = cfg.embed_dim;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto G = [&](int idx) { return grad_view(grad, L, idx); };

    Eigen::RowVectorXd cls = cache.cls.transpose();
    Eigen::RowVectorXd dcls = Eigen::RowVectorXd::Zero(D);
    if (upstream.cls_token.size() == D) dcls += upstream.cls_token.transpose();

    const double cls_norm = std::max(cls.norm(), 1e-12);
    const Eigen::RowVectorXd cls_unit = cls / cls_norm;
    Eigen::RowVectorXd dcls_unit = Eigen::RowVectorXd::Zero(D);
    for (int head = 0; head < cfg.num_heads_classifier && head < static_cast<int>(upstream.logits.size()); ++head) {
        const Vec& dl = upstream.logits[head];
        if (dl.size() == 0) continue;
        const auto W = params.view(L.head_w[head]);
        auto GW = G(L.head_w[head]);
        for (int k = 0; k < W.cols(); ++k) {
            const double wn = std::max(W.col(k).norm(), 1e-12);
            const Vec w_unit = W.col(k) / wn;
            const Vec dw_unit = dl[k] * cls_unit.transpose();
            GW.col(k) += (dw_unit - w_unit * w_unit.dot(dw_unit)) / wn;
            dcls_unit += dl[k] * w_unit.transpose();
        }
    }
    dcls += (dcls_unit - cls_unit * cls_unit.dot(dcls_unit)) / cls_norm;

    if (upstream.projection.size() == cfg.projection_dim) {
        const Eigen::RowVectorXd z = cache.u3.transpose() / cache.u3_norm;
        const Eigen::RowVectorXd dz = upstream.projection.transpose();
        const Eigen::RowVectorXd du3 = (dz - z * z.dot(dz)) / cache.u3_norm;
        const Eigen::RowVectorXd g2 = cache.g2.transpose();
        G(L.proj_w3).noalias() += g2.transpose() * du3;
        G(L.proj_b3).row(0) += du3;
        Eigen::RowVectorXd du2 = du3 * params.view(L.proj_w3).transpose();
        for (int i = 0; i < du2.size(); ++i) du2[i] *= gelu_grad(cache.u2[i]);
        G(L.proj_w2).noalias() += cache.g1 * du2;
        G(L.proj_b2).row(0) += du2;
        Eigen::RowVectorXd du1 = du2 * params.view(L.proj_w2).transpose();
        for (int i = 0; i < du1.size(); ++i) du1[i] *= gelu_grad(cache.u1[i]);
        G(L.proj_w1).noalias() += cls.transpose() * du1;
        G(L.proj_b1).row(0) += du1;
        dcls.noalias() += du1 * params.view(L.proj_w1).transpose();
    }

    // final norm on the CLS row
    const Eigen::RowVectorXd hat_f = cache.lnf_hat.transpose();
    G(L.lnf_g).row(0) += dcls.cwiseProduct(hat_f);
    G(L.lnf_b).row(0) += dcls;
    Mat dhat_f = dcls.cwiseProduct(params.view(L.lnf_g).row(0));
    Vec rstd_f(1);
    rstd_f[0] = cache.lnf_rstd;
    Mat dh_mat = Mat::Zero(T, D);
    dh_mat.row(0) = layer_norm_backward(dhat_f, Mat(hat_f), rstd_f).row(0);

    // Additive mask entries are constants: no gradient leaves through them.
    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& P = L.layers[l];
        const auto& c = cache.layers[l];

        // feed-forward branch
        Mat dmid = dh_mat;
        G(P.w2).noalias() += c.act.transpose() * dh_mat;
        G(P.b2).row(0) += dh_mat.colwise().sum();
        Mat dpre = dh_mat * params.view(P.w2).transpose();
        for (int i = 0; i < dpre.size(); ++i) dpre.data()[i] *= gelu_grad(c.pre_act.data()[i]);
        const Mat a2 = affine_rows(c.ln2, params.view(P.ln2_g), params.view(P.ln2_b));
        G(P.w1).noalias() += a2.transpose() * dpre;
        G(P.b1).row(0) += dpre.colwise().sum();
        Mat da2 = dpre * params.view(P.w1).transpose();
        G(P.ln2_g).row(0) += da2.cwiseProduct(c.ln2).colwise().sum();
        G(P.ln2_b).row(0) += da2.colwise().sum();
        Mat dhat2 = da2;
        dhat2.array().rowwise() *= params.view(P.ln2_g).row(0).array();
        dmid += layer_norm_backward(dhat2, c.ln2, c.ln2_rstd);

        // attention branch
        Mat dx = dmid;
        G(P.wo).noalias() += c.concat.transpose() * dmid;
        G(P.bo).row(0) += dmid.colwise().sum();
        Mat dconcat = dmid * params.view(P.wo).transpose();
        Mat dq(T, D), dk(T, D), dv(T, D);
        for (int head = 0; head < cfg.num_heads; ++head) {
            const Mat& pr = c.probs[head];
            const Mat d_out = dconcat.middleCols(head * dh, dh);
            Mat dp = d_out * c.v.middleCols(head * dh, dh).transpose();
            dv.middleCols(head * dh, dh) = pr.transpose() * d_out;
            Mat ds = pr.cwiseProduct(dp);
            const Vec row_dot = ds.rowwise().sum();
            ds -= pr.cwiseProduct(row_dot.replicate(1, T));
            ds *= scale;
            dq.middleCols(head * dh, dh) = ds * c.k.middleCols(head * dh, dh);
            dk.middleCols(head * dh, dh) = ds.transpose() * c.q.middleCols(head * dh, dh);
        }
        const Mat a1 = affine_rows(c.ln1, params.view(P.ln1_g), params.view(P.ln1_b));
        G(P.wq).noalias() += a1.transpose() * dq;
        G(P.bq).row(0) += dq.colwise().sum();
        G(P.wk).noalias() += a1.transpose() * dk;
        G(P.bk).row(0) += dk.colwise().sum();
        G(P.wv).noalias() += a1.transpose() * dv;
        G(P.bv).row(0) += dv.colwise().sum();
        Mat da1 = dq * params.view(P.wq).transpose() + dk * params.view(P.wk).transpose() +
                  dv * params.view(P.wv).transpose();
        G(P.ln1_g).row(0) += da1.cwiseProduct(c.ln1).colwise().sum();
        G(P.ln1_b).row(0) += da1.colwise().sum();
        Mat dhat1 = da1;
        dhat1.array().rowwise() *= params.view(P.ln1_g).row(0).array();
        dx += layer_norm_backward(dhat1, c.ln1, c.ln1_rstd);
        dh_mat = std::move(dx);
    }

    G(L.pos) += dh_mat;
    G(L.cls).row(0) += dh_mat.row(0);
    const Mat de = dh_mat.bottomRows(T - 1);
    G(L.patch_w).noalias() += cache.patches.transpose() * de;
    G(L.patch_b).row(0) += de.colwise().sum();
}

std::vector<std::vector<double>> cls_attention(const ForwardCache& cache) {
    if (!cache.valid || cache.layers.empty()) throw Error(ErrorKind::MissingCache, "no cached forward pass");
    std::vector<std::vector<double>> out;
    for (const auto& p : cache.layers.back().probs) {
        std::vector<double> row(p.cols());
        for (int c = 0; c < p.cols(); ++c) row[c] = p(0, c);
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace mebinncd
