#include "mebinncd/ncd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mebinncd/error.hpp"
#include "mebinncd/parallel.hpp"

namespace mebinncd {

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::ConfigInvalid, m); };
    for (double t : {tau_u, tau_c, tau_s, tau_t_start, tau_t_end})
        if (!(t > 0.0)) fail("all temperatures must be > 0");
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
    if (!(plc_threshold >= 0.0 && plc_threshold <= 1.0)) fail("plc_threshold must lie in [0, 1]");
    if (batch_size < 2) fail("batch_size must be >= 2");
    if (epochs < 1) fail("epochs must be >= 1");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (tau_t_step_every < 1 || tau_t_warmup_epochs < 0) fail("tau_t schedule invalid");
}

double TrainConfig::teacher_temperature(int epoch) const {
    const int total_steps = tau_t_warmup_epochs / tau_t_step_every;
    if (total_steps == 0) return tau_t_end;
    const int step = std::min(epoch / tau_t_step_every, total_steps);
    return tau_t_start + (tau_t_end - tau_t_start) * static_cast<double>(step) / total_steps;
}

bool ClassDistribution::is_valid(double tol) const {
    if (probs.size() == 0) return false;
    for (double p : probs)
        if (!(p >= 0.0) || !std::isfinite(p)) return false;
    return std::abs(probs.sum() - 1.0) <= tol;
}

int ClassDistribution::argmax() const {
    Eigen::Index i = 0;
    probs.maxCoeff(&i);
    return static_cast<int>(i);
}

Vec softmax_with_temperature(const Vec& logits, double tau) {
    Vec z = logits / tau;
    z.array() -= z.maxCoeff();
    z = z.array().exp();
    return z / z.sum();
}

ClassDistribution pseudo_label(const Vec& teacher_logits, int num_known, double tau_t) {
    if (!(tau_t > 0.0)) throw Error(ErrorKind::InvalidArgument, "tau_t must be > 0");
    const int total = static_cast<int>(teacher_logits.size());
    if (num_known >= total) throw Error(ErrorKind::AllMasked, "no novel class entries left after masking");
    // Softmax over the novel entries only; known entries are exactly zero.
    Vec novel = softmax_with_temperature(teacher_logits.tail(total - num_known), tau_t);
    ClassDistribution q{Vec::Zero(total)};
    q.probs.tail(total - num_known) = novel;
    return q;
}

ClassDistribution correct_pseudo_label(const ClassDistribution& q, double anomaly_score, int num_known,
                                       double threshold) {
    if (num_known < 0 || num_known >= q.probs.size())
        throw Error(ErrorKind::InvalidArgument, "normal slot index out of range");
    const double w = std::max(threshold - anomaly_score, 0.0);
    if (w == 0.0) return q;
    ClassDistribution out{(1.0 - w) * q.probs};
    out.probs[num_known] += w;
    return out;
}

namespace {

ContrastiveResult info_nce(std::span<const Vec> anchors, std::span<const Vec> candidates,
                           const std::vector<std::vector<int>>& positives, double tau) {
    const int n = static_cast<int>(anchors.size());
    const int m = static_cast<int>(candidates.size());
    ContrastiveResult r;
    r.grad_anchors.assign(n, Vec::Zero(anchors.empty() ? 0 : anchors[0].size()));
    r.grad_candidates.assign(m, Vec::Zero(candidates.empty() ? 0 : candidates[0].size()));
    for (int j = 0; j < n; ++j)
        if (!positives[j].empty()) ++r.contributing;
    if (r.contributing == 0) return r;
    const double inv = 1.0 / r.contributing;

    Vec logits(m);
    for (int j = 0; j < n; ++j) {
        const auto& pos = positives[j];
        if (pos.empty()) continue;
        for (int c = 0; c < m; ++c) logits[c] = anchors[j].dot(candidates[c]) / tau;
        const double mx = logits.maxCoeff();
        const Vec e = (logits.array() - mx).exp();
        const double lse = mx + std::log(e.sum());
        const Vec pi = e / e.sum();
        double pos_mean = 0.0;
        for (int p : pos) pos_mean += logits[p];
        pos_mean /= static_cast<double>(pos.size());
        r.loss += inv * (lse - pos_mean);

        const double w_pos = inv / (tau * static_cast<double>(pos.size()));
        for (int c = 0; c < m; ++c) {
            r.grad_anchors[j] += (inv / tau) * pi[c] * candidates[c];
            r.grad_candidates[c] += (inv / tau) * pi[c] * anchors[j];
        }
        for (int p : pos) {
            r.grad_anchors[j] -= w_pos * candidates[p];
            r.grad_candidates[p] -= w_pos * anchors[j];
        }
    }
    return r;
}

double safe_log(double p) { return std::log(std::max(p, 1e-300)); }

double cross_entropy(const Vec& target, const Vec& pred) {
    double s = 0.0;
    for (int c = 0; c < target.size(); ++c)
        if (target[c] != 0.0) s -= target[c] * safe_log(pred[c]);
    return s;
}

}  // namespace

ContrastiveResult loss_contrastive_self(std::span<const Vec> anchors, std::span<const Vec> candidates, double tau_u) {
    if (anchors.size() != candidates.size()) throw Error(ErrorKind::LengthMismatch, "view batches differ in size");
    if (anchors.size() < 2) throw Error(ErrorKind::BatchTooSmall, "contrastive loss needs at least 2 pairs");
    std::vector<std::vector<int>> pos(anchors.size());
    for (std::size_t j = 0; j < pos.size(); ++j) pos[j] = {static_cast<int>(j)};
    return info_nce(anchors, candidates, pos, tau_u);
}

ContrastiveResult loss_contrastive_supervised(std::span<const Vec> anchors, std::span<const Vec> candidates,
                                              std::span<const int> labels, double tau_c) {
    if (anchors.size() != candidates.size() || anchors.size() != labels.size())
        throw Error(ErrorKind::LengthMismatch, "anchors, candidates and labels differ in size");
    if (anchors.size() < 2) throw Error(ErrorKind::NoLabeledItems, "supervised contrastive loss needs >= 2 labeled items");
    std::vector<std::vector<int>> pos(anchors.size());
    for (std::size_t j = 0; j < pos.size(); ++j)
        for (std::size_t p = 0; p < pos.size(); ++p)
            if (p != j && labels[p] == labels[j]) pos[j].push_back(static_cast<int>(p));
    return info_nce(anchors, candidates, pos, tau_c);
}

double loss_classification(std::span<const ClassDistribution> student_probs,
                           std::span<const ClassDistribution> targets, bool swap) {
    const std::size_t n = student_probs.size();
    if (n != targets.size()) throw Error(ErrorKind::LengthMismatch, "prediction and target batches differ");
    if (n == 0) return 0.0;
    if (swap && n % 2 != 0) throw Error(ErrorKind::LengthMismatch, "swapped pairing needs an even batch");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = swap ? (i + n / 2) % n : i;
        s += cross_entropy(targets[t].probs, student_probs[i].probs);
    }
    return s / static_cast<double>(n);
}

double loss_regularizer(std::span<const ClassDistribution> probs_a, std::span<const ClassDistribution> probs_b) {
    if (probs_a.empty() && probs_b.empty()) throw Error(ErrorKind::EmptyInput, "regularizer needs predictions");
    const auto k = (probs_a.empty() ? probs_b : probs_a)[0].probs.size();
    Vec mean = Vec::Zero(k);
    for (const auto& p : probs_a) mean += p.probs;
    for (const auto& p : probs_b) mean += p.probs;
    mean /= static_cast<double>(probs_a.size() + probs_b.size());
    double h = 0.0;
    for (int c = 0; c < mean.size(); ++c)
        if (mean[c] > 0.0) h -= mean[c] * std::log(mean[c]);
    return h;
}

// --- augmentation -------------------------------------------------------------

AugmentParams AugmentParams::sample(int side, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_int_distribution<int> quarter(0, 3);
    std::uniform_real_distribution<double> bright(0.8, 1.2);
    AugmentParams p;
    p.flip_h = coin(rng);
    p.flip_v = coin(rng);
    p.rot90 = quarter(rng);
    p.brightness = bright(rng);
    p.blur_radius = coin(rng);
    const int min_side = static_cast<int>(std::ceil(std::sqrt(0.8) * side - 1e-9));
    std::uniform_int_distribution<int> side_dist(min_side, side);
    p.crop_side = side_dist(rng);
    if (p.crop_side == side) {
        p.crop_side = 0;
    } else {
        std::uniform_int_distribution<int> off(0, side - p.crop_side);
        p.crop_x = off(rng);
        p.crop_y = off(rng);
    }
    return p;
}

namespace {

template <typename R>
R geometric(const R& in, const AugmentParams& p) {
    R out = in;
    if (p.crop_side > 0) {
        R cropped(p.crop_side, p.crop_side);
        for (int y = 0; y < p.crop_side; ++y)
            for (int x = 0; x < p.crop_side; ++x) cropped.at(x, y) = in.at(p.crop_x + x, p.crop_y + y);
        out = cropped;
    }
    const int n = out.width();
    R tmp = out;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            int sx = p.flip_h ? n - 1 - x : x;
            int sy = p.flip_v ? n - 1 - y : y;
            tmp.at(x, y) = out.at(sx, sy);
        }
    out = tmp;
    for (int r = 0; r < p.rot90; ++r) {
        R rot(n, n);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) rot.at(n - 1 - y, x) = out.at(x, y);
        out = rot;
    }
    return out;
}

GrayImage box_blur(const GrayImage& img, int radius) {
    if (radius <= 0) return img;
    GrayImage out(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            int sum = 0, cnt = 0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int xx = x + dx, yy = y + dy;
                    if (xx < 0 || yy < 0 || xx >= img.width() || yy >= img.height()) continue;
                    sum += img.at(xx, yy);
                    ++cnt;
                }
            out.at(x, y) = static_cast<std::uint8_t>((sum + cnt / 2) / cnt);
        }
    return out;
}

}  // namespace

View apply_augment(const GrayImage& image, const BinaryMask& mask, const AugmentParams& p) {
    if (!mask.same_shape(image.width(), image.height()) || image.width() != image.height())
        throw Error(ErrorKind::DimensionMismatch, "augment expects square image and mask of equal size");
    const int side = image.width();
    View v{geometric(image, p), geometric(mask, p)};
    if (p.crop_side > 0) {
        v.image = resize_bilinear(v.image, side);
        v.mask = resize_nearest(v.mask, side);
    }
    if (p.brightness != 1.0)
        for (auto& px : v.image.data())
            px = static_cast<std::uint8_t>(std::clamp(std::lround(px * p.brightness), 0L, 255L));
    v.image = box_blur(v.image, p.blur_radius);
    return v;
}

std::pair<View, View> augment(const SubImageRecord& record, std::uint64_t seed) {
    const int side = record.sub_image.width();
    std::mt19937_64 rng(seed);
    const auto pa = AugmentParams::sample(side, rng());
    const auto pb = AugmentParams::sample(side, rng());
    return {apply_augment(record.sub_image, record.sub_mask, pa), apply_augment(record.sub_image, record.sub_mask, pb)};
}

// --- objective ------------------------------------------------------------------

BatchTargets compute_targets(std::span<const ForwardOutput> out_a, std::span<const ForwardOutput> out_b,
                             std::span<const ItemMeta> meta, const ModelConfig& model_cfg, const TrainConfig& cfg,
                             double tau_t) {
    BatchTargets t;
    const int n = static_cast<int>(meta.size());
    t.a.resize(n);
    t.b.resize(n);
    const int cl = model_cfg.num_known_classes;
    for (int j = 0; j < n; ++j) {
        if (meta[j].label) continue;
        for (int h = 0; h < model_cfg.num_heads_classifier; ++h) {
            auto qa = correct_pseudo_label(pseudo_label(out_a[j].logits[h], cl, tau_t), meta[j].anomaly_score, cl,
                                           cfg.plc_threshold);
            auto qb = correct_pseudo_label(pseudo_label(out_b[j].logits[h], cl, tau_t), meta[j].anomaly_score, cl,
                                           cfg.plc_threshold);
            t.a[j].push_back(std::move(qa.probs));
            t.b[j].push_back(std::move(qb.probs));
        }
    }
    return t;
}

BatchObjective batch_objective(std::span<const ForwardOutput> out_a, std::span<const ForwardOutput> out_b,
                               std::span<const ItemMeta> meta, const BatchTargets& targets,
                               const ModelConfig& model_cfg, const TrainConfig& cfg) {
    const int n = static_cast<int>(meta.size());
    const int heads = model_cfg.num_heads_classifier;
    const int classes = model_cfg.num_classes();
    if (static_cast<int>(out_a.size()) != n || static_cast<int>(out_b.size()) != n)
        throw Error(ErrorKind::LengthMismatch, "outputs and metadata differ in size");

    BatchObjective obj;
    obj.grad_a.resize(n);
    obj.grad_b.resize(n);
    for (int j = 0; j < n; ++j) {
        obj.grad_a[j].logits.assign(heads, Vec::Zero(classes));
        obj.grad_b[j].logits.assign(heads, Vec::Zero(classes));
        obj.grad_a[j].projection = Vec::Zero(model_cfg.projection_dim);
        obj.grad_b[j].projection = Vec::Zero(model_cfg.projection_dim);
    }
    LossBreakdown& L = obj.loss;
    L.head_cls.assign(heads, 0.0);

    std::vector<int> labeled, unlabeled;
    for (int j = 0; j < n; ++j) (meta[j].label ? labeled : unlabeled).push_back(j);
    for (int j : labeled)
        if (*meta[j].label < 0 || *meta[j].label >= model_cfg.num_known_classes)
            throw Error(ErrorKind::ConfigMismatch, "labeled item class index outside the known classes");

    const double lam = cfg.lambda;
    const double w_u = 1.0 - lam;

    // self-supervised contrastive term over every pair: anchors are view b, candidates view a
    if (n >= 2) {
        std::vector<Vec> zb(n), za(n);
        for (int j = 0; j < n; ++j) {
            zb[j] = out_b[j].projection;
            za[j] = out_a[j].projection;
        }
        auto r = loss_contrastive_self(zb, za, cfg.tau_u);
        L.rep_u = r.loss;
        for (int j = 0; j < n; ++j) {
            obj.grad_b[j].projection += w_u * r.grad_anchors[j];
            obj.grad_a[j].projection += w_u * r.grad_candidates[j];
        }
    }

    // supervised contrastive term over labeled items
    if (labeled.size() >= 2) {
        std::vector<Vec> zb, za;
        std::vector<int> labels;
        for (int j : labeled) {
            zb.push_back(out_b[j].projection);
            za.push_back(out_a[j].projection);
            labels.push_back(*meta[j].label);
        }
        auto r = loss_contrastive_supervised(zb, za, labels, cfg.tau_c);
        L.rep_l = r.loss;
        for (std::size_t i = 0; i < labeled.size(); ++i) {
            obj.grad_b[labeled[i]].projection += lam * r.grad_anchors[i];
            obj.grad_a[labeled[i]].projection += lam * r.grad_candidates[i];
        }
    }

    const double inv_heads = 1.0 / heads;
    for (int h = 0; h < heads; ++h) {
        double cls_l = 0.0, cls_u = 0.0;
        if (!labeled.empty()) {
            const double scale = 1.0 / static_cast<double>(labeled.size());
            for (int j : labeled) {
                Vec y = Vec::Zero(classes);
                y[*meta[j].label] = 1.0;
                const Vec pa = softmax_with_temperature(out_a[j].logits[h], cfg.tau_s);
                const Vec pb = softmax_with_temperature(out_b[j].logits[h], cfg.tau_s);
                cls_l += scale * (cross_entropy(y, pa) + cross_entropy(y, pb));
                obj.grad_a[j].logits[h] += lam * inv_heads * scale * (pa - y) / cfg.tau_s;
                obj.grad_b[j].logits[h] += lam * inv_heads * scale * (pb - y) / cfg.tau_s;
            }
        }
        double entropy = 0.0;
        if (!unlabeled.empty()) {
            const double scale = 1.0 / static_cast<double>(unlabeled.size());
            std::vector<Vec> pa(unlabeled.size()), pb(unlabeled.size());
            Vec mean = Vec::Zero(classes);
            for (std::size_t i = 0; i < unlabeled.size(); ++i) {
                const int j = unlabeled[i];
                pa[i] = softmax_with_temperature(out_a[j].logits[h], cfg.tau_s);
                pb[i] = softmax_with_temperature(out_b[j].logits[h], cfg.tau_s);
                const Vec& qa = targets.a[j][h];
                const Vec& qb = targets.b[j][h];
                // cross-view: view b's target supervises view a and vice versa
                cls_u += scale * (cross_entropy(qb, pa[i]) + cross_entropy(qa, pb[i]));
                obj.grad_a[j].logits[h] += w_u * inv_heads * scale * (pa[i] - qb) / cfg.tau_s;
                obj.grad_b[j].logits[h] += w_u * inv_heads * scale * (pb[i] - qa) / cfg.tau_s;
                mean += pa[i] + pb[i];
            }
            const double denom = 2.0 * static_cast<double>(unlabeled.size());
            mean /= denom;
            Vec g(classes);  // dH / d mean
            for (int c = 0; c < classes; ++c) {
                if (mean[c] > 0.0) entropy -= mean[c] * std::log(mean[c]);
                g[c] = -(safe_log(mean[c]) + 1.0);
            }
            // total loss carries -mu * H, averaged over heads
            const double coeff = -w_u * cfg.mu * inv_heads / denom;
            for (std::size_t i = 0; i < unlabeled.size(); ++i) {
                const int j = unlabeled[i];
                for (const auto* pv : {&pa[i], &pb[i]}) {
                    const Vec& p = *pv;
                    const Vec dl = p.cwiseProduct((g.array() - p.dot(g)).matrix()) / cfg.tau_s;
                    (pv == &pa[i] ? obj.grad_a[j] : obj.grad_b[j]).logits[h] += coeff * dl;
                }
            }
        }
        L.cls_l += inv_heads * cls_l;
        L.cls_u += inv_heads * cls_u;
        L.entropy += inv_heads * entropy;
        L.head_cls[h] = lam * cls_l + w_u * cls_u;
    }

    L.total = lam * (L.rep_l + L.cls_l) + w_u * (L.rep_u + L.cls_u - cfg.mu * L.entropy);
    return obj;
}

PreparedView prepare_view(const View& v, const ModelConfig& cfg) {
    return PreparedView{patchify(v.image, cfg), pool_mask(v.mask, cfg)};
}

BatchGradient batch_gradient(const ModelParams& params, std::span<const PreparedView> views_a,
                             std::span<const PreparedView> views_b, std::span<const ItemMeta> meta,
                             const TrainConfig& cfg, double tau_t, const BatchTargets* fixed_targets, Exec exec) {
    const int n = static_cast<int>(meta.size());
    std::vector<ForwardOutput> out(2 * n);
    std::vector<ForwardCache> caches(2 * n);
    parallel_for(2 * n, exec, [&](int i) {
        const PreparedView& v = i < n ? views_a[i] : views_b[i - n];
        out[i] = forward(v.patches, v.mask, params, &caches[i]);
    });
    std::span<const ForwardOutput> out_a(out.data(), n), out_b(out.data() + n, n);

    const BatchTargets targets =
        fixed_targets ? *fixed_targets : compute_targets(out_a, out_b, meta, params.config, cfg, tau_t);
    BatchObjective obj = batch_objective(out_a, out_b, meta, targets, params.config, cfg);
    if (!std::isfinite(obj.loss.total)) throw Error(ErrorKind::NonFiniteLoss, "batch loss is not finite");

    // Per-view buffers summed in index order keep the result independent of
    // thread scheduling.
    const std::size_t P = params.values.size();
    std::vector<std::vector<double>> partial(2 * n);
    parallel_for(2 * n, exec, [&](int i) {
        partial[i].assign(P, 0.0);
        backward(caches[i], i < n ? obj.grad_a[i] : obj.grad_b[i - n], params, partial[i]);
    });
    BatchGradient result{obj.loss, std::vector<double>(P, 0.0)};
    for (const auto& g : partial)
        for (std::size_t k = 0; k < P; ++k) result.grad[k] += g[k];
    return result;
}

// --- training loop ----------------------------------------------------------------

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t x = a * 0x9E3779B97F4A7C15ULL ^ (b + 0x632BE59BD9B4E019ULL) * 0xBF58476D1CE4E5B9ULL ^
                      (c + 0x94D049BB133111EBULL) * 0x94D049BB133111EBULL;
    x ^= x >> 31;
    x *= 0xD6E8FEB86659FD93ULL;
    x ^= x >> 32;
    return x;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b) {
    acc.total += b.total;
    acc.rep_u += b.rep_u;
    acc.rep_l += b.rep_l;
    acc.cls_l += b.cls_l;
    acc.cls_u += b.cls_u;
    acc.entropy += b.entropy;
    if (acc.head_cls.size() < b.head_cls.size()) acc.head_cls.resize(b.head_cls.size(), 0.0);
    for (std::size_t h = 0; h < b.head_cls.size(); ++h) acc.head_cls[h] += b.head_cls[h];
}

void scale(LossBreakdown& acc, double s) {
    acc.total *= s;
    acc.rep_u *= s;
    acc.rep_l *= s;
    acc.cls_l *= s;
    acc.cls_u *= s;
    acc.entropy *= s;
    for (double& h : acc.head_cls) h *= s;
}

}  // namespace

TrainResult train(std::span<const SubImageRecord> records, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    model_cfg.validate();
    cfg.validate();
    if (model_cfg.num_novel_classes < 2) throw Error(ErrorKind::ConfigMismatch, "need at least 2 novel classes");
    const int n = static_cast<int>(records.size());
    int unlabeled = 0;
    for (const auto& r : records) {
        if (!r.label) ++unlabeled;
        else if (*r.label < 0 || *r.label >= model_cfg.num_known_classes)
            throw Error(ErrorKind::ConfigMismatch, "label " + std::to_string(*r.label) + " is not a known class");
        if (!r.sub_image.same_shape(model_cfg.input_side, model_cfg.input_side))
            throw Error(ErrorKind::DimensionMismatch, "records must be resized to the model input side");
    }
    if (unlabeled == 0) throw Error(ErrorKind::ConfigMismatch, "no unlabeled records to discover classes from");
    if (n < 2) throw Error(ErrorKind::BatchTooSmall, "need at least 2 records");

    TrainResult result{ModelParams::initialize(model_cfg, cfg.seed), {}, 0};
    ModelParams& params = result.params;
    std::vector<double> velocity(params.values.size(), 0.0);
    std::vector<double> head_total(model_cfg.num_heads_classifier, 0.0);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double tau_t = cfg.teacher_temperature(epoch);
        std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 1));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.tau_t = tau_t;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int end = std::min(n, start + cfg.batch_size);
            if (end - start < 2) break;  // a lone trailing item has no contrastive partner
            const int b = end - start;
            std::vector<PreparedView> va(b), vb(b);
            std::vector<ItemMeta> meta(b);
            parallel_for(b, Exec::Parallel, [&](int i) {
                const int idx = order[start + i];
                const auto& r = records[idx];
                auto [a, bb] = augment(r, mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                                                   static_cast<std::uint64_t>(idx) + 2));
                va[i] = prepare_view(a, model_cfg);
                vb[i] = prepare_view(bb, model_cfg);
                meta[i] = ItemMeta{r.label, r.anomaly_score};
            });

            BatchGradient g = batch_gradient(params, va, vb, meta, cfg, tau_t);
            for (std::size_t k = 0; k < params.values.size(); ++k) {
                const double gk = g.grad[k] + cfg.weight_decay * params.values[k];
                velocity[k] = cfg.momentum * velocity[k] + gk;
                params.values[k] -= cfg.learning_rate * velocity[k];
            }
            accumulate(rec.mean, g.loss);
            ++rec.steps;
        }
        if (rec.steps > 0) scale(rec.mean, 1.0 / rec.steps);
        if (!std::isfinite(rec.mean.total))
            throw Error(ErrorKind::NonFiniteLoss, "epoch " + std::to_string(epoch) + " produced a non-finite loss");
        for (std::size_t h = 0; h < head_total.size() && h < rec.mean.head_cls.size(); ++h)
            head_total[h] += rec.mean.head_cls[h];
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    result.inference_head =
        static_cast<int>(std::min_element(head_total.begin(), head_total.end()) - head_total.begin());
    return result;
}

ClassDistribution predict(const ModelParams& params, const SubImageRecord& record, int head, double tau_s) {
    const auto r = record.sub_image.same_shape(params.config.input_side, params.config.input_side)
                       ? record
                       : resize_to_model(record, params.config.input_side);
    const auto out = forward(r.sub_image, pool_mask(r.sub_mask, params.config), params);
    if (head < 0 || head >= static_cast<int>(out.logits.size()))
        throw Error(ErrorKind::InvalidArgument, "classifier head index out of range");
    return ClassDistribution{softmax_with_temperature(out.logits[head], tau_s)};
}

}  // namespace mebinncd
