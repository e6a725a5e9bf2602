#include "mebinncd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "mebinncd/error.hpp"

namespace mebinncd {

// Shortest augmenting path with row/column potentials, O(k^3).
Assignment hungarian_match(std::span<const double> cost, int k) {
    if (k < 0 || cost.size() != static_cast<std::size_t>(k) * k)
        throw Error(ErrorKind::DimensionMismatch, "cost matrix must be k x k");
    for (double c : cost)
        if (!std::isfinite(c)) throw Error(ErrorKind::NonFiniteCost, "cost matrix contains NaN/Inf");
    Assignment out;
    if (k == 0) return out;

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(k + 1, 0.0), v(k + 1, 0.0);
    std::vector<int> p(k + 1, 0), way(k + 1, 0);
    auto a = [&](int i, int j) { return cost[static_cast<std::size_t>(i - 1) * k + (j - 1)]; };
    for (int i = 1; i <= k; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(k + 1, inf);
        std::vector<char> used(k + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= k; ++j) {
                if (used[j]) continue;
                const double cur = a(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= k; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    out.assignment.assign(k, -1);
    for (int j = 1; j <= k; ++j)
        if (p[j]) out.assignment[p[j] - 1] = j - 1;
    for (int i = 0; i < k; ++i) out.cost += cost[static_cast<std::size_t>(i) * k + out.assignment[i]];
    return out;
}

Assignment hungarian_match_rect(const std::vector<std::vector<double>>& cost, double pad) {
    const int rows = static_cast<int>(cost.size());
    const int cols = rows ? static_cast<int>(cost[0].size()) : 0;
    const int k = std::max(rows, cols);
    std::vector<double> sq(static_cast<std::size_t>(k) * k, pad);
    for (int i = 0; i < rows; ++i) {
        if (static_cast<int>(cost[i].size()) != cols) throw Error(ErrorKind::DimensionMismatch, "ragged cost matrix");
        for (int j = 0; j < cols; ++j) sq[static_cast<std::size_t>(i) * k + j] = cost[i][j];
    }
    Assignment full = hungarian_match(sq, k);
    Assignment out;
    out.assignment.resize(rows);
    for (int i = 0; i < rows; ++i) {
        const int j = full.assignment[i];
        out.assignment[i] = j < cols ? j : -1;
        if (j < cols) out.cost += cost[i][j];
    }
    return out;
}

namespace {

struct Contingency {
    std::vector<int> true_ids, pred_ids;
    std::vector<std::vector<long long>> table;  // [true][pred]
    std::vector<long long> row_sums, col_sums;
    long long n = 0;
};

std::vector<int> dense_ids(std::span<const int> labels, std::vector<int>& index) {
    std::vector<int> ids(labels.begin(), labels.end());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    index.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        index[i] = static_cast<int>(std::lower_bound(ids.begin(), ids.end(), labels[i]) - ids.begin());
    return ids;
}

Contingency contingency(std::span<const int> labels_true, std::span<const int> labels_pred) {
    if (labels_true.size() != labels_pred.size())
        throw Error(ErrorKind::LengthMismatch, "label sequences differ in length");
    Contingency c;
    std::vector<int> ti, pi;
    c.true_ids = dense_ids(labels_true, ti);
    c.pred_ids = dense_ids(labels_pred, pi);
    c.table.assign(c.true_ids.size(), std::vector<long long>(c.pred_ids.size(), 0));
    for (std::size_t i = 0; i < ti.size(); ++i) ++c.table[ti[i]][pi[i]];
    c.row_sums.assign(c.true_ids.size(), 0);
    c.col_sums.assign(c.pred_ids.size(), 0);
    for (std::size_t r = 0; r < c.table.size(); ++r)
        for (std::size_t k = 0; k < c.table[r].size(); ++k) {
            c.row_sums[r] += c.table[r][k];
            c.col_sums[k] += c.table[r][k];
        }
    c.n = static_cast<long long>(labels_true.size());
    return c;
}

double entropy(const std::vector<long long>& counts, long long n) {
    double h = 0.0;
    for (long long c : counts)
        if (c > 0) {
            const double p = static_cast<double>(c) / n;
            h -= p * std::log(p);
        }
    return h;
}

double comb2(long long x) { return 0.5 * static_cast<double>(x) * static_cast<double>(x - 1); }

}  // namespace

double nmi(std::span<const int> labels_true, std::span<const int> labels_pred) {
    if (labels_true.empty()) throw Error(ErrorKind::LengthMismatch, "nmi needs at least one label");
    const Contingency c = contingency(labels_true, labels_pred);
    const double hu = entropy(c.row_sums, c.n);
    const double hv = entropy(c.col_sums, c.n);
    if (hu == 0.0 && hv == 0.0) return 1.0;
    if (hu == 0.0 || hv == 0.0) return 0.0;
    double mi = 0.0;
    const double n = static_cast<double>(c.n);
    for (std::size_t r = 0; r < c.table.size(); ++r)
        for (std::size_t k = 0; k < c.table[r].size(); ++k) {
            const long long nij = c.table[r][k];
            if (nij == 0) continue;
            mi += (nij / n) * std::log(n * nij / (static_cast<double>(c.row_sums[r]) * c.col_sums[k]));
        }
    return std::clamp(mi / (0.5 * (hu + hv)), 0.0, 1.0);
}

double ari(std::span<const int> labels_true, std::span<const int> labels_pred) {
    if (labels_true.size() < 2 && labels_true.size() == labels_pred.size())
        throw Error(ErrorKind::LengthMismatch, "ari needs at least two labels");
    const Contingency c = contingency(labels_true, labels_pred);
    double index = 0.0, a = 0.0, b = 0.0;
    for (const auto& row : c.table)
        for (long long nij : row) index += comb2(nij);
    for (long long r : c.row_sums) a += comb2(r);
    for (long long k : c.col_sums) b += comb2(k);
    const double total = comb2(c.n);
    const double expected = a * b / total;
    const double max_index = 0.5 * (a + b);
    if (max_index == expected) return 1.0;  // both partitions trivial in the same way
    return (index - expected) / (max_index - expected);
}

MatchedF1 matched_f1(std::span<const int> labels_true, std::span<const int> labels_pred, F1Variant variant) {
    if (labels_true.empty()) throw Error(ErrorKind::LengthMismatch, "matched_f1 needs at least one label");
    const Contingency c = contingency(labels_true, labels_pred);
    MatchedF1 out;
    out.cluster_ids = c.pred_ids;
    out.class_ids = c.true_ids;
    const int nc = static_cast<int>(c.pred_ids.size());
    const int nt = static_cast<int>(c.true_ids.size());
    out.confusion.assign(nc, std::vector<long long>(nt, 0));
    std::vector<std::vector<double>> cost(nc, std::vector<double>(nt, 0.0));
    for (int k = 0; k < nc; ++k)
        for (int t = 0; t < nt; ++t) {
            out.confusion[k][t] = c.table[t][k];
            cost[k][t] = -static_cast<double>(c.table[t][k]);
        }
    const Assignment match = hungarian_match_rect(cost, 0.0);
    out.mapping.assign(nc, -1);
    std::vector<int> cluster_of_class(nt, -1);
    for (int k = 0; k < nc; ++k) {
        const int t = match.assignment[k];
        if (t >= 0) {
            out.mapping[k] = c.true_ids[t];
            cluster_of_class[t] = k;
        }
    }

    if (variant == F1Variant::Micro) {
        long long hit = 0;
        for (int t = 0; t < nt; ++t)
            if (cluster_of_class[t] >= 0) hit += c.table[t][cluster_of_class[t]];
        out.f1 = static_cast<double>(hit) / static_cast<double>(c.n);
        return out;
    }
    double sum = 0.0;
    for (int t = 0; t < nt; ++t) {
        const int k = cluster_of_class[t];
        if (k < 0) continue;
        const double overlap = static_cast<double>(c.table[t][k]);
        if (overlap == 0.0) continue;
        const double precision = overlap / static_cast<double>(c.col_sums[k]);
        const double recall = overlap / static_cast<double>(c.row_sums[t]);
        sum += 2.0 * precision * recall / (precision + recall);
    }
    out.f1 = sum / nt;
    return out;
}

ClusteringReport clustering_report(std::span<const int> labels_true, std::span<const int> labels_pred) {
    ClusteringReport r;
    r.nmi = nmi(labels_true, labels_pred);
    r.ari = labels_true.size() >= 2 ? ari(labels_true, labels_pred) : 1.0;
    r.matching = matched_f1(labels_true, labels_pred, F1Variant::Macro);
    r.f1 = r.matching.f1;
    r.micro_f1 = matched_f1(labels_true, labels_pred, F1Variant::Micro).f1;
    return r;
}

DetectionReport detection_rates(std::span<const BinaryMask> gt_masks, std::span<const BinaryMask> pred_masks,
                                Connectivity connectivity) {
    if (gt_masks.size() != pred_masks.size())
        throw Error(ErrorKind::PairMismatch, "ground-truth and predicted mask sequences differ in length");
    DetectionReport rep;
    double fnr_sum = 0.0, fpr_sum = 0.0;
    int fnr_images = 0;
    for (std::size_t i = 0; i < gt_masks.size(); ++i) {
        const auto& gt = gt_masks[i];
        const auto& pr = pred_masks[i];
        if (!gt.same_shape(pr.width(), pr.height()))
            throw Error(ErrorKind::PairMismatch, "mask pair " + std::to_string(i) + " differs in shape");
        const RegionSet g = connected_components(gt, connectivity);
        const RegionSet p = connected_components(pr, connectivity);
        rep.gt_regions += g.count;
        rep.pred_regions += p.count;

        std::vector<char> pred_hit(p.count, 0);
        int missed = 0;
        for (int a = 0; a < g.count; ++a) {
            bool detected = false;
            for (int b = 0; b < p.count; ++b) {
                const double iou = box_iou(g.boxes[a], p.boxes[b]);
                if (iou > kDetectionIou) {
                    detected = true;
                    pred_hit[b] = 1;
                    rep.matches.push_back({static_cast<int>(i), a + 1, b + 1, iou});
                }
            }
            if (!detected) ++missed;
        }
        if (g.count > 0) {
            fnr_sum += static_cast<double>(missed) / g.count;
            ++fnr_images;
        }
        if (p.count > 0) {
            const auto fp = std::count(pred_hit.begin(), pred_hit.end(), 0);
            fpr_sum += static_cast<double>(fp) / p.count;
        }
    }
    rep.fnr = fnr_images ? fnr_sum / fnr_images : 0.0;
    rep.fpr = gt_masks.empty() ? 0.0 : fpr_sum / static_cast<double>(gt_masks.size());
    return rep;
}

}  // namespace mebinncd
