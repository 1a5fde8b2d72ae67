#ifndef MCOMP_LOSSES_HPP
#define MCOMP_LOSSES_HPP

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcomp/autograd.hpp"
#include "mcomp/tensor.hpp"

namespace mcomp {

// Per-object binary masks at the canonical attention resolution. Maps are
// kept pairwise disjoint: a contested pixel belongs to the foremost object,
// i.e. the highest index, since later objects are composited on top.
struct SegmentationSet {
    int h = 0, w = 0;
    std::vector<Tensor> maps;  // per object, [h,w], entries 0/1

    int pixels() const { return h * w; }

    static SegmentationSet disjoint_from(const std::vector<Tensor>& raw_masks) {
        SegmentationSet s;
        if (raw_masks.empty()) return s;
        s.h = raw_masks[0].shape[0];
        s.w = raw_masks[0].shape[1];
        for (const auto& m : raw_masks)
            if (m.shape[0] != s.h || m.shape[1] != s.w)
                throw std::invalid_argument("SegmentationSet: mask resolutions differ");
        s.maps.assign(raw_masks.size(), Tensor({s.h, s.w}));
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                int owner = -1;
                for (int i = int(raw_masks.size()) - 1; i >= 0; --i)
                    if (raw_masks[size_t(i)].at(y, x) != 0.0) {
                        owner = i;
                        break;
                    }
                if (owner >= 0) s.maps[size_t(owner)].at(y, x) = 1.0;
            }
        return s;
    }
};

struct LossConfig {
    double alpha = 1e3;  // identity-loss weight
    double beta = 1.0;   // disentanglement-loss weight
    int canonical_h = 8;
    int canonical_w = 8;
};

struct LossBreakdown {
    double l_d = 0, l_c = 0, l_s = 0, total = 0;
};

/*------------------------ cross-attention identity ------------------------*/

// (1/N) sum_i [ 1 - (mass of H_i columns inside S_i) / (total mass of H_i
// columns) ]. Objects with empty H_i are skipped and N shrinks accordingly;
// all empty -> 0.
inline ag::Var cross_attention_loss_ag(const ag::Var& cross_mean, const SegmentationSet& segs,
                                       const std::vector<std::vector<int>>& slots) {
    const int P = cross_mean.value().shape[0], L = cross_mean.value().shape[1];
    if (segs.pixels() != P)
        throw std::invalid_argument("cross_attention_loss: segmentation pixel count " +
                                    std::to_string(segs.pixels()) + " != map rows " +
                                    std::to_string(P));
    if (segs.maps.size() != slots.size())
        throw std::invalid_argument("cross_attention_loss: object count mismatch");
    const int n_obj = int(slots.size());
    // column -> owning object (slot sets are disjoint)
    auto col_owner = std::make_shared<std::vector<int>>(size_t(L), -1);
    auto inside = std::make_shared<std::vector<uint8_t>>();  // per object, flattened [P]
    inside->assign(size_t(n_obj) * P, 0);
    std::vector<double> a_mass(size_t(n_obj), 0.0), b_mass(size_t(n_obj), 0.0);
    int n_eff = 0;
    for (int i = 0; i < n_obj; ++i) {
        if (slots[size_t(i)].empty()) continue;
        ++n_eff;
        for (int h : slots[size_t(i)]) {
            if (h < 0 || h >= L)
                throw std::invalid_argument("cross_attention_loss: slot index " +
                                            std::to_string(h) + " out of range for object " +
                                            std::to_string(i));
            if ((*col_owner)[size_t(h)] != -1)
                throw std::invalid_argument("cross_attention_loss: slot sets overlap at column " +
                                            std::to_string(h));
            (*col_owner)[size_t(h)] = i;
        }
        for (int p = 0; p < P; ++p)
            (*inside)[size_t(i) * P + p] = segs.maps[size_t(i)].data[size_t(p)] != 0.0 ? 1 : 0;
    }
    if (n_eff == 0) return ag::constant(Tensor::scalar(0.0));
    const Tensor& m = cross_mean.value();
    for (int p = 0; p < P; ++p)
        for (int h = 0; h < L; ++h) {
            const int i = (*col_owner)[size_t(h)];
            if (i < 0) continue;
            const double v = m.at(p, h);
            b_mass[size_t(i)] += v;
            if ((*inside)[size_t(i) * P + p]) a_mass[size_t(i)] += v;
        }
    double loss = 0.0;
    auto ratio = std::make_shared<std::vector<double>>(size_t(n_obj), 0.0);
    auto b_keep = std::make_shared<std::vector<double>>(size_t(n_obj), 0.0);
    for (int i = 0; i < n_obj; ++i) {
        if (slots[size_t(i)].empty()) continue;
        if (b_mass[size_t(i)] <= 0.0)
            throw std::runtime_error("cross_attention_loss: zero attention mass for object " +
                                     std::to_string(i));
        (*ratio)[size_t(i)] = a_mass[size_t(i)] / b_mass[size_t(i)];
        (*b_keep)[size_t(i)] = b_mass[size_t(i)];
        loss += 1.0 - (*ratio)[size_t(i)];
    }
    loss /= n_eff;
    auto mn = cross_mean.node();
    return ag::detail::make_node(
        Tensor::scalar(loss), {cross_mean},
        [mn, col_owner, inside, ratio, b_keep, n_eff, P, L](ag::Node& n) {
            mn->ensure_grad();
            const double g = n.grad.data[0] / double(n_eff);
            for (int p = 0; p < P; ++p)
                for (int h = 0; h < L; ++h) {
                    const int i = (*col_owner)[size_t(h)];
                    if (i < 0) continue;
                    const double in = (*inside)[size_t(i) * P + p] ? 1.0 : 0.0;
                    // d/dM[p,h] of (1 - A_i/B_i) = -(in - A_i/B_i)/B_i
                    mn->grad.at(p, h) += g * (-(in - (*ratio)[size_t(i)]) / (*b_keep)[size_t(i)]);
                }
        });
}

/*---------------------- self-attention disentanglement --------------------*/

// (1/N) sum_i [ 1 - 1/(1 + sum_{x in S_i, y in S_j, j != i} A[x,y]) ] over
// objects with nonempty masks.
inline ag::Var self_attention_loss_ag(const ag::Var& self_mean, const SegmentationSet& segs) {
    const int P = self_mean.value().shape[0];
    if (self_mean.value().shape[1] != P)
        throw std::invalid_argument("self_attention_loss: map must be square");
    if (segs.pixels() != P)
        throw std::invalid_argument("self_attention_loss: segmentation pixel count mismatch");
    const int n_obj = int(segs.maps.size());
    // pixel -> owning object or -1 (maps are disjoint)
    auto owner = std::make_shared<std::vector<int>>(size_t(P), -1);
    std::vector<char> nonempty(size_t(n_obj), 0);
    for (int i = 0; i < n_obj; ++i)
        for (int p = 0; p < P; ++p)
            if (segs.maps[size_t(i)].data[size_t(p)] != 0.0) {
                (*owner)[size_t(p)] = i;
                nonempty[size_t(i)] = 1;
            }
    int n_eff = 0;
    for (char c : nonempty) n_eff += c;
    if (n_eff == 0) return ag::constant(Tensor::scalar(0.0));
    const Tensor& m = self_mean.value();
    std::vector<double> cross(size_t(n_obj), 0.0);
    for (int x = 0; x < P; ++x) {
        const int i = (*owner)[size_t(x)];
        if (i < 0) continue;
        for (int y = 0; y < P; ++y) {
            const int j = (*owner)[size_t(y)];
            if (j >= 0 && j != i) cross[size_t(i)] += m.at(x, y);
        }
    }
    double loss = 0.0;
    auto inv1p = std::make_shared<std::vector<double>>(size_t(n_obj), 0.0);
    for (int i = 0; i < n_obj; ++i) {
        if (!nonempty[size_t(i)]) continue;
        (*inv1p)[size_t(i)] = 1.0 / (1.0 + cross[size_t(i)]);
        loss += 1.0 - (*inv1p)[size_t(i)];
    }
    loss /= n_eff;
    auto mn = self_mean.node();
    return ag::detail::make_node(Tensor::scalar(loss), {self_mean},
                                 [mn, owner, inv1p, n_eff, P](ag::Node& n) {
        mn->ensure_grad();
        const double g = n.grad.data[0] / double(n_eff);
        for (int x = 0; x < P; ++x) {
            const int i = (*owner)[size_t(x)];
            if (i < 0) continue;
            const double w = (*inv1p)[size_t(i)] * (*inv1p)[size_t(i)];
            for (int y = 0; y < P; ++y) {
                const int j = (*owner)[size_t(y)];
                if (j >= 0 && j != i) mn->grad.at(x, y) += g * w;
            }
        }
    });
}

/*------------------------------ denoising ---------------------------------*/

inline ag::Var denoising_loss_ag(const ag::Var& pred, const ag::Var& target) {
    check_same_shape(pred.value(), target.value(), "denoising_loss");
    return ag::mse(pred, target);
}

/*----------------------------- plain wrappers -----------------------------*/

inline double cross_attention_loss(const Tensor& cross_mean, const SegmentationSet& segs,
                                   const std::vector<std::vector<int>>& slots) {
    return cross_attention_loss_ag(ag::constant(cross_mean), segs, slots).value().data[0];
}

inline double self_attention_loss(const Tensor& self_mean, const SegmentationSet& segs) {
    return self_attention_loss_ag(ag::constant(self_mean), segs).value().data[0];
}

inline double denoising_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "denoising_loss");
    double s = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.data[i] - target.data[i];
        s += d * d;
    }
    return s / double(pred.numel());
}

inline LossBreakdown total_loss(double l_d, double l_c, double l_s, const LossConfig& cfg) {
    if (cfg.alpha < 0 || cfg.beta < 0)
        throw std::invalid_argument("total_loss: weights must be nonnegative");
    LossBreakdown b;
    b.l_d = l_d;
    b.l_c = l_c;
    b.l_s = l_s;
    b.total = l_d + cfg.alpha * l_c + cfg.beta * l_s;
    return b;
}

}  // namespace mcomp

#endif
