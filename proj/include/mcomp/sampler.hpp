#ifndef MCOMP_SAMPLER_HPP
#define MCOMP_SAMPLER_HPP

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcomp/embedding.hpp"
#include "mcomp/layout.hpp"
#include "mcomp/losses.hpp"
#include "mcomp/rng.hpp"
#include "mcomp/schedule.hpp"
#include "mcomp/trainer.hpp"
#include "mcomp/unet.hpp"

namespace mcomp {

/*----------------------------- attention plan -----------------------------*/

// Boolean allow-matrices per attention resolution: object columns H_i only
// see pixels inside that object's box, sentinel columns only the union of
// object boxes, all other columns everything.
struct AttentionMaskPlan {
    std::map<int, Tensor> allowed;  // resolution h -> [h*w, L], entries 0/1
    std::vector<std::string> warnings;

    CrossAttentionMasks to_additive() const {
        CrossAttentionMasks m;
        const double ninf = -std::numeric_limits<double>::infinity();
        for (const auto& [res, a] : allowed) {
            Tensor t(a.shape);
            for (int64_t i = 0; i < a.numel(); ++i) t.data[i] = a.data[i] != 0.0 ? 0.0 : ninf;
            m.by_resolution.emplace(res, std::move(t));
        }
        return m;
    }
};

// Rasterizes each box at the finest attention resolution, max-pools down to
// the rest, and fills the allow-matrix per column role. A row left with no
// allowed entry is relaxed to fully-allowed and noted in `warnings`.
inline AttentionMaskPlan build_attention_mask(const std::vector<std::vector<int>>& slots,
                                              const std::vector<int>& eot_positions,
                                              const LayoutSpec& layout, int seq_len,
                                              const std::vector<int>& resolutions) {
    if (resolutions.empty()) throw std::invalid_argument("build_attention_mask: no resolutions");
    if (slots.size() != layout.object_boxes.size())
        throw std::invalid_argument("build_attention_mask: slot sets (" +
                                    std::to_string(slots.size()) + ") != layout objects (" +
                                    std::to_string(layout.object_boxes.size()) + ")");
    int finest = 0;
    for (int r : resolutions) finest = std::max(finest, r);
    for (int r : resolutions)
        if (r <= 0 || finest % r != 0)
            throw std::invalid_argument("build_attention_mask: resolution " + std::to_string(r) +
                                        " incompatible with finest " + std::to_string(finest));
    const int n = int(layout.object_boxes.size());
    std::vector<int> col_role(size_t(seq_len), -2);  // -2 free, -1 eot, >=0 object
    for (int i = 0; i < n; ++i)
        for (int h : slots[size_t(i)]) {
            if (h < 0 || h >= seq_len)
                throw std::invalid_argument("build_attention_mask: slot index out of range");
            col_role[size_t(h)] = i;
        }
    for (int e : eot_positions) {
        if (e < 0 || e >= seq_len)
            throw std::invalid_argument("build_attention_mask: sentinel index out of range");
        col_role[size_t(e)] = -1;
    }

    std::vector<BinaryMask> fine_masks;
    BinaryMask fine_union;
    fine_union.h = fine_union.w = finest;
    fine_union.bits.assign(size_t(finest) * finest, 0);
    for (int i = 0; i < n; ++i) {
        fine_masks.push_back(rasterize_box(layout.object_boxes[size_t(i)], finest, finest));
        for (size_t b = 0; b < fine_union.bits.size(); ++b)
            fine_union.bits[b] |= fine_masks.back().bits[b];
    }

    AttentionMaskPlan plan;
    for (int res : resolutions) {
        std::vector<BinaryMask> obj(fine_masks.size());
        for (size_t i = 0; i < fine_masks.size(); ++i)
            obj[i] = res == finest ? fine_masks[i] : downsample_mask(fine_masks[i], res, res);
        BinaryMask uni = res == finest ? fine_union : downsample_mask(fine_union, res, res);
        const int p = res * res;
        Tensor a({p, seq_len});
        for (int x = 0; x < p; ++x) {
            bool any = false;
            for (int h = 0; h < seq_len; ++h) {
                const int role = col_role[size_t(h)];
                double v;
                if (role == -2) v = 1.0;
                else if (role == -1) v = uni.bits[size_t(x)] ? 1.0 : 0.0;
                else v = obj[size_t(role)].bits[size_t(x)] ? 1.0 : 0.0;
                a.at(x, h) = v;
                any = any || v != 0.0;
            }
            if (!any) {
                for (int h = 0; h < seq_len; ++h) a.at(x, h) = 1.0;
                plan.warnings.push_back("attention mask at " + std::to_string(res) + "x" +
                                       std::to_string(res) + ": row " + std::to_string(x) +
                                       " had no allowed column; relaxed to fully allowed");
            }
        }
        plan.allowed.emplace(res, std::move(a));
    }
    return plan;
}

/*------------------------------- DDIM update ------------------------------*/

// Descending timestep sequence with trailing spacing: the first entry is
// T-1, later entries step down by T/steps.
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw std::invalid_argument("ddim_timesteps: steps must lie in [1,T]");
    std::vector<int> ts;
    for (int i = steps - 1; i >= 0; --i)
        ts.push_back(int(int64_t(i + 1) * T / steps) - 1);
    return ts;
}

// Deterministic (variance-free) update from t to t_prev; t_prev < 0 lands on
// the clean estimate.
inline Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev,
                        const NoiseSchedule& sched) {
    const double abar_t = sched.alphas_cumprod[size_t(t)];
    const double abar_p = t_prev < 0 ? 1.0 : sched.alphas_cumprod[size_t(t_prev)];
    const double sa = std::sqrt(abar_t), sb = std::sqrt(1.0 - abar_t);
    const double pa = std::sqrt(abar_p), pb = std::sqrt(1.0 - abar_p);
    Tensor out(x_t.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double x0 = (x_t.data[i] - sb * eps_pred.data[i]) / sa;
        out.data[i] = pa * x0 + pb * eps_pred.data[i];
    }
    return out;
}

/*------------------------------ full sampling -----------------------------*/

struct SampleRequest {
    Tensor background;  // [3,S,S] in [0,1]; ignored when layout.customization_flag
    LayoutSpec layout;
    std::vector<Image> object_images;
    GroundedCaption caption;
    int steps = 50;
    double guidance = 1.0;
    uint64_t seed = 0;
};

struct SampleResult {
    Tensor image;      // [3,S,S] composited output
    Tensor generated;  // [3,S,S] raw decoded output before paste-back
    AttentionMaskPlan plan;
    // Per kept step (only when capture was requested): the record of the
    // conditional pass.
    std::vector<AttentionRecord> records;
    std::vector<std::vector<int>> slot_sets;
    std::vector<int> eot_positions;
};

struct SamplerModel {
    ModelContext ctx;
    ParamStore params;  // backbone + adaptor, e.g. from a training checkpoint
};

namespace detail {

struct BuiltConditioning {
    Tensor sequence;
    std::vector<std::vector<int>> slot_sets;
    std::vector<int> eot_positions;
};

inline BuiltConditioning build_conditioning(const SamplerModel& model,
                                            const GroundedCaption& caption,
                                            const std::vector<Image>& objects, int n_objects) {
    TokenizedCaption tok = tokenize_with_grounding(caption, toy_tokenize);
    Tensor text_emb = model.ctx.text_encoder(tok.tokens);
    AdaptorParams a{model.params.get("adaptor.w1"), model.params.get("adaptor.b1"),
                    model.params.get("adaptor.w2"), model.params.get("adaptor.b2"),
                    model.params.get("adaptor.pool")};
    std::vector<ObjectTokenBlock> blocks = encode_objects(objects, model.ctx.image_encoder, a);
    MultimodalEmbedding emb = build_multimodal_embedding(tok, text_emb, blocks, n_objects);
    return {std::move(emb.sequence), std::move(emb.slot_sets), std::move(emb.eot_positions)};
}

}  // namespace detail

// One masked backbone evaluation followed by the deterministic update.
// Returns the new latent plus (optionally) the captured attention record.
inline std::pair<Tensor, AttentionRecord> masked_denoise_step(
    const Tensor& latent, int t, int t_prev, const Tensor& cond_sequence,
    const Tensor& layout_channel, const Tensor& masked_bg, const CrossAttentionMasks& masks,
    const SamplerModel& model, bool capture, const Tensor* null_sequence = nullptr,
    double guidance = 1.0) {
    DiffusionInput in;
    in.noisy_latent = latent;
    in.layout_channel = layout_channel;
    in.masked_background = masked_bg;
    auto [eps, rec] = forward_denoise(in, cond_sequence, t, model.ctx.backbone, model.params,
                                      capture, &masks);
    if (guidance != 1.0) {
        if (!null_sequence)
            throw std::invalid_argument("masked_denoise_step: guidance requires a null sequence");
        auto [eps_null, rec_null] =
            forward_denoise(in, *null_sequence, t, model.ctx.backbone, model.params, false,
                            nullptr);
        for (int64_t i = 0; i < eps.numel(); ++i)
            eps.data[i] = eps_null.data[i] + guidance * (eps.data[i] - eps_null.data[i]);
    }
    return {ddim_step(latent, eps, t, t_prev, model.ctx.schedule), std::move(rec)};
}

inline SampleResult sample(const SampleRequest& req, const SamplerModel& model,
                           bool capture = false) {
    if (req.steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
    if (auto vr = validate_layout(req.layout); !vr.ok)
        throw std::invalid_argument("sample: invalid layout: " + vr.error);
    if (req.object_images.size() != req.layout.object_boxes.size())
        throw std::invalid_argument("sample: need one object image per layout box");
    const ModelContext& m = model.ctx;
    const int ls = m.latent_size();
    const int n = int(req.layout.object_boxes.size());
    const bool customization = req.layout.customization_flag;

    detail::BuiltConditioning cond =
        detail::build_conditioning(model, req.caption, req.object_images, n);
    detail::BuiltConditioning null_cond;
    const bool use_guidance = req.guidance != 1.0;
    if (use_guidance) null_cond = detail::build_conditioning(model, GroundedCaption{}, {}, 0);

    SampleResult result;
    result.slot_sets = cond.slot_sets;
    result.eot_positions = cond.eot_positions;
    result.plan = build_attention_mask(cond.slot_sets, cond.eot_positions, req.layout,
                                       cond.sequence.shape[0], {ls, ls / 2});
    CrossAttentionMasks masks = result.plan.to_additive();

    // Fixed conditioning channels.
    LayoutMask lm = encode_layout(req.layout, ls, ls);
    Tensor layout_channel = lm.values.reshaped({1, ls, ls});
    Tensor region = customization ? Tensor::full({ls, ls}, 1.0)
                                  : mask_to_tensor(rasterize_box(req.layout.global_box, ls, ls));
    Tensor bg_latent = customization ? Tensor({3, ls, ls}) : m.codec.encode(req.background);
    Tensor masked_bg = bg_latent;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ls; ++y)
            for (int x = 0; x < ls; ++x) masked_bg.at(c, y, x) *= 1.0 - region.at(y, x);

    // Trajectory.
    Rng rng(req.seed);
    Rng noise_rng = rng.split("init_noise");
    Tensor x = Tensor::randn({3, ls, ls}, noise_rng);
    const std::vector<int> ts = ddim_timesteps(m.schedule.T, req.steps);
    for (size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = k + 1 < ts.size() ? ts[k + 1] : -1;
        try {
            auto [next, rec] = masked_denoise_step(
                x, t, t_prev, cond.sequence, layout_channel, masked_bg, masks, model, capture,
                use_guidance ? &null_cond.sequence : nullptr, req.guidance);
            x = std::move(next);
            if (capture) result.records.push_back(std::move(rec));
        } catch (const std::exception& e) {
            throw std::runtime_error("sample: step " + std::to_string(k) + " (t=" +
                                     std::to_string(t) + ") failed: " + e.what());
        }
    }

    result.generated = m.codec.decode(x);

    // Paste-back: pixels outside the synthesis region keep the background
    // bit-for-bit.
    if (customization) {
        result.image = result.generated;
    } else {
        const int S = m.image_size;
        if (req.background.ndim() != 3 || req.background.shape[1] != S ||
            req.background.shape[2] != S)
            throw std::invalid_argument("sample: background must be [3," + std::to_string(S) +
                                        "," + std::to_string(S) + "]");
        BinaryMask mg = rasterize_box(req.layout.global_box, S, S);
        result.image = req.background;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x2 = 0; x2 < S; ++x2)
                    if (mg.at(y, x2)) result.image.at(c, y, x2) = result.generated.at(c, y, x2);
    }
    return result;
}

}  // namespace mcomp

#endif
