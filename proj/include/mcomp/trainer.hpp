#ifndef MCOMP_TRAINER_HPP
#define MCOMP_TRAINER_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcomp/checkpoint.hpp"
#include "mcomp/codec.hpp"
#include "mcomp/datagen.hpp"
#include "mcomp/embedding.hpp"
#include "mcomp/layout.hpp"
#include "mcomp/losses.hpp"
#include "mcomp/rng.hpp"
#include "mcomp/schedule.hpp"
#include "mcomp/unet.hpp"

namespace mcomp {

// One supervised example: the composed ground truth, the object-free
// background, geometry, per-object crops and masks, and the grounded caption.
struct TrainingSample {
    Tensor ground_truth;               // [3,S,S] in [0,1]
    Tensor background;                 // [3,S,S] in [0,1]
    LayoutSpec layout;
    std::vector<Image> object_images;  // one per layout object
    std::vector<Tensor> segmentations; // per object, [S,S] 0/1
    GroundedCaption caption;

    void validate() const {
        const size_t n = layout.object_boxes.size();
        if (object_images.size() != n || segmentations.size() != n)
            throw std::invalid_argument("TrainingSample: object count mismatch (layout " +
                                        std::to_string(n) + ", images " +
                                        std::to_string(object_images.size()) + ", masks " +
                                        std::to_string(segmentations.size()) + ")");
        check_same_shape(ground_truth, background, "TrainingSample images");
        for (const auto& s : segmentations)
            if (s.shape[0] != ground_truth.shape[1] || s.shape[1] != ground_truth.shape[2])
                throw std::invalid_argument("TrainingSample: segmentation resolution mismatch");
    }
};

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 4;
    int accumulation_steps = 1;
    int total_steps = 100;
    double p_drop = 0.3;
    double p_customization = 0.5;
    bool drop_guard = false;
    LossConfig loss;
    uint64_t seed = 0;
    int checkpoint_every = 50;
    int timesteps = 1000;
    int image_size = 32;
    int k_tokens = 4;
    int adaptor_hidden = 64;
    BackboneConfig backbone;

    void validate() const {
        if (p_drop < 0 || p_drop > 1 || p_customization < 0 || p_customization > 1)
            throw std::invalid_argument("TrainConfig: probabilities must lie in [0,1]");
        if (total_steps <= 0 || batch_size <= 0 || accumulation_steps <= 0)
            throw std::invalid_argument("TrainConfig: steps and batch sizes must be positive");
        if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning rate must be positive");
        backbone.validate();
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"accumulation_steps", c.accumulation_steps},
            {"total_steps", c.total_steps},
            {"p_drop", c.p_drop},
            {"p_customization", c.p_customization},
            {"drop_guard", c.drop_guard},
            {"alpha", c.loss.alpha},
            {"beta", c.loss.beta},
            {"canonical", c.loss.canonical_h},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"timesteps", c.timesteps},
            {"image_size", c.image_size},
            {"k_tokens", c.k_tokens},
            {"adaptor_hidden", c.adaptor_hidden},
            {"base_channels", c.backbone.base_channels},
            {"heads", c.backbone.heads},
            {"cond_dim", c.backbone.cond_dim},
            {"groups", c.backbone.groups}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.accumulation_steps = j.value("accumulation_steps", c.accumulation_steps);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.p_drop = j.value("p_drop", c.p_drop);
    c.p_customization = j.value("p_customization", c.p_customization);
    c.drop_guard = j.value("drop_guard", c.drop_guard);
    c.loss.alpha = j.value("alpha", c.loss.alpha);
    c.loss.beta = j.value("beta", c.loss.beta);
    c.loss.canonical_h = c.loss.canonical_w = j.value("canonical", c.loss.canonical_h);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.timesteps = j.value("timesteps", c.timesteps);
    c.image_size = j.value("image_size", c.image_size);
    c.k_tokens = j.value("k_tokens", c.k_tokens);
    c.adaptor_hidden = j.value("adaptor_hidden", c.adaptor_hidden);
    c.backbone.base_channels = j.value("base_channels", c.backbone.base_channels);
    c.backbone.heads = j.value("heads", c.backbone.heads);
    c.backbone.cond_dim = j.value("cond_dim", c.backbone.cond_dim);
    c.backbone.groups = j.value("groups", c.backbone.groups);
    c.backbone.latent_size = c.image_size / 2;
    return c;
}

// Frozen helpers shared by trainer and sampler.
struct ModelContext {
    BackboneConfig backbone;
    NoiseSchedule schedule;
    LatentCodec codec;
    ToyTextEncoder text_encoder;
    ToyImageEncoder image_encoder;
    int k_tokens = 4;
    int adaptor_hidden = 64;
    int image_size = 32;
    LossConfig loss;

    static ModelContext from(const TrainConfig& cfg) {
        ModelContext m;
        m.backbone = cfg.backbone;
        m.backbone.latent_size = cfg.image_size / 2;
        m.schedule = NoiseSchedule::linear(cfg.timesteps);
        m.codec = LatentCodec::pooling(2);
        m.text_encoder.dim = cfg.backbone.cond_dim;
        m.image_encoder.image_size = cfg.image_size;
        m.k_tokens = cfg.k_tokens;
        m.adaptor_hidden = cfg.adaptor_hidden;
        m.image_size = cfg.image_size;
        m.loss = cfg.loss;
        return m;
    }

    int latent_size() const { return backbone.latent_size; }
};

/*--------------------------- adaptor parameters ---------------------------*/

inline void add_adaptor_params(ParamStore& ps, const ModelContext& m, Rng& rng) {
    const int grid = m.image_encoder.image_size / m.image_encoder.patch;
    AdaptorParams a = AdaptorParams::init(m.image_encoder.dim, m.adaptor_hidden,
                                          m.backbone.cond_dim, m.k_tokens, grid * grid, rng);
    ps.add("adaptor.w1", a.w1);
    ps.add("adaptor.b1", a.b1);
    ps.add("adaptor.w2", a.w2);
    ps.add("adaptor.b2", a.b2);
    ps.add("adaptor.pool", a.pool);
}

inline ag::Var adaptor_block_ag(const ParamVars& pv, const Tensor& patch_feats) {
    return adaptor_forward(ag::constant(patch_feats), pv.get("adaptor.w1"), pv.get("adaptor.b1"),
                           pv.get("adaptor.w2"), pv.get("adaptor.b2"), pv.get("adaptor.pool"));
}

/*--------------------------- example preparation --------------------------*/

struct ExampleFlags {
    bool customization = false;
    bool text_dropped = false;
    bool images_dropped = false;
    int t = 0;
};

struct PreparedExample {
    DiffusionInput input;
    TokenizedCaption tok;
    Tensor text_emb;                    // [L_T, D]
    std::vector<Tensor> object_feats;   // per kept object, encoder output
    std::vector<int> object_ids;        // aligned with object_feats
    int n_objects = 0;
    Tensor eps;                         // noise target, latent shape
    SegmentationSet segs;               // canonical resolution, disjoint
    LayoutSpec effective_layout;
    ExampleFlags flags;
};

namespace detail {

inline Tensor downsample_binary(const Tensor& mask, int th, int tw) {
    BinaryMask m;
    m.h = mask.shape[0];
    m.w = mask.shape[1];
    m.bits.resize(size_t(m.h) * m.w);
    for (size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = mask.data[i] != 0.0 ? 1 : 0;
    return mask_to_tensor(downsample_mask(m, th, tw));
}

}  // namespace detail

// Applies the customization switch and modality dropout, then assembles the
// channel-concatenated input, targets and bookkeeping for one sample.
inline PreparedExample make_training_example(const TrainingSample& sample, const TrainConfig& cfg,
                                             const ModelContext& m, Rng& rng_custom,
                                             Rng& rng_drop, Rng& rng_time, Rng& rng_noise) {
    sample.validate();
    PreparedExample ex;
    ex.n_objects = int(sample.layout.object_boxes.size());
    const int ls = m.latent_size();

    // Customization switch: synthesize the whole frame from a blank canvas.
    ex.flags.customization = rng_custom.bernoulli(cfg.p_customization);
    ex.effective_layout = sample.layout;
    Tensor bg_latent;
    if (ex.flags.customization) {
        ex.effective_layout.global_box = unit_box();
        ex.effective_layout.customization_flag = true;
        bg_latent = Tensor({3, ls, ls});  // empty canvas in latent space
    } else {
        bg_latent = m.codec.encode(sample.background);
    }

    // Modality dropout.
    ConditioningInputs ci{sample.caption, sample.object_images, false, false};
    ci = drop_modalities(ci, rng_drop, cfg.p_drop, cfg.drop_guard);
    ex.flags.text_dropped = ci.text_dropped;
    ex.flags.images_dropped = ci.images_dropped;

    ex.tok = tokenize_with_grounding(ci.caption, toy_tokenize);
    ex.text_emb = m.text_encoder(ex.tok.tokens);
    if (!ci.images_dropped)
        for (size_t i = 0; i < ci.object_images.size(); ++i) {
            ex.object_feats.push_back(m.image_encoder(ci.object_images[i]));
            ex.object_ids.push_back(int(i));
        }

    // Forward process draw.
    ex.flags.t = int(rng_time.uniform_int(uint64_t(m.schedule.T)));
    Tensor clean = m.codec.encode(sample.ground_truth);
    ex.eps = Tensor::randn(clean.shape, rng_noise);
    Tensor noisy = add_noise(clean, ex.flags.t, ex.eps, m.schedule);

    // Channel assembly.
    LayoutMask lm = encode_layout(ex.effective_layout, ls, ls);
    Tensor layout_channel = lm.values.reshaped({1, ls, ls});
    Tensor region = ex.flags.customization
                        ? Tensor::full({ls, ls}, 1.0)
                        : mask_to_tensor(rasterize_box(ex.effective_layout.global_box, ls, ls));
    ex.input = make_diffusion_input(std::move(noisy), std::move(layout_channel), bg_latent, region);

    // Ground-truth masks at the loss resolution, occlusion-resolved.
    std::vector<Tensor> down;
    for (const auto& s : sample.segmentations)
        down.push_back(detail::downsample_binary(s, m.loss.canonical_h, m.loss.canonical_w));
    ex.segs = SegmentationSet::disjoint_from(down);
    return ex;
}

/*------------------------------ optimization ------------------------------*/

struct TrainState {
    ParamStore params;  // backbone + adaptor
    ParamStore adam_m, adam_v;
    int64_t step = 0;
    Rng rng_custom, rng_drop, rng_time, rng_noise, rng_data;

    static TrainState init(const TrainConfig& cfg, const ModelContext& m) {
        TrainState s;
        Rng master(cfg.seed);
        Rng init_rng = master.split("param_init");
        s.params = init_backbone_params(m.backbone, init_rng);
        Rng ad_rng = master.split("adaptor_init");
        add_adaptor_params(s.params, m, ad_rng);
        for (const auto& name : s.params.names) {
            s.adam_m.add(name, Tensor(s.params.get(name).shape));
            s.adam_v.add(name, Tensor(s.params.get(name).shape));
        }
        s.rng_custom = master.split("customization");
        s.rng_drop = master.split("dropout");
        s.rng_time = master.split("timestep");
        s.rng_noise = master.split("noise");
        s.rng_data = master.split("data");
        return s;
    }
};

struct StepMetrics {
    LossBreakdown loss;
    int n_customization = 0, n_text_dropped = 0, n_images_dropped = 0;
};

// One optimizer update over `batch` (already batch_size x accumulation
// samples). Per-sample graphs share parameter leaves, so gradients average
// exactly as one joint batch would.
inline StepMetrics train_step(TrainState& state, const std::vector<TrainingSample>& batch,
                              const TrainConfig& cfg, const ModelContext& m) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const bool capture = cfg.loss.alpha > 0.0 || cfg.loss.beta > 0.0;
    const double inv_n = 1.0 / double(batch.size());

    ParamVars pv = ParamVars::from(state.params, /*trainable=*/true);
    StepMetrics metrics;

    for (const auto& sample : batch) {
        PreparedExample ex = make_training_example(sample, cfg, m, state.rng_custom,
                                                   state.rng_drop, state.rng_time,
                                                   state.rng_noise);
        metrics.n_customization += ex.flags.customization;
        metrics.n_text_dropped += ex.flags.text_dropped;
        metrics.n_images_dropped += ex.flags.images_dropped;

        std::vector<ObjectTokenBlockVar> blocks;
        for (size_t i = 0; i < ex.object_feats.size(); ++i)
            blocks.push_back({ex.object_ids[i], adaptor_block_ag(pv, ex.object_feats[i])});
        MultimodalEmbeddingVar emb = build_multimodal_embedding_ag(
            ex.tok, ag::constant(ex.text_emb), blocks, ex.n_objects);

        BackboneOut fw = forward_denoise_ag(ex.input, emb.sequence, ex.flags.t, m.backbone, pv,
                                            capture);
        ag::Var l_d = denoising_loss_ag(fw.prediction, ag::constant(ex.eps));
        ag::Var total = l_d;
        double lc_val = 0.0, ls_val = 0.0;
        if (capture) {
            MeanAttention mean = mean_attention(fw.record, m.loss.canonical_h, m.loss.canonical_w);
            ag::Var l_c = cross_attention_loss_ag(mean.cross_mean, ex.segs, emb.slot_sets);
            ag::Var l_s = self_attention_loss_ag(mean.self_mean, ex.segs);
            lc_val = l_c.value().data[0];
            ls_val = l_s.value().data[0];
            total = ag::add(total, ag::add(ag::scale(l_c, cfg.loss.alpha),
                                           ag::scale(l_s, cfg.loss.beta)));
        }
        const double ld_val = l_d.value().data[0];
        if (!std::isfinite(ld_val))
            throw std::runtime_error("train_step: denoising loss is not finite at step " +
                                     std::to_string(state.step + 1));
        if (!std::isfinite(lc_val))
            throw std::runtime_error("train_step: identity loss is not finite at step " +
                                     std::to_string(state.step + 1));
        if (!std::isfinite(ls_val))
            throw std::runtime_error("train_step: disentanglement loss is not finite at step " +
                                     std::to_string(state.step + 1));
        metrics.loss.l_d += ld_val * inv_n;
        metrics.loss.l_c += lc_val * inv_n;
        metrics.loss.l_s += ls_val * inv_n;

        ag::backward(ag::scale(total, inv_n));
    }
    metrics.loss.total =
        metrics.loss.l_d + cfg.loss.alpha * metrics.loss.l_c + cfg.loss.beta * metrics.loss.l_s;

    // Adaptive-moment update.
    state.step += 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, double(state.step));
    const double bc2 = 1.0 - std::pow(b2, double(state.step));
    for (const auto& name : state.params.names) {
        Tensor& p = state.params.get(name);
        Tensor& mm = state.adam_m.get(name);
        Tensor& vv = state.adam_v.get(name);
        const Tensor& g = pv.get(name).grad();
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gi = g.data[i];
            mm.data[i] = b1 * mm.data[i] + (1.0 - b1) * gi;
            vv.data[i] = b2 * vv.data[i] + (1.0 - b2) * gi * gi;
            p.data[i] -= cfg.learning_rate * (mm.data[i] / bc1) /
                         (std::sqrt(vv.data[i] / bc2) + eps);
        }
    }
    return metrics;
}

/*-------------------------------- the loop --------------------------------*/

namespace detail {

inline nlohmann::json rng_states_json(const TrainState& s) {
    return {{"custom", s.rng_custom.state_to_json()},
            {"drop", s.rng_drop.state_to_json()},
            {"time", s.rng_time.state_to_json()},
            {"noise", s.rng_noise.state_to_json()},
            {"data", s.rng_data.state_to_json()}};
}

inline void rng_states_load(TrainState& s, const nlohmann::json& j) {
    s.rng_custom = Rng::state_from_json(j.at("custom"));
    s.rng_drop = Rng::state_from_json(j.at("drop"));
    s.rng_time = Rng::state_from_json(j.at("time"));
    s.rng_noise = Rng::state_from_json(j.at("noise"));
    s.rng_data = Rng::state_from_json(j.at("data"));
}

}  // namespace detail

inline void save_train_checkpoint(const std::string& path, const TrainState& state,
                                  const TrainConfig& cfg) {
    ckpt::Container c;
    c.meta["kind"] = "train_state";
    c.meta["step"] = state.step;
    c.meta["rng"] = detail::rng_states_json(state);
    c.meta["config"] = train_config_to_json(cfg);
    for (const auto& n : state.params.names) c.params.add("p." + n, state.params.get(n));
    for (const auto& n : state.adam_m.names) c.params.add("m." + n, state.adam_m.get(n));
    for (const auto& n : state.adam_v.names) c.params.add("v." + n, state.adam_v.get(n));
    ckpt::save(path, c);
}

inline TrainState load_train_checkpoint(const std::string& path, TrainConfig* cfg_out = nullptr) {
    ckpt::Container c = ckpt::load(path);
    if (c.meta.value("kind", "") != "train_state")
        throw std::runtime_error("checkpoint " + path + " is not a training state");
    TrainState s;
    s.step = c.meta.at("step").get<int64_t>();
    detail::rng_states_load(s, c.meta.at("rng"));
    for (const auto& n : c.params.names) {
        if (n.rfind("p.", 0) == 0) s.params.add(n.substr(2), c.params.get(n));
        else if (n.rfind("m.", 0) == 0) s.adam_m.add(n.substr(2), c.params.get(n));
        else if (n.rfind("v.", 0) == 0) s.adam_v.add(n.substr(2), c.params.get(n));
    }
    if (cfg_out) *cfg_out = train_config_from_json(c.meta.at("config"));
    return s;
}

/// Runs (or resumes) training: periodic checkpoints, JSONL metric rows, final
// checkpoint at the last step.
inline TrainState train_loop(const TrainConfig& cfg, const std::vector<TrainingSample>& dataset,
                             const std::string& out_dir, const std::string& resume_path = {}) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train_loop: empty dataset");
    ModelContext m = ModelContext::from(cfg);
    std::filesystem::create_directories(out_dir);

    TrainState state;
    if (resume_path.empty()) {
        state = TrainState::init(cfg, m);
    } else {
        state = load_train_checkpoint(resume_path);
    }

    const std::string metrics_path = out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw std::runtime_error("train_loop: cannot open " + metrics_path);

    const int per_step = cfg.batch_size * cfg.accumulation_steps;
    while (state.step < cfg.total_steps) {
        std::vector<TrainingSample> batch;
        batch.reserve(size_t(per_step));
        for (int i = 0; i < per_step; ++i)
            batch.push_back(dataset[size_t(state.rng_data.uniform_int(dataset.size()))]);
        StepMetrics sm = train_step(state, batch, cfg, m);
        nlohmann::json row = {{"step", state.step},
                              {"l_d", sm.loss.l_d},
                              {"l_c", sm.loss.l_c},
                              {"l_s", sm.loss.l_s},
                              {"total", sm.loss.total},
                              {"flags",
                               {{"customization", sm.n_customization},
                                {"text_dropped", sm.n_text_dropped},
                                {"images_dropped", sm.n_images_dropped}}}};
        metrics << row.dump() << "\n";
        metrics.flush();
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 &&
            state.step < cfg.total_steps)
            save_train_checkpoint(out_dir + "/ckpt_" + std::to_string(state.step) + ".bin", state,
                                  cfg);
    }
    save_train_checkpoint(out_dir + "/ckpt_final.bin", state, cfg);
    return state;
}

/*--------------------------- loading from manifests ------------------------*/

inline TrainingSample load_training_sample(const DatasetRecord& rec,
                                           const std::string& manifest_dir, int image_size) {
    namespace fs = std::filesystem;
    auto resolve = [&](const std::string& rel) { return (fs::path(manifest_dir) / rel).string(); };
    auto load_square = [&](const std::string& rel) {
        Image img = load_image(resolve(rel));
        if (img.width != image_size || img.height != image_size)
            img = resize_bilinear(img, image_size, image_size);
        return img;
    };
    TrainingSample s;
    Image gt = load_square(rec.ground_truth_path);
    if (gt.channels != 3) throw std::runtime_error("load_training_sample: ground truth not RGB");
    s.ground_truth = image_to_chw(gt);
    if (!rec.background_path.empty()) {
        s.background = image_to_chw(load_square(rec.background_path));
    } else if (rec.background_rule == kBackgroundRuleGtOutside) {
        s.background = s.ground_truth;  // only the region outside the global box is ever used
    } else {
        throw std::runtime_error("load_training_sample: unknown background rule \"" +
                                 rec.background_rule + "\"");
    }
    for (const auto& o : rec.objects) {
        Image obj = load_square(o.image_path);
        if (obj.channels != 3)
            throw std::runtime_error("load_training_sample: object image not RGB");
        s.object_images.push_back(std::move(obj));
        s.layout.object_boxes.push_back(o.box);
        Image seg = load_image(resolve(o.segmentation_path));
        if (seg.channels != 1)
            throw std::runtime_error("load_training_sample: segmentation not grayscale");
        if (seg.width != image_size || seg.height != image_size)
            seg = resize_bilinear(seg, image_size, image_size);
        Tensor m({image_size, image_size});
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) m.at(y, x) = seg.at(x, y, 0) >= 0.5 ? 1.0 : 0.0;
        s.segmentations.push_back(std::move(m));
    }
    s.layout.global_box = derive_global_box(s.layout.object_boxes);
    s.caption = rec.caption;
    return s;
}

}  // namespace mcomp

#endif
