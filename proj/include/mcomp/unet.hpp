#ifndef MCOMP_UNET_HPP
#define MCOMP_UNET_HPP

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcomp/autograd.hpp"
#include "mcomp/embedding.hpp"
#include "mcomp/rng.hpp"
#include "mcomp/schedule.hpp"
#include "mcomp/tensor.hpp"

namespace mcomp {

// Denoiser topology: two spatial resolutions, one attention block per
// resolution on both the encoder and decoder paths (four attention layers in
// total), multi-head attention with full probability capture.
struct BackboneConfig {
    int latent_channels = 3;
    int latent_size = 16;   // h = w at the input resolution
    int base_channels = 32; // doubled at the coarse resolution
    int heads = 2;
    int cond_dim = 64;
    int time_dim = 64;
    int groups = 8;

    int in_channels() const { return 2 * latent_channels + 1; }

    void validate() const {
        if (latent_size % 2 != 0) throw std::invalid_argument("backbone: latent_size must be even");
        if (base_channels % heads != 0 || (2 * base_channels) % heads != 0)
            throw std::invalid_argument("backbone: heads must divide channel counts");
        if (base_channels % groups != 0)
            throw std::invalid_argument("backbone: groups must divide base_channels");
        if (heads < 1 || base_channels < 1 || cond_dim < 1 || time_dim < 2)
            throw std::invalid_argument("backbone: degenerate configuration");
    }
};

/*------------------------------ parameters --------------------------------*/

struct ParamStore {
    std::vector<std::string> names;  // insertion order, init-deterministic
    std::map<std::string, Tensor> values;

    Tensor& add(const std::string& name, Tensor t) {
        if (values.count(name)) throw std::invalid_argument("ParamStore: duplicate " + name);
        names.push_back(name);
        return values.emplace(name, std::move(t)).first->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) throw std::invalid_argument("ParamStore: missing " + name);
        return it->second;
    }
    Tensor& get(const std::string& name) {
        auto it = values.find(name);
        if (it == values.end()) throw std::invalid_argument("ParamStore: missing " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return values.count(name) != 0; }
    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& [k, v] : values) n += v.numel();
        return n;
    }
};

namespace detail {

inline void init_conv(ParamStore& ps, const std::string& pfx, int cin, int cout, int k, Rng& rng,
                      bool zero = false) {
    const double s = zero ? 0.0 : 1.0 / std::sqrt(double(cin * k * k));
    ps.add(pfx + ".w", zero ? Tensor({cout, cin, k, k}) : Tensor::randn({cout, cin, k, k}, rng, s));
    ps.add(pfx + ".b", Tensor({cout}));
}

inline void init_linear(ParamStore& ps, const std::string& pfx, int din, int dout, Rng& rng,
                        bool zero = false) {
    const double s = zero ? 0.0 : 1.0 / std::sqrt(double(din));
    ps.add(pfx + ".w", zero ? Tensor({din, dout}) : Tensor::randn({din, dout}, rng, s));
    ps.add(pfx + ".b", Tensor({dout}));
}

inline void init_norm(ParamStore& ps, const std::string& pfx, int c) {
    ps.add(pfx + ".g", Tensor::full({c}, 1.0));
    ps.add(pfx + ".b", Tensor({c}));
}

inline void init_resblock(ParamStore& ps, const std::string& pfx, int cin, int cout, int time_dim,
                          Rng& rng) {
    init_norm(ps, pfx + ".gn1", cin);
    init_conv(ps, pfx + ".conv1", cin, cout, 3, rng);
    init_linear(ps, pfx + ".temb", time_dim, cout, rng);
    init_norm(ps, pfx + ".gn2", cout);
    init_conv(ps, pfx + ".conv2", cout, cout, 3, rng, /*zero=*/true);
    if (cin != cout) init_conv(ps, pfx + ".skip", cin, cout, 1, rng);
}

inline void init_transformer(ParamStore& ps, const std::string& pfx, int c, int cond_dim,
                             Rng& rng) {
    init_norm(ps, pfx + ".ln1", c);
    init_linear(ps, pfx + ".self.q", c, c, rng);
    init_linear(ps, pfx + ".self.k", c, c, rng);
    init_linear(ps, pfx + ".self.v", c, c, rng);
    init_linear(ps, pfx + ".self.o", c, c, rng);
    init_norm(ps, pfx + ".ln2", c);
    init_linear(ps, pfx + ".cross.q", c, c, rng);
    init_linear(ps, pfx + ".cross.k", cond_dim, c, rng);
    init_linear(ps, pfx + ".cross.v", cond_dim, c, rng);
    init_linear(ps, pfx + ".cross.o", c, c, rng);
    init_norm(ps, pfx + ".ln3", c);
    init_linear(ps, pfx + ".ff.w1", c, 2 * c, rng);
    init_linear(ps, pfx + ".ff.w2", 2 * c, c, rng);
}

}  // namespace detail

inline ParamStore init_backbone_params(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    const int f = cfg.base_channels;
    ParamStore ps;
    detail::init_conv(ps, "stem", cfg.in_channels(), f, 3, rng);
    detail::init_linear(ps, "time.fc1", cfg.time_dim, cfg.time_dim, rng);
    detail::init_linear(ps, "time.fc2", cfg.time_dim, cfg.time_dim, rng);
    detail::init_resblock(ps, "enc16.res", f, f, cfg.time_dim, rng);
    detail::init_transformer(ps, "enc16.tb", f, cfg.cond_dim, rng);
    detail::init_conv(ps, "down", f, 2 * f, 3, rng);
    detail::init_resblock(ps, "enc8.res", 2 * f, 2 * f, cfg.time_dim, rng);
    detail::init_transformer(ps, "enc8.tb", 2 * f, cfg.cond_dim, rng);
    detail::init_resblock(ps, "mid.res", 2 * f, 2 * f, cfg.time_dim, rng);
    detail::init_resblock(ps, "dec8.res", 4 * f, 2 * f, cfg.time_dim, rng);
    detail::init_transformer(ps, "dec8.tb", 2 * f, cfg.cond_dim, rng);
    detail::init_conv(ps, "up", 2 * f, f, 3, rng);
    detail::init_resblock(ps, "dec16.res", 2 * f, f, cfg.time_dim, rng);
    detail::init_transformer(ps, "dec16.tb", f, cfg.cond_dim, rng);
    detail::init_norm(ps, "head.gn", f);
    detail::init_conv(ps, "head", f, cfg.latent_channels, 3, rng, /*zero=*/true);
    return ps;
}

// Graph leaves for one forward/backward pass. Reusing the same ParamVars
// across several sample graphs accumulates their gradients.
struct ParamVars {
    std::map<std::string, ag::Var> vars;

    static ParamVars from(const ParamStore& ps, bool trainable) {
        ParamVars pv;
        for (const auto& [name, t] : ps.values)
            pv.vars.emplace(name, trainable ? ag::parameter(t) : ag::constant(t));
        return pv;
    }
    const ag::Var& get(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw std::invalid_argument("ParamVars: missing " + name);
        return it->second;
    }
};

/*------------------------------ model input -------------------------------*/

// Channel-concatenated conditioning input: noisy latent, the layout raster,
// and the background latent zeroed inside the synthesis region.
struct DiffusionInput {
    Tensor noisy_latent;       // [C,h,w]
    Tensor layout_channel;     // [1,h,w]
    Tensor masked_background;  // [C,h,w], zero inside the synthesis region

    void validate() const {
        if (noisy_latent.ndim() != 3 || layout_channel.ndim() != 3 ||
            masked_background.ndim() != 3)
            throw std::invalid_argument("DiffusionInput: fields must be [C,h,w]");
        if (layout_channel.shape[0] != 1)
            throw std::invalid_argument("DiffusionInput: layout must be single-channel");
        for (int d = 1; d < 3; ++d)
            if (noisy_latent.shape[d] != layout_channel.shape[d] ||
                noisy_latent.shape[d] != masked_background.shape[d])
                throw std::invalid_argument("DiffusionInput: spatial dims differ");
        check_same_shape(noisy_latent, masked_background, "DiffusionInput");
    }
};

// Applies (1 - region) to the background latent; `region` is 1 inside the
// area to synthesize.
inline DiffusionInput make_diffusion_input(Tensor noisy, Tensor layout_channel,
                                           const Tensor& background_latent,
                                           const Tensor& region_mask) {
    DiffusionInput in;
    in.noisy_latent = std::move(noisy);
    in.layout_channel = std::move(layout_channel);
    in.masked_background = background_latent;
    const int C = in.masked_background.shape[0];
    const int h = in.masked_background.shape[1], w = in.masked_background.shape[2];
    if (region_mask.shape[0] != h || region_mask.shape[1] != w)
        throw std::invalid_argument("make_diffusion_input: region mask resolution mismatch");
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                in.masked_background.at(c, y, x) *= 1.0 - region_mask.at(y, x);
    in.validate();
    return in;
}

/*--------------------------- attention capture ----------------------------*/

struct AttentionLayerMaps {
    int h = 0, w = 0;             // query grid of this layer
    std::vector<ag::Var> cross;   // per head, [h*w, L]
    std::vector<ag::Var> self;    // per head, [h*w, h*w]
};

struct AttentionRecord {
    std::vector<AttentionLayerMaps> layers;
};

// Additive pre-softmax masks for cross-attention, keyed by query grid height
// (the two resolutions differ, so the key is unambiguous). Entries are 0 or
// -inf; -inf columns get exactly zero probability.
struct CrossAttentionMasks {
    std::map<int, Tensor> by_resolution;  // h -> [h*w, L]

    const Tensor* find(int h) const {
        auto it = by_resolution.find(h);
        return it == by_resolution.end() ? nullptr : &it->second;
    }
};

/*------------------------------- forward ----------------------------------*/

namespace detail {

inline Tensor sinusoidal_time(int t, int dim) {
    Tensor out({dim});
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * double(k) / double(std::max(half - 1, 1)));
        out.at(k) = std::sin(t * freq);
        out.at(half + k) = std::cos(t * freq);
    }
    return out;
}

inline ag::Var conv(const ParamVars& pv, const std::string& pfx, const ag::Var& x, int stride,
                    int pad) {
    return ag::conv2d(x, pv.get(pfx + ".w"), pv.get(pfx + ".b"), stride, pad);
}

inline ag::Var resblock(const ParamVars& pv, const std::string& pfx, const ag::Var& x,
                        const ag::Var& temb_row, int groups) {
    const int cin = x.value().shape[0];
    const int cout = pv.get(pfx + ".conv1.w").value().shape[0];
    ag::Var h = ag::group_norm(x, pv.get(pfx + ".gn1.g"), pv.get(pfx + ".gn1.b"), groups);
    h = conv(pv, pfx + ".conv1", ag::silu(h), 1, 1);
    ag::Var tproj = ag::linear(temb_row, pv.get(pfx + ".temb.w"), pv.get(pfx + ".temb.b"));
    h = ag::add_bias_chw(h, ag::reshape(tproj, {cout}));
    h = ag::group_norm(h, pv.get(pfx + ".gn2.g"), pv.get(pfx + ".gn2.b"), groups);
    h = conv(pv, pfx + ".conv2", ag::silu(h), 1, 1);
    ag::Var skip = cin == cout ? x : conv(pv, pfx + ".skip", x, 1, 0);
    return ag::add(skip, h);
}

struct TransformerOut {
    ag::Var x;
    AttentionLayerMaps maps;
};

inline TransformerOut transformer(const ParamVars& pv, const std::string& pfx, const ag::Var& x,
                                  const ag::Var& cond, int heads, bool capture,
                                  const CrossAttentionMasks* masks) {
    const int C = x.value().shape[0], H = x.value().shape[1], W = x.value().shape[2];
    const int dh = C / heads;
    const double scale = 1.0 / std::sqrt(double(dh));
    TransformerOut out;
    out.maps.h = H;
    out.maps.w = W;

    ag::Var seq = ag::chw_to_pc(x);  // [P, C]

    // self-attention
    {
        ag::Var n1 = ag::layer_norm_rows(seq, pv.get(pfx + ".ln1.g"), pv.get(pfx + ".ln1.b"));
        ag::Var q = ag::linear(n1, pv.get(pfx + ".self.q.w"), pv.get(pfx + ".self.q.b"));
        ag::Var k = ag::linear(n1, pv.get(pfx + ".self.k.w"), pv.get(pfx + ".self.k.b"));
        ag::Var v = ag::linear(n1, pv.get(pfx + ".self.v.w"), pv.get(pfx + ".self.v.b"));
        std::vector<ag::Var> heads_out;
        for (int hd = 0; hd < heads; ++hd) {
            ag::Var qh = ag::slice_cols(q, hd * dh, (hd + 1) * dh);
            ag::Var kh = ag::slice_cols(k, hd * dh, (hd + 1) * dh);
            ag::Var vh = ag::slice_cols(v, hd * dh, (hd + 1) * dh);
            ag::Var probs = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), scale));
            if (capture) out.maps.self.push_back(probs);
            heads_out.push_back(ag::matmul(probs, vh));
        }
        ag::Var o = heads == 1 ? heads_out[0] : ag::concat_cols(heads_out);
        o = ag::linear(o, pv.get(pfx + ".self.o.w"), pv.get(pfx + ".self.o.b"));
        seq = ag::add(seq, o);
    }

    // cross-attention over the conditioning sequence
    {
        const Tensor* mask = masks ? masks->find(H) : nullptr;
        ag::Var n2 = ag::layer_norm_rows(seq, pv.get(pfx + ".ln2.g"), pv.get(pfx + ".ln2.b"));
        ag::Var q = ag::linear(n2, pv.get(pfx + ".cross.q.w"), pv.get(pfx + ".cross.q.b"));
        ag::Var k = ag::linear(cond, pv.get(pfx + ".cross.k.w"), pv.get(pfx + ".cross.k.b"));
        ag::Var v = ag::linear(cond, pv.get(pfx + ".cross.v.w"), pv.get(pfx + ".cross.v.b"));
        std::vector<ag::Var> heads_out;
        for (int hd = 0; hd < heads; ++hd) {
            ag::Var qh = ag::slice_cols(q, hd * dh, (hd + 1) * dh);
            ag::Var kh = ag::slice_cols(k, hd * dh, (hd + 1) * dh);
            ag::Var vh = ag::slice_cols(v, hd * dh, (hd + 1) * dh);
            ag::Var probs = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), scale), mask);
            if (capture) out.maps.cross.push_back(probs);
            heads_out.push_back(ag::matmul(probs, vh));
        }
        ag::Var o = heads == 1 ? heads_out[0] : ag::concat_cols(heads_out);
        o = ag::linear(o, pv.get(pfx + ".cross.o.w"), pv.get(pfx + ".cross.o.b"));
        seq = ag::add(seq, o);
    }

    // feed-forward
    {
        ag::Var n3 = ag::layer_norm_rows(seq, pv.get(pfx + ".ln3.g"), pv.get(pfx + ".ln3.b"));
        ag::Var h1 = ag::silu(ag::linear(n3, pv.get(pfx + ".ff.w1.w"), pv.get(pfx + ".ff.w1.b")));
        ag::Var h2 = ag::linear(h1, pv.get(pfx + ".ff.w2.w"), pv.get(pfx + ".ff.w2.b"));
        seq = ag::add(seq, h2);
    }

    out.x = ag::pc_to_chw(seq, C, H, W);
    return out;
}

}  // namespace detail

struct BackboneOut {
    ag::Var prediction;      // [C,h,w]
    AttentionRecord record;  // populated iff capture
};

inline BackboneOut forward_denoise_ag(const DiffusionInput& input, const ag::Var& cond, int t,
                                      const BackboneConfig& cfg, const ParamVars& pv, bool capture,
                                      const CrossAttentionMasks* masks = nullptr) {
    cfg.validate();
    input.validate();
    if (input.noisy_latent.shape[0] != cfg.latent_channels ||
        input.noisy_latent.shape[1] != cfg.latent_size ||
        input.noisy_latent.shape[2] != cfg.latent_size)
        throw std::invalid_argument("forward_denoise: latent shape mismatch, got " +
                                    input.noisy_latent.shape_str());
    if (cond.value().ndim() != 2 || cond.value().shape[1] != cfg.cond_dim)
        throw std::invalid_argument("forward_denoise: conditioning dim " +
                                    std::to_string(cond.value().shape[1]) + " != configured " +
                                    std::to_string(cfg.cond_dim));
    if (t < 0) throw std::invalid_argument("forward_denoise: negative timestep");

    ag::Var x = ag::concat_channels({ag::constant(input.noisy_latent),
                                     ag::constant(input.layout_channel),
                                     ag::constant(input.masked_background)});

    ag::Var temb = ag::constant(detail::sinusoidal_time(t, cfg.time_dim).reshaped({1, cfg.time_dim}));
    temb = ag::linear(temb, pv.get("time.fc1.w"), pv.get("time.fc1.b"));
    temb = ag::linear(ag::silu(temb), pv.get("time.fc2.w"), pv.get("time.fc2.b"));

    BackboneOut out;
    const int g = cfg.groups;

    ag::Var h = detail::conv(pv, "stem", x, 1, 1);
    ag::Var a16 = detail::resblock(pv, "enc16.res", h, temb, g);
    auto t16 = detail::transformer(pv, "enc16.tb", a16, cond, cfg.heads, capture, masks);
    if (capture) out.record.layers.push_back(t16.maps);

    ag::Var d8 = detail::conv(pv, "down", t16.x, 2, 1);
    ag::Var a8 = detail::resblock(pv, "enc8.res", d8, temb, g);
    auto t8 = detail::transformer(pv, "enc8.tb", a8, cond, cfg.heads, capture, masks);
    if (capture) out.record.layers.push_back(t8.maps);

    ag::Var m = detail::resblock(pv, "mid.res", t8.x, temb, g);

    ag::Var c8 = ag::concat_channels({m, t8.x});
    ag::Var b8 = detail::resblock(pv, "dec8.res", c8, temb, g);
    auto u8 = detail::transformer(pv, "dec8.tb", b8, cond, cfg.heads, capture, masks);
    if (capture) out.record.layers.push_back(u8.maps);

    ag::Var up = detail::conv(pv, "up", ag::upsample_nearest2(u8.x), 1, 1);
    ag::Var c16 = ag::concat_channels({up, t16.x});
    ag::Var b16 = detail::resblock(pv, "dec16.res", c16, temb, g);
    auto u16 = detail::transformer(pv, "dec16.tb", b16, cond, cfg.heads, capture, masks);
    if (capture) out.record.layers.push_back(u16.maps);

    ag::Var hN = ag::group_norm(u16.x, pv.get("head.gn.g"), pv.get("head.gn.b"), g);
    out.prediction = detail::conv(pv, "head", ag::silu(hN), 1, 1);
    return out;
}

// Value-only forward over frozen parameters.
inline std::pair<Tensor, AttentionRecord> forward_denoise(const DiffusionInput& input,
                                                          const Tensor& cond_sequence, int t,
                                                          const BackboneConfig& cfg,
                                                          const ParamStore& ps, bool capture,
                                                          const CrossAttentionMasks* masks
                                                          = nullptr) {
    ParamVars pv = ParamVars::from(ps, /*trainable=*/false);
    BackboneOut out = forward_denoise_ag(input, ag::constant(cond_sequence), t, cfg, pv, capture,
                                         masks);
    return {out.prediction.value(), std::move(out.record)};
}

/*----------------------------- map averaging ------------------------------*/

struct MeanAttention {
    ag::Var cross_mean;  // [P_c, L]
    ag::Var self_mean;   // [P_c, P_c]
};

// Every layer's maps are brought to the canonical grid — query axis by block
// mean, self-map key axis by block sum (which keeps rows on the simplex) —
// then averaged over heads and layers.
inline MeanAttention mean_attention(const AttentionRecord& rec, int th, int tw) {
    if (rec.layers.empty()) throw std::invalid_argument("mean_attention: empty record");
    ag::Var cross_acc, self_acc;
    int n_cross = 0, n_self = 0;
    for (const auto& layer : rec.layers) {
        if (layer.h % th != 0 || layer.w % tw != 0)
            throw std::invalid_argument("mean_attention: layer " + std::to_string(layer.h) + "x" +
                                        std::to_string(layer.w) +
                                        " not an integer multiple of canonical " +
                                        std::to_string(th) + "x" + std::to_string(tw));
        for (const auto& m : layer.cross) {
            ag::Var r = ag::pool_queries_mean(m, layer.h, layer.w, th, tw);
            cross_acc = n_cross == 0 ? r : ag::add(cross_acc, r);
            ++n_cross;
        }
        for (const auto& m : layer.self) {
            ag::Var r = ag::pool_queries_mean(m, layer.h, layer.w, th, tw);
            r = ag::pool_keys_sum(r, layer.h, layer.w, th, tw);
            self_acc = n_self == 0 ? r : ag::add(self_acc, r);
            ++n_self;
        }
    }
    if (n_cross == 0 || n_self == 0)
        throw std::invalid_argument("mean_attention: record has no captured maps");
    MeanAttention out;
    out.cross_mean = ag::scale(cross_acc, 1.0 / double(n_cross));
    out.self_mean = ag::scale(self_acc, 1.0 / double(n_self));
    return out;
}

}  // namespace mcomp

#endif
