#ifndef MCOMP_EMBEDDING_HPP
#define MCOMP_EMBEDDING_HPP

#include <algorithm>
#include <cctype>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcomp/autograd.hpp"
#include "mcomp/image.hpp"
#include "mcomp/rng.hpp"
#include "mcomp/tensor.hpp"

namespace mcomp {

// Caption with per-object character spans marking each object's phrase.
struct CaptionSpan {
    int object_index = 0;
    int char_start = 0;
    int char_end = 0;  // exclusive
};

struct GroundedCaption {
    std::string text;
    std::vector<CaptionSpan> spans;
};

inline nlohmann::json caption_to_json(const GroundedCaption& c) {
    nlohmann::json j;
    j["text"] = c.text;
    j["spans"] = nlohmann::json::array();
    for (const auto& s : c.spans)
        j["spans"].push_back({{"object", s.object_index}, {"start", s.char_start},
                              {"end", s.char_end}});
    return j;
}

inline GroundedCaption caption_from_json(const nlohmann::json& j) {
    GroundedCaption c;
    c.text = j.at("text").get<std::string>();
    for (const auto& s : j.value("spans", nlohmann::json::array()))
        c.spans.push_back({s.at("object").get<int>(), s.at("start").get<int>(),
                           s.at("end").get<int>()});
    return c;
}

inline std::string validate_caption(const GroundedCaption& c) {
    std::vector<CaptionSpan> sorted = c.spans;
    std::sort(sorted.begin(), sorted.end(),
              [](const CaptionSpan& a, const CaptionSpan& b) { return a.char_start < b.char_start; });
    std::vector<bool> seen;
    for (const auto& s : c.spans) {
        if (s.char_start < 0 || s.char_end > int(c.text.size()) || s.char_start >= s.char_end)
            return "span for object " + std::to_string(s.object_index) + " out of text bounds";
        if (s.object_index < 0) return "negative object index in span";
        if (size_t(s.object_index) >= seen.size()) seen.resize(size_t(s.object_index) + 1, false);
        if (seen[size_t(s.object_index)])
            return "duplicate span for object " + std::to_string(s.object_index);
        seen[size_t(s.object_index)] = true;
    }
    for (size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i].char_start < sorted[i - 1].char_end)
            return "overlapping spans for objects " + std::to_string(sorted[i - 1].object_index) +
                   " and " + std::to_string(sorted[i].object_index);
    return {};
}

/*------------------------------- tokenizer -------------------------------*/

struct TokenWithOffset {
    std::string text;
    int char_start = 0;
    int char_end = 0;  // exclusive
};

using TextTokenizerPort = std::function<std::vector<TokenWithOffset>(const std::string&)>;

// Word-level tokenizer: maximal alphanumeric runs plus single punctuation
// tokens; whitespace separates. Offsets index the original string.
inline std::vector<TokenWithOffset> toy_tokenize(const std::string& text) {
    std::vector<TokenWithOffset> out;
    const int n = int(text.size());
    int i = 0;
    while (i < n) {
        const unsigned char ch = static_cast<unsigned char>(text[size_t(i)]);
        if (std::isspace(ch)) {
            ++i;
            continue;
        }
        if (std::isalnum(ch) || ch == '\'') {
            int j = i;
            while (j < n) {
                const unsigned char cj = static_cast<unsigned char>(text[size_t(j)]);
                if (!std::isalnum(cj) && cj != '\'') break;
                ++j;
            }
            out.push_back({text.substr(size_t(i), size_t(j - i)), i, j});
            i = j;
        } else {
            out.push_back({text.substr(size_t(i), 1), i, i + 1});
            ++i;
        }
    }
    return out;
}

inline const std::string kEotToken = "<eot>";

// Token sequence with the end sentinel appended and per-object token ranges.
struct TokenizedCaption {
    std::vector<std::string> tokens;  // includes trailing sentinel
    std::vector<std::pair<int, int>> token_char_ranges;
    // Per object index: [start,end) token range, or (-1,-1) when absent.
    std::vector<std::pair<int, int>> span_token_ranges;
    std::vector<int> eot_positions;
};

inline TokenizedCaption tokenize_with_grounding(const GroundedCaption& caption,
                                                const TextTokenizerPort& tokenizer) {
    if (auto e = validate_caption(caption); !e.empty())
        throw std::invalid_argument("tokenize_with_grounding: " + e);
    const auto words = tokenizer(caption.text);
    TokenizedCaption out;
    for (const auto& w : words) {
        out.tokens.push_back(w.text);
        out.token_char_ranges.push_back({w.char_start, w.char_end});
    }
    int max_obj = -1;
    for (const auto& s : caption.spans) max_obj = std::max(max_obj, s.object_index);
    out.span_token_ranges.assign(size_t(max_obj + 1), {-1, -1});
    for (const auto& s : caption.spans) {
        // Outward rounding: any token overlapping the char span joins the range.
        int t0 = -1, t1 = -1;
        for (int t = 0; t < int(words.size()); ++t) {
            const auto& w = words[size_t(t)];
            if (w.char_end > s.char_start && w.char_start < s.char_end) {
                if (t0 < 0) t0 = t;
                t1 = t + 1;
            }
        }
        if (t0 < 0)
            throw std::invalid_argument(
                "tokenize_with_grounding: span for object " + std::to_string(s.object_index) +
                " [" + std::to_string(s.char_start) + "," + std::to_string(s.char_end) +
                ") maps to an empty token range");
        out.span_token_ranges[size_t(s.object_index)] = {t0, t1};
    }
    // End sentinel; an empty caption is just the sentinel at position 0.
    out.eot_positions.push_back(int(out.tokens.size()));
    out.tokens.push_back(kEotToken);
    out.token_char_ranges.push_back({int(caption.text.size()), int(caption.text.size())});
    return out;
}

/*----------------------------- toy text encoder ---------------------------*/

// Deterministic hash-seeded embedding table: each distinct token string maps
// to a fixed pseudo-random vector.
struct ToyTextEncoder {
    int dim = 64;
    uint64_t seed = 0x7465787467656eULL;

    Tensor operator()(const std::vector<std::string>& tokens) const {
        Tensor out({int(tokens.size()), dim});
        const double s = 1.0 / std::sqrt(double(dim));
        for (size_t t = 0; t < tokens.size(); ++t) {
            Rng rng(seed ^ fnv1a64(tokens[t]));
            for (int d = 0; d < dim; ++d) out.at(int(t), d) = rng.normal() * s;
        }
        return out;
    }
};

/*----------------------------- image encoding -----------------------------*/

// Port contract: [0,1] image at the configured resolution -> patch feature
// matrix [P, D_enc].
using ImageEncoderPort = std::function<Tensor(const Image&)>;

// Fixed random linear projection of non-overlapping patches.
struct ToyImageEncoder {
    int image_size = 32;
    int patch = 8;
    int channels = 3;
    int dim = 32;
    uint64_t seed = 0x696d67656e63ULL;

    Tensor projection() const {
        const int pv = patch * patch * channels;
        Tensor w({pv, dim});
        Rng rng(seed);
        const double s = 1.0 / std::sqrt(double(pv));
        for (auto& v : w.data) v = rng.normal() * s;
        return w;
    }

    Tensor operator()(const Image& img) const {
        if (img.width != image_size || img.height != image_size || img.channels != channels)
            throw std::invalid_argument("image encoder: expected " + std::to_string(channels) +
                                        "x" + std::to_string(image_size) + "x" +
                                        std::to_string(image_size) + " image, got " +
                                        std::to_string(img.channels) + "x" +
                                        std::to_string(img.height) + "x" +
                                        std::to_string(img.width));
        const int grid = image_size / patch;
        const int pv = patch * patch * channels;
        Tensor patches({grid * grid, pv});
        for (int py = 0; py < grid; ++py)
            for (int px = 0; px < grid; ++px) {
                int k = 0;
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        for (int c = 0; c < channels; ++c)
                            patches.at(py * grid + px, k++) =
                                img.at(px * patch + x, py * patch + y, c);
            }
        const Tensor w = projection();
        Tensor out({grid * grid, dim});
        matmul_into(patches.data.data(), grid * grid, pv, w.data.data(), dim, out.data.data(),
                    false);
        return out;
    }
};

/*-------------------------------- adaptor ---------------------------------*/

// Maps encoder patch tokens [P, D_enc] to K model-space tokens [K, D]:
// a per-token two-layer perceptron followed by a learned pooling matrix.
struct AdaptorParams {
    Tensor w1, b1;   // [D_enc, hidden], [hidden]
    Tensor w2, b2;   // [hidden, D], [D]
    Tensor pool;     // [K, P]

    static AdaptorParams init(int d_enc, int hidden, int d_model, int k, int p, Rng& rng) {
        AdaptorParams a;
        a.w1 = Tensor::randn({d_enc, hidden}, rng, 1.0 / std::sqrt(double(d_enc)));
        a.b1 = Tensor({hidden});
        a.w2 = Tensor::randn({hidden, d_model}, rng, 1.0 / std::sqrt(double(hidden)));
        a.b2 = Tensor({d_model});
        a.pool = Tensor::full({k, p}, 1.0 / double(p));
        return a;
    }
};

inline ag::Var adaptor_forward(const ag::Var& patch_tokens, const ag::Var& w1, const ag::Var& b1,
                               const ag::Var& w2, const ag::Var& b2, const ag::Var& pool) {
    ag::Var h = ag::silu(ag::linear(patch_tokens, w1, b1));
    ag::Var tokens = ag::linear(h, w2, b2);  // [P, D]
    return ag::matmul(pool, tokens);         // [K, D]
}

inline Tensor adaptor_forward_plain(const Tensor& patch_tokens, const AdaptorParams& a) {
    ag::Var out = adaptor_forward(ag::constant(patch_tokens), ag::constant(a.w1),
                                  ag::constant(a.b1), ag::constant(a.w2), ag::constant(a.b2),
                                  ag::constant(a.pool));
    return out.value();
}

struct ObjectTokenBlockVar {
    int object_index = 0;
    ag::Var tokens;  // [K, D]
};

struct ObjectTokenBlock {
    int object_index = 0;
    Tensor tokens;  // [K, D]
};

inline std::vector<ObjectTokenBlock> encode_objects(const std::vector<Image>& objects,
                                                    const ImageEncoderPort& encoder,
                                                    const AdaptorParams& adaptor) {
    std::vector<ObjectTokenBlock> blocks;
    for (size_t i = 0; i < objects.size(); ++i) {
        Tensor feats;
        try {
            feats = encoder(objects[i]);
        } catch (const std::exception& e) {
            throw std::runtime_error("encode_objects: encoder failed on object " +
                                     std::to_string(i) + ": " + e.what());
        }
        blocks.push_back({int(i), adaptor_forward_plain(feats, adaptor)});
    }
    return blocks;
}

/*--------------------------- sequence assembly ----------------------------*/

enum class SlotKind { text, object, eot };

struct SlotTag {
    SlotKind kind = SlotKind::text;
    int object_index = -1;  // meaningful for kind == object
};

// Index bookkeeping of the interleaved sequence, independent of the value
// representation (plain tensors or graph nodes share it).
struct EmbeddingLayout {
    struct Segment {
        bool is_text = false;
        int text_start = 0, text_end = 0;  // token range when is_text
        int object_index = -1;             // block id otherwise
        int out_start = 0;                 // first output position
    };
    std::vector<Segment> segments;
    int length = 0;
    std::vector<std::vector<int>> slot_sets;  // per object index
    std::vector<int> eot_positions;
    std::vector<SlotTag> provenance;
};

// Splices each object's K-token block immediately after the last token of its
// caption span; blocks without a span (dropped text) follow the sentinel.
// Blocks sharing an insertion point are ordered by object index.
inline EmbeddingLayout plan_embedding(const TokenizedCaption& tok,
                                      const std::vector<int>& block_objects, int k_tokens,
                                      int n_objects) {
    const int lt = int(tok.tokens.size());
    struct Ins {
        int point;  // text position the block goes after (exclusive end)
        int object_index;
    };
    std::vector<Ins> ins;
    for (int obj : block_objects) {
        int point = lt;  // default: after everything (sentinel included)
        if (obj < int(tok.span_token_ranges.size()) && tok.span_token_ranges[size_t(obj)].first >= 0)
            point = tok.span_token_ranges[size_t(obj)].second;
        ins.push_back({point, obj});
    }
    std::stable_sort(ins.begin(), ins.end(), [](const Ins& a, const Ins& b) {
        return a.point != b.point ? a.point < b.point : a.object_index < b.object_index;
    });

    EmbeddingLayout plan;
    plan.slot_sets.assign(size_t(std::max(n_objects, 0)), {});
    std::vector<int> text_new_pos(size_t(lt), -1);
    int out = 0;
    size_t next_ins = 0;
    int text_pos = 0;
    auto flush_text = [&](int upto) {
        if (text_pos < upto) {
            EmbeddingLayout::Segment s;
            s.is_text = true;
            s.text_start = text_pos;
            s.text_end = upto;
            s.out_start = out;
            for (int t = text_pos; t < upto; ++t) text_new_pos[size_t(t)] = out++;
            plan.segments.push_back(s);
            text_pos = upto;
        }
    };
    while (next_ins < ins.size() || text_pos < lt) {
        if (next_ins < ins.size()) {
            flush_text(std::min(ins[next_ins].point, lt));
            if (text_pos >= ins[next_ins].point) {
                EmbeddingLayout::Segment s;
                s.is_text = false;
                s.object_index = ins[next_ins].object_index;
                s.out_start = out;
                plan.segments.push_back(s);
                if (s.object_index >= 0 && s.object_index < n_objects)
                    for (int t = 0; t < k_tokens; ++t)
                        plan.slot_sets[size_t(s.object_index)].push_back(out + t);
                out += k_tokens;
                ++next_ins;
                continue;
            }
        } else {
            flush_text(lt);
        }
    }
    plan.length = out;

    // Text span positions join their object's slot set.
    for (int obj = 0; obj < int(tok.span_token_ranges.size()) && obj < n_objects; ++obj) {
        const auto [t0, t1] = tok.span_token_ranges[size_t(obj)];
        if (t0 < 0) continue;
        for (int t = t0; t < t1; ++t) plan.slot_sets[size_t(obj)].push_back(text_new_pos[size_t(t)]);
    }
    for (auto& s : plan.slot_sets) std::sort(s.begin(), s.end());

    for (int e : tok.eot_positions) plan.eot_positions.push_back(text_new_pos[size_t(e)]);

    plan.provenance.assign(size_t(plan.length), SlotTag{});
    for (const auto& s : plan.segments) {
        if (s.is_text) {
            for (int t = s.text_start; t < s.text_end; ++t) {
                const int p = text_new_pos[size_t(t)];
                plan.provenance[size_t(p)] = {SlotKind::text, -1};
            }
        } else {
            for (int t = 0; t < k_tokens; ++t)
                plan.provenance[size_t(s.out_start + t)] = {SlotKind::object, s.object_index};
        }
    }
    for (int e : plan.eot_positions) plan.provenance[size_t(e)] = {SlotKind::eot, -1};
    return plan;
}

struct MultimodalEmbedding {
    Tensor sequence;  // [L, D]
    std::vector<std::vector<int>> slot_sets;
    std::vector<int> eot_positions;
    std::vector<SlotTag> provenance;
};

struct MultimodalEmbeddingVar {
    ag::Var sequence;  // [L, D]
    std::vector<std::vector<int>> slot_sets;
    std::vector<int> eot_positions;
    std::vector<SlotTag> provenance;
};

inline MultimodalEmbeddingVar build_multimodal_embedding_ag(
    const TokenizedCaption& tok, const ag::Var& text_emb,
    const std::vector<ObjectTokenBlockVar>& blocks, int n_objects) {
    if (text_emb.value().shape[0] != int(tok.tokens.size()))
        throw std::invalid_argument("build_multimodal_embedding: text embedding rows (" +
                                    std::to_string(text_emb.value().shape[0]) +
                                    ") do not match token count (" +
                                    std::to_string(tok.tokens.size()) + ")");
    const int d = text_emb.value().shape[1];
    int k = blocks.empty() ? 0 : blocks[0].tokens.value().shape[0];
    std::vector<int> block_objects;
    for (const auto& b : blocks) {
        if (b.tokens.value().shape[1] != d)
            throw std::invalid_argument("build_multimodal_embedding: block dim " +
                                        std::to_string(b.tokens.value().shape[1]) +
                                        " does not match text dim " + std::to_string(d));
        if (b.tokens.value().shape[0] != k)
            throw std::invalid_argument("build_multimodal_embedding: inconsistent block sizes");
        block_objects.push_back(b.object_index);
    }
    EmbeddingLayout plan = plan_embedding(tok, block_objects, k, n_objects);

    std::vector<ag::Var> parts;
    for (const auto& s : plan.segments) {
        if (s.is_text) {
            parts.push_back(ag::slice_rows(text_emb, s.text_start, s.text_end));
        } else {
            auto it = std::find_if(blocks.begin(), blocks.end(), [&](const ObjectTokenBlockVar& b) {
                return b.object_index == s.object_index;
            });
            parts.push_back(it->tokens);
        }
    }
    MultimodalEmbeddingVar out;
    out.sequence = parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
    out.slot_sets = std::move(plan.slot_sets);
    out.eot_positions = std::move(plan.eot_positions);
    out.provenance = std::move(plan.provenance);
    return out;
}

inline MultimodalEmbedding build_multimodal_embedding(const TokenizedCaption& tok,
                                                      const Tensor& text_emb,
                                                      const std::vector<ObjectTokenBlock>& blocks,
                                                      int n_objects) {
    std::vector<ObjectTokenBlockVar> bv;
    for (const auto& b : blocks) bv.push_back({b.object_index, ag::constant(b.tokens)});
    MultimodalEmbeddingVar v =
        build_multimodal_embedding_ag(tok, ag::constant(text_emb), bv, n_objects);
    MultimodalEmbedding out;
    out.sequence = v.sequence.value();
    out.slot_sets = std::move(v.slot_sets);
    out.eot_positions = std::move(v.eot_positions);
    out.provenance = std::move(v.provenance);
    return out;
}

/*------------------------------ modality drop -----------------------------*/

struct ConditioningInputs {
    GroundedCaption caption;
    std::vector<Image> object_images;  // aligned with layout object order
    bool text_dropped = false;
    bool images_dropped = false;
};

// Independently drops the caption and the object images, each with
// probability p_drop. The text draw happens first. With guard=true a draw
// that would drop both keeps the images.
inline ConditioningInputs drop_modalities(const ConditioningInputs& inputs, Rng& rng,
                                          double p_drop, bool guard = false) {
    if (p_drop < 0.0 || p_drop > 1.0)
        throw std::invalid_argument("drop_modalities: p_drop outside [0,1]");
    ConditioningInputs out = inputs;
    const bool drop_text = rng.bernoulli(p_drop);
    bool drop_images = rng.bernoulli(p_drop);
    if (guard && drop_text && drop_images) drop_images = false;
    if (drop_text) {
        out.caption = GroundedCaption{};
        out.text_dropped = true;
    }
    if (drop_images) {
        out.object_images.clear();
        out.images_dropped = true;
    }
    return out;
}

}  // namespace mcomp

#endif
