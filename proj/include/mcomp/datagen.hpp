#ifndef MCOMP_DATAGEN_HPP
#define MCOMP_DATAGEN_HPP

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcomp/embedding.hpp"
#include "mcomp/image.hpp"
#include "mcomp/layout.hpp"
#include "mcomp/rng.hpp"

namespace mcomp {

/*--------------------------------- records --------------------------------*/

// Caption-category tags used by the evaluation subset splits.
inline const char* kCategoryAction = "action";
inline const char* kCategoryPositional = "positional";

// Closed vocabulary of rejection/skip reasons for filter audits.
enum class RejectReason {
    too_small,
    too_large,
    duplicate,
    view_inconsistent,
    insufficient_entities,
    port_failure,
    port_protocol_violation,
    out_of_bounds,
};

inline const char* reason_name(RejectReason r) {
    switch (r) {
        case RejectReason::too_small: return "too_small";
        case RejectReason::too_large: return "too_large";
        case RejectReason::duplicate: return "duplicate";
        case RejectReason::view_inconsistent: return "view_inconsistent";
        case RejectReason::insufficient_entities: return "insufficient_entities";
        case RejectReason::port_failure: return "port_failure";
        case RejectReason::port_protocol_violation: return "port_protocol_violation";
        case RejectReason::out_of_bounds: return "out_of_bounds";
    }
    return "unknown";
}

inline bool is_known_reason(const std::string& s) {
    static const char* names[] = {"too_small", "too_large", "duplicate", "view_inconsistent",
                                  "insufficient_entities", "port_failure",
                                  "port_protocol_violation", "out_of_bounds"};
    for (const char* n : names)
        if (s == n) return true;
    return false;
}

struct AuditEntry {
    std::string filter;  // which rule ran
    bool pass = true;
    std::string reason;  // reason_name(...) when !pass, else empty
};

struct ObjectEntry {
    std::string image_path;         // alternate-view or cropped object image
    Box box;                        // location in the ground-truth frame
    std::string segmentation_path;  // binary mask PNG
};

inline const std::string kBackgroundRuleGtOutside = "ground_truth_outside_global";

struct DatasetRecord {
    std::string source;  // video | topdown | bottomup | collected
    std::string ground_truth_path;
    std::string background_path;  // empty when background_rule is set
    std::string background_rule;  // e.g. ground_truth_outside_global
    GroundedCaption caption;
    std::vector<ObjectEntry> objects;
    std::vector<AuditEntry> audit;
    nlohmann::json extra = nlohmann::json::object();  // unknown fields, preserved
};

/*--------------------------------- filters --------------------------------*/

struct FilterRules {
    double min_area_frac = 0.10;  // accepted inclusive
    double max_area_frac = 0.75;  // accepted inclusive
    double view_similarity_min = 0.8;
    double duplicate_iou = 0.9;  // strictly above is a duplicate

    void validate() const {
        if (!(min_area_frac > 0 && min_area_frac < max_area_frac && max_area_frac <= 1.0))
            throw std::invalid_argument("FilterRules: need 0 < min < max <= 1");
        if (view_similarity_min < 0 || view_similarity_min > 1)
            throw std::invalid_argument("FilterRules: similarity threshold outside [0,1]");
    }
};

struct Candidate {
    Box box;
    BinaryMask mask;  // optional; empty bits = box-only candidate
    bool has_mask = false;
};

inline double candidate_area_frac(const Candidate& c) {
    if (c.has_mask && !c.mask.bits.empty())
        return double(c.mask.count()) / double(c.mask.bits.size());
    return c.box.area();
}

inline double candidate_iou(const Candidate& a, const Candidate& b) {
    if (a.has_mask && b.has_mask && a.mask.h == b.mask.h && a.mask.w == b.mask.w &&
        !a.mask.bits.empty()) {
        int inter = 0, uni = 0;
        for (size_t i = 0; i < a.mask.bits.size(); ++i) {
            inter += a.mask.bits[i] & b.mask.bits[i];
            uni += a.mask.bits[i] | b.mask.bits[i];
        }
        return uni > 0 ? double(inter) / double(uni) : 0.0;
    }
    return box_iou(a.box, b.box);
}

struct FilterResult {
    std::vector<int> accepted;  // indices into the candidate list, input order
    std::vector<std::pair<int, RejectReason>> rejected;
    std::vector<AuditEntry> audit;  // one entry per rule evaluation
};

// Area window and duplicate suppression (first of a duplicate pair wins).
inline FilterResult filter_object_candidates(const std::vector<Candidate>& cands,
                                             const FilterRules& rules) {
    rules.validate();
    FilterResult r;
    std::vector<int> area_ok;
    for (int i = 0; i < int(cands.size()); ++i) {
        const Candidate& c = cands[size_t(i)];
        const std::string tag = "candidate " + std::to_string(i);
        if (c.box.x0 < 0 || c.box.y0 < 0 || c.box.x1 > 1 || c.box.y1 > 1 ||
            !(c.box.x0 < c.box.x1) || !(c.box.y0 < c.box.y1)) {
            r.rejected.push_back({i, RejectReason::out_of_bounds});
            r.audit.push_back({tag + " bounds", false, reason_name(RejectReason::out_of_bounds)});
            continue;
        }
        r.audit.push_back({tag + " bounds", true, {}});
        const double frac = candidate_area_frac(c);
        if (frac < rules.min_area_frac) {
            r.rejected.push_back({i, RejectReason::too_small});
            r.audit.push_back({tag + " area", false, reason_name(RejectReason::too_small)});
            continue;
        }
        if (frac > rules.max_area_frac) {
            r.rejected.push_back({i, RejectReason::too_large});
            r.audit.push_back({tag + " area", false, reason_name(RejectReason::too_large)});
            continue;
        }
        r.audit.push_back({tag + " area", true, {}});
        area_ok.push_back(i);
    }
    for (size_t k = 0; k < area_ok.size(); ++k) {
        const int i = area_ok[k];
        bool dup = false;
        for (int j : r.accepted)
            if (candidate_iou(cands[size_t(j)], cands[size_t(i)]) > rules.duplicate_iou) {
                dup = true;
                break;
            }
        const std::string tag = "candidate " + std::to_string(i);
        if (dup) {
            r.rejected.push_back({i, RejectReason::duplicate});
            r.audit.push_back({tag + " duplicate", false, reason_name(RejectReason::duplicate)});
        } else {
            r.audit.push_back({tag + " duplicate", true, {}});
            r.accepted.push_back(i);
        }
    }
    std::sort(r.rejected.begin(), r.rejected.end());
    return r;
}

/*---------------------------------- ports ---------------------------------*/

struct SegEntity {
    Box box;
    BinaryMask mask;
    std::string name;  // entity label, used by mock captioning paths
};

struct OutlineResult {
    std::string caption;                  // contains the two grounding phrases
    std::array<std::string, 2> phrases;   // entity phrase per outline, input order
};

struct WordBoxLink {
    std::string phrase;
    int char_start = 0, char_end = 0;  // span of phrase in the caption
    Box box;
};

// External-model seams. Every binding must be deterministic; the built-in
// mocks below are, and an HTTP adapter would have to pin its outputs.
struct ModelPorts {
    std::function<std::string(const std::string&, const std::string&, const std::string&)>
        captioner;  // (subject, relation, object) -> caption
    std::function<OutlineResult(const Image&, const Box&, const Box&)>
        vlm_outliner;  // (image, box_first_color, box_second_color)
    std::function<std::vector<WordBoxLink>(const Image&, const std::string&)> grounder;
    std::function<std::vector<SegEntity>(const Image&)> segmenter;
    std::function<double(const Image&, const Image&)> view_scorer;  // similarity in [0,1]
};

inline constexpr const char* kOutlineColors[2] = {"orange", "blue"};

inline bool check_view_consistency(const Image& view_a, const Image& view_b,
                                   const std::function<double(const Image&, const Image&)>& scorer,
                                   const FilterRules& rules) {
    if (view_a.data.empty() || view_b.data.empty())
        throw std::invalid_argument("check_view_consistency: empty crop");
    return scorer(view_a, view_b) >= rules.view_similarity_min;
}

/*------------------------------ mock bindings -----------------------------*/

// Cosine similarity of fixed random projections of the two crops, affinely
// mapped to [0,1]. Identical crops score exactly 1.
inline std::function<double(const Image&, const Image&)> make_mock_view_scorer(
    uint64_t seed = 0x73636f726572ULL, int side = 16, int proj_dim = 24) {
    return [seed, side, proj_dim](const Image& a, const Image& b) -> double {
        auto project = [&](const Image& img) {
            Image r = resize_bilinear(img, side, side);
            const int n = side * side * img.channels;
            std::vector<double> v(size_t(proj_dim), 0.0);
            Rng rng(seed);
            for (int d = 0; d < proj_dim; ++d)
                for (int i = 0; i < n; ++i) v[size_t(d)] += rng.normal() * r.data[size_t(i)];
            return v;
        };
        if (a.channels != b.channels)
            throw std::invalid_argument("view scorer: channel count mismatch");
        const auto va = project(a), vb = project(b);
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < va.size(); ++i) {
            dot += va[i] * vb[i];
            na += va[i] * va[i];
            nb += vb[i] * vb[i];
        }
        if (na == 0 || nb == 0) return a.data == b.data ? 1.0 : 0.5;
        return (dot / std::sqrt(na * nb) + 1.0) * 0.5;
    };
}

inline std::function<std::string(const std::string&, const std::string&, const std::string&)>
make_mock_captioner() {
    return [](const std::string& subj, const std::string& rel, const std::string& obj) {
        return "The " + subj + " is " + rel + " the " + obj + ".";
    };
}

// Fixture-backed: reproduces the outline-description protocol, naming each
// outlined box by the best-matching configured entity.
inline std::function<OutlineResult(const Image&, const Box&, const Box&)> make_mock_outliner(
    std::vector<std::pair<std::string, Box>> entities) {
    return [entities](const Image&, const Box& first, const Box& second) {
        auto name_of = [&entities](const Box& b) -> std::string {
            const std::pair<std::string, Box>* best = nullptr;
            double best_iou = 0.0;
            for (const auto& e : entities) {
                const double iou = box_iou(e.second, b);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = &e;
                }
            }
            if (!best || best_iou < 0.5)
                throw std::runtime_error("outline describer: no entity matches the outlined box");
            return best->first;
        };
        OutlineResult r;
        const std::string n0 = name_of(first), n1 = name_of(second);
        r.phrases = {"The " + n0, "the " + n1};
        r.caption = "The " + n0 + " within the " + std::string(kOutlineColors[0]) +
                    " rectangle is next to the " + n1 + " within the " +
                    std::string(kOutlineColors[1]) + " rectangle.";
        return r;
    };
}

// Fixture-backed: links each configured phrase to its box when the phrase
// occurs in the caption.
inline std::function<std::vector<WordBoxLink>(const Image&, const std::string&)> make_mock_grounder(
    std::vector<std::pair<std::string, Box>> phrase_boxes) {
    return [phrase_boxes](const Image&, const std::string& caption) {
        std::vector<WordBoxLink> links;
        for (const auto& [phrase, box] : phrase_boxes) {
            const size_t pos = caption.find(phrase);
            if (pos == std::string::npos) continue;
            links.push_back({phrase, int(pos), int(pos + phrase.size()), box});
        }
        return links;
    };
}

// Fixture-backed: emits the configured entities with box-shaped masks.
inline std::function<std::vector<SegEntity>(const Image&)> make_mock_segmenter(
    std::vector<std::pair<std::string, Box>> entities, int mask_res = 32) {
    return [entities, mask_res](const Image&) {
        std::vector<SegEntity> out;
        for (const auto& [name, box] : entities)
            out.push_back({box, rasterize_box(box, mask_res, mask_res), name});
        return out;
    };
}

/*----------------------------- string surgery -----------------------------*/

struct SurgeryResult {
    std::string caption;
    std::vector<CaptionSpan> spans;  // object i = i-th phrase
};

// Locates "<phrase> within the <color> rectangle" for each object, removes
// the grounding markers, and recomputes span offsets in the cleaned string.
inline SurgeryResult strip_grounding_phrases(const std::string& caption,
                                             const std::array<std::string, 2>& phrases) {
    struct Mark {
        int phrase_start, phrase_end;  // original offsets
        int marker_end;
        int object_index;
    };
    std::vector<Mark> marks;
    for (int i = 0; i < 2; ++i) {
        const std::string marker =
            " within the " + std::string(kOutlineColors[size_t(i)]) + " rectangle";
        const std::string needle = phrases[size_t(i)] + marker;
        const size_t pos = caption.find(needle);
        if (pos == std::string::npos)
            throw std::runtime_error("grounding phrase for object " + std::to_string(i) +
                                     " (\"" + phrases[size_t(i)] +
                                     "\" + color marker) not found in caption");
        marks.push_back({int(pos), int(pos + phrases[size_t(i)].size()),
                         int(pos + needle.size()), i});
    }
    std::vector<Mark> order = marks;
    std::sort(order.begin(), order.end(),
              [](const Mark& a, const Mark& b) { return a.phrase_start < b.phrase_start; });
    for (size_t k = 1; k < order.size(); ++k)
        if (order[k].phrase_start < order[k - 1].marker_end)
            throw std::runtime_error("grounding phrases overlap in caption");

    SurgeryResult r;
    r.spans.resize(marks.size());
    int removed = 0;
    size_t src = 0;
    for (const Mark& mk : order) {
        r.caption.append(caption, src, size_t(mk.phrase_start) - src);
        const int new_start = int(mk.phrase_start) - removed;
        r.caption.append(caption, size_t(mk.phrase_start),
                         size_t(mk.phrase_end - mk.phrase_start));
        r.spans[size_t(mk.object_index)] = {mk.object_index, new_start,
                                            new_start + (mk.phrase_end - mk.phrase_start)};
        removed += mk.marker_end - mk.phrase_end;
        src = size_t(mk.marker_end);
    }
    r.caption.append(caption, src, std::string::npos);
    return r;
}

/*------------------------------ asset writing -----------------------------*/

namespace detail {

inline Image crop_box(const Image& img, const Box& b) {
    int x0 = int(std::floor(b.x0 * img.width)), y0 = int(std::floor(b.y0 * img.height));
    int x1 = int(std::ceil(b.x1 * img.width)), y1 = int(std::ceil(b.y1 * img.height));
    x1 = std::max(x1, x0 + 1);
    y1 = std::max(y1, y0 + 1);
    return crop(img, x0, y0, x1, y1);
}

inline Image mask_as_image(const BinaryMask& m) {
    Image img(m.w, m.h, 1);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) img.at(x, y, 0) = m.at(y, x);
    return img;
}

inline std::string write_asset(const std::string& dir, const std::string& name, const Image& img) {
    save_image((std::filesystem::path(dir) / name).string(), img);
    return name;  // manifests store paths relative to their own directory
}

}  // namespace detail

/*--------------------------------- builders -------------------------------*/

struct BuildOutcome {
    std::optional<DatasetRecord> record;
    std::vector<AuditEntry> audit;  // populated also when no record is emitted

    void skip(const std::string& filter, RejectReason why) {
        audit.push_back({filter, false, reason_name(why)});
    }
};

struct BuilderConfig {
    FilterRules rules;
    int object_image_size = 32;  // side of stored object crops
    std::string out_dir;         // where PNG assets are written
};

// Top-down path: segment, filter, outline two survivors in two colors, let
// the describer port caption them, strip the grounding phrases.
inline BuildOutcome build_topdown_record(const Image& image, const ModelPorts& ports,
                                         const BuilderConfig& cfg, Rng& rng,
                                         const std::string& record_id,
                                         const std::string& source_tag = "topdown") {
    BuildOutcome out;
    std::vector<SegEntity> entities;
    try {
        entities = ports.segmenter(image);
    } catch (const std::exception& e) {
        out.skip(std::string("segmenter: ") + e.what(), RejectReason::port_failure);
        return out;
    }
    std::vector<Candidate> cands;
    for (const auto& e : entities) cands.push_back({e.box, e.mask, true});
    FilterResult fr = filter_object_candidates(cands, cfg.rules);
    out.audit = fr.audit;
    if (fr.accepted.size() < 2) {
        out.skip("entity count", RejectReason::insufficient_entities);
        return out;
    }
    // Seeded choice of two distinct survivors.
    const int a = int(rng.uniform_int(fr.accepted.size()));
    int b = int(rng.uniform_int(fr.accepted.size() - 1));
    if (b >= a) ++b;
    const SegEntity& e0 = entities[size_t(fr.accepted[size_t(a)])];
    const SegEntity& e1 = entities[size_t(fr.accepted[size_t(b)])];

    OutlineResult outline;
    try {
        outline = ports.vlm_outliner(image, e0.box, e1.box);
    } catch (const std::exception& e) {
        out.skip(std::string("outline describer: ") + e.what(), RejectReason::port_failure);
        return out;
    }
    SurgeryResult surgery;
    try {
        surgery = strip_grounding_phrases(outline.caption, outline.phrases);
    } catch (const std::exception& e) {
        out.skip(std::string("grounding surgery: ") + e.what(),
                 RejectReason::port_protocol_violation);
        return out;
    }

    DatasetRecord rec;
    rec.source = source_tag;
    rec.caption.text = surgery.caption;
    rec.caption.spans = surgery.spans;
    rec.background_rule = kBackgroundRuleGtOutside;
    rec.ground_truth_path = detail::write_asset(cfg.out_dir, record_id + "_gt.png", image);
    const SegEntity* chosen[2] = {&e0, &e1};
    for (int i = 0; i < 2; ++i) {
        ObjectEntry obj;
        obj.box = chosen[i]->box;
        Image cropimg = detail::crop_box(image, chosen[i]->box);
        obj.image_path = detail::write_asset(
            cfg.out_dir, record_id + "_obj" + std::to_string(i) + ".png",
            resize_letterbox(cropimg, cfg.object_image_size, cfg.object_image_size));
        obj.segmentation_path =
            detail::write_asset(cfg.out_dir, record_id + "_seg" + std::to_string(i) + ".png",
                                detail::mask_as_image(chosen[i]->mask));
        rec.objects.push_back(std::move(obj));
    }
    out.audit.push_back({"entity count", true, {}});
    rec.audit = out.audit;
    out.record = std::move(rec);
    return out;
}

// Bottom-up path: ground the caption's words to boxes, filter, pick two
// survivors, pull masks from the segmenter (best box match, else the box).
inline BuildOutcome build_bottomup_record(const Image& image, const GroundedCaption& caption_in,
                                          const ModelPorts& ports, const BuilderConfig& cfg,
                                          Rng& rng, const std::string& record_id) {
    BuildOutcome out;
    if (caption_in.text.empty())
        throw std::invalid_argument("build_bottomup_record: caption must be nonempty");
    std::vector<WordBoxLink> links;
    try {
        links = ports.grounder(image, caption_in.text);
    } catch (const std::exception& e) {
        out.skip(std::string("grounder: ") + e.what(), RejectReason::port_failure);
        return out;
    }
    if (links.size() < 2) {
        out.skip("grounded entity count", RejectReason::insufficient_entities);
        return out;
    }
    std::vector<Candidate> cands;
    for (const auto& l : links) cands.push_back({l.box, {}, false});
    FilterResult fr = filter_object_candidates(cands, cfg.rules);
    out.audit = fr.audit;
    if (fr.accepted.size() < 2) {
        out.skip("grounded entity count", RejectReason::insufficient_entities);
        return out;
    }
    const int a = int(rng.uniform_int(fr.accepted.size()));
    int b = int(rng.uniform_int(fr.accepted.size() - 1));
    if (b >= a) ++b;
    const WordBoxLink* chosen[2] = {&links[size_t(fr.accepted[size_t(a)])],
                                    &links[size_t(fr.accepted[size_t(b)])]};

    std::vector<SegEntity> seg;
    try {
        seg = ports.segmenter(image);
    } catch (const std::exception& e) {
        out.skip(std::string("segmenter: ") + e.what(), RejectReason::port_failure);
        return out;
    }

    DatasetRecord rec;
    rec.source = "bottomup";
    rec.caption.text = caption_in.text;
    rec.background_rule = kBackgroundRuleGtOutside;
    rec.ground_truth_path = detail::write_asset(cfg.out_dir, record_id + "_gt.png", image);
    for (int i = 0; i < 2; ++i) {
        const WordBoxLink& l = *chosen[i];
        rec.caption.spans.push_back({i, l.char_start, l.char_end});
        // Best-overlap segmenter mask; the rasterized box when none overlaps.
        const BinaryMask* best = nullptr;
        double best_iou = 0.5;
        for (const auto& s : seg) {
            const double iou = box_iou(s.box, l.box);
            if (iou > best_iou) {
                best_iou = iou;
                best = &s.mask;
            }
        }
        BinaryMask mask = best ? *best : rasterize_box(l.box, 32, 32);
        ObjectEntry obj;
        obj.box = l.box;
        Image cropimg = detail::crop_box(image, l.box);
        obj.image_path = detail::write_asset(
            cfg.out_dir, record_id + "_obj" + std::to_string(i) + ".png",
            resize_letterbox(cropimg, cfg.object_image_size, cfg.object_image_size));
        obj.segmentation_path = detail::write_asset(
            cfg.out_dir, record_id + "_seg" + std::to_string(i) + ".png",
            detail::mask_as_image(mask));
        rec.objects.push_back(std::move(obj));
    }
    out.audit.push_back({"grounded entity count", true, {}});
    rec.audit = out.audit;
    out.record = std::move(rec);
    return out;
}

// Video path: one subject-relation-object annotation over a clip with
// per-frame boxes for both entities.
struct VideoClip {
    std::vector<Image> frames;
    std::string subject_name, relation, object_name;
    std::vector<Box> subject_boxes;  // one per frame
    std::vector<Box> object_boxes;   // one per frame
};

inline BuildOutcome build_video_record(const VideoClip& clip, const ModelPorts& ports,
                                       const BuilderConfig& cfg, Rng& rng,
                                       const std::string& record_id) {
    BuildOutcome out;
    const int n_frames = int(clip.frames.size());
    if (n_frames < 2 || int(clip.subject_boxes.size()) != n_frames ||
        int(clip.object_boxes.size()) != n_frames)
        throw std::invalid_argument("build_video_record: need >=2 frames with per-frame boxes");

    const int gt = int(rng.uniform_int(uint64_t(n_frames)));
    const Image& gt_frame = clip.frames[size_t(gt)];
    const std::array<Box, 2> gt_boxes = {clip.subject_boxes[size_t(gt)],
                                         clip.object_boxes[size_t(gt)]};

    std::vector<Candidate> cands;
    for (const Box& b : gt_boxes) cands.push_back({b, {}, false});
    FilterResult fr = filter_object_candidates(cands, cfg.rules);
    out.audit = fr.audit;
    if (fr.accepted.size() < 2) {
        RejectReason why = fr.rejected.empty() ? RejectReason::insufficient_entities
                                               : fr.rejected.front().second;
        out.skip("ground-truth boxes", why);
        return out;
    }

    // One alternate view per entity, first frame (in index order) whose crop
    // agrees with the ground-truth crop.
    std::array<Image, 2> alt_crops;
    for (int i = 0; i < 2; ++i) {
        const auto& track = i == 0 ? clip.subject_boxes : clip.object_boxes;
        Image gt_crop = detail::crop_box(gt_frame, gt_boxes[size_t(i)]);
        bool found = false;
        for (int f = 0; f < n_frames && !found; ++f) {
            if (f == gt) continue;
            Image alt = detail::crop_box(clip.frames[size_t(f)], track[size_t(f)]);
            bool pass;
            try {
                pass = check_view_consistency(gt_crop, alt, ports.view_scorer, cfg.rules);
            } catch (const std::exception& e) {
                out.skip(std::string("view scorer: ") + e.what(), RejectReason::port_failure);
                return out;
            }
            out.audit.push_back({"view consistency object " + std::to_string(i) + " frame " +
                                     std::to_string(f),
                                 pass, pass ? std::string{} :
                                              reason_name(RejectReason::view_inconsistent)});
            if (pass) {
                alt_crops[size_t(i)] = std::move(alt);
                found = true;
            }
        }
        if (!found) {
            out.skip("alternate view object " + std::to_string(i),
                     RejectReason::view_inconsistent);
            return out;
        }
    }

    std::string caption;
    try {
        caption = ports.captioner(clip.subject_name, clip.relation, clip.object_name);
    } catch (const std::exception& e) {
        out.skip(std::string("captioner: ") + e.what(), RejectReason::port_failure);
        return out;
    }
    DatasetRecord rec;
    rec.source = "video";
    rec.caption.text = caption;
    const std::array<std::string, 2> names = {clip.subject_name, clip.object_name};
    for (int i = 0; i < 2; ++i) {
        const size_t pos = caption.find(names[size_t(i)]);
        if (pos == std::string::npos) {
            out.skip("caption names entity " + std::to_string(i),
                     RejectReason::port_protocol_violation);
            return out;
        }
        rec.caption.spans.push_back({i, int(pos), int(pos + names[size_t(i)].size())});
    }
    rec.background_rule = kBackgroundRuleGtOutside;
    rec.ground_truth_path = detail::write_asset(cfg.out_dir, record_id + "_gt.png", gt_frame);
    for (int i = 0; i < 2; ++i) {
        ObjectEntry obj;
        obj.box = gt_boxes[size_t(i)];
        obj.image_path = detail::write_asset(
            cfg.out_dir, record_id + "_obj" + std::to_string(i) + ".png",
            resize_letterbox(alt_crops[size_t(i)], cfg.object_image_size, cfg.object_image_size));
        obj.segmentation_path = detail::write_asset(
            cfg.out_dir, record_id + "_seg" + std::to_string(i) + ".png",
            detail::mask_as_image(rasterize_box(gt_boxes[size_t(i)], 32, 32)));
        rec.objects.push_back(std::move(obj));
    }
    out.audit.push_back({"record assembly", true, {}});
    rec.audit = out.audit;
    out.record = std::move(rec);
    return out;
}

/*--------------------------------- manifest -------------------------------*/

inline nlohmann::json record_to_json(const DatasetRecord& r) {
    nlohmann::json j = r.extra;  // unknown fields first; known keys override
    j["source"] = r.source;
    j["ground_truth"] = r.ground_truth_path;
    if (!r.background_path.empty()) j["background"] = r.background_path;
    if (!r.background_rule.empty()) j["background_rule"] = r.background_rule;
    j["caption"] = caption_to_json(r.caption);
    j["objects"] = nlohmann::json::array();
    for (const auto& o : r.objects)
        j["objects"].push_back({{"image", o.image_path},
                                {"box", {o.box.x0, o.box.y0, o.box.x1, o.box.y1}},
                                {"segmentation", o.segmentation_path}});
    j["audit"] = nlohmann::json::array();
    for (const auto& a : r.audit) {
        nlohmann::json e = {{"filter", a.filter}, {"pass", a.pass}};
        if (!a.reason.empty()) e["reason"] = a.reason;
        j["audit"].push_back(e);
    }
    return j;
}

inline DatasetRecord record_from_json(nlohmann::json j) {
    DatasetRecord r;
    r.source = j.at("source").get<std::string>();
    r.ground_truth_path = j.at("ground_truth").get<std::string>();
    r.background_path = j.value("background", "");
    r.background_rule = j.value("background_rule", "");
    r.caption = caption_from_json(j.at("caption"));
    for (const auto& o : j.at("objects")) {
        ObjectEntry e;
        e.image_path = o.at("image").get<std::string>();
        e.box = box_from_json(o.at("box"), "record object box");
        e.segmentation_path = o.value("segmentation", "");
        r.objects.push_back(std::move(e));
    }
    for (const auto& a : j.value("audit", nlohmann::json::array()))
        r.audit.push_back({a.at("filter").get<std::string>(), a.at("pass").get<bool>(),
                           a.value("reason", "")});
    for (const char* k : {"source", "ground_truth", "background", "background_rule", "caption",
                          "objects", "audit"})
        j.erase(k);
    r.extra = std::move(j);
    return r;
}

inline void write_manifest(const std::vector<DatasetRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const auto& r : records) f << record_to_json(r).dump() << "\n";
    if (!f) throw std::runtime_error("write_manifest: short write to " + path);
}

inline std::vector<DatasetRecord> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_manifest: cannot open " + path);
    std::vector<DatasetRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_manifest: " + path + " line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

// Re-validates manifest records against the filter rules and structural
// invariants; returns human-readable violations (empty = clean).
inline std::vector<std::string> validate_manifest(const std::vector<DatasetRecord>& records,
                                                  const FilterRules& rules) {
    std::vector<std::string> bad;
    for (size_t ri = 0; ri < records.size(); ++ri) {
        const auto& r = records[ri];
        const std::string tag = "record " + std::to_string(ri);
        if (r.source != "video" && r.source != "topdown" && r.source != "bottomup" &&
            r.source != "collected")
            bad.push_back(tag + ": unknown source tag \"" + r.source + "\"");
        if (r.background_path.empty() && r.background_rule.empty())
            bad.push_back(tag + ": neither background path nor derivation rule present");
        std::vector<Candidate> cands;
        for (size_t oi = 0; oi < r.objects.size(); ++oi) {
            const Box& b = r.objects[oi].box;
            if (b.x0 < 0 || b.y0 < 0 || b.x1 > 1 || b.y1 > 1 || !(b.x0 < b.x1) || !(b.y0 < b.y1))
                bad.push_back(tag + " object " + std::to_string(oi) + ": box out of bounds");
            cands.push_back({b, {}, false});
        }
        FilterResult fr = filter_object_candidates(cands, rules);
        for (const auto& [idx, why] : fr.rejected)
            bad.push_back(tag + " object " + std::to_string(idx) + ": violates filter (" +
                          reason_name(why) + ")");
        for (const auto& s : r.caption.spans) {
            if (s.object_index < 0 || size_t(s.object_index) >= r.objects.size())
                bad.push_back(tag + ": span references missing object " +
                              std::to_string(s.object_index));
            if (s.char_start < 0 || s.char_end > int(r.caption.text.size()) ||
                s.char_start >= s.char_end)
                bad.push_back(tag + ": span outside caption bounds");
        }
        for (const auto& a : r.audit)
            if (!a.pass && !is_known_reason(a.reason))
                bad.push_back(tag + ": audit reason \"" + a.reason + "\" not in closed enum");
    }
    return bad;
}

}  // namespace mcomp

#endif
