#ifndef MCOMP_EVAL_HPP
#define MCOMP_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcomp/datagen.hpp"
#include "mcomp/embedding.hpp"
#include "mcomp/image.hpp"
#include "mcomp/layout.hpp"

namespace mcomp {

/*------------------------------- eval items -------------------------------*/

struct EvalItem {
    Image generated;
    Image background;
    std::vector<Image> objects;
    LayoutSpec layout;  // object boxes + enclosing synthesis box
    GroundedCaption caption;
    std::string category;  // action | positional | "" (untagged)
};

// Open-interior intersection test: boxes sharing only an edge do not overlap.
inline bool boxes_overlap(const std::vector<Box>& boxes) {
    for (size_t i = 0; i < boxes.size(); ++i)
        for (size_t j = i + 1; j < boxes.size(); ++j) {
            const Box &a = boxes[i], &b = boxes[j];
            const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
            const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
            if (w > 0 && h > 0) return true;
        }
    return false;
}

/*-------------------------------- encoders --------------------------------*/

// Embedding ports for scoring. Two independent image embedders stand in for
// the two families of identity scores; the text embedder shares the first
// image embedder's space so image-text cosine is well defined.
struct EvalEncoders {
    std::function<std::vector<double>(const Image&)> image_a;  // CLIP-style
    std::function<std::vector<double>(const Image&)> image_b;  // DINO-style
    std::function<std::vector<double>(const std::string&)> text;
    int input_size = 32;  // crops and frames are letterboxed to this side
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) throw std::runtime_error("cosine_similarity: zero-norm embedding");
    return dot / std::sqrt(na * nb);
}

// Deterministic stand-in image embedder: letterbox to a small square, then a
// fixed seeded random projection.
inline std::function<std::vector<double>(const Image&)> fixed_projection_embedder(
    uint64_t seed, int side = 16, int dim = 64) {
    return [seed, side, dim](const Image& img) {
        if (img.channels != 3)
            throw std::invalid_argument("image embedder: expected 3-channel input");
        Image r = resize_letterbox(img, side, side);
        const int n = side * side * 3;
        std::vector<double> v(size_t(dim), 0.0);
        Rng rng(seed);
        for (int d = 0; d < dim; ++d)
            for (int i = 0; i < n; ++i) v[size_t(d)] += rng.normal() * r.data[size_t(i)];
        return v;
    };
}

inline EvalEncoders make_mock_eval_encoders(int input_size = 32) {
    EvalEncoders e;
    e.input_size = input_size;
    e.image_a = fixed_projection_embedder(0x6576616c41ULL, 16, 64);
    e.image_b = fixed_projection_embedder(0x6576616c42ULL, 16, 64);
    ToyTextEncoder text_enc;  // dim 64, matches image_a
    e.text = [text_enc](const std::string& caption) {
        const auto toks = toy_tokenize(caption);
        if (toks.empty()) throw std::invalid_argument("text embedder: empty caption");
        std::vector<std::string> words;
        for (const auto& t : toks) words.push_back(t.text);
        Tensor emb = text_enc(words);
        std::vector<double> v(size_t(emb.shape[1]), 0.0);
        for (int t = 0; t < emb.shape[0]; ++t)
            for (int d = 0; d < emb.shape[1]; ++d) v[size_t(d)] += emb.at(t, d);
        for (double& x : v) x /= double(emb.shape[0]);
        return v;
    };
    return e;
}

/*--------------------------------- scoring --------------------------------*/

namespace detail {

// Pixel rectangle of a normalized box; degenerate (empty) crops throw.
inline Image crop_at(const Image& img, const Box& b, const char* what) {
    const int x0 = int(std::lround(b.x0 * img.width));
    const int y0 = int(std::lround(b.y0 * img.height));
    const int x1 = int(std::lround(b.x1 * img.width));
    const int y1 = int(std::lround(b.y1 * img.height));
    if (x1 <= x0 || y1 <= y0)
        throw std::runtime_error(std::string(what) + ": degenerate crop (box " +
                                 std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                                 std::to_string(b.x1) + "," + std::to_string(b.y1) + ")");
    return crop(img, x0, y0, x1, y1);
}

inline std::vector<double> embed_image(const std::function<std::vector<double>(const Image&)>& f,
                                       const Image& img, int side) {
    return f(resize_letterbox(img, side, side));
}

}  // namespace detail

struct IdentityScores {
    double local_a = 0, local_b = 0;    // object vs crop at its box
    double global_a = 0, global_b = 0;  // object vs whole frame
};

inline IdentityScores identity_scores(const EvalItem& item, const EvalEncoders& enc) {
    if (item.objects.empty()) throw std::invalid_argument("identity_scores: no objects");
    if (item.objects.size() != item.layout.object_boxes.size())
        throw std::invalid_argument("identity_scores: object/box count mismatch");
    const auto whole_a = detail::embed_image(enc.image_a, item.generated, enc.input_size);
    const auto whole_b = detail::embed_image(enc.image_b, item.generated, enc.input_size);
    IdentityScores s;
    for (size_t i = 0; i < item.objects.size(); ++i) {
        Image cropped = detail::crop_at(item.generated, item.layout.object_boxes[i],
                                        "identity_scores");
        const auto ref_a = detail::embed_image(enc.image_a, item.objects[i], enc.input_size);
        const auto ref_b = detail::embed_image(enc.image_b, item.objects[i], enc.input_size);
        s.local_a += cosine_similarity(ref_a, detail::embed_image(enc.image_a, cropped,
                                                                  enc.input_size));
        s.local_b += cosine_similarity(ref_b, detail::embed_image(enc.image_b, cropped,
                                                                  enc.input_size));
        s.global_a += cosine_similarity(ref_a, whole_a);
        s.global_b += cosine_similarity(ref_b, whole_b);
    }
    const double n = double(item.objects.size());
    s.local_a /= n;
    s.local_b /= n;
    s.global_a /= n;
    s.global_b /= n;
    return s;
}

struct TextScores {
    double local = 0;   // crop at the synthesis box vs caption
    double global = 0;  // whole frame vs caption
};

inline TextScores text_scores(const EvalItem& item, const EvalEncoders& enc) {
    if (item.caption.text.empty()) throw std::invalid_argument("text_scores: empty caption");
    const auto cap = enc.text(item.caption.text);
    TextScores s;
    s.global = cosine_similarity(
        detail::embed_image(enc.image_a, item.generated, enc.input_size), cap);
    Image local = detail::crop_at(item.generated, item.layout.global_box, "text_scores");
    s.local = cosine_similarity(detail::embed_image(enc.image_a, local, enc.input_size), cap);
    return s;
}

/*--------------------------------- reports --------------------------------*/

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names = {"identity_local_a", "identity_local_b",
                                                   "identity_global_a", "identity_global_b",
                                                   "text_local", "text_global"};
    return names;
}

struct ItemMetrics {
    int index = 0;
    bool excluded = false;
    std::string exclusion_reason;
    std::map<std::string, double> values;  // keyed by metric_names()
    bool overlap = false;
    std::string category;
};

struct MetricReport {
    std::vector<ItemMetrics> items;
    std::map<std::string, double> aggregate;  // means over included items
    int included_count = 0;
    int excluded_count = 0;
};

inline ItemMetrics score_item(const EvalItem& item, int index, const EvalEncoders& enc) {
    ItemMetrics m;
    m.index = index;
    m.overlap = boxes_overlap(item.layout.object_boxes);
    m.category = item.category;
    try {
        const IdentityScores id = identity_scores(item, enc);
        const TextScores tx = text_scores(item, enc);
        m.values = {{"identity_local_a", id.local_a},   {"identity_local_b", id.local_b},
                    {"identity_global_a", id.global_a}, {"identity_global_b", id.global_b},
                    {"text_local", tx.local},           {"text_global", tx.global}};
    } catch (const std::exception& e) {
        m.excluded = true;
        m.exclusion_reason = e.what();
    }
    return m;
}

// Fixed summation order (item index) so aggregates are reproducible at the
// bit level.
inline MetricReport reduce_report(std::vector<ItemMetrics> items) {
    MetricReport r;
    std::sort(items.begin(), items.end(),
              [](const ItemMetrics& a, const ItemMetrics& b) { return a.index < b.index; });
    r.items = std::move(items);
    for (const std::string& name : metric_names()) r.aggregate[name] = 0.0;
    for (const auto& m : r.items) {
        if (m.excluded) {
            ++r.excluded_count;
            continue;
        }
        ++r.included_count;
        for (const std::string& name : metric_names()) r.aggregate[name] += m.values.at(name);
    }
    for (const std::string& name : metric_names())
        r.aggregate[name] = r.included_count > 0 ? r.aggregate[name] / r.included_count : 0.0;
    return r;
}

inline MetricReport evaluate_items(const std::vector<EvalItem>& items, const EvalEncoders& enc) {
    std::vector<ItemMetrics> rows;
    for (size_t i = 0; i < items.size(); ++i) rows.push_back(score_item(items[i], int(i), enc));
    return reduce_report(std::move(rows));
}

/*---------------------------- sequential orders ---------------------------*/

// Composites the item's objects one at a time in the given order and returns
// the final frame.
using ModelRunnerPort = std::function<Image(const EvalItem&, const std::vector<int>&)>;

struct SequentialResult {
    bool excluded = false;
    std::string exclusion_reason;
    std::map<std::string, double> mean_values;
    int runs = 0;  // number of orders evaluated (N!)
};

inline SequentialResult sequential_average(const ModelRunnerPort& runner, const EvalItem& item,
                                           const EvalEncoders& enc) {
    SequentialResult out;
    const int n = int(item.objects.size());
    if (n == 0) throw std::invalid_argument("sequential_average: no objects");
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (const std::string& name : metric_names()) out.mean_values[name] = 0.0;
    do {
        EvalItem run = item;
        try {
            run.generated = runner(item, order);
        } catch (const std::exception& e) {
            out.excluded = true;
            out.exclusion_reason = "order [" + [&] {
                std::string s;
                for (int i : order) s += (s.empty() ? "" : " ") + std::to_string(i);
                return s;
            }() + "]: " + e.what();
            out.mean_values.clear();
            return out;
        }
        ItemMetrics m = score_item(run, 0, enc);
        if (m.excluded) {
            out.excluded = true;
            out.exclusion_reason = m.exclusion_reason;
            out.mean_values.clear();
            return out;
        }
        for (const std::string& name : metric_names()) out.mean_values[name] += m.values[name];
        ++out.runs;
    } while (std::next_permutation(order.begin(), order.end()));
    for (const std::string& name : metric_names()) out.mean_values[name] /= double(out.runs);
    return out;
}

/*------------------------------ subset splits -----------------------------*/

struct SubsetSplit {
    std::vector<int> overlap_action, overlap_positional;
    std::vector<int> nonoverlap_action, nonoverlap_positional;
    std::vector<int> untagged;  // missing category tag
};

inline SubsetSplit split_subsets(const std::vector<ItemMetrics>& items) {
    SubsetSplit s;
    for (const auto& m : items) {
        if (m.category != kCategoryAction && m.category != kCategoryPositional) {
            s.untagged.push_back(m.index);
            continue;
        }
        const bool action = m.category == kCategoryAction;
        auto& bucket = m.overlap ? (action ? s.overlap_action : s.overlap_positional)
                                 : (action ? s.nonoverlap_action : s.nonoverlap_positional);
        bucket.push_back(m.index);
    }
    return s;
}

/*------------------------------- report json ------------------------------*/

inline nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json j;
    j["aggregate"] = r.aggregate;
    j["included"] = r.included_count;
    j["excluded"] = r.excluded_count;
    j["items"] = nlohmann::json::array();
    for (const auto& m : r.items) {
        nlohmann::json e;
        e["index"] = m.index;
        e["overlap"] = m.overlap;
        if (!m.category.empty()) e["category"] = m.category;
        if (m.excluded) {
            e["excluded"] = true;
            e["reason"] = m.exclusion_reason;
        } else {
            for (const auto& [k, v] : m.values) e[k] = v;
        }
        j["items"].push_back(e);
    }
    const SubsetSplit split = split_subsets(r.items);
    auto subset_json = [&](const std::vector<int>& idx) {
        std::vector<ItemMetrics> rows;
        for (int i : idx)
            for (const auto& m : r.items)
                if (m.index == i) rows.push_back(m);
        MetricReport sub = reduce_report(std::move(rows));
        nlohmann::json e;
        e["count"] = int(idx.size());
        e["aggregate"] = sub.aggregate;
        return e;
    };
    j["subsets"] = {{"overlap_action", subset_json(split.overlap_action)},
                    {"overlap_positional", subset_json(split.overlap_positional)},
                    {"nonoverlap_action", subset_json(split.nonoverlap_action)},
                    {"nonoverlap_positional", subset_json(split.nonoverlap_positional)},
                    {"untagged_count", int(split.untagged.size())}};
    return j;
}

}  // namespace mcomp

#endif
