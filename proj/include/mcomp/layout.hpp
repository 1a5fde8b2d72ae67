#ifndef MCOMP_LAYOUT_HPP
#define MCOMP_LAYOUT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcomp/image.hpp"
#include "mcomp/tensor.hpp"

namespace mcomp {

// Axis-aligned box in normalized [0,1] coordinates.
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool operator==(const Box&) const = default;
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

    bool contains_point(double x, double y) const {
        return x >= x0 && x < x1 && y >= y0 && y < y1;
    }
    bool contains_box(const Box& b) const {
        return b.x0 >= x0 && b.y0 >= y0 && b.x1 <= x1 && b.y1 <= y1;
    }
    bool finite() const {
        return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1);
    }
};

inline Box unit_box() { return {0.0, 0.0, 1.0, 1.0}; }

inline double box_iou(const Box& a, const Box& b) {
    const double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
    const double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
    const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// One compositing request: ordered per-object boxes plus the enclosing box
// that bounds the region to be synthesized. With customization_flag the whole
// image is treated as that region.
struct LayoutSpec {
    std::vector<Box> object_boxes;
    Box global_box = unit_box();
    bool customization_flag = false;
};

struct ValidationResult {
    bool ok = true;
    std::string error;  // first violated invariant when !ok
};

// Derives the enclosing synthesis box: union of object boxes padded by 5%
// of the frame, clipped to the unit square.
inline Box derive_global_box(const std::vector<Box>& object_boxes, double pad = 0.05) {
    if (object_boxes.empty()) throw std::invalid_argument("derive_global_box: no boxes");
    Box g = object_boxes[0];
    for (const auto& b : object_boxes) {
        g.x0 = std::min(g.x0, b.x0);
        g.y0 = std::min(g.y0, b.y0);
        g.x1 = std::max(g.x1, b.x1);
        g.y1 = std::max(g.y1, b.y1);
    }
    g.x0 = std::max(0.0, g.x0 - pad);
    g.y0 = std::max(0.0, g.y0 - pad);
    g.x1 = std::min(1.0, g.x1 + pad);
    g.y1 = std::min(1.0, g.y1 + pad);
    return g;
}

inline ValidationResult validate_layout(const LayoutSpec& layout) {
    auto fail = [](std::string msg) { return ValidationResult{false, std::move(msg)}; };
    if (layout.object_boxes.empty()) return fail("layout needs at least one object box");
    auto check_box = [&](const Box& b, const std::string& name) -> std::string {
        if (!b.finite()) return name + ": coordinate not finite";
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > 1 || b.y1 > 1)
            return name + ": coordinate out of range [0,1]";
        if (!(b.x0 < b.x1) || !(b.y0 < b.y1)) return name + ": zero or negative area";
        return {};
    };
    for (size_t i = 0; i < layout.object_boxes.size(); ++i) {
        if (auto e = check_box(layout.object_boxes[i], "object box " + std::to_string(i));
            !e.empty())
            return fail(e);
    }
    if (auto e = check_box(layout.global_box, "global box"); !e.empty()) return fail(e);
    if (layout.customization_flag) {
        if (!(layout.global_box == unit_box()))
            return fail("customization layout must use the unit square as global box");
    } else {
        for (size_t i = 0; i < layout.object_boxes.size(); ++i)
            if (!layout.global_box.contains_box(layout.object_boxes[i]))
                return fail("object box " + std::to_string(i) + " not enclosed by global box");
    }
    return {};
}

// Binary raster with pixel-center semantics; `empty` flags a degenerate
// rasterization (box thinner than one pixel pitch).
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> bits;  // row-major, 0/1
    bool empty_mask = false;

    uint8_t at(int y, int x) const { return bits[size_t(y) * w + x]; }
    uint8_t& at(int y, int x) { return bits[size_t(y) * w + x]; }
    int count() const {
        int n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
};

// Pixel (row y, col x) is covered iff its center ((x+.5)/W, (y+.5)/H) lies in
// the half-open box [x0,x1)×[y0,y1). Half-open keeps shared edges unambiguous.
inline BinaryMask rasterize_box(const Box& box, int H, int W) {
    if (H <= 0 || W <= 0) throw std::invalid_argument("rasterize_box: zero dimension");
    BinaryMask m;
    m.h = H;
    m.w = W;
    m.bits.assign(size_t(H) * W, 0);
    int set = 0;
    for (int y = 0; y < H; ++y) {
        const double cy = (y + 0.5) / H;
        for (int x = 0; x < W; ++x) {
            const double cx = (x + 0.5) / W;
            if (box.contains_point(cx, cy)) {
                m.at(y, x) = 1;
                ++set;
            }
        }
    }
    m.empty_mask = set == 0;
    return m;
}

inline BinaryMask downsample_mask(const BinaryMask& mask, int th, int tw) {
    if (th <= 0 || tw <= 0 || mask.h % th != 0 || mask.w % tw != 0)
        throw std::invalid_argument("downsample_mask: target must divide source dimensions");
    const int bh = mask.h / th, bw = mask.w / tw;
    BinaryMask out;
    out.h = th;
    out.w = tw;
    out.bits.assign(size_t(th) * tw, 0);
    int set = 0;
    for (int ty = 0; ty < th; ++ty)
        for (int tx = 0; tx < tw; ++tx) {
            uint8_t v = 0;
            for (int by = 0; by < bh && !v; ++by)
                for (int bx = 0; bx < bw; ++bx)
                    if (mask.at(ty * bh + by, tx * bw + bx)) {
                        v = 1;
                        break;
                    }
            out.at(ty, tx) = v;
            set += v;
        }
    out.empty_mask = set == 0;
    return out;
}

// Region classification of a layout pixel, ordered by precedence.
enum class LayoutRegion { background, inpaint_region, object, overlap };

// Region -> scalar code. Object codes depend on the object count so they stay
// distinct and bounded for any N.
struct LayoutCodebook {
    double background = 0.0;
    double inpaint_region = 0.2;
    double overlap = 1.0;
    std::vector<double> object;  // one code per object index

    static LayoutCodebook for_objects(int n) {
        LayoutCodebook cb;
        cb.object.resize(size_t(std::max(n, 0)));
        const double denom = std::max(n, 1);
        for (int i = 0; i < n; ++i)
            cb.object[size_t(i)] = std::min(0.4 + 0.5 * double(i) / denom, 0.95);
        return cb;
    }
};

struct LayoutMask {
    int h = 0, w = 0;
    Tensor values;  // [H,W]
    LayoutCodebook codebook;
};

inline LayoutMask encode_layout(const LayoutSpec& layout, int H, int W) {
    if (H <= 0 || W <= 0) throw std::invalid_argument("encode_layout: zero dimension");
    const auto vr = validate_layout(layout);
    if (!vr.ok) throw std::invalid_argument("encode_layout: invalid layout: " + vr.error);
    const int N = int(layout.object_boxes.size());
    LayoutMask lm;
    lm.h = H;
    lm.w = W;
    lm.values = Tensor({H, W});
    lm.codebook = LayoutCodebook::for_objects(N);
    for (int y = 0; y < H; ++y) {
        const double cy = (y + 0.5) / H;
        for (int x = 0; x < W; ++x) {
            const double cx = (x + 0.5) / W;
            int inside = 0, last = -1;
            for (int i = 0; i < N; ++i)
                if (layout.object_boxes[size_t(i)].contains_point(cx, cy)) {
                    ++inside;
                    last = i;
                }
            double v;
            if (inside >= 2)
                v = lm.codebook.overlap;
            else if (inside == 1)
                v = lm.codebook.object[size_t(last)];
            else if (layout.customization_flag || layout.global_box.contains_point(cx, cy))
                v = lm.codebook.inpaint_region;
            else
                v = lm.codebook.background;
            lm.values.at(y, x) = v;
        }
    }
    return lm;
}

// Inverse of the codebook: classify one raster value. Exact match required.
inline LayoutRegion classify_code(const LayoutCodebook& cb, double v, int* object_index = nullptr) {
    if (v == cb.background) return LayoutRegion::background;
    if (v == cb.inpaint_region) return LayoutRegion::inpaint_region;
    if (v == cb.overlap) return LayoutRegion::overlap;
    for (size_t i = 0; i < cb.object.size(); ++i)
        if (v == cb.object[i]) {
            if (object_index) *object_index = int(i);
            return LayoutRegion::object;
        }
    throw std::invalid_argument("classify_code: value not in codebook");
}

/*------------------------------ serialization -----------------------------*/

inline nlohmann::json layout_to_json(const LayoutSpec& layout) {
    nlohmann::json j;
    j["objects"] = nlohmann::json::array();
    for (const auto& b : layout.object_boxes) j["objects"].push_back({b.x0, b.y0, b.x1, b.y1});
    j["global"] = {layout.global_box.x0, layout.global_box.y0, layout.global_box.x1,
                   layout.global_box.y1};
    if (layout.customization_flag) j["customization"] = true;
    return j;
}

inline Box box_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 4)
        throw std::invalid_argument(what + ": expected [x0,y0,x1,y1]");
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline LayoutSpec layout_from_json(const nlohmann::json& j) {
    LayoutSpec layout;
    if (!j.contains("objects") || !j["objects"].is_array())
        throw std::invalid_argument("layout json: missing \"objects\" array");
    for (const auto& b : j["objects"])
        layout.object_boxes.push_back(box_from_json(b, "layout json object"));
    if (!j.contains("global")) throw std::invalid_argument("layout json: missing \"global\"");
    layout.global_box = box_from_json(j["global"], "layout json global");
    layout.customization_flag = j.value("customization", false);
    return layout;
}

inline Image layout_mask_to_image(const LayoutMask& lm) {
    Image img(lm.w, lm.h, 1);
    for (int y = 0; y < lm.h; ++y)
        for (int x = 0; x < lm.w; ++x) img.at(x, y, 0) = lm.values.at(y, x);
    return img;
}

inline Tensor mask_to_tensor(const BinaryMask& m) {
    Tensor t({m.h, m.w});
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) t.at(y, x) = m.at(y, x);
    return t;
}

}  // namespace mcomp

#endif
