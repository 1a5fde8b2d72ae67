#ifndef MCOMP_SHAPES_HPP
#define MCOMP_SHAPES_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mcomp/datagen.hpp"
#include "mcomp/image.hpp"
#include "mcomp/layout.hpp"
#include "mcomp/rng.hpp"
#include "mcomp/trainer.hpp"

namespace mcomp {

/*------------------------- bundled synthetic corpus ------------------------
  Colored geometric objects composited onto gradient backgrounds. Every scene
  ships with exact segmentations, boxes, and a templated grounded caption, so
  the full pipeline runs without any downloads.
----------------------------------------------------------------------------*/

inline const std::vector<std::string>& shape_color_names() {
    static const std::vector<std::string> v = {"red", "green", "blue",
                                               "yellow", "purple", "cyan"};
    return v;
}

inline const std::vector<std::array<double, 3>>& shape_color_values() {
    static const std::vector<std::array<double, 3>> v = {
        {0.85, 0.15, 0.15}, {0.15, 0.70, 0.20}, {0.15, 0.25, 0.85},
        {0.90, 0.85, 0.15}, {0.60, 0.20, 0.75}, {0.15, 0.80, 0.80}};
    return v;
}

inline const std::vector<std::string>& shape_kind_names() {
    static const std::vector<std::string> v = {"circle", "square", "triangle"};
    return v;
}

struct ShapeSpec {
    int kind = 0;   // index into shape_kind_names()
    int color = 0;  // index into shape_color_names()
    Box box;

    std::string name() const {
        return shape_color_names()[size_t(color)] + " " + shape_kind_names()[size_t(kind)];
    }
};

// 0/1 coverage of the shape inscribed in its box, pixel-center sampling.
inline Tensor rasterize_shape(const ShapeSpec& s, int size) {
    Tensor m({size, size});
    const double bx = 0.5 * (s.box.x0 + s.box.x1), by = 0.5 * (s.box.y0 + s.box.y1);
    const double hw = 0.5 * (s.box.x1 - s.box.x0), hh = 0.5 * (s.box.y1 - s.box.y0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double cx = (x + 0.5) / size, cy = (y + 0.5) / size;
            bool inside = false;
            if (s.kind == 0) {  // ellipse inscribed with a small inset
                const double u = (cx - bx) / (hw * 0.92), v = (cy - by) / (hh * 0.92);
                inside = u * u + v * v <= 1.0;
            } else if (s.kind == 1) {  // inset square
                inside = std::abs(cx - bx) <= hw * 0.88 && std::abs(cy - by) <= hh * 0.88;
            } else {  // triangle: apex top-center, base at the bottom
                const double ax = bx, ay = by - hh * 0.92;
                const double lx = bx - hw * 0.92, ly = by + hh * 0.92;
                const double rx = bx + hw * 0.92, ry = by + hh * 0.92;
                auto side = [&](double x0, double y0, double x1, double y1) {
                    return (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0);
                };
                const double d0 = side(ax, ay, lx, ly), d1 = side(lx, ly, rx, ry),
                             d2 = side(rx, ry, ax, ay);
                inside = (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
            }
            if (inside) m.at(y, x) = 1.0;
        }
    return m;
}

inline Image make_gradient_background(Rng& rng, int size) {
    std::array<double, 3> c0, c1;
    for (int c = 0; c < 3; ++c) {
        c0[size_t(c)] = 0.15 + 0.7 * rng.uniform01();
        c1[size_t(c)] = 0.15 + 0.7 * rng.uniform01();
    }
    const bool horizontal = rng.bernoulli(0.5);
    Image img(size, size, 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double t = size > 1 ? double(horizontal ? x : y) / (size - 1) : 0.0;
            for (int c = 0; c < 3; ++c)
                img.at(x, y, c) = c0[size_t(c)] + (c1[size_t(c)] - c0[size_t(c)]) * t;
        }
    return img;
}

struct ShapeScene {
    Image background;  // object-free gradient
    Image composed;    // shapes drawn over the background, index order
    std::vector<ShapeSpec> shapes;
    std::vector<Tensor> segmentations;  // per-shape full coverage at scene size
    GroundedCaption caption;
    LayoutSpec layout;
    std::string category;  // action | positional
};

namespace detail {

inline void draw_mask(Image& img, const Tensor& mask, const std::array<double, 3>& color) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (mask.at(y, x) > 0.5)
                for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[size_t(c)];
}

inline Box random_shape_box(Rng& rng) {
    const double w = 0.35 + 0.25 * rng.uniform01();
    const double h = 0.35 + 0.25 * rng.uniform01();
    const double x0 = 0.02 + (0.96 - w) * rng.uniform01();
    const double y0 = 0.02 + (0.96 - h) * rng.uniform01();
    return {x0, y0, x0 + w, y0 + h};
}

struct CaptionBuilder {
    std::string text;
    std::vector<CaptionSpan> spans;

    void append(const std::string& s) { text += s; }
    void append_span(int object, const std::string& s) {
        spans.push_back({object, int(text.size()), int(text.size() + s.size())});
        text += s;
    }
};

}  // namespace detail

inline ShapeScene make_shape_scene(Rng& rng, int size, int n_objects) {
    if (n_objects < 1 || n_objects > 4)
        throw std::invalid_argument("make_shape_scene: supports 1..4 objects");
    ShapeScene scene;
    scene.background = make_gradient_background(rng, size);
    scene.composed = scene.background;

    std::vector<int> colors;
    for (int i = 0; i < int(shape_color_names().size()); ++i) colors.push_back(i);
    for (int i = 0; i < n_objects; ++i) {
        ShapeSpec s;
        s.kind = int(rng.uniform_int(uint64_t(shape_kind_names().size())));
        const size_t ci = size_t(rng.uniform_int(uint64_t(colors.size())));
        s.color = colors[ci];
        colors.erase(colors.begin() + long(ci));
        s.box = detail::random_shape_box(rng);
        for (int attempt = 0; attempt < 20; ++attempt) {
            bool crowded = false;
            for (const auto& prev : scene.shapes)
                if (box_iou(prev.box, s.box) > 0.25) crowded = true;
            if (!crowded) break;
            s.box = detail::random_shape_box(rng);
        }
        scene.shapes.push_back(s);
    }
    for (const auto& s : scene.shapes) {
        Tensor mask = rasterize_shape(s, size);
        detail::draw_mask(scene.composed, mask, shape_color_values()[size_t(s.color)]);
        scene.segmentations.push_back(std::move(mask));
        scene.layout.object_boxes.push_back(s.box);
    }
    scene.layout.global_box = derive_global_box(scene.layout.object_boxes);

    scene.category = rng.bernoulli(0.5) ? kCategoryAction : kCategoryPositional;
    detail::CaptionBuilder cb;
    cb.append("A ");
    cb.append_span(0, scene.shapes[0].name());
    if (n_objects == 1) {
        cb.append(" resting on a gradient background.");
    } else {
        for (int i = 1; i < n_objects; ++i) {
            cb.append(scene.category == kCategoryAction ? " leaning toward a " : " next to a ");
            cb.append_span(i, scene.shapes[size_t(i)].name());
        }
        cb.append(" on a gradient background.");
    }
    scene.caption.text = cb.text;
    scene.caption.spans = cb.spans;
    return scene;
}

inline TrainingSample scene_to_sample(const ShapeScene& scene, int object_image_size = 32) {
    TrainingSample s;
    s.ground_truth = image_to_chw(scene.composed);
    s.background = image_to_chw(scene.background);
    s.layout = scene.layout;
    s.caption = scene.caption;
    s.segmentations = scene.segmentations;
    for (const auto& shape : scene.shapes) {
        const Box& b = shape.box;
        const int x0 = int(std::floor(b.x0 * scene.composed.width));
        const int y0 = int(std::floor(b.y0 * scene.composed.height));
        const int x1 = std::max(x0 + 1, int(std::ceil(b.x1 * scene.composed.width)));
        const int y1 = std::max(y0 + 1, int(std::ceil(b.y1 * scene.composed.height)));
        s.object_images.push_back(resize_letterbox(crop(scene.composed, x0, y0, x1, y1),
                                                   object_image_size, object_image_size));
    }
    return s;
}

inline std::vector<TrainingSample> make_shapes_dataset(uint64_t seed, int count, int size,
                                                       int object_image_size = 32) {
    Rng master(seed);
    std::vector<TrainingSample> out;
    for (int i = 0; i < count; ++i) {
        Rng ri = master.split("scene" + std::to_string(i));
        const int n = (i % 4 == 3) ? 1 : 2;
        out.push_back(scene_to_sample(make_shape_scene(ri, size, n), object_image_size));
    }
    return out;
}

// A short clip of one two-object scene whose shapes drift linearly; per-frame
// boxes track them exactly. Feeds the video-sourced builder.
inline VideoClip scene_to_clip(Rng& rng, int size, int n_frames) {
    if (n_frames < 2) throw std::invalid_argument("scene_to_clip: need >=2 frames");
    ShapeScene base = make_shape_scene(rng, size, 2);
    static const std::vector<std::string> relations = {"next to", "above", "beside"};
    VideoClip clip;
    clip.subject_name = base.shapes[0].name();
    clip.object_name = base.shapes[1].name();
    clip.relation = relations[size_t(rng.uniform_int(uint64_t(relations.size())))];
    std::array<double, 2> dx, dy;
    for (int i = 0; i < 2; ++i) {
        dx[size_t(i)] = (rng.uniform01() - 0.5) * 0.12;
        dy[size_t(i)] = (rng.uniform01() - 0.5) * 0.12;
    }
    for (int f = 0; f < n_frames; ++f) {
        const double t = double(f) / (n_frames - 1) - 0.5;
        Image frame = base.background;
        std::array<Box, 2> boxes;
        for (int i = 0; i < 2; ++i) {
            Box b = base.shapes[size_t(i)].box;
            double sx = dx[size_t(i)] * t, sy = dy[size_t(i)] * t;
            sx = std::clamp(sx, -b.x0, 1.0 - b.x1);  // keep the box inside the frame
            sy = std::clamp(sy, -b.y0, 1.0 - b.y1);
            b = {b.x0 + sx, b.y0 + sy, b.x1 + sx, b.y1 + sy};
            boxes[size_t(i)] = b;
            ShapeSpec moved = base.shapes[size_t(i)];
            moved.box = b;
            detail::draw_mask(frame, rasterize_shape(moved, size),
                              shape_color_values()[size_t(moved.color)]);
        }
        clip.frames.push_back(std::move(frame));
        clip.subject_boxes.push_back(boxes[0]);
        clip.object_boxes.push_back(boxes[1]);
    }
    return clip;
}

}  // namespace mcomp

#endif
