#ifndef MCOMP_IMAGE_HPP
#define MCOMP_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcomp/png_io.hpp"
#include "mcomp/tensor.hpp"

namespace mcomp {

// Float image in [0,1], channel-interleaved row-major. Used at the pipeline
// boundary (file IO, crops, resizes); model code works on [C,H,W] tensors.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;  // size = width*height*channels

    Image() = default;
    Image(int w, int h, int c) : width(w), height(h), channels(c),
        data(size_t(w) * h * c, 0.0) {}

    double& at(int x, int y, int c) {
        return data[(size_t(y) * width + x) * channels + c];
    }
    double at(int x, int y, int c) const {
        return data[(size_t(y) * width + x) * channels + c];
    }
};

inline Image image_from_png(const png::PngImage& p) {
    Image img(p.width, p.height, p.channels);
    for (size_t i = 0; i < p.pixels.size(); ++i) img.data[i] = p.pixels[i] / 255.0;
    return img;
}

inline png::PngImage image_to_png(const Image& img) {
    png::PngImage p;
    p.width = img.width;
    p.height = img.height;
    p.channels = img.channels;
    p.pixels.resize(img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::clamp(img.data[i], 0.0, 1.0);
        p.pixels[i] = uint8_t(std::lround(v * 255.0));
    }
    return p;
}

inline Image load_image(const std::string& path) {
    return image_from_png(png::read_file(path));
}

inline void save_image(const std::string& path, const Image& img) {
    png::write_file(path, image_to_png(img));
}

// [C,H,W] tensor in [0,1] <-> interleaved image.
inline Tensor image_to_chw(const Image& img) {
    Tensor t({img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(c, y, x) = img.at(x, y, c);
    return t;
}

inline Image chw_to_image(const Tensor& t) {
    if (t.ndim() != 3) throw std::invalid_argument("chw_to_image: need [C,H,W]");
    Image img(t.shape[2], t.shape[1], t.shape[0]);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) img.at(x, y, c) = t.at(c, y, x);
    return img;
}

// Bilinear sample with clamped coordinates.
inline double sample_bilinear(const Image& img, double x, double y, int c) {
    x = std::clamp(x, 0.0, double(img.width - 1));
    y = std::clamp(y, 0.0, double(img.height - 1));
    const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    const double fx = x - x0, fy = y - y0;
    return img.at(x0, y0, c) * (1 - fx) * (1 - fy) + img.at(x1, y0, c) * fx * (1 - fy) +
           img.at(x0, y1, c) * (1 - fx) * fy + img.at(x1, y1, c) * fx * fy;
}

// Plain bilinear resize to an exact target size.
inline Image resize_bilinear(const Image& img, int w, int h) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("resize: bad target size");
    Image out(w, h, img.channels);
    const double sx = double(img.width) / w, sy = double(img.height) / h;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double srcx = (x + 0.5) * sx - 0.5, srcy = (y + 0.5) * sy - 0.5;
            for (int c = 0; c < img.channels; ++c)
                out.at(x, y, c) = sample_bilinear(img, srcx, srcy, c);
        }
    return out;
}

// Resize preserving aspect ratio; the image is centered on a zero canvas.
inline Image resize_letterbox(const Image& img, int w, int h) {
    const double s = std::min(double(w) / img.width, double(h) / img.height);
    const int iw = std::max(1, int(std::lround(img.width * s)));
    const int ih = std::max(1, int(std::lround(img.height * s)));
    Image inner = resize_bilinear(img, iw, ih);
    Image out(w, h, img.channels);
    const int ox = (w - iw) / 2, oy = (h - ih) / 2;
    for (int y = 0; y < ih; ++y)
        for (int x = 0; x < iw; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(ox + x, oy + y, c) = inner.at(x, y, c);
    return out;
}

// Crop a pixel rectangle [x0,x1)×[y0,y1), clamped to bounds.
inline Image crop(const Image& img, int x0, int y0, int x1, int y1) {
    x0 = std::clamp(x0, 0, img.width);
    x1 = std::clamp(x1, 0, img.width);
    y0 = std::clamp(y0, 0, img.height);
    y1 = std::clamp(y1, 0, img.height);
    if (x1 <= x0 || y1 <= y0) throw std::invalid_argument("crop: empty region");
    Image out(x1 - x0, y1 - y0, img.channels);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(x - x0, y - y0, c) = img.at(x, y, c);
    return out;
}

}  // namespace mcomp

#endif
