#ifndef MCOMP_CODEC_HPP
#define MCOMP_CODEC_HPP

#include <algorithm>
#include <functional>
#include <stdexcept>

#include "mcomp/tensor.hpp"

namespace mcomp {

// Image <-> latent codec port. The built-in binding is parameterless: 2x2
// average pooling down (with [0,1] -> [-1,1] rescale) and nearest-neighbor
// upsampling back. A learned autoencoder can be plugged through the same
// port.
struct LatentCodec {
    std::function<Tensor(const Tensor&)> encode;  // [C,H,W] in [0,1] -> [C,H/f,W/f] in [-1,1]
    std::function<Tensor(const Tensor&)> decode;  // inverse direction, clamped to [0,1]
    int factor = 2;

    static LatentCodec pooling(int factor = 2) {
        LatentCodec c;
        c.factor = factor;
        c.encode = [factor](const Tensor& img) {
            if (img.ndim() != 3) throw std::invalid_argument("codec encode: need [C,H,W]");
            const int C = img.shape[0], H = img.shape[1], W = img.shape[2];
            if (H % factor != 0 || W % factor != 0)
                throw std::invalid_argument("codec encode: size not divisible by factor");
            const int h = H / factor, w = W / factor;
            Tensor out({C, h, w});
            const double inv = 1.0 / double(factor * factor);
            for (int c0 = 0; c0 < C; ++c0)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        double s = 0.0;
                        for (int dy = 0; dy < factor; ++dy)
                            for (int dx = 0; dx < factor; ++dx)
                                s += img.at(c0, y * factor + dy, x * factor + dx);
                        out.at(c0, y, x) = s * inv * 2.0 - 1.0;
                    }
            return out;
        };
        c.decode = [factor](const Tensor& lat) {
            if (lat.ndim() != 3) throw std::invalid_argument("codec decode: need [C,h,w]");
            const int C = lat.shape[0], h = lat.shape[1], w = lat.shape[2];
            Tensor out({C, h * factor, w * factor});
            for (int c0 = 0; c0 < C; ++c0)
                for (int y = 0; y < h * factor; ++y)
                    for (int x = 0; x < w * factor; ++x)
                        out.at(c0, y, x) =
                            std::clamp((lat.at(c0, y / factor, x / factor) + 1.0) * 0.5, 0.0, 1.0);
            return out;
        };
        return c;
    }
};

}  // namespace mcomp

#endif
