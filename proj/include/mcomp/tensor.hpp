#ifndef MCOMP_TENSOR_HPP
#define MCOMP_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcomp/rng.hpp"

namespace mcomp {

// Dense row-major tensor of doubles. Value semantics; shapes are small so the
// bookkeeping cost is irrelevant next to the arithmetic.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<size_t>(numel_of(shape)) != data.size())
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = stddev * rng.normal();
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }

    double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    double& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    double& at(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    double at(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel()) throw std::invalid_argument("reshape: element count mismatch");
        return Tensor(std::move(s), data);
    }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }

    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::fabs(v));
        return m;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenRowMat>;
using ConstMapMat = Eigen::Map<const EigenRowMat>;

// C[m,n] (+)= A[m,k] * B[k,n], row-major buffers.
inline void matmul_into(const double* a, int m, int k, const double* b, int n, double* c,
                        bool accumulate) {
    ConstMapMat A(a, m, k), B(b, k, n);
    MapMat C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C[m,n] (+)= A[m,k] * B[n,k]^T.
inline void matmul_nt_into(const double* a, int m, int k, const double* b, int n, double* c,
                           bool accumulate) {
    ConstMapMat A(a, m, k), B(b, n, k);
    MapMat C(c, m, n);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C[k,n] (+)= A[m,k]^T * B[m,n].
inline void matmul_tn_into(const double* a, int m, int k, const double* b, int n, double* c,
                           bool accumulate) {
    ConstMapMat A(a, m, k), B(b, m, n);
    MapMat C(c, k, n);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// im2col for 3x3-style convolutions on CHW tensors.
// x: [C,H,W] -> col: [C*kh*kw, Ho*Wo] with Ho = (H+2p-kh)/st+1.
inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad, Tensor& col) {
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    col = Tensor({C * kh * kw, Ho * Wo});
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const int row = (c * kh + ki) * kw + kj;
                double* dst = &col.data[static_cast<size_t>(row) * Ho * Wo];
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride + ki - pad;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int jj = oj * stride + kj - pad;
                        dst[oi * Wo + oj] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                                ? x.at(c, ii, jj)
                                                : 0.0;
                    }
                }
            }
}

// Transpose of im2col: scatter-add col gradients back to the input layout.
inline void col2im_add(const Tensor& col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, Tensor& x) {
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const int row = (c * kh + ki) * kw + kj;
                const double* src = &col.data[static_cast<size_t>(row) * Ho * Wo];
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= H) continue;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int jj = oj * stride + kj - pad;
                        if (jj < 0 || jj >= W) continue;
                        x.at(c, ii, jj) += src[oi * Wo + oj];
                    }
                }
            }
}

}  // namespace mcomp

#endif
