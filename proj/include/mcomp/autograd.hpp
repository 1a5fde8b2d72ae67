#ifndef MCOMP_AUTOGRAD_HPP
#define MCOMP_AUTOGRAD_HPP

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mcomp/tensor.hpp"

namespace mcomp::ag {

// Reverse-mode autodiff over Tensor values. A forward pass builds a small
// graph of shared nodes; backward() runs the tape in reverse topological
// order. Double precision throughout so finite-difference checks can be held
// to tight tolerances.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor(value.shape);
            grad_alloc = true;
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var leaf(Tensor v, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Tensor& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }
    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

inline Var constant(Tensor v) { return Var::leaf(std::move(v), false); }
inline Var parameter(Tensor v) { return Var::leaf(std::move(v), true); }

namespace detail {

inline bool any_requires(const std::vector<Var>& parents) {
    for (const auto& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = any_requires(parents);
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Var(std::move(n));
}

}  // namespace detail

// Runs backward from a scalar root, accumulating grads into every node that
// requires them.
inline void backward(const Var& root) {
    if (root.value().numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.node().get(), 0});
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (!n->requires_grad || idx >= n->parents.size()) {
            order.push_back(n);
            stack.pop_back();
            continue;
        }
        Node* child = n->parents[idx++].get();
        if (child->requires_grad && !visited.count(child)) {
            visited.insert(child);
            stack.push_back({child, 0});
        }
    }
    root.node()->ensure_grad();
    root.node()->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->requires_grad && n->backprop) n->backprop(*n);
    }
}

/*---------------------------------- ops ----------------------------------*/

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b.value().data[i];
    auto an = a.node(), bn = b.node();
    return detail::make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) an->grad.data[i] += n.grad.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) bn->grad.data[i] += n.grad.data[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= b.value().data[i];
    auto an = a.node(), bn = b.node();
    return detail::make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) an->grad.data[i] += n.grad.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) bn->grad.data[i] -= n.grad.data[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b.value().data[i];
    auto an = a.node(), bn = b.node();
    return detail::make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                an->grad.data[i] += n.grad.data[i] * bn->value.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                bn->grad.data[i] += n.grad.data[i] * an->value.data[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.data) v *= s;
    auto an = a.node();
    return detail::make_node(std::move(out), {a}, [an, s](Node& n) {
        an->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) an->grad.data[i] += s * n.grad.data[i];
    });
}

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a.value().reshaped(shape);
    auto an = a.node();
    return detail::make_node(std::move(out), {a}, [an](Node& n) {
        an->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) an->grad.data[i] += n.grad.data[i];
    });
}

// x: [R,C] + b: [C], broadcast over rows.
inline Var add_bias_rows(const Var& x, const Var& b) {
    const int R = x.value().shape[0], C = x.value().shape[1];
    if (b.value().numel() != C) throw std::invalid_argument("add_bias_rows: bias size mismatch");
    Tensor out = x.value();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out.at(r, c) += b.value().at(c);
    auto xn = x.node(), bn = b.node();
    return detail::make_node(std::move(out), {x, b}, [xn, bn, R, C](Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) xn->grad.data[i] += n.grad.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) bn->grad.at(c) += n.grad.at(r, c);
        }
    });
}

// x: [C,H,W] + b: [C], broadcast over spatial dims.
inline Var add_bias_chw(const Var& x, const Var& b) {
    const int C = x.value().shape[0];
    const int HW = x.value().shape[1] * x.value().shape[2];
    if (b.value().numel() != C) throw std::invalid_argument("add_bias_chw: bias size mismatch");
    Tensor out = x.value();
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i) out.data[static_cast<size_t>(c) * HW + i] += b.value().at(c);
    auto xn = x.node(), bn = b.node();
    return detail::make_node(std::move(out), {x, b}, [xn, bn, C, HW](Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) xn->grad.data[i] += n.grad.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < HW; ++i)
                    bn->grad.at(c) += n.grad.data[static_cast<size_t>(c) * HW + i];
        }
    });
}

inline Var matmul(const Var& a, const Var& b) {
    const int m = a.value().shape[0], k = a.value().shape[1];
    if (b.value().shape[0] != k) throw std::invalid_argument("matmul: inner dim mismatch");
    const int n_ = b.value().shape[1];
    Tensor out({m, n_});
    matmul_into(a.value().data.data(), m, k, b.value().data.data(), n_, out.data.data(), false);
    auto an = a.node(), bn = b.node();
    return detail::make_node(std::move(out), {a, b}, [an, bn, m, k, n_](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B^T
            matmul_nt_into(n.grad.data.data(), m, n_, bn->value.data.data(), k,
                           an->grad.data.data(), true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += A^T * dC
            matmul_tn_into(an->value.data.data(), m, k, n.grad.data.data(), n_,
                           bn->grad.data.data(), true);
        }
    });
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Var matmul_nt(const Var& a, const Var& b) {
    const int m = a.value().shape[0], k = a.value().shape[1];
    if (b.value().shape[1] != k) throw std::invalid_argument("matmul_nt: inner dim mismatch");
    const int n_ = b.value().shape[0];
    Tensor out({m, n_});
    matmul_nt_into(a.value().data.data(), m, k, b.value().data.data(), n_, out.data.data(),
                   false);
    auto an = a.node(), bn = b.node();
    return detail::make_node(std::move(out), {a, b}, [an, bn, m, k, n_](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B
            matmul_into(n.grad.data.data(), m, n_, bn->value.data.data(), k,
                        an->grad.data.data(), true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += dC^T * A
            matmul_tn_into(n.grad.data.data(), m, n_, an->value.data.data(), k,
                           bn->grad.data.data(), true);
        }
    });
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
    return add_bias_rows(matmul(x, w), b);
}

inline Var slice_cols(const Var& a, int c0, int c1) {
    const int R = a.value().shape[0], C = a.value().shape[1];
    if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Tensor out({R, c1 - c0});
    for (int r = 0; r < R; ++r)
        for (int c = c0; c < c1; ++c) out.at(r, c - c0) = a.value().at(r, c);
    auto an = a.node();
    return detail::make_node(std::move(out), {a}, [an, R, c0, c1](Node& n) {
        an->ensure_grad();
        for (int r = 0; r < R; ++r)
            for (int c = c0; c < c1; ++c) an->grad.at(r, c) += n.grad.at(r, c - c0);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int R = parts[0].value().shape[0];
    int C = 0;
    for (const auto& p : parts) {
        if (p.value().shape[0] != R) throw std::invalid_argument("concat_cols: row mismatch");
        C += p.value().shape[1];
    }
    Tensor out({R, C});
    int off = 0;
    for (const auto& p : parts) {
        const int pc = p.value().shape[1];
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < pc; ++c) out.at(r, off + c) = p.value().at(r, c);
        off += pc;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_node(std::move(out), parts, [nodes, R](Node& n) {
        int off = 0;
        for (const auto& pn : nodes) {
            const int pc = pn->value.shape[1];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < pc; ++c) pn->grad.at(r, c) += n.grad.at(r, off + c);
            }
            off += pc;
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int C = parts[0].value().shape[1];
    int R = 0;
    for (const auto& p : parts) {
        if (p.value().shape[1] != C) throw std::invalid_argument("concat_rows: col mismatch");
        R += p.value().shape[0];
    }
    Tensor out({R, C});
    int off = 0;
    for (const auto& p : parts) {
        const int pr = p.value().shape[0];
        std::copy(p.value().data.begin(), p.value().data.end(),
                  out.data.begin() + static_cast<size_t>(off) * C);
        off += pr;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_node(std::move(out), parts, [nodes, C](Node& n) {
        int off = 0;
        for (const auto& pn : nodes) {
            const int pr = pn->value.shape[0];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int r = 0; r < pr; ++r)
                    for (int c = 0; c < C; ++c) pn->grad.at(r, c) += n.grad.at(off + r, c);
            }
            off += pr;
        }
    });
}

inline Var slice_rows(const Var& a, int r0, int r1) {
    const int R = a.value().shape[0], C = a.value().shape[1];
    if (r0 < 0 || r1 > R || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    Tensor out({r1 - r0, C});
    std::copy(a.value().data.begin() + static_cast<size_t>(r0) * C,
              a.value().data.begin() + static_cast<size_t>(r1) * C, out.data.begin());
    auto an = a.node();
    return detail::make_node(std::move(out), {a}, [an, r0, r1, C](Node& n) {
        an->ensure_grad();
        for (int r = r0; r < r1; ++r)
            for (int c = 0; c < C; ++c) an->grad.at(r, c) += n.grad.at(r - r0, c);
    });
}

// [C,H,W] -> [H*W, C]: pixels become rows for attention.
inline Var chw_to_pc(const Var& x) {
    const int C = x.value().shape[0], H = x.value().shape[1], W = x.value().shape[2];
    Tensor out({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int p = 0; p < H * W; ++p) out.at(p, c) = x.value().data[static_cast<size_t>(c) * H * W + p];
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, C, H, W](Node& n) {
        xn->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < H * W; ++p)
                xn->grad.data[static_cast<size_t>(c) * H * W + p] += n.grad.at(p, c);
    });
}

inline Var pc_to_chw(const Var& x, int C, int H, int W) {
    if (x.value().shape[0] != H * W || x.value().shape[1] != C)
        throw std::invalid_argument("pc_to_chw: shape mismatch");
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int p = 0; p < H * W; ++p) out.data[static_cast<size_t>(c) * H * W + p] = x.value().at(p, c);
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, C, H, W](Node& n) {
        xn->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < H * W; ++p)
                xn->grad.at(p, c) += n.grad.data[static_cast<size_t>(c) * H * W + p];
    });
}

inline Var concat_channels(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: empty");
    const int H = parts[0].value().shape[1], W = parts[0].value().shape[2];
    int C = 0;
    for (const auto& p : parts) {
        if (p.value().shape[1] != H || p.value().shape[2] != W)
            throw std::invalid_argument("concat_channels: spatial mismatch");
        C += p.value().shape[0];
    }
    Tensor out({C, H, W});
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
        off += p.value().data.size();
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_node(std::move(out), parts, [nodes](Node& n) {
        size_t off = 0;
        for (const auto& pn : nodes) {
            const size_t sz = pn->value.data.size();
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (size_t i = 0; i < sz; ++i) pn->grad.data[i] += n.grad.data[off + i];
            }
            off += sz;
        }
    });
}

inline Var silu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data) v = v / (1.0 + std::exp(-v));
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn](Node& n) {
        xn->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            const double v = xn->value.data[i];
            const double s = 1.0 / (1.0 + std::exp(-v));
            xn->grad.data[i] += n.grad.data[i] * (s + v * s * (1.0 - s));
        }
    });
}

// Row-wise softmax with an optional additive mask (entries 0 or -inf).
// Masked entries get exactly zero probability and zero gradient.
inline Var softmax_rows(const Var& x, const Tensor* additive_mask = nullptr) {
    const int R = x.value().shape[0], C = x.value().shape[1];
    if (additive_mask && (additive_mask->shape[0] != R || additive_mask->shape[1] != C))
        throw std::invalid_argument("softmax_rows: mask shape mismatch");
    Tensor out({R, C});
    for (int r = 0; r < R; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) {
            double v = x.value().at(r, c) + (additive_mask ? additive_mask->at(r, c) : 0.0);
            mx = std::max(mx, v);
        }
        if (!std::isfinite(mx))
            throw std::runtime_error("softmax_rows: fully masked row");
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            double v = x.value().at(r, c) + (additive_mask ? additive_mask->at(r, c) : 0.0);
            double e = std::isfinite(v) ? std::exp(v - mx) : 0.0;
            out.at(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < C; ++c) out.at(r, c) /= sum;
    }
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, R, C](Node& n) {
        xn->ensure_grad();
        for (int r = 0; r < R; ++r) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += n.grad.at(r, c) * n.value.at(r, c);
            for (int c = 0; c < C; ++c)
                xn->grad.at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
        }
    });
}

inline Var mean_all(const Var& x) {
    const double inv = 1.0 / double(x.value().numel());
    Tensor out = Tensor::scalar(x.value().sum() * inv);
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, inv](Node& n) {
        xn->ensure_grad();
        const double g = n.grad.data[0] * inv;
        for (int64_t i = 0; i < xn->grad.numel(); ++i) xn->grad.data[i] += g;
    });
}

inline Var sum_all(const Var& x) {
    Tensor out = Tensor::scalar(x.value().sum());
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn](Node& n) {
        xn->ensure_grad();
        const double g = n.grad.data[0];
        for (int64_t i = 0; i < xn->grad.numel(); ++i) xn->grad.data[i] += g;
    });
}

// Mean squared error over all elements.
inline Var mse(const Var& pred, const Var& target) {
    Var d = sub(pred, target);
    return mean_all(mul(d, d));
}

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const int Cin = x.value().shape[0], H = x.value().shape[1], W = x.value().shape[2];
    const int Cout = w.value().shape[0], kh = w.value().shape[2], kw = w.value().shape[3];
    if (w.value().shape[1] != Cin)
        throw std::invalid_argument("conv2d: channel mismatch between input and kernel");
    if (b.value().numel() != Cout) throw std::invalid_argument("conv2d: bias size mismatch");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    auto col = std::make_shared<Tensor>();
    im2col(x.value(), kh, kw, stride, pad, *col);
    Tensor out({Cout, Ho, Wo});
    matmul_into(w.value().data.data(), Cout, Cin * kh * kw, col->data.data(), Ho * Wo,
                out.data.data(), false);
    for (int c = 0; c < Cout; ++c)
        for (int i = 0; i < Ho * Wo; ++i)
            out.data[static_cast<size_t>(c) * Ho * Wo + i] += b.value().at(c);
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_node(
        std::move(out), {x, w, b},
        [xn, wn, bn, col, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo](Node& n) {
            const int K = Cin * kh * kw, P = Ho * Wo;
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int c = 0; c < Cout; ++c)
                    for (int i = 0; i < P; ++i)
                        bn->grad.at(c) += n.grad.data[static_cast<size_t>(c) * P + i];
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                // dW += dY * col^T
                matmul_nt_into(n.grad.data.data(), Cout, P, col->data.data(), K,
                               wn->grad.data.data(), true);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dcol = W^T * dY, then scatter back.
                Tensor dcol({K, P});
                matmul_tn_into(wn->value.data.data(), Cout, K, n.grad.data.data(), P,
                               dcol.data.data(), false);
                col2im_add(dcol, Cin, H, W, kh, kw, stride, pad, xn->grad);
            }
        });
}

inline Var upsample_nearest2(const Var& x) {
    const int C = x.value().shape[0], H = x.value().shape[1], W = x.value().shape[2];
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j) out.at(c, i, j) = x.value().at(c, i / 2, j / 2);
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, C, H, W](Node& n) {
        xn->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j) xn->grad.at(c, i / 2, j / 2) += n.grad.at(c, i, j);
    });
}

// GroupNorm over [C,H,W]: per group, normalize over (C/G)*H*W elements, then
// scale/shift per channel.
inline Var group_norm(const Var& x, const Var& gain, const Var& bias, int groups,
                      double eps = 1e-5) {
    const int C = x.value().shape[0], H = x.value().shape[1], W = x.value().shape[2];
    if (C % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
    if (gain.value().numel() != C || bias.value().numel() != C)
        throw std::invalid_argument("group_norm: param size mismatch");
    const int cg = C / groups, HW = H * W;
    const int gsize = cg * HW;
    auto mean = std::make_shared<std::vector<double>>(groups);
    auto istd = std::make_shared<std::vector<double>>(groups);
    Tensor out({C, H, W});
    for (int g = 0; g < groups; ++g) {
        double m = 0.0;
        for (int c = g * cg; c < (g + 1) * cg; ++c)
            for (int i = 0; i < HW; ++i) m += x.value().data[static_cast<size_t>(c) * HW + i];
        m /= gsize;
        double v = 0.0;
        for (int c = g * cg; c < (g + 1) * cg; ++c)
            for (int i = 0; i < HW; ++i) {
                double d = x.value().data[static_cast<size_t>(c) * HW + i] - m;
                v += d * d;
            }
        v /= gsize;
        (*mean)[g] = m;
        (*istd)[g] = 1.0 / std::sqrt(v + eps);
        for (int c = g * cg; c < (g + 1) * cg; ++c)
            for (int i = 0; i < HW; ++i) {
                double xh = (x.value().data[static_cast<size_t>(c) * HW + i] - m) * (*istd)[g];
                out.data[static_cast<size_t>(c) * HW + i] = xh * gain.value().at(c) + bias.value().at(c);
            }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_node(
        std::move(out), {x, gain, bias}, [xn, gn, bn, mean, istd, groups, cg, HW](Node& n) {
            const int gsize = cg * HW;
            for (int g = 0; g < groups; ++g) {
                const double m = (*mean)[g], is = (*istd)[g];
                if (gn->requires_grad || bn->requires_grad) {
                    if (gn->requires_grad) gn->ensure_grad();
                    if (bn->requires_grad) bn->ensure_grad();
                    for (int c = g * cg; c < (g + 1) * cg; ++c)
                        for (int i = 0; i < HW; ++i) {
                            const size_t idx = static_cast<size_t>(c) * HW + i;
                            const double xh = (xn->value.data[idx] - m) * is;
                            if (gn->requires_grad) gn->grad.at(c) += n.grad.data[idx] * xh;
                            if (bn->requires_grad) bn->grad.at(c) += n.grad.data[idx];
                        }
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    // dxh = dy * gain; dx = istd * (dxh - mean(dxh) - xh * mean(dxh*xh))
                    double s1 = 0.0, s2 = 0.0;
                    for (int c = g * cg; c < (g + 1) * cg; ++c)
                        for (int i = 0; i < HW; ++i) {
                            const size_t idx = static_cast<size_t>(c) * HW + i;
                            const double dxh = n.grad.data[idx] * gn->value.at(c);
                            const double xh = (xn->value.data[idx] - m) * is;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    s1 /= gsize;
                    s2 /= gsize;
                    for (int c = g * cg; c < (g + 1) * cg; ++c)
                        for (int i = 0; i < HW; ++i) {
                            const size_t idx = static_cast<size_t>(c) * HW + i;
                            const double dxh = n.grad.data[idx] * gn->value.at(c);
                            const double xh = (xn->value.data[idx] - m) * is;
                            xn->grad.data[idx] += is * (dxh - s1 - xh * s2);
                        }
                }
            }
        });
}

// LayerNorm over the last dim of [R,C] with per-column scale/shift.
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const int R = x.value().shape[0], C = x.value().shape[1];
    if (gain.value().numel() != C || bias.value().numel() != C)
        throw std::invalid_argument("layer_norm_rows: param size mismatch");
    auto mean = std::make_shared<std::vector<double>>(R);
    auto istd = std::make_shared<std::vector<double>>(R);
    Tensor out({R, C});
    for (int r = 0; r < R; ++r) {
        double m = 0.0;
        for (int c = 0; c < C; ++c) m += x.value().at(r, c);
        m /= C;
        double v = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = x.value().at(r, c) - m;
            v += d * d;
        }
        v /= C;
        (*mean)[r] = m;
        (*istd)[r] = 1.0 / std::sqrt(v + eps);
        for (int c = 0; c < C; ++c)
            out.at(r, c) = (x.value().at(r, c) - m) * (*istd)[r] * gain.value().at(c) +
                           bias.value().at(c);
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_node(std::move(out), {x, gain, bias},
                             [xn, gn, bn, mean, istd, R, C](Node& n) {
        for (int r = 0; r < R; ++r) {
        const double m = (*mean)[r], is = (*istd)[r];
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        double s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < C; ++c) {
            const double xh = (xn->value.at(r, c) - m) * is;
            const double dy = n.grad.at(r, c);
            if (gn->requires_grad) gn->grad.at(c) += dy * xh;
            if (bn->requires_grad) bn->grad.at(c) += dy;
            const double dxh = dy * gn->value.at(c);
            s1 += dxh;
            s2 += dxh * xh;
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            s1 /= C;
            s2 /= C;
            for (int c = 0; c < C; ++c) {
                const double xh = (xn->value.at(r, c) - m) * is;
                const double dxh = n.grad.at(r, c) * gn->value.at(c);
                xn->grad.at(r, c) += is * (dxh - s1 - xh * s2);
            }
        }
        }
    });
}

// Block-mean pooling along the query axis of an attention map [Pq, C] whose
// queries form an (h,w) grid, down to a (th,tw) grid.
inline Var pool_queries_mean(const Var& x, int h, int w, int th, int tw) {
    const int Pq = x.value().shape[0], C = x.value().shape[1];
    if (Pq != h * w) throw std::invalid_argument("pool_queries_mean: grid mismatch");
    if (h % th != 0 || w % tw != 0)
        throw std::invalid_argument("pool_queries_mean: target must divide source");
    const int bh = h / th, bw = w / tw;
    const double inv = 1.0 / double(bh * bw);
    Tensor out({th * tw, C});
    for (int ti = 0; ti < th; ++ti)
        for (int tj = 0; tj < tw; ++tj)
            for (int bi = 0; bi < bh; ++bi)
                for (int bj = 0; bj < bw; ++bj) {
                    const int src = (ti * bh + bi) * w + (tj * bw + bj);
                    const int dst = ti * tw + tj;
                    for (int c = 0; c < C; ++c) out.at(dst, c) += x.value().at(src, c) * inv;
                }
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, h, w, th, tw, C](Node& n) {
        xn->ensure_grad();
        const int bh = h / th, bw = w / tw;
        const double inv = 1.0 / double(bh * bw);
        for (int ti = 0; ti < th; ++ti)
            for (int tj = 0; tj < tw; ++tj)
                for (int bi = 0; bi < bh; ++bi)
                    for (int bj = 0; bj < bw; ++bj) {
                        const int src = (ti * bh + bi) * w + (tj * bw + bj);
                        const int dst = ti * tw + tj;
                        for (int c = 0; c < C; ++c)
                            xn->grad.at(src, c) += n.grad.at(dst, c) * inv;
                    }
    });
}

// Block-sum pooling along the key axis of a self-attention map [R, Pk]; the
// sum keeps each row a probability distribution over the coarse grid.
inline Var pool_keys_sum(const Var& x, int h, int w, int th, int tw) {
    const int R = x.value().shape[0], Pk = x.value().shape[1];
    if (Pk != h * w) throw std::invalid_argument("pool_keys_sum: grid mismatch");
    if (h % th != 0 || w % tw != 0)
        throw std::invalid_argument("pool_keys_sum: target must divide source");
    const int bh = h / th, bw = w / tw;
    Tensor out({R, th * tw});
    for (int r = 0; r < R; ++r)
        for (int ti = 0; ti < th; ++ti)
            for (int tj = 0; tj < tw; ++tj) {
                double s = 0.0;
                for (int bi = 0; bi < bh; ++bi)
                    for (int bj = 0; bj < bw; ++bj)
                        s += x.value().at(r, (ti * bh + bi) * w + (tj * bw + bj));
                out.at(r, ti * tw + tj) = s;
            }
    auto xn = x.node();
    return detail::make_node(std::move(out), {x}, [xn, h, w, th, tw, R](Node& n) {
        xn->ensure_grad();
        const int bh = h / th, bw = w / tw;
        for (int r = 0; r < R; ++r)
            for (int ti = 0; ti < th; ++ti)
                for (int tj = 0; tj < tw; ++tj)
                    for (int bi = 0; bi < bh; ++bi)
                        for (int bj = 0; bj < bw; ++bj)
                            xn->grad.at(r, (ti * bh + bi) * w + (tj * bw + bj)) +=
                                n.grad.at(r, ti * tw + tj);
    });
}

}  // namespace mcomp::ag

#endif
