#ifndef MCOMP_SCHEDULE_HPP
#define MCOMP_SCHEDULE_HPP

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mcomp/tensor.hpp"

namespace mcomp {

// Forward-process schedule: betas and the cumulative alpha products used by
// both noising and sampling.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas_cumprod;

    static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (T <= 0) throw std::invalid_argument("schedule: T must be positive");
        NoiseSchedule s;
        s.T = T;
        s.betas.resize(size_t(T));
        s.alphas_cumprod.resize(size_t(T));
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            const double frac = T == 1 ? 0.0 : double(t) / double(T - 1);
            s.betas[size_t(t)] = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - s.betas[size_t(t)];
            s.alphas_cumprod[size_t(t)] = prod;
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (int(betas.size()) != T || int(alphas_cumprod.size()) != T)
            throw std::invalid_argument("schedule: length mismatch");
        double prev = 1.0;
        for (int t = 0; t < T; ++t) {
            const double b = betas[size_t(t)];
            if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("schedule: beta outside (0,1)");
            const double a = alphas_cumprod[size_t(t)];
            if (!(a > 0.0 && a < 1.0) || !(a < prev))
                throw std::invalid_argument("schedule: alpha products must strictly decrease in (0,1)");
            prev = a;
        }
    }
};

// x_t = sqrt(abar_t) * clean + sqrt(1 - abar_t) * eps
inline Tensor add_noise(const Tensor& clean, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.T) throw std::invalid_argument("add_noise: t out of range");
    check_same_shape(clean, eps, "add_noise");
    const double abar = sched.alphas_cumprod[size_t(t)];
    const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
    Tensor out = clean;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a * clean.data[i] + b * eps.data[i];
    return out;
}

}  // namespace mcomp

#endif
