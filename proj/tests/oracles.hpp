#pragma once

// Independent reference computations for the test suite. Everything here is
// written against the math, not against the library kernels, so a bug in a
// kernel and its backward rule cannot cancel out.

#include <cmath>
#include <deque>
#include <functional>
#include <vector>

#include "dcml/tensor.hpp"

namespace oracle {

// Central finite differences against the tape's analytic gradients.
// `build` must construct a scalar from the current leaf values; it is
// re-evaluated with perturbed leaves, so it may not cache tensors.
template <typename BuildFn>
double max_fd_rel_error(std::vector<dcml::Tensor<double>> leaves, BuildFn build,
                        double h = 1e-3) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        dcml::GradTape<double> tape;
        dcml::GradTape<double>::Scope scope(tape);
        auto root = build();
        tape.backward(root);
        for (auto& l : leaves) analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(size_t(l.numel()), 0.0));
        tape.clear();
    }
    for (auto& l : leaves) {
        l.zero_grad();
        l.set_requires_grad(false);
    }
    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            double orig = vals[i];
            vals[i] = orig + h;
            double up = build().item();
            vals[i] = orig - h;
            double dn = build().item();
            vals[i] = orig;
            double numeric = (up - dn) / (2.0 * h);
            double a = analytic[li][i];
            double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    for (auto& l : leaves) l.set_requires_grad(true);
    return worst;
}

// Direct six-loop convolution, channel-last layout, no tricks.
inline std::vector<double> conv2d_direct(const std::vector<double>& in, int H, int W, int Ci,
                                         const std::vector<double>& w, int Kh, int Kw, int Co,
                                         const std::vector<double>& bias, int stride, int pad) {
    int Ho = (H + 2 * pad - Kh) / stride + 1;
    int Wo = (W + 2 * pad - Kw) / stride + 1;
    std::vector<double> out(size_t(Ho) * Wo * Co, 0.0);
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
            for (int co = 0; co < Co; ++co) {
                double acc = bias.empty() ? 0.0 : bias[size_t(co)];
                for (int ky = 0; ky < Kh; ++ky)
                    for (int kx = 0; kx < Kw; ++kx)
                        for (int ci = 0; ci < Ci; ++ci) {
                            int iy = oy * stride + ky - pad;
                            int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += in[(size_t(iy) * W + size_t(ix)) * Ci + size_t(ci)] *
                                   w[((size_t(ky) * Kw + size_t(kx)) * Ci + size_t(ci)) * Co +
                                     size_t(co)];
                        }
                out[(size_t(oy) * Wo + size_t(ox)) * Co + size_t(co)] = acc;
            }
    return out;
}

// Pearson correlation, direct formula.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(n);
    mb /= double(n);
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < n; ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    return (cov / double(n)) / std::sqrt((va / double(n)) * (vb / double(n)));
}

// InfoNCE by direct summation over one row of raw logits, positive at column
// `label`.
inline double info_nce_row(const std::vector<double>& logits, size_t label) {
    double denom = 0;
    for (double v : logits) denom += std::exp(v);
    return -std::log(std::exp(logits[label]) / denom);
}

// Reference FIFO with explicit capacity, for bank equivalence tests.
template <typename E>
class ReferenceFifo {
public:
    explicit ReferenceFifo(size_t capacity) : capacity_(capacity) {}
    void push(const E& e) {
        items_.push_back(e);
        while (items_.size() > capacity_) items_.pop_front();
    }
    std::vector<E> snapshot() const { return {items_.begin(), items_.end()}; }

private:
    size_t capacity_;
    std::deque<E> items_;
};

// Area-under-ROC by rank statistic: P(score_pos > score_neg) + ties/2.
inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    double wins = 0;
    for (double p : pos)
        for (double q : neg) {
            if (p > q) wins += 1.0;
            else if (p == q) wins += 0.5;
        }
    return wins / (double(pos.size()) * double(neg.size()));
}

}  // namespace oracle
