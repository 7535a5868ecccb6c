#pragma once

#include <array>
#include <cstdlib>
#include <optional>
#include <unordered_map>

#include "dcml/io.hpp"
#include "dcml/ops.hpp"

namespace dcml {

// Ordered, named parameter registry. Networks register their tensors here;
// checkpointing, freezing, momentum mirroring, and checksums all walk this
// list in registration order.
template <typename T>
class ParamSet {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
        return entries_.back().second;
    }

    size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        out.reserve(entries_.size());
        for (const auto& [_, t] : entries_) out.push_back(t);
        return out;
    }

    // Aliases of every parameter whose name starts with `prefix`.
    std::vector<Tensor<T>> select(const std::string& prefix) const {
        std::vector<Tensor<T>> out;
        for (const auto& [name, t] : entries_)
            if (name.rfind(prefix, 0) == 0) out.push_back(t);
        return out;
    }

    int64_t count_elements() const {
        int64_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    void set_requires_grad(bool b) {
        for (auto& [_, t] : entries_) t.set_requires_grad(b);
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

    // FNV-1a over the float32 bit patterns, for freeze-contract checks.
    uint64_t checksum() const {
        uint64_t h = 0xCBF29CE484222325ULL;
        auto mix = [&h](const void* p, size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001B3ULL;
            }
        };
        for (const auto& [name, t] : entries_) {
            mix(name.data(), name.size());
            for (T v : t.values()) {
                float f = float(v);
                mix(&f, sizeof f);
            }
        }
        return h;
    }

    void save(const std::filesystem::path& path) const { write_dck1(path, entries_); }

    void load(const std::filesystem::path& path) {
        auto loaded = read_dck1<T>(path);
        std::unordered_map<std::string, Tensor<T>> by_name;
        for (auto& [name, t] : loaded) by_name.emplace(name, std::move(t));
        for (auto& [name, t] : entries_) {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw IoError("checkpoint missing parameter " + name);
            if (it->second.shape() != t.shape())
                throw IoError("checkpoint shape mismatch for " + name + ": file " +
                              shape_str(it->second.shape()) + " vs model " + shape_str(t.shape()));
            t.values() = it->second.values();
            t.zero_grad();
        }
    }

    // Copy values from an identically-shaped set (momentum mirror init).
    void copy_values_from(const ParamSet& other) {
        if (other.size() != size()) throw ShapeError("parameter set size mismatch");
        for (size_t i = 0; i < entries_.size(); ++i) {
            if (other.entries_[i].second.shape() != entries_[i].second.shape())
                throw ShapeError("parameter shape mismatch at " + entries_[i].first);
            entries_[i].second.values() = other.entries_[i].second.values();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Fan-in scaled uniform init (He bound, keeps activation scale stable
// through deep ReLU stacks), seeded.
template <typename T>
Tensor<T> init_weight(Shape shape, int fan_in, Rng& rng) {
    double s = std::sqrt(6.0 / double(fan_in));
    std::vector<T> v(size_t(shape_numel(shape)));
    for (auto& x : v) x = T(rng.uniform(-s, s));
    auto t = Tensor<T>::from_data(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    return t;
}

template <typename T>
Tensor<T> init_zeros(Shape shape) {
    auto t = Tensor<T>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

// ---- layers -----------------------------------------------------------------

template <typename T>
struct Linear {
    Tensor<T> w;  // in x out
    Tensor<T> b;  // out

    static Linear init(int in, int out, Rng& rng, ParamSet<T>& ps, const std::string& name) {
        Linear l;
        l.w = ps.add(name + ".w", init_weight<T>({in, out}, in, rng));
        l.b = ps.add(name + ".b", init_zeros<T>({out}));
        return l;
    }

    // x: (in) or (B x in)
    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.rank() == 1) {
            auto y = matmul(reshape(x, {1, x.shape()[0]}), w);
            return add(reshape(y, {w.shape()[1]}), b);
        }
        return add(matmul(x, w), b);
    }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> w;  // Kh x Kw x Ci x Co
    Tensor<T> b;  // Co
    int stride = 1;
    int pad = 0;

    static Conv2dLayer init(int kernel, int in_ch, int out_ch, int stride, int pad, Rng& rng,
                            ParamSet<T>& ps, const std::string& name) {
        Conv2dLayer c;
        c.w = ps.add(name + ".w", init_weight<T>({kernel, kernel, in_ch, out_ch},
                                                 kernel * kernel * in_ch, rng));
        c.b = ps.add(name + ".b", init_zeros<T>({out_ch}));
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

// 1x1 -> 3x3 -> 1x1 bottleneck with identity shortcut; a projection shortcut
// appears when channels change or the block downsamples. No batch norm.
template <typename T>
struct BottleneckBlock {
    Conv2dLayer<T> reduce;
    Conv2dLayer<T> conv3;
    Conv2dLayer<T> expand;
    std::optional<Conv2dLayer<T>> project;

    static BottleneckBlock init(int in_ch, int bottleneck, int out_ch, int stride, Rng& rng,
                                ParamSet<T>& ps, const std::string& name) {
        BottleneckBlock blk;
        blk.reduce = Conv2dLayer<T>::init(1, in_ch, bottleneck, 1, 0, rng, ps, name + ".reduce");
        blk.conv3 = Conv2dLayer<T>::init(3, bottleneck, bottleneck, stride, 1, rng, ps, name + ".conv3");
        blk.expand = Conv2dLayer<T>::init(1, bottleneck, out_ch, 1, 0, rng, ps, name + ".expand");
        if (in_ch != out_ch || stride != 1)
            blk.project = Conv2dLayer<T>::init(1, in_ch, out_ch, stride, 0, rng, ps, name + ".project");
        return blk;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        auto h = relu(reduce.forward(x));
        h = relu(conv3.forward(h));
        h = expand.forward(h);
        auto shortcut = project ? project->forward(x) : x;
        return relu(add(h, shortcut));
    }
};

// ---- backbone -----------------------------------------------------------------

// Three-stage bottleneck ResNet: 7x7 stride-1 stem, 3x3 stride-2 max pool,
// stages downsampling at their first block from stage two on, global average
// pool, and a linear head to feature_dim.
struct BackboneConfig {
    int in_channels = 3;
    int stem_channels = 64;
    std::array<int, 3> stage_blocks{10, 10, 10};
    std::array<int, 3> stage_bottleneck{16, 32, 64};
    std::array<int, 3> stage_channels{64, 128, 256};
    int feature_dim = 256;

    void validate() const {
        if (stem_channels < 1 || feature_dim < 1 || in_channels < 1)
            throw ConfigError("backbone: channel counts must be positive");
        for (int i = 0; i < 3; ++i)
            if (stage_blocks[size_t(i)] < 1 || stage_bottleneck[size_t(i)] < 1 ||
                stage_channels[size_t(i)] < 1)
                throw ConfigError("backbone: stage sizes must be positive");
    }

    static BackboneConfig paper_scale() { return BackboneConfig{}; }

    static BackboneConfig desk_scale() {
        BackboneConfig cfg;
        cfg.stem_channels = 8;
        cfg.stage_blocks = {2, 2, 2};
        cfg.stage_bottleneck = {4, 8, 16};
        cfg.stage_channels = {16, 32, 64};
        cfg.feature_dim = 64;
        return cfg;
    }
};

template <typename T>
class Backbone {
public:
    static Backbone build(const BackboneConfig& cfg, Rng& rng, ParamSet<T>& ps,
                          const std::string& name) {
        cfg.validate();
        Backbone net;
        net.cfg_ = cfg;
        net.stem_ = Conv2dLayer<T>::init(7, cfg.in_channels, cfg.stem_channels, 1, 3, rng, ps,
                                         name + ".stem");
        int in_ch = cfg.stem_channels;
        for (int s = 0; s < 3; ++s) {
            for (int b = 0; b < cfg.stage_blocks[size_t(s)]; ++b) {
                int stride = (s > 0 && b == 0) ? 2 : 1;
                net.blocks_.push_back(BottleneckBlock<T>::init(
                    in_ch, cfg.stage_bottleneck[size_t(s)], cfg.stage_channels[size_t(s)], stride,
                    rng, ps, name + ".s" + std::to_string(s) + ".b" + std::to_string(b)));
                in_ch = cfg.stage_channels[size_t(s)];
            }
            net.stage_ends_.push_back(net.blocks_.size());
        }
        net.head_ = Linear<T>::init(in_ch, cfg.feature_dim, rng, ps, name + ".head");
        return net;
    }

    // image HxWxC -> (feature_dim)
    Tensor<T> forward(const Tensor<T>& image) const {
        auto h = max_pool(relu(stem_.forward(image)), 3, 2, 1);
        for (const auto& blk : blocks_) h = blk.forward(h);
        return head_.forward(global_avg_pool(h));
    }

    // Spatial side lengths after the stem and after each stage, for the
    // shape-schedule contract.
    std::vector<int> spatial_schedule(const Tensor<T>& image) const {
        std::vector<int> sizes;
        auto h = max_pool(relu(stem_.forward(image)), 3, 2, 1);
        sizes.push_back(h.shape()[0]);
        size_t i = 0;
        for (size_t s = 0; s < stage_ends_.size(); ++s) {
            for (; i < stage_ends_[s]; ++i) h = blocks_[i].forward(h);
            sizes.push_back(h.shape()[0]);
        }
        return sizes;
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    Conv2dLayer<T> stem_;
    std::vector<BottleneckBlock<T>> blocks_;
    std::vector<size_t> stage_ends_;
    Linear<T> head_;
};

// ---- patches -----------------------------------------------------------------

struct PatchGeometry {
    int image_h = 64, image_w = 64;
    int patch_h = 48, patch_w = 48;
    std::array<std::pair<int, int>, 4> offsets{{{0, 0}, {0, 16}, {16, 0}, {16, 16}}};

    void validate() const {
        for (auto [oy, ox] : offsets) {
            if (oy < 0 || ox < 0 || oy + patch_h > image_h || ox + patch_w > image_w)
                throw ConfigError("patch at (" + std::to_string(oy) + "," + std::to_string(ox) +
                                  ") exceeds image bounds");
        }
        for (size_t i = 0; i < 4; ++i)
            for (size_t j = i + 1; j < 4; ++j) {
                // windows overlap by >= 1 pixel iff they overlap on both axes
                if (std::abs(offsets[i].first - offsets[j].first) >= patch_h ||
                    std::abs(offsets[i].second - offsets[j].second) >= patch_w)
                    throw ConfigError("patches " + std::to_string(i) + " and " + std::to_string(j) +
                                      " do not overlap");
            }
    }
};

// Copy the four sub-windows out of an HxWxC image. Patches are plain leaves;
// pixels carry no gradient.
template <typename T>
std::array<Tensor<T>, 4> extract_patches(const Tensor<T>& image, const PatchGeometry& geom) {
    geom.validate();
    if (image.rank() != 3 || image.shape()[0] != geom.image_h || image.shape()[1] != geom.image_w)
        throw ConfigError("image shape " + shape_str(image.shape()) +
                          " does not match patch geometry");
    int C = image.shape()[2];
    std::array<Tensor<T>, 4> out;
    for (size_t n = 0; n < 4; ++n) {
        auto [oy, ox] = geom.offsets[n];
        std::vector<T> v(size_t(geom.patch_h) * geom.patch_w * C);
        const T* src = image.values().data();
        for (int y = 0; y < geom.patch_h; ++y)
            std::memcpy(v.data() + size_t(y) * geom.patch_w * C,
                        src + (size_t(oy + y) * geom.image_w + size_t(ox)) * C,
                        sizeof(T) * size_t(geom.patch_w) * size_t(C));
        out[n] = Tensor<T>::from_data({geom.patch_h, geom.patch_w, C}, std::move(v));
    }
    return out;
}

// ---- optimizers ----------------------------------------------------------------

// Piecewise-constant rate: the entry with the largest boundary <= epoch wins.
struct LrSchedule {
    std::vector<std::pair<int, double>> boundaries{{0, 1e-3}};

    double rate_at(int epoch) const {
        if (boundaries.empty()) throw ConfigError("empty learning-rate schedule");
        double r = boundaries.front().second;
        for (const auto& [b, rate] : boundaries)
            if (b <= epoch) r = rate;
        return r;
    }
};

template <typename T>
void check_grads_finite(const std::vector<Tensor<T>>& params, const char* who) {
    for (const auto& p : params)
        if (p.has_grad() && !all_finite(p.grad()))
            throw TrainError(std::string(who) + ": non-finite gradient, step aborted");
}

template <typename T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<Tensor<T>> params, LrSchedule sched, double momentum)
        : params_(std::move(params)), sched_(sched), momentum_(momentum) {
        for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
    }

    // v <- mu v + g ; p <- p - lr v
    void step(int epoch) {
        check_grads_finite(params_, "sgd");
        T lr = T(sched_.rate_at(epoch));
        T mu = T(momentum_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto& v = velocity_[i];
            const T* g = p.has_grad() ? p.grad().data() : nullptr;
            auto& pv = p.values();
            for (size_t j = 0; j < v.size(); ++j) {
                v[j] = mu * v[j] + (g ? g[j] : T(0));
                pv[j] -= lr * v[j];
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    LrSchedule sched_;
    double momentum_;
    std::vector<std::vector<T>> velocity_;
};

template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, LrSchedule sched, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), sched_(sched), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    void step(int epoch) {
        check_grads_finite(params_, "adam");
        ++t_;
        T lr = T(sched_.rate_at(epoch));
        T b1 = T(beta1_), b2 = T(beta2_);
        T bc1 = T(1) - T(std::pow(beta1_, t_));
        T bc2 = T(1) - T(std::pow(beta2_, t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            const T* g = p.has_grad() ? p.grad().data() : nullptr;
            auto& pv = p.values();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < m.size(); ++j) {
                T gj = g ? g[j] : T(0);
                m[j] = b1 * m[j] + (T(1) - b1) * gj;
                v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
                T mh = m[j] / bc1;
                T vh = v[j] / bc2;
                pv[j] -= lr * mh / (std::sqrt(vh) + T(eps_));
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    LrSchedule sched_;
    double beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// ---- losses ----------------------------------------------------------------------

// Mean softmax cross-entropy with integer labels, via the log-sum-exp route.
// The per-row max is detached, which keeps the gradient exact while the
// exponentials stay bounded.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects (batch x classes) logits");
    int rows = logits.shape()[0], cols = logits.shape()[1];
    if (int(labels.size()) != rows)
        throw ShapeError("cross_entropy: batch size " + std::to_string(rows) + " vs " +
                         std::to_string(labels.size()) + " labels");
    std::vector<T> maxes(static_cast<size_t>(rows));
    std::vector<T> onehot(size_t(rows) * size_t(cols), T(0));
    for (int r = 0; r < rows; ++r) {
        if (labels[size_t(r)] < 0 || labels[size_t(r)] >= cols)
            throw ValueError("cross_entropy: label " + std::to_string(labels[size_t(r)]) +
                             " out of range [0," + std::to_string(cols) + ")");
        const T* row = logits.values().data() + size_t(r) * cols;
        maxes[size_t(r)] = *std::max_element(row, row + cols);
        onehot[size_t(r) * cols + size_t(labels[size_t(r)])] = T(1);
    }
    auto max_col = Tensor<T>::from_data({rows, 1}, std::move(maxes));
    auto onehot_t = Tensor<T>::from_data({rows, cols}, std::move(onehot));
    auto shifted = sub(logits, max_col);
    auto lse = add(log(row_sums(exp(shifted))), max_col);           // rows x 1
    auto picked = row_sums(mul(logits, onehot_t));                  // rows x 1
    return mean(sub(lse, picked));
}

}  // namespace dcml
