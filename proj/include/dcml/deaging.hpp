#pragma once

#include "dcml/fusion.hpp"

namespace dcml {

// Pearson correlation of two equal-length score vectors, built on the graph
// so its gradient comes from the tape. Healthy batches use the exact
// denominator; a near-constant input falls back to an epsilon-stabilized one
// and flags a warning.
inline constexpr double kVarianceEpsilon = 1e-8;

template <typename T>
Tensor<T> canonical_correlation(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.shape() != b.shape())
        throw ShapeError("canonical_correlation expects two equal-length vectors");
    if (a.shape()[0] < 2) throw ShapeError("canonical_correlation needs at least 2 samples");
    auto da = sub(a, mean(a));
    auto db = sub(b, mean(b));
    auto cov = mean(mul(da, db));
    auto va = variance(a);
    auto vb = variance(b);
    T eps = T(kVarianceEpsilon);
    Tensor<T> denom_sq;
    if (va.item() > eps && vb.item() > eps) {
        denom_sq = mul(va, vb);
    } else {
        push_warning("canonical_correlation: near-zero variance, epsilon-stabilized");
        denom_sq = mul(add(va, Tensor<T>::scalar(eps)), add(vb, Tensor<T>::scalar(eps)));
    }
    // cov / sqrt(d) as cov * exp(-log(d)/2); d > 0 by construction
    auto inv_root = exp(scale(log(denom_sq), T(-0.5)));
    return mul(cov, inv_root);
}

// |rho| with the sign folded in as a constant, differentiable a.e.
template <typename T>
Tensor<T> abs_correlation(const Tensor<T>& rho) {
    T s = rho.item() < T(0) ? T(-1) : T(1);
    return scale(rho, s);
}

struct DeagingConfig {
    BackboneConfig backbone;    // K
    int canonical_hidden = 32;  // widths inside C
    int num_identities = 0;

    static DeagingConfig desk_scale(int num_identities) {
        DeagingConfig cfg;
        cfg.backbone = BackboneConfig::desk_scale();
        cfg.backbone.stage_blocks = {1, 1, 1};
        cfg.backbone.feature_dim = 64;
        cfg.canonical_hidden = 32;
        cfg.num_identities = num_identities;
        return cfg;
    }
};

// Age-invariant feature model: backbone K, residual factorization R (two
// stacked FC-ReLU layers), canonical mapping C (FC-ReLU, FC-ReLU, FC to one
// scalar), and a linear identity head on the invariant component.
template <typename T>
class DeagingModel {
public:
    static DeagingModel build(const DeagingConfig& cfg, Rng& rng) {
        DeagingModel m;
        m.cfg_ = cfg;
        int d2 = cfg.backbone.feature_dim;
        m.backbone_ = Backbone<T>::build(cfg.backbone, rng, m.params_, "deaging.K");
        m.r1_ = Linear<T>::init(d2, d2, rng, m.params_, "deaging.R.fc1");
        m.r2_ = Linear<T>::init(d2, d2, rng, m.params_, "deaging.R.fc2");
        m.c1_ = Linear<T>::init(d2, cfg.canonical_hidden, rng, m.params_, "deaging.C.fc1");
        m.c2_ = Linear<T>::init(cfg.canonical_hidden, cfg.canonical_hidden, rng, m.params_,
                                "deaging.C.fc2");
        m.c3_ = Linear<T>::init(cfg.canonical_hidden, 1, rng, m.params_, "deaging.C.fc3");
        if (cfg.num_identities > 0)
            m.id_head_ = Linear<T>::init(d2, cfg.num_identities, rng, m.params_, "deaging.id_head");
        return m;
    }

    const DeagingConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    // Parameter groups for the two adversarial phases.
    std::vector<Tensor<T>> canonical_params() const { return params_.select("deaging.C."); }
    std::vector<Tensor<T>> feature_params() const {
        std::vector<Tensor<T>> out;
        for (const auto& [name, t] : params_.entries())
            if (name.rfind("deaging.C.", 0) != 0) out.push_back(t);
        return out;
    }

    Tensor<T> encode(const Tensor<T>& image) const { return backbone_.forward(image); }

    // f_age = R(f), f_id = f - R(f); the sum reconstructs f by construction.
    std::pair<Tensor<T>, Tensor<T>> factorize(const Tensor<T>& f) const {
        auto f_age = relu(r2_.forward(relu(r1_.forward(f))));
        auto f_id = sub(f, f_age);
        return {f_age, f_id};
    }

    // Scalar canonical projection per sample; f may be (d2) or (N x d2), the
    // result is (1) or (N x 1) flattened to (N).
    Tensor<T> canonical(const Tensor<T>& f) const {
        auto h = relu(c1_.forward(f));
        h = relu(c2_.forward(h));
        auto y = c3_.forward(h);
        if (y.rank() == 2) return reshape(y, {y.shape()[0]});
        return y;
    }

    Tensor<T> identity_logits(const Tensor<T>& f_id) const {
        if (!id_head_) throw ConfigError("deaging model built without identity head");
        return id_head_->forward(f_id);
    }

    struct Losses {
        Tensor<T> deaging;  // |rho|
        Tensor<T> identity;
        Tensor<T> total;
        double rho = 0.0;
    };

    // features: (N x d2) batch straight from the backbone.
    Losses losses(const Tensor<T>& features, const std::vector<int>& labels) const {
        if (features.rank() != 2 || features.shape()[0] < 2)
            throw ShapeError("deaging losses need a (batch x d2) matrix with batch >= 2");
        auto [f_age, f_id] = factorize(features);
        auto rho = canonical_correlation(canonical(f_id), canonical(f_age));
        Losses out;
        out.rho = double(rho.item());
        out.deaging = abs_correlation(rho);
        out.identity = cross_entropy(identity_logits(f_id), labels);
        out.total = add(out.deaging, out.identity);
        return out;
    }

private:
    DeagingConfig cfg_;
    ParamSet<T> params_;
    Backbone<T> backbone_;
    Linear<T> r1_, r2_;
    Linear<T> c1_, c2_, c3_;
    std::optional<Linear<T>> id_head_;
};

struct AdversarialSchedule {
    int warmup_steps = 100;  // C-only steps before the first alternation loop
    int max_steps = 20;      // per loop: canonical mapping maximizes |rho|
    int min_steps = 50;      // per loop: backbone + factorization minimize |rho| + L_id
    int loops = 20;
    int batch = 32;
    LrSchedule c_lr{{{0, 2e-3}}};
    LrSchedule kr_lr{{{0, 1e-3}}};
    // the identity head memorizes many classes and needs a faster rate than
    // the feature pathway it sits on
    LrSchedule head_lr{{{0, 8e-3}}};
    double momentum = 0.9;
};

struct DeagingLogRecord {
    std::string phase;
    int step = 0;
    double rho = 0.0;
    double l_id = 0.0;
};

namespace detail {

// Endless shuffled index stream; reshuffles when a pass completes.
class BatchSampler {
public:
    BatchSampler(size_t n, Rng rng) : rng_(rng) {
        order_.resize(n);
        for (size_t i = 0; i < n; ++i) order_[i] = int(i);
        cursor_ = n;
    }

    std::vector<int> next(int batch) {
        std::vector<int> out;
        out.reserve(size_t(batch));
        for (int i = 0; i < batch; ++i) {
            if (cursor_ >= order_.size()) {
                rng_.shuffle(order_.begin(), order_.end());
                cursor_ = 0;
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    Rng rng_;
    std::vector<int> order_;
    size_t cursor_ = 0;
};

}  // namespace detail

// Alternating adversarial training per the 20/50 recipe. During a max phase
// only the canonical mapping C updates (it climbs |rho| on features cached
// from the frozen backbone); during a min phase C is frozen bit-for-bit and
// the backbone, factorization, and identity head descend |rho| + L_id.
template <typename T>
std::vector<DeagingLogRecord> adversarial_train(DeagingModel<T>& model,
                                                const std::vector<Tensor<T>>& images,
                                                const std::vector<int>& labels,
                                                const AdversarialSchedule& sched, Rng rng) {
    if (images.size() != labels.size() || images.size() < 2)
        throw ConfigError("adversarial_train: need matching images/labels, at least 2");
    std::vector<DeagingLogRecord> log;
    auto c_params = model.canonical_params();
    auto kr_params = model.feature_params();
    std::vector<Tensor<T>> backbone_params, head_params;
    for (const auto& [name, t] : model.params().entries()) {
        if (name.rfind("deaging.id_head", 0) == 0) head_params.push_back(t);
        else if (name.rfind("deaging.C.", 0) != 0) backbone_params.push_back(t);
    }
    SgdMomentum<T> c_opt(c_params, sched.c_lr, sched.momentum);
    SgdMomentum<T> kr_opt(backbone_params, sched.kr_lr, sched.momentum);
    SgdMomentum<T> head_opt(head_params, sched.head_lr, sched.momentum);
    detail::BatchSampler sampler(images.size(), rng.fork(0xBA7C));

    auto set_grads = [&](bool c_on) {
        for (auto& p : c_params) p.set_requires_grad(c_on);
        for (auto& p : kr_params) p.set_requires_grad(!c_on);
    };

    // Cache (f_id, f_age) for every image under the current frozen K and R.
    int d2 = model.config().backbone.feature_dim;
    auto cache_factors = [&]() {
        std::vector<T> id_rows, age_rows;
        id_rows.reserve(images.size() * size_t(d2));
        age_rows.reserve(images.size() * size_t(d2));
        for (const auto& img : images) {
            auto [f_age, f_id] = model.factorize(model.encode(img));
            id_rows.insert(id_rows.end(), f_id.values().begin(), f_id.values().end());
            age_rows.insert(age_rows.end(), f_age.values().begin(), f_age.values().end());
        }
        int n = int(images.size());
        return std::pair{Tensor<T>::from_data({n, d2}, std::move(id_rows)),
                         Tensor<T>::from_data({n, d2}, std::move(age_rows))};
    };

    auto gather_rows = [&](const Tensor<T>& all, const std::vector<int>& idx) {
        std::vector<T> v;
        v.reserve(idx.size() * size_t(d2));
        for (int i : idx)
            v.insert(v.end(), all.values().begin() + size_t(i) * d2,
                     all.values().begin() + (size_t(i) + 1) * d2);
        return Tensor<T>::from_data({int(idx.size()), d2}, std::move(v));
    };

    int global_step = 0;
    auto run_max_phase = [&](int steps, int epoch, const char* phase) {
        set_grads(true);
        auto [all_id, all_age] = cache_factors();
        for (int s = 0; s < steps; ++s) {
            auto idx = sampler.next(sched.batch);
            auto f_id = gather_rows(all_id, idx);
            auto f_age = gather_rows(all_age, idx);
            std::vector<int> batch_labels;
            for (int i : idx) batch_labels.push_back(labels[size_t(i)]);
            GradTape<T> tape;
            typename GradTape<T>::Scope scope(tape);
            auto rho = canonical_correlation(model.canonical(f_id), model.canonical(f_age));
            auto loss = neg(abs_correlation(rho));  // ascend |rho|
            if (!std::isfinite(double(loss.item())))
                throw TrainError(std::string("deaging ") + phase + " step " +
                                 std::to_string(global_step) + ": non-finite loss");
            tape.backward(loss);
            tape.clear();
            c_opt.step(epoch);
            double l_id = double(
                cross_entropy(model.identity_logits(f_id), batch_labels).item());
            log.push_back({phase, global_step++, double(rho.item()), l_id});
            for (auto& p : c_params) p.zero_grad();
        }
    };

    auto run_min_phase = [&](int steps, int epoch) {
        set_grads(false);
        for (int s = 0; s < steps; ++s) {
            auto idx = sampler.next(sched.batch);
            std::vector<int> batch_labels;
            GradTape<T> tape;
            typename GradTape<T>::Scope scope(tape);
            std::vector<Tensor<T>> rows;
            for (int i : idx) {
                rows.push_back(reshape(model.encode(images[size_t(i)]), {1, d2}));
                batch_labels.push_back(labels[size_t(i)]);
            }
            auto features = concat(rows, 0);
            auto losses = model.losses(features, batch_labels);
            if (!std::isfinite(double(losses.total.item())))
                throw TrainError("deaging min-phase step " + std::to_string(global_step) +
                                 ": non-finite loss");
            tape.backward(losses.total);
            tape.clear();
            kr_opt.step(epoch);
            head_opt.step(epoch);
            log.push_back({"min", global_step++, losses.rho, double(losses.identity.item())});
            for (auto& p : kr_params) p.zero_grad();
        }
    };

    run_max_phase(sched.warmup_steps, 0, "warmup");
    for (int loop = 0; loop < sched.loops; ++loop) {
        run_max_phase(sched.max_steps, loop, "max");
        run_min_phase(sched.min_steps, loop);
    }
    model.params().set_requires_grad(true);
    return log;
}

}  // namespace dcml
