#pragma once

#include "dcml/nn.hpp"

namespace dcml {

inline constexpr int kNumRaces = 3;

struct RaceConfig {
    BackboneConfig backbone;  // G
    // backbone.feature_dim is d3

    static RaceConfig desk_scale() {
        RaceConfig cfg;
        cfg.backbone = BackboneConfig::desk_scale();
        cfg.backbone.stage_blocks = {1, 1, 1};
        cfg.backbone.feature_dim = 128;
        return cfg;
    }
};

// Race feature extractor plus linear classifier head. Stands in for the
// frozen pretrained backbone: stage 1 trains it supervised, then freezes it
// for the rest of the pipeline.
template <typename T>
class RaceEncoder {
public:
    static RaceEncoder build(const RaceConfig& cfg, Rng& rng) {
        RaceEncoder e;
        e.cfg_ = cfg;
        e.backbone_ = Backbone<T>::build(cfg.backbone, rng, e.params_, "race.G");
        e.head_ = Linear<T>::init(cfg.backbone.feature_dim, kNumRaces, rng, e.params_, "race.head");
        return e;
    }

    const RaceConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    int feature_dim() const { return cfg_.backbone.feature_dim; }

    Tensor<T> encode(const Tensor<T>& image) const { return backbone_.forward(image); }
    Tensor<T> logits(const Tensor<T>& image) const { return head_.forward(encode(image)); }

    void freeze() {
        params_.set_requires_grad(false);
        frozen_ = true;
    }
    bool frozen() const { return frozen_; }

private:
    RaceConfig cfg_;
    ParamSet<T> params_;
    Backbone<T> backbone_;
    Linear<T> head_;
    bool frozen_ = false;
};

// Mean softmax cross-entropy over the three classes.
template <typename T>
Tensor<T> race_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.shape()[1] != kNumRaces)
        throw ShapeError("race_loss expects (batch x 3) logits");
    return cross_entropy(logits, labels);
}

}  // namespace dcml
