#pragma once

#include "dcml/config.hpp"
#include "dcml/fusion.hpp"

namespace dcml {

struct EncoderConfig {
    BackboneConfig backbone;  // shared patch backbone, feature_dim = c
    PatchGeometry geometry;
    int r1 = 4;
    int r2 = 2;
    bool relu_inner = true;
    int embed_dim = 128;
    int deaging_dim = 0;  // d2 when the de-aging modality is fused, else 0
    int race_dim = 0;     // d3 when the race modality is fused, else 0
    ModalitySet modalities;

    int patch_concat_dim() const { return 4 * backbone.feature_dim; }
    int modality_concat_dim() const {
        return patch_concat_dim() + (modalities.deaging ? deaging_dim : 0) +
               (modalities.race ? race_dim : 0);
    }

    static EncoderConfig from_run(const RunConfig& cfg, ModalitySet mods) {
        EncoderConfig e;
        e.backbone = cfg.patch_backbone;
        e.geometry = cfg.patches;
        e.r1 = cfg.fusion.r1;
        e.r2 = cfg.fusion.r2;
        e.relu_inner = cfg.fusion.relu_inner;
        e.embed_dim = cfg.fusion.embed_dim;
        e.deaging_dim = cfg.deaging.backbone.feature_dim;
        e.race_dim = cfg.race.backbone.feature_dim;
        e.modalities = mods;
        return e;
    }
};

// The trainable query/key pathway: shared patch backbone over the four
// patches, patch-level gate (r1), modality concatenation, modality-level
// gate (r2) with a projection head, unit-norm output.
template <typename T>
class DcmlEncoder {
public:
    static DcmlEncoder build(const EncoderConfig& cfg, Rng& rng, const std::string& name = "dcml") {
        DcmlEncoder enc;
        enc.cfg_ = cfg;
        enc.backbone_ = Backbone<T>::build(cfg.backbone, rng, enc.params_, name + ".patch");
        enc.patch_fusion_ = FusionBlock<T>::init(cfg.patch_concat_dim(), cfg.r1, std::nullopt,
                                                 cfg.relu_inner, rng, enc.params_, name + ".fuse1");
        enc.modality_fusion_ =
            FusionBlock<T>::init(cfg.modality_concat_dim(), cfg.r2, cfg.embed_dim, cfg.relu_inner,
                                 rng, enc.params_, name + ".fuse2");
        return enc;
    }

    const EncoderConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    int embed_dim() const { return cfg_.embed_dim; }

    // f_id / f_race come from the frozen modality extractors; pass nullptr
    // for modalities the configuration excludes.
    Tensor<T> embed(const Tensor<T>& image, const Tensor<T>* f_id, const Tensor<T>* f_race) const {
        auto patches = extract_patches(image, cfg_.geometry);
        std::vector<Tensor<T>> units;
        units.reserve(4);
        for (const auto& p : patches) units.push_back(backbone_.forward(p));
        auto face = fuse(concat_features(units), patch_fusion_).gated;

        std::vector<Tensor<T>> parts{face};
        if (cfg_.modalities.deaging) {
            if (!f_id) throw ConfigError("encoder expects a de-aging feature for this modality set");
            parts.push_back(*f_id);
        }
        if (cfg_.modalities.race) {
            if (!f_race) throw ConfigError("encoder expects a race feature for this modality set");
            parts.push_back(*f_race);
        }
        return l2_normalize(fuse_modalities(parts, modality_fusion_).projected);
    }

private:
    EncoderConfig cfg_;
    ParamSet<T> params_;
    Backbone<T> backbone_;
    FusionBlock<T> patch_fusion_;
    FusionBlock<T> modality_fusion_;
};

}  // namespace dcml
