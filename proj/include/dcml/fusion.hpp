#pragma once

#include "dcml/nn.hpp"

namespace dcml {

// Channel-gated feature fusion: squeeze (global average for spatial input,
// identity for pooled vectors), two FC layers with reduction ratio r, sigmoid
// gate, channel-wise rescale. One block serves both the patch-level gate (r1)
// and the modality-level gate (r2).
template <typename T>
struct FusionBlock {
    int input_dim = 0;
    int ratio = 1;
    bool relu_inner = true;  // Eq. prints only the outer sigmoid; inner switchable
    Linear<T> reduce;        // D -> ceil(D/r)
    Linear<T> expand;        // ceil(D/r) -> D
    std::optional<Linear<T>> projection;  // optional D -> d output head

    static int hidden_dim(int input_dim, int ratio) { return (input_dim + ratio - 1) / ratio; }

    static FusionBlock init(int input_dim, int ratio, std::optional<int> projection_dim,
                            bool relu_inner, Rng& rng, ParamSet<T>& ps, const std::string& name) {
        if (input_dim < 1 || ratio < 1) throw ConfigError("fusion: input_dim and ratio must be positive");
        FusionBlock blk;
        blk.input_dim = input_dim;
        blk.ratio = ratio;
        blk.relu_inner = relu_inner;
        int hidden = hidden_dim(input_dim, ratio);
        blk.reduce = Linear<T>::init(input_dim, hidden, rng, ps, name + ".reduce");
        blk.expand = Linear<T>::init(hidden, input_dim, rng, ps, name + ".expand");
        if (projection_dim)
            blk.projection = Linear<T>::init(input_dim, *projection_dim, rng, ps, name + ".proj");
        return blk;
    }
};

// All three intermediates are exposed so tests can recompute the gate from
// the pooled statistics and reproduce the output bitwise.
template <typename T>
struct FusionResult {
    Tensor<T> pooled;     // z
    Tensor<T> gate;       // s, in (0,1) per channel
    Tensor<T> gated;      // s * F, same shape as the input
    Tensor<T> projected;  // optional head applied to `gated`; aliases gated if absent
};

// Gate vector from channel statistics z.
template <typename T>
Tensor<T> fusion_gate(const Tensor<T>& z, const FusionBlock<T>& block) {
    auto h = block.reduce.forward(z);
    if (block.relu_inner) h = relu(h);
    return sigmoid(block.expand.forward(h));
}

// F may be a pooled vector (D), a batch of pooled vectors (B x D), or a
// spatial map (H x W x C with C == D). Pooled input takes the identity
// squeeze; spatial input is averaged per channel.
template <typename T>
FusionResult<T> fuse(const Tensor<T>& F, const FusionBlock<T>& block) {
    FusionResult<T> out;
    if (F.rank() == 3) {
        if (F.shape()[2] != block.input_dim)
            throw ShapeError("fuse: map channels " + std::to_string(F.shape()[2]) +
                             " != block dim " + std::to_string(block.input_dim));
        out.pooled = global_avg_pool(F);
        out.gate = fusion_gate(out.pooled, block);
        out.gated = channel_scale(F, out.gate);
    } else if (F.rank() == 1 || F.rank() == 2) {
        int width = F.rank() == 1 ? F.shape()[0] : F.shape()[1];
        if (width != block.input_dim)
            throw ShapeError("fuse: feature width " + std::to_string(width) + " != block dim " +
                             std::to_string(block.input_dim));
        out.pooled = F;  // already channel statistics
        out.gate = fusion_gate(out.pooled, block);
        out.gated = mul(F, out.gate);
    } else {
        throw ShapeError("fuse: unsupported rank " + std::to_string(F.rank()));
    }
    out.projected = block.projection ? block.projection->forward(out.gated) : out.gated;
    return out;
}

template <typename T>
Tensor<T> concat_features(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_features: empty list");
    int axis = parts[0].rank() == 2 ? 1 : 0;
    return concat(parts, axis);
}

// Concatenate the modality features in pipeline order and gate the result.
template <typename T>
FusionResult<T> fuse_modalities(const std::vector<Tensor<T>>& modalities,
                                const FusionBlock<T>& block) {
    return fuse(concat_features(modalities), block);
}

}  // namespace dcml
