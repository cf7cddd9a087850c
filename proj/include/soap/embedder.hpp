#pragma once

#include <vector>

#include "soap/params.hpp"
#include "soap/rng.hpp"
#include "soap/tensor.hpp"

namespace soap {

enum class PeKind { Sinusoidal, Learnable };

struct EmbedStage {
    std::size_t out_channels;
    std::size_t kernel_extent;
};

// Per-frame backbone substitute: conv stages with a bounded odd activation
// (x/sqrt(1+x^2), saturating slowly enough that prior-gated contrasts on
// bright inputs survive), global spatial mean, linear projection to D.
struct EmbedConfig {
    std::size_t dim = 64;  // D
    PeKind pe_kind = PeKind::Sinusoidal;
    std::vector<EmbedStage> stages = {{8, 3}, {16, 3}};
    // input conditioning applied before the first stage; the prior fusion
    // sums four clip-scale terms, so 1/4 keeps pre-activations near unit scale
    double input_scale = 0.25;

    void validate() const;
};

struct EmbedParams {
    std::vector<Tensor> stage_w;  // (out, in, k, k)
    std::vector<Tensor> stage_b;  // (out)
    Tensor proj_w;                // (last_channels, D)
    Tensor proj_b;                // (D)
    Tensor pe_table;              // (F, D) when learnable, empty otherwise
};

EmbedParams make_embed_params(const EmbedConfig& cfg, std::size_t in_channels,
                              std::size_t frames, Rng& rng);

// position embedding for 1-based frame index t, 1 <= t <= frames
Tensor position_embedding(std::size_t t, PeKind kind, std::size_t dim, std::size_t frames,
                          const Tensor* pe_table = nullptr);

// the full F x D table added to frame features
Tensor position_table(PeKind kind, std::size_t frames, std::size_t dim,
                      const Tensor* pe_table = nullptr);

// clip (F x C x H x W) -> frame features (F x D); row t is backbone(frame_t)
// plus the position embedding of t
Tensor embed_frames(const Tensor& clip, const EmbedParams& params, const EmbedConfig& cfg);

}  // namespace soap
