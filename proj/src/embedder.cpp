#include "soap/embedder.hpp"

#include <cmath>
#include <stdexcept>

#include "soap/ops.hpp"

namespace soap {

void EmbedConfig::validate() const {
    if (dim == 0) throw std::invalid_argument("EmbedConfig: embedding dimension must be positive");
    if (!(input_scale > 0.0)) throw std::invalid_argument("EmbedConfig: input scale must be positive");
    if (stages.empty()) throw std::invalid_argument("EmbedConfig: at least one conv stage required");
    for (const EmbedStage& s : stages) {
        if (s.out_channels == 0 || s.kernel_extent % 2 == 0) {
            throw std::invalid_argument("EmbedConfig: stages need positive channels and odd kernels");
        }
    }
}

EmbedParams make_embed_params(const EmbedConfig& cfg, std::size_t in_channels,
                              std::size_t frames, Rng& rng) {
    cfg.validate();
    EmbedParams p;
    std::size_t cin = in_channels;
    for (const EmbedStage& s : cfg.stages) {
        Tensor w(Shape{s.out_channels, cin, s.kernel_extent, s.kernel_extent});
        init_uniform_fan_in(w, cin * s.kernel_extent * s.kernel_extent, rng);
        p.stage_w.push_back(std::move(w));
        p.stage_b.push_back(Tensor(Shape{s.out_channels}));
        cin = s.out_channels;
    }
    p.proj_w = Tensor(Shape{cin, cfg.dim});
    p.proj_b = Tensor(Shape{cfg.dim});
    init_uniform_fan_in(p.proj_w, cin, rng);
    if (cfg.pe_kind == PeKind::Learnable) {
        p.pe_table = Tensor(Shape{frames, cfg.dim});  // zero-initialized
    }
    return p;
}

Tensor position_embedding(std::size_t t, PeKind kind, std::size_t dim, std::size_t frames,
                          const Tensor* pe_table) {
    if (t < 1 || t > frames) {
        throw std::invalid_argument("position_embedding: frame index " + std::to_string(t) +
                                    " out of range [1," + std::to_string(frames) + "]");
    }
    if (kind == PeKind::Learnable) {
        if (!pe_table || pe_table->shape() != Shape{frames, dim}) {
            throw std::invalid_argument("position_embedding: learnable kind needs an F x D table");
        }
        Tensor row(Shape{dim});
        for (std::size_t j = 0; j < dim; ++j) row[j] = (*pe_table)[(t - 1) * dim + j];
        return row;
    }
    const double pos = static_cast<double>(t - 1);
    Tensor row(Shape{dim});
    for (std::size_t j = 0; j < dim; ++j) {
        const std::size_t pair = j / 2;
        const double freq = std::pow(10000.0, 2.0 * static_cast<double>(pair) / static_cast<double>(dim));
        const double angle = pos / freq;
        row[j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return row;
}

Tensor position_table(PeKind kind, std::size_t frames, std::size_t dim, const Tensor* pe_table) {
    if (kind == PeKind::Learnable) {
        if (!pe_table || pe_table->shape() != Shape{frames, dim}) {
            throw std::invalid_argument("position_table: learnable kind needs an F x D table");
        }
        return *pe_table;  // tracked copy; gradients flow into the table
    }
    Tensor table(Shape{frames, dim});
    for (std::size_t t = 1; t <= frames; ++t) {
        Tensor row = position_embedding(t, kind, dim, frames, nullptr);
        for (std::size_t j = 0; j < dim; ++j) table[(t - 1) * dim + j] = row[j];
    }
    return table;
}

Tensor embed_frames(const Tensor& clip, const EmbedParams& params, const EmbedConfig& cfg) {
    if (clip.rank() != 4) {
        throw std::invalid_argument("embed_frames: clip must be F x C x H x W, got " +
                                    shape_str(clip.shape()));
    }
    const std::size_t frames = clip.dim(0);
    if (params.stage_w.empty() || params.stage_w[0].dim(1) != clip.dim(1)) {
        throw std::invalid_argument("embed_frames: clip channels " + shape_str(clip.shape()) +
                                    " do not match backbone input " +
                                    (params.stage_w.empty() ? "[]" : shape_str(params.stage_w[0].shape())));
    }
    Tensor x = scale(clip, cfg.input_scale);  // frames act as the batch
    for (std::size_t s = 0; s < params.stage_w.size(); ++s) {
        x = isru(convolve(x, params.stage_w[s], 2, &params.stage_b[s]));
    }
    Tensor pooled = reduce_mean(x, {2, 3}, false);        // F x C_last
    Tensor feat = linear(pooled, params.proj_w, &params.proj_b);  // F x D
    Tensor pe = position_table(cfg.pe_kind, frames, cfg.dim,
                               cfg.pe_kind == PeKind::Learnable ? &params.pe_table : nullptr);
    return add(feat, pe);
}

}  // namespace soap
