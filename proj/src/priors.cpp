#include "soap/priors.hpp"

#include <stdexcept>

#include "soap/ops.hpp"

namespace soap {

namespace {

void check_clip(const char* op, const Tensor& clip, const SoapConfig& cfg) {
    const Shape want{cfg.frames, cfg.channels, cfg.height, cfg.width};
    if (clip.shape() != want) {
        throw std::invalid_argument(std::string(op) + ": clip shape " + shape_str(clip.shape()) +
                                    " does not match config " + shape_str(want));
    }
}

Tensor gated_residual(const Tensor& clip, const Tensor& gate) {
    return add(clip, mul(clip, gate));
}

}  // namespace

void SoapConfig::validate() const {
    if (frames == 0 || channels == 0 || height == 0 || width == 0) {
        throw std::invalid_argument("SoapConfig: all clip dimensions must be positive");
    }
    if (conv3d_extent % 2 == 0 || conv1d_extent % 2 == 0 || motion_conv_extent % 2 == 0) {
        throw std::invalid_argument("SoapConfig: kernel extents must be odd");
    }
    if (expanded_channels == 0) {
        throw std::invalid_argument("SoapConfig: expanded channel count must be positive");
    }
    if (tuple_sizes.empty()) {
        throw std::invalid_argument("SoapConfig: tuple size set must be non-empty");
    }
    std::size_t prev = 0;
    for (std::size_t t : tuple_sizes) {
        if (t == 0 || t >= frames) {
            throw std::invalid_argument("SoapConfig: tuple size " + std::to_string(t) +
                                        " must satisfy 1 <= T < frames (" + std::to_string(frames) + ")");
        }
        if (t <= prev) {
            throw std::invalid_argument("SoapConfig: tuple sizes must be strictly increasing");
        }
        prev = t;
    }
}

std::size_t SoapConfig::motion_rows() const {
    std::size_t x = 0;
    for (std::size_t t : tuple_sizes) x += (frames - t) * t;
    return x;
}

ThreeDimParams make_three_dim_params(const SoapConfig& cfg, Rng& rng) {
    const std::size_t k = cfg.conv3d_extent;
    ThreeDimParams p;
    p.conv_w = Tensor(Shape{1, 1, k, k, k});
    p.conv_b = Tensor(Shape{1});
    init_uniform_fan_in(p.conv_w, k * k * k, rng);
    return p;
}

ChannelWiseParams make_channel_wise_params(const SoapConfig& cfg, Rng& rng) {
    const std::size_t c = cfg.channels;
    const std::size_t cr = cfg.expanded_channels;
    const std::size_t k = cfg.conv1d_extent;
    ChannelWiseParams p;
    p.expand_w = Tensor(Shape{cr, c, 1, 1});
    p.expand_b = Tensor(Shape{cr});
    p.temporal_w = Tensor(Shape{cr, cr, k});
    p.temporal_b = Tensor(Shape{cr});
    p.restore_w = Tensor(Shape{c, cr, 1, 1});
    p.restore_b = Tensor(Shape{c});
    init_uniform_fan_in(p.expand_w, c, rng);
    init_uniform_fan_in(p.temporal_w, cr * k, rng);
    init_uniform_fan_in(p.restore_w, cr, rng);
    return p;
}

HybridMotionParams make_hybrid_motion_params(const SoapConfig& cfg, Rng& rng) {
    const std::size_t c = cfg.channels;
    const std::size_t k = cfg.motion_conv_extent;
    const std::size_t x = cfg.motion_rows();
    HybridMotionParams p;
    p.motion_w = Tensor(Shape{c, c, k, k});
    p.motion_b = Tensor(Shape{c});
    p.mix_w = Tensor(Shape{cfg.frames, x});
    p.mix_b = Tensor(Shape{cfg.frames});
    init_uniform_fan_in(p.motion_w, c * k * k, rng);
    init_uniform_fan_in(p.mix_w, x, rng);
    return p;
}

Tensor three_dim_gate(const Tensor& clip, const ThreeDimParams& p, const SoapConfig& cfg) {
    check_clip("three_dim_prior", clip, cfg);
    const std::size_t f = cfg.frames, h = cfg.height, w = cfg.width;
    // mean across channels, then view the F x 1 x H x W stack as one
    // single-channel 3-D volume for the spatio-temporal convolution
    Tensor mean_c = reduce_mean(clip, {1}, true);                 // F x 1 x H x W
    Tensor vol = reshape(mean_c, {1, 1, f, h, w});
    Tensor conv = convolve(vol, p.conv_w, 3, &p.conv_b);          // 1 x 1 x F x H x W
    Tensor pre = reshape(conv, {f, 1, h, w});
    return sigmoid(pre);
}

Tensor three_dim_prior(const Tensor& clip, const ThreeDimParams& p, const SoapConfig& cfg) {
    return gated_residual(clip, three_dim_gate(clip, p, cfg));
}

Tensor channel_wise_gate(const Tensor& clip, const ChannelWiseParams& p, const SoapConfig& cfg) {
    check_clip("channel_wise_prior", clip, cfg);
    const std::size_t f = cfg.frames;
    const std::size_t cr = cfg.expanded_channels;
    Tensor pooled = reduce_mean(clip, {2, 3}, true);              // F x C x 1 x 1
    Tensor expanded = convolve(pooled, p.expand_w, 2, &p.expand_b);  // F x Cr x 1 x 1
    // swap to Cr x F so the 1-D convolution runs along the frame axis
    Tensor rows = transpose(reshape(expanded, {f, cr}), {1, 0});  // Cr x F
    Tensor temporal = convolve(reshape(rows, {1, cr, f}), p.temporal_w, 1, &p.temporal_b);
    Tensor back = reshape(transpose(reshape(temporal, {cr, f}), {1, 0}), {f, cr, 1, 1});
    Tensor pre = convolve(back, p.restore_w, 2, &p.restore_b);    // F x C x 1 x 1
    return sigmoid(pre);
}

Tensor channel_wise_prior(const Tensor& clip, const ChannelWiseParams& p, const SoapConfig& cfg) {
    return gated_residual(clip, channel_wise_gate(clip, p, cfg));
}

std::vector<Tensor> sliding_windows(const Tensor& clip, std::size_t T) {
    if (clip.rank() != 4) {
        throw std::invalid_argument("sliding_windows: clip must be F x C x H x W, got " +
                                    shape_str(clip.shape()));
    }
    const std::size_t f = clip.dim(0);
    if (T < 1 || T >= f) {
        throw std::invalid_argument("sliding_windows: tuple size " + std::to_string(T) +
                                    " out of range for " + std::to_string(f) + " frames");
    }
    const std::size_t n_windows = f - T + 1;
    std::vector<Tensor> windows;
    windows.reserve(n_windows);
    for (std::size_t i = 0; i < n_windows; ++i) {
        windows.push_back(slice(clip, 0, i, i + T));
    }
    return windows;
}

Tensor motion_info_calc(const std::vector<Tensor>& windows, const Tensor& motion_w,
                        const Tensor& motion_b) {
    if (windows.size() < 2) {
        throw std::invalid_argument("motion_info_calc: need at least two windows, got " +
                                    std::to_string(windows.size()));
    }
    std::vector<Tensor> diffs;
    diffs.reserve(windows.size() - 1);
    for (std::size_t i = 0; i + 1 < windows.size(); ++i) {
        // frames of the later tuple form the convolution batch
        Tensor conv = convolve(windows[i + 1], motion_w, 2, &motion_b);
        diffs.push_back(sub(conv, windows[i]));
    }
    return concat(diffs, 0);
}

Tensor motion_concat(const Tensor& clip, const HybridMotionParams& p, const SoapConfig& cfg) {
    check_clip("hybrid_motion_prior", clip, cfg);
    // The motion convolution is frame-wise, so convolving every frame once and
    // windowing the result equals convolving each window separately, bit for
    // bit, at a fraction of the cost (windows overlap heavily).
    const std::size_t f = cfg.frames;
    Tensor conv_all = convolve(clip, p.motion_w, 2, &p.motion_b);
    std::vector<Tensor> diffs;
    for (std::size_t t : cfg.tuple_sizes) {
        const std::size_t n_windows = f - t + 1;
        for (std::size_t i = 0; i + 1 < n_windows; ++i) {
            diffs.push_back(sub(slice(conv_all, 0, i + 1, i + 1 + t), slice(clip, 0, i, i + t)));
        }
    }
    return concat(diffs, 0);
}

Tensor hybrid_motion_gate(const Tensor& clip, const HybridMotionParams& p, const SoapConfig& cfg) {
    const std::size_t f = cfg.frames, c = cfg.channels, h = cfg.height, w = cfg.width;
    Tensor motion = motion_concat(clip, p, cfg);                  // X x C x H x W
    // Z: flatten, mix the X rows down to F with one shared matrix, restore
    Tensor flat = flatten(motion);                                // X x (C*H*W)
    Tensor mixed = matmul(p.mix_w, flat);                         // F x (C*H*W)
    mixed = add(mixed, reshape(p.mix_b, {f, 1}));
    Tensor restored = reshape(mixed, {f, c, h, w});
    Tensor pooled = reduce_mean(restored, {2, 3}, true);          // F x C x 1 x 1
    return sigmoid(pooled);
}

Tensor hybrid_motion_prior(const Tensor& clip, const HybridMotionParams& p, const SoapConfig& cfg) {
    return gated_residual(clip, hybrid_motion_gate(clip, p, cfg));
}

PriorBundle fuse_priors(const Tensor& raw, const Tensor& p3d, const Tensor& pcw,
                        const Tensor& pmotion) {
    for (const Tensor* t : {&p3d, &pcw, &pmotion}) {
        if (t->shape() != raw.shape()) {
            throw std::invalid_argument("fuse_priors: shape mismatch " + shape_str(raw.shape()) +
                                        " vs " + shape_str(t->shape()));
        }
    }
    PriorBundle out;
    out.p3d = p3d;
    out.pcw = pcw;
    out.pmotion = pmotion;
    out.fused = add(add(add(p3d, pcw), pmotion), raw);
    return out;
}

}  // namespace soap
