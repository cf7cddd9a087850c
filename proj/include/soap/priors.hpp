#pragma once

#include <vector>

#include "soap/params.hpp"
#include "soap/rng.hpp"
#include "soap/tensor.hpp"

namespace soap {

// Static structure of the enhancement modules for clips of shape
// frames x channels x height x width.
struct SoapConfig {
    std::size_t frames = 8;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;

    std::size_t conv3d_extent = 3;        // spatio-temporal kernel, all three axes
    std::size_t expanded_channels = 16;   // C_r of the channel-wise module
    std::size_t conv1d_extent = 3;        // temporal kernel across frames
    std::vector<std::size_t> tuple_sizes = {1, 2, 3};  // window lengths, ascending
    std::size_t motion_conv_extent = 3;   // shared 2-D motion kernel

    void validate() const;

    // total motion rows after concatenating every branch: sum of (F-T)*T
    std::size_t motion_rows() const;
};

struct ThreeDimParams {
    Tensor conv_w;  // (1, 1, k, k, k)
    Tensor conv_b;  // (1)
};

struct ChannelWiseParams {
    Tensor expand_w, expand_b;      // (Cr, C, 1, 1), (Cr)
    Tensor temporal_w, temporal_b;  // (Cr, Cr, k), (Cr)
    Tensor restore_w, restore_b;    // (C, Cr, 1, 1), (C)
};

struct HybridMotionParams {
    Tensor motion_w, motion_b;  // (C, C, k, k), (C) -- shared across branches
    Tensor mix_w, mix_b;        // (F, X), (F)       -- the X -> F recombination
};

ThreeDimParams make_three_dim_params(const SoapConfig& cfg, Rng& rng);
ChannelWiseParams make_channel_wise_params(const SoapConfig& cfg, Rng& rng);
HybridMotionParams make_hybrid_motion_params(const SoapConfig& cfg, Rng& rng);

// Gated outputs of each module: clip + sigmoid(gate) * clip. The gate
// functions expose the sigmoid activations for shape and bound checks.
Tensor three_dim_gate(const Tensor& clip, const ThreeDimParams& p, const SoapConfig& cfg);   // F x 1 x H x W
Tensor three_dim_prior(const Tensor& clip, const ThreeDimParams& p, const SoapConfig& cfg);

Tensor channel_wise_gate(const Tensor& clip, const ChannelWiseParams& p, const SoapConfig& cfg);  // F x C x 1 x 1
Tensor channel_wise_prior(const Tensor& clip, const ChannelWiseParams& p, const SoapConfig& cfg);

// contiguous frame windows of length T, in temporal order; each T x C x H x W
std::vector<Tensor> sliding_windows(const Tensor& clip, std::size_t T);

// concat over i of conv(window_{i+1}) - window_i, shape ((N_w-1)*T) x C x H x W
Tensor motion_info_calc(const std::vector<Tensor>& windows, const Tensor& motion_w,
                        const Tensor& motion_b);

// all branches concatenated in ascending T order, shape X x C x H x W
Tensor motion_concat(const Tensor& clip, const HybridMotionParams& p, const SoapConfig& cfg);

Tensor hybrid_motion_gate(const Tensor& clip, const HybridMotionParams& p, const SoapConfig& cfg);  // F x C x 1 x 1
Tensor hybrid_motion_prior(const Tensor& clip, const HybridMotionParams& p, const SoapConfig& cfg);

struct PriorBundle {
    Tensor p3d, pcw, pmotion;  // gated module outputs
    Tensor fused;              // (p3d + pcw + pmotion) + raw
};

PriorBundle fuse_priors(const Tensor& raw, const Tensor& p3d, const Tensor& pcw,
                        const Tensor& pmotion);

}  // namespace soap
