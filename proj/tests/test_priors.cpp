#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "soap/gradcheck.hpp"
#include "soap/ops.hpp"
#include "soap/priors.hpp"

using namespace soap;

namespace {

Tensor random_clip(const SoapConfig& cfg, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(Shape{cfg.frames, cfg.channels, cfg.height, cfg.width});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

void zero_params(ThreeDimParams& p) {
    p.conv_w = Tensor::zeros(p.conv_w.shape());
    p.conv_b = Tensor::zeros(p.conv_b.shape());
}

void zero_params(ChannelWiseParams& p) {
    for (Tensor* t : {&p.expand_w, &p.expand_b, &p.temporal_w, &p.temporal_b, &p.restore_w, &p.restore_b}) {
        *t = Tensor::zeros(t->shape());
    }
}

void zero_params(HybridMotionParams& p) {
    for (Tensor* t : {&p.motion_w, &p.motion_b, &p.mix_w, &p.mix_b}) {
        *t = Tensor::zeros(t->shape());
    }
}

SoapConfig small_config() {
    SoapConfig cfg;
    cfg.frames = 8;
    cfg.channels = 3;
    cfg.height = 6;
    cfg.width = 6;
    return cfg;
}

// Brute-force motion pipeline, no shared code with the library: explicit
// window enumeration, its own padded 2-D convolution, manual concatenation.
std::vector<double> oracle_conv2d_frame(const Tensor& clip, std::size_t frame,
                                        const Tensor& w, const Tensor& b) {
    const std::size_t C = clip.dim(1), H = clip.dim(2), W = clip.dim(3);
    const std::size_t K = w.dim(2);
    const long pad = static_cast<long>(K / 2);
    std::vector<double> out(C * H * W, 0.0);
    for (std::size_t oc = 0; oc < C; ++oc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = b[oc];
                for (std::size_t ic = 0; ic < C; ++ic)
                    for (std::size_t ky = 0; ky < K; ++ky)
                        for (std::size_t kx = 0; kx < K; ++kx) {
                            const long yy = static_cast<long>(y + ky) - pad;
                            const long xx = static_cast<long>(x + kx) - pad;
                            if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 ||
                                xx >= static_cast<long>(W)) {
                                continue;
                            }
                            acc += clip.at({frame, ic, static_cast<std::size_t>(yy),
                                            static_cast<std::size_t>(xx)}) *
                                   w.at({oc, ic, ky, kx});
                        }
                out[(oc * H + y) * W + x] = acc;
            }
    return out;
}

// rows of the branch-concatenated motion tensor, as flat frame planes
std::vector<std::vector<double>> oracle_motion_rows(const Tensor& clip,
                                                    const std::vector<std::size_t>& tuples,
                                                    const Tensor& w, const Tensor& b) {
    const std::size_t F = clip.dim(0);
    const std::size_t plane = clip.dim(1) * clip.dim(2) * clip.dim(3);
    std::vector<std::vector<double>> rows;
    for (std::size_t T : tuples) {
        const std::size_t n_windows = F - T + 1;
        for (std::size_t i = 0; i + 1 < n_windows; ++i) {
            // difference of window i+1 (convolved) and window i, frame by frame
            for (std::size_t f = 0; f < T; ++f) {
                std::vector<double> conv = oracle_conv2d_frame(clip, i + 1 + f, w, b);
                for (std::size_t e = 0; e < plane; ++e) {
                    conv[e] -= clip.raw()[(i + f) * plane + e];
                }
                rows.push_back(std::move(conv));
            }
        }
    }
    return rows;
}

}  // namespace

TEST_CASE("config validation") {
    SoapConfig cfg = small_config();
    cfg.validate();
    CHECK(cfg.motion_rows() == 7 * 1 + 6 * 2 + 5 * 3);

    SoapConfig bad = cfg;
    bad.tuple_sizes = {1, 8};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.tuple_sizes = {2, 2};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.tuple_sizes = {};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("zero input is a fixed point of every module") {
    SoapConfig cfg = small_config();
    Rng rng(17);
    ThreeDimParams p3 = make_three_dim_params(cfg, rng);
    ChannelWiseParams pc = make_channel_wise_params(cfg, rng);
    HybridMotionParams pm = make_hybrid_motion_params(cfg, rng);
    // biases deliberately nonzero: the gate multiplies the input
    p3.conv_b = Tensor::full(p3.conv_b.shape(), 0.3);
    pc.restore_b = Tensor::full(pc.restore_b.shape(), -0.2);
    pm.mix_b = Tensor::full(pm.mix_b.shape(), 0.1);

    Tensor zero = Tensor::zeros({cfg.frames, cfg.channels, cfg.height, cfg.width});
    CHECK(max_abs_diff(three_dim_prior(zero, p3, cfg), zero) == 0.0);
    CHECK(max_abs_diff(channel_wise_prior(zero, pc, cfg), zero) == 0.0);
    CHECK(max_abs_diff(hybrid_motion_prior(zero, pm, cfg), zero) == 0.0);
    PriorBundle b = fuse_priors(zero, three_dim_prior(zero, p3, cfg),
                                channel_wise_prior(zero, pc, cfg),
                                hybrid_motion_prior(zero, pm, cfg));
    CHECK(max_abs_diff(b.fused, zero) == 0.0);
}

TEST_CASE("all-zero parameters give the sigma(0)=1/2 gate") {
    SoapConfig cfg = small_config();
    Rng rng(18);
    ThreeDimParams p3 = make_three_dim_params(cfg, rng);
    ChannelWiseParams pc = make_channel_wise_params(cfg, rng);
    HybridMotionParams pm = make_hybrid_motion_params(cfg, rng);
    zero_params(p3);
    zero_params(pc);
    zero_params(pm);

    Tensor clip = random_clip(cfg, rng);
    Tensor scaled = scale(clip, 1.5);
    CHECK(max_abs_diff(three_dim_prior(clip, p3, cfg), scaled) <= 1e-15);
    CHECK(max_abs_diff(channel_wise_prior(clip, pc, cfg), scaled) <= 1e-15);
    CHECK(max_abs_diff(hybrid_motion_prior(clip, pm, cfg), scaled) <= 1e-15);

    PriorBundle b = fuse_priors(clip, three_dim_prior(clip, p3, cfg),
                                channel_wise_prior(clip, pc, cfg),
                                hybrid_motion_prior(clip, pm, cfg));
    CHECK(max_abs_diff(b.fused, scale(clip, 5.5)) <= 1e-14);
}

TEST_CASE("gate shapes follow the module codomains") {
    SoapConfig cfg;
    cfg.frames = 8;
    cfg.channels = 3;
    cfg.height = 6;
    cfg.width = 5;
    Rng rng(19);
    Tensor clip = random_clip(cfg, rng);
    CHECK(three_dim_gate(clip, make_three_dim_params(cfg, rng), cfg).shape() == Shape{8, 1, 6, 5});
    CHECK(channel_wise_gate(clip, make_channel_wise_params(cfg, rng), cfg).shape() == Shape{8, 3, 1, 1});
    CHECK(hybrid_motion_gate(clip, make_hybrid_motion_params(cfg, rng), cfg).shape() == Shape{8, 3, 1, 1});
}

TEST_CASE("module outputs lie strictly between the clip and twice the clip") {
    SoapConfig cfg = small_config();
    Rng rng(20);
    for (int trial = 0; trial < 10; ++trial) {
        ThreeDimParams p3 = make_three_dim_params(cfg, rng);
        ChannelWiseParams pc = make_channel_wise_params(cfg, rng);
        HybridMotionParams pm = make_hybrid_motion_params(cfg, rng);
        Tensor clip = random_clip(cfg, rng, 0.05, 1.0);  // strictly positive
        for (const Tensor& out : {three_dim_prior(clip, p3, cfg),
                                  channel_wise_prior(clip, pc, cfg),
                                  hybrid_motion_prior(clip, pm, cfg)}) {
            for (std::size_t i = 0; i < out.size(); ++i) {
                CHECK(out[i] > clip[i]);
                CHECK(out[i] < 2.0 * clip[i]);
            }
        }
    }
}

TEST_CASE("sliding window counts and contents") {
    SoapConfig cfg = small_config();
    Rng rng(21);
    Tensor clip = random_clip(cfg, rng);
    CHECK(sliding_windows(clip, 3).size() == 6);

    SoapConfig cfg4 = cfg;
    cfg4.frames = 4;
    cfg4.tuple_sizes = {1, 2};
    Tensor clip4 = random_clip(cfg4, rng);
    auto singles = sliding_windows(clip4, 1);
    CHECK(singles.size() == 4);
    CHECK(max_abs_diff(concat(singles, 0), clip4) == 0.0);

    CHECK_THROWS_AS(sliding_windows(clip, 0), std::invalid_argument);
    CHECK_THROWS_AS(sliding_windows(clip, 8), std::invalid_argument);

    // brute-force index enumeration over random frame counts
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t F = 4 + rng.below(13);
        const std::size_t T = 1 + rng.below(F - 1);
        Tensor ramp(Shape{F, 1, 1, 1});
        for (std::size_t i = 0; i < F; ++i) ramp[i] = static_cast<double>(i);
        auto windows = sliding_windows(ramp, T);
        REQUIRE(windows.size() == F - T + 1);
        for (std::size_t i = 0; i < windows.size(); ++i) {
            for (std::size_t f = 0; f < T; ++f) {
                CHECK(windows[i][f] == static_cast<double>(i + f));
            }
        }
    }
}

TEST_CASE("motion information calculation") {
    SoapConfig cfg = small_config();
    Rng rng(22);

    Tensor delta = Tensor::zeros({cfg.channels, cfg.channels, 3, 3});
    for (std::size_t c = 0; c < cfg.channels; ++c) delta.at({c, c, 1, 1}) = 1.0;
    Tensor zero_bias = Tensor::zeros({cfg.channels});

    // static clip with the identity kernel: all differences vanish
    Tensor still(Shape{cfg.frames, cfg.channels, cfg.height, cfg.width});
    Rng rng2(23);
    const std::size_t plane = cfg.channels * cfg.height * cfg.width;
    for (std::size_t e = 0; e < plane; ++e) still[e] = rng2.u01();
    for (std::size_t f = 1; f < cfg.frames; ++f) {
        for (std::size_t e = 0; e < plane; ++e) still[f * plane + e] = still[e];
    }
    Tensor m = motion_info_calc(sliding_windows(still, 2), delta, zero_bias);
    CHECK(m.shape() == Shape{12, cfg.channels, cfg.height, cfg.width});
    CHECK(max_abs_diff(m, Tensor::zeros(m.shape())) == 0.0);

    // frame_t = t * ones: every difference slice is ones
    Tensor ramp(Shape{cfg.frames, cfg.channels, cfg.height, cfg.width});
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        for (std::size_t e = 0; e < plane; ++e) ramp[f * plane + e] = static_cast<double>(f);
    }
    Tensor mr = motion_info_calc(sliding_windows(ramp, 1), delta, zero_bias);
    CHECK(mr.shape() == Shape{7, cfg.channels, cfg.height, cfg.width});
    // interior pixels see the full identity kernel; borders too, delta kernel has one tap
    CHECK(max_abs_diff(mr, Tensor::ones(mr.shape())) <= 1e-15);

    auto one_window = sliding_windows(ramp, 1);
    one_window.resize(1);
    CHECK_THROWS_AS(motion_info_calc(one_window, delta, zero_bias), std::invalid_argument);
}

TEST_CASE("motion concat matches the brute-force oracle") {
    Rng rng(24);
    for (int trial = 0; trial < 20; ++trial) {
        SoapConfig cfg;
        cfg.frames = 4 + rng.below(5);
        cfg.channels = 1 + rng.below(3);
        cfg.height = 3 + rng.below(4);
        cfg.width = 3 + rng.below(4);
        cfg.tuple_sizes = {1, 2};
        if (cfg.frames > 5 && rng.u01() < 0.5) cfg.tuple_sizes.push_back(3);
        HybridMotionParams p = make_hybrid_motion_params(cfg, rng);
        Tensor clip = random_clip(cfg, rng);

        Tensor got = motion_concat(clip, p, cfg);
        auto rows = oracle_motion_rows(clip, cfg.tuple_sizes, p.motion_w, p.motion_b);
        REQUIRE(got.dim(0) == rows.size());
        REQUIRE(got.dim(0) == cfg.motion_rows());
        const std::size_t plane = cfg.channels * cfg.height * cfg.width;
        double worst = 0.0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t e = 0; e < plane; ++e) {
                worst = std::max(worst, std::fabs(got[r * plane + e] - rows[r][e]));
            }
        }
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("hybrid motion shapes and defaults") {
    SoapConfig cfg = small_config();
    Rng rng(25);
    HybridMotionParams p = make_hybrid_motion_params(cfg, rng);
    Tensor clip = random_clip(cfg, rng);
    CHECK(motion_concat(clip, p, cfg).dim(0) == 34);  // 7*1 + 6*2 + 5*3
    CHECK(hybrid_motion_prior(clip, p, cfg).shape() == clip.shape());
}

TEST_CASE("fusion") {
    SoapConfig cfg = small_config();
    Rng rng(26);
    Tensor raw = random_clip(cfg, rng);
    Tensor zero = Tensor::zeros(raw.shape());
    PriorBundle b = fuse_priors(raw, zero, zero, zero);
    CHECK(max_abs_diff(b.fused, raw) == 0.0);
    CHECK_THROWS_AS(fuse_priors(raw, zero, zero, Tensor::zeros({1, 1, 1, 1})), std::invalid_argument);
}

TEST_CASE("branch concatenation order is ascending and runs are bit-identical") {
    SoapConfig cfg = small_config();
    Rng rng_a(27), rng_b(27);
    HybridMotionParams pa = make_hybrid_motion_params(cfg, rng_a);
    HybridMotionParams pb = make_hybrid_motion_params(cfg, rng_b);
    Rng ca(28), cb(28);
    Tensor clip_a = random_clip(cfg, ca);
    Tensor clip_b = random_clip(cfg, cb);
    Tensor ma = motion_concat(clip_a, pa, cfg);
    Tensor mb = motion_concat(clip_b, pb, cfg);
    CHECK(max_abs_diff(ma, mb) == 0.0);

    // the first (F-1) rows come from the T=1 branch: single-frame differences
    Tensor delta = Tensor::zeros({cfg.channels, cfg.channels, 3, 3});
    for (std::size_t c = 0; c < cfg.channels; ++c) delta.at({c, c, 1, 1}) = 1.0;
    pa.motion_w = delta;
    pa.motion_b = Tensor::zeros({cfg.channels});
    Tensor m = motion_concat(clip_a, pa, cfg);
    Tensor first = slice(m, 0, 0, cfg.frames - 1);
    Tensor expect = sub(slice(clip_a, 0, 1, cfg.frames), slice(clip_a, 0, 0, cfg.frames - 1));
    CHECK(max_abs_diff(first, expect) <= 1e-15);
}

TEST_CASE("shape preservation across random configurations") {
    Rng rng(29);
    const std::vector<std::vector<std::size_t>> designs = {
        {1}, {2}, {3}, {4}, {1, 2}, {1, 3}, {1, 4}, {2, 3}, {2, 4}, {3, 4},
        {1, 2, 3}, {1, 2, 4}, {1, 3, 4}, {2, 3, 4}, {1, 2, 3, 4}};
    for (int trial = 0; trial < 30; ++trial) {
        SoapConfig cfg;
        cfg.frames = 5 + rng.below(12);
        cfg.channels = 1 + rng.below(3);
        cfg.height = 4 + rng.below(5);
        cfg.width = 4 + rng.below(5);
        cfg.expanded_channels = 4 + rng.below(12);
        cfg.tuple_sizes = designs[rng.below(designs.size())];
        if (cfg.tuple_sizes.back() >= cfg.frames) continue;
        cfg.validate();
        ThreeDimParams p3 = make_three_dim_params(cfg, rng);
        ChannelWiseParams pc = make_channel_wise_params(cfg, rng);
        HybridMotionParams pm = make_hybrid_motion_params(cfg, rng);
        Tensor clip = random_clip(cfg, rng);
        const Shape want = clip.shape();
        Tensor a = three_dim_prior(clip, p3, cfg);
        Tensor b = channel_wise_prior(clip, pc, cfg);
        Tensor c = hybrid_motion_prior(clip, pm, cfg);
        CHECK(a.shape() == want);
        CHECK(b.shape() == want);
        CHECK(c.shape() == want);
        CHECK(fuse_priors(clip, a, b, c).fused.shape() == want);
    }
}

TEST_CASE("module gradients pass the finite-difference check") {
    SoapConfig cfg;
    cfg.frames = 5;
    cfg.channels = 2;
    cfg.height = 4;
    cfg.width = 4;
    cfg.expanded_channels = 4;
    cfg.tuple_sizes = {1, 2};
    Rng rng(30);
    ThreeDimParams p3 = make_three_dim_params(cfg, rng);
    ChannelWiseParams pc = make_channel_wise_params(cfg, rng);
    HybridMotionParams pm = make_hybrid_motion_params(cfg, rng);
    Tensor clip = random_clip(cfg, rng);
    Tensor w = random_clip(cfg, rng);

    auto scalarize = [&](const Tensor& out) {
        return reduce_sum(mul(out, w), {0, 1, 2, 3}, false);
    };

    {
        ParamRegistry reg;
        reg.add("conv_w", p3.conv_w);
        reg.add("conv_b", p3.conv_b);
        auto report = finite_diff_check(reg, [&]() { return scalarize(three_dim_prior(clip, p3, cfg)); });
        CHECK(report.pass);
    }
    {
        ParamRegistry reg;
        reg.add("expand_w", pc.expand_w);
        reg.add("expand_b", pc.expand_b);
        reg.add("temporal_w", pc.temporal_w);
        reg.add("temporal_b", pc.temporal_b);
        reg.add("restore_w", pc.restore_w);
        reg.add("restore_b", pc.restore_b);
        auto report = finite_diff_check(reg, [&]() { return scalarize(channel_wise_prior(clip, pc, cfg)); });
        CHECK(report.pass);
    }
    {
        ParamRegistry reg;
        reg.add("motion_w", pm.motion_w);
        reg.add("motion_b", pm.motion_b);
        reg.add("mix_w", pm.mix_w);
        reg.add("mix_b", pm.mix_b);
        auto report = finite_diff_check(reg, [&]() { return scalarize(hybrid_motion_prior(clip, pm, cfg)); });
        CHECK(report.pass);
    }
}
