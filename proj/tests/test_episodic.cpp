#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "soap/episodic.hpp"

using namespace soap;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / ("soap_test_" + leaf);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

SyntheticSpec tiny_spec() {
    SyntheticSpec spec;
    spec.seed = 99;
    spec.clips_per_class = 8;
    spec.clip_length = 12;
    spec.channels = 1;
    spec.height = 8;
    spec.width = 8;
    spec.classes = {
        {"right", MotionKind::TranslateRight, 1.0, 3, 0.1},
        {"left", MotionKind::TranslateLeft, 1.0, 3, 0.1},
        {"down", MotionKind::TranslateDown, 1.0, 3, 0.1},
        {"still", MotionKind::StaticTextured, 0.0, 3, 0.1},
    };
    return spec;
}

// patch pixel set of one frame; the patch texture lives in [0.5, 1], the
// background below the configured noise amplitude
std::set<std::pair<std::size_t, std::size_t>> object_pixels(const Tensor& frames, std::size_t t) {
    std::set<std::pair<std::size_t, std::size_t>> out;
    const std::size_t H = frames.dim(2), W = frames.dim(3);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            if (frames.at({t, 0, y, x}) >= 0.5) out.insert({y, x});
        }
    }
    return out;
}

Tensor ramp_frames(std::size_t L) {
    Tensor t(Shape{L, 1, 2, 2});
    for (std::size_t f = 0; f < L; ++f) {
        for (std::size_t e = 0; e < 4; ++e) t[f * 4 + e] = static_cast<double>(f);
    }
    return t;
}

}  // namespace

TEST_CASE("clip files round-trip byte-identically") {
    fs::path dir = fresh_dir("clipio");
    Rng rng(1);
    Tensor frames(Shape{3, 2, 4, 4});
    for (std::size_t i = 0; i < frames.size(); ++i) frames[i] = rng.u01();

    write_clip(dir / "a.bin", frames);
    Tensor back = read_clip(dir / "a.bin");
    CHECK(back.shape() == frames.shape());
    write_clip(dir / "b.bin", back);
    CHECK(file_bytes(dir / "a.bin") == file_bytes(dir / "b.bin"));

    // float32 storage: values agree to single precision
    CHECK(max_abs_diff(back, frames) <= 1e-7);

    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOTACLIP" << std::string(32, '\0');
    bad.close();
    CHECK_THROWS_AS(read_clip(dir / "bad.bin"), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("dataset generation is deterministic and listed in the manifest") {
    SyntheticSpec spec = tiny_spec();
    fs::path a = fresh_dir("gen_a");
    fs::path b = fresh_dir("gen_b");
    generate_synthetic_dataset(spec, a);
    generate_synthetic_dataset(spec, b);
    CHECK(file_bytes(a / "manifest.json") == file_bytes(b / "manifest.json"));
    CHECK(file_bytes(a / "right/clip_0003.bin") == file_bytes(b / "right/clip_0003.bin"));
    CHECK(file_bytes(a / "still/clip_0000.bin") == file_bytes(b / "still/clip_0000.bin"));

    Dataset ds = Dataset::load(a);
    CHECK(ds.class_count() == 4);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(ds.class_at(c).clips.size() == spec.clips_per_class);
        for (const auto& clip : ds.class_at(c).clips) {
            CHECK(fs::exists(a / clip.source_id));
        }
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("zero speed and static classes give constant clips") {
    SyntheticSpec spec = tiny_spec();
    spec.classes[0].speed = 0.0;  // moving kind, zero speed
    Tensor frozen = synthesize_clip(spec, 0, 2);
    Tensor still = synthesize_clip(spec, 3, 1);
    const std::size_t plane = spec.channels * spec.height * spec.width;
    for (const Tensor* t : {&frozen, &still}) {
        for (std::size_t f = 1; f < spec.clip_length; ++f) {
            for (std::size_t e = 0; e < plane; ++e) {
                CHECK((*t)[f * plane + e] == (*t)[e]);
            }
        }
    }
}

TEST_CASE("right-moving clips shift the patch by the speed each frame") {
    SyntheticSpec spec = tiny_spec();
    Tensor clip = synthesize_clip(spec, 0, 5);
    const std::size_t W = spec.width;
    for (std::size_t t = 0; t + 1 < spec.clip_length; ++t) {
        auto now = object_pixels(clip, t);
        auto next = object_pixels(clip, t + 1);
        REQUIRE(now.size() == 9);  // 3x3 patch
        std::set<std::pair<std::size_t, std::size_t>> shifted;
        for (const auto& [y, x] : now) shifted.insert({y, (x + 1) % W});
        CHECK(shifted == next);
        // the texture travels with the patch
        for (const auto& [y, x] : now) {
            for (std::size_t c = 0; c < spec.channels; ++c) {
                CHECK(clip.at({t, c, y, x}) == clip.at({t + 1, c, y, (x + 1) % W}));
            }
        }
    }
}

TEST_CASE("uniform sparse sampling picks segment centers during evaluation") {
    Rng rng(7);
    Tensor frames = ramp_frames(16);
    Tensor out = uniform_sparse_sample(frames, 8, false, rng);
    const double want[8] = {1, 3, 5, 7, 9, 11, 13, 15};
    for (std::size_t i = 0; i < 8; ++i) CHECK(out[i * 4] == want[i]);

    Tensor same = uniform_sparse_sample(ramp_frames(8), 8, false, rng);
    for (std::size_t i = 0; i < 8; ++i) CHECK(same[i * 4] == static_cast<double>(i));

    Rng r1(5), r2(5);
    Tensor t1 = uniform_sparse_sample(frames, 8, true, r1);
    Tensor t2 = uniform_sparse_sample(frames, 8, true, r2);
    CHECK(max_abs_diff(t1, t2) == 0.0);

    CHECK_THROWS_AS(uniform_sparse_sample(ramp_frames(4), 8, false, rng), std::invalid_argument);
}

TEST_CASE("interval thinning") {
    Tensor frames = ramp_frames(48);
    CHECK(max_abs_diff(apply_interval(frames, 1), frames) == 0.0);
    Tensor thin = apply_interval(frames, 6);
    CHECK(thin.dim(0) == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(thin[i * 4] == static_cast<double>(6 * i));

    Tensor twice = apply_interval(apply_interval(frames, 2), 2);
    CHECK(max_abs_diff(twice, apply_interval(frames, 4)) == 0.0);

    CHECK_THROWS_AS(apply_interval(frames, 0), std::invalid_argument);
    CHECK_THROWS_AS(apply_interval(frames, 7, 8), std::invalid_argument);
}

TEST_CASE("frame order is preserved by the pipeline and flipped by reversal") {
    Rng rng(8);
    Tensor sampled = uniform_sparse_sample(apply_interval(ramp_frames(48), 2, 8), 8, true, rng);
    for (std::size_t i = 1; i < 8; ++i) CHECK(sampled[i * 4] > sampled[(i - 1) * 4]);

    Tensor rev = reverse_order(sampled);
    for (std::size_t i = 1; i < 8; ++i) CHECK(rev[i * 4] < rev[(i - 1) * 4]);
    CHECK(max_abs_diff(reverse_order(rev), sampled) == 0.0);

    Tensor two(Shape{2, 1, 1, 1}, {3.0, 9.0});
    Tensor swapped = reverse_order(two);
    CHECK(swapped[0] == 9.0);
    CHECK(swapped[1] == 3.0);

    Tensor flat(Shape{4, 1, 1, 1}, {2, 2, 2, 2});
    CHECK(max_abs_diff(reverse_order(flat), flat) == 0.0);
}

TEST_CASE("episode sampling counts, disjointness and reproducibility") {
    SyntheticSpec spec = tiny_spec();
    fs::path dir = fresh_dir("episodes");
    generate_synthetic_dataset(spec, dir);
    Dataset ds = Dataset::load(dir);
    PerturbationSpec pert;

    Rng rng(11);
    Episode ep = sample_episode(ds, 3, 2, 1, rng, pert, false, 4);
    CHECK(ep.support.size() == 3);
    for (const auto& way : ep.support) CHECK(way.size() == 2);
    CHECK(ep.queries.size() == 3);

    std::set<std::string> support_ids;
    std::set<std::pair<std::size_t, std::string>> support_keyed;
    for (std::size_t w = 0; w < 3; ++w) {
        for (const auto& id : ep.support_sources[w]) {
            support_keyed.insert({ep.support_class_ids[w], id});
        }
    }
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
        const auto key = std::make_pair(ep.support_class_ids[ep.query_labels[q]], ep.query_sources[q]);
        CHECK(support_keyed.count(key) == 0);
    }

    Rng ra(42), rb(42);
    Episode e1 = sample_episode(ds, 3, 2, 1, ra, pert, true, 4);
    Episode e2 = sample_episode(ds, 3, 2, 1, rb, pert, true, 4);
    CHECK(e1.support_class_ids == e2.support_class_ids);
    CHECK(e1.query_sources == e2.query_sources);
    double worst = 0.0;
    for (std::size_t w = 0; w < 3; ++w) {
        for (std::size_t s = 0; s < 2; ++s) {
            worst = std::max(worst, max_abs_diff(e1.support[w][s], e2.support[w][s]));
        }
    }
    CHECK(worst == 0.0);

    CHECK_THROWS_AS(sample_episode(ds, 5, 2, 1, rng, pert, false, 4), std::invalid_argument);
    CHECK_THROWS_AS(sample_episode(ds, 3, 6, 3, rng, pert, false, 4), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("any-shot episodes draw the shot count from the range") {
    SyntheticSpec spec = tiny_spec();
    spec.clips_per_class = 8;
    fs::path dir = fresh_dir("anyshot");
    generate_synthetic_dataset(spec, dir);
    Dataset ds = Dataset::load(dir);
    PerturbationSpec pert;
    pert.any_shot_range = {{1, 5}};

    std::set<std::size_t> seen;
    for (std::size_t ep = 0; ep < 40; ++ep) {
        Rng rng(1000 + ep);
        Episode e = sample_episode(ds, 2, 3, 1, rng, pert, false, 4);
        CHECK(e.k_shot >= 1);
        CHECK(e.k_shot <= 5);
        seen.insert(e.k_shot);
    }
    CHECK(seen.size() > 2);  // the range is actually explored
    fs::remove_all(dir);
}

TEST_CASE("sample-level noise replaces shots but not labels or queries") {
    SyntheticSpec spec = tiny_spec();
    spec.clips_per_class = 16;
    fs::path dir = fresh_dir("samplenoise");
    generate_synthetic_dataset(spec, dir);
    Dataset ds = Dataset::load(dir);
    PerturbationSpec pert;

    Rng rng(21);
    Episode ep = sample_episode(ds, 3, 10, 1, rng, pert, false, 4);
    Episode noisy = ep;  // deep copies of tensors
    SamplerContext ctx{ds, 4, 1, false};
    Rng nrng(22);
    inject_sample_noise(noisy, 0.2, ctx, nrng);

    for (std::size_t w = 0; w < 3; ++w) {
        std::size_t changed = 0;
        for (std::size_t s = 0; s < 10; ++s) {
            if (max_abs_diff(noisy.support[w][s], ep.support[w][s]) > 0.0) ++changed;
        }
        CHECK(changed == 2);  // round(0.2 * 10)
    }
    CHECK(noisy.support_class_ids == ep.support_class_ids);
    CHECK(noisy.query_labels == ep.query_labels);
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
        CHECK(max_abs_diff(noisy.queries[q], ep.queries[q]) == 0.0);
    }

    Episode same = ep;
    Rng zrng(23);
    inject_sample_noise(same, 0.0, ctx, zrng);
    for (std::size_t w = 0; w < 3; ++w) {
        for (std::size_t s = 0; s < 10; ++s) {
            CHECK(max_abs_diff(same.support[w][s], ep.support[w][s]) == 0.0);
        }
    }

    Episode doomed = ep;
    Rng drng(24);
    CHECK_THROWS_AS(inject_sample_noise(doomed, 0.96, ctx, drng), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("frame-level noise replaces exactly the requested positions") {
    SyntheticSpec spec = tiny_spec();
    fs::path dir = fresh_dir("framenoise");
    generate_synthetic_dataset(spec, dir);
    Dataset ds = Dataset::load(dir);
    SamplerContext ctx{ds, 8, 1, false};

    Rng rng(31);
    PerturbationSpec pert;
    Episode ep = sample_episode(ds, 2, 1, 1, rng, pert, false, 8);
    Tensor original = ep.support[0][0];

    Tensor c0 = original;
    Rng r0(32);
    inject_frame_noise(c0, 0, ctx, ep.support_class_ids[0], r0);
    CHECK(max_abs_diff(c0, original) == 0.0);

    Tensor c4a = original, c4b = original;
    Rng ra(33), rb(33);
    inject_frame_noise(c4a, 4, ctx, ep.support_class_ids[0], ra);
    inject_frame_noise(c4b, 4, ctx, ep.support_class_ids[0], rb);
    CHECK(max_abs_diff(c4a, c4b) == 0.0);  // same seed, same positions and donors

    const std::size_t plane = c4a.size() / 8;
    std::size_t changed = 0;
    for (std::size_t f = 0; f < 8; ++f) {
        bool differs = false;
        for (std::size_t e = 0; e < plane; ++e) {
            if (c4a[f * plane + e] != original[f * plane + e]) differs = true;
        }
        if (differs) ++changed;
    }
    CHECK(changed == 4);

    Tensor cbad = original;
    Rng rc(34);
    CHECK_THROWS_AS(inject_frame_noise(cbad, 8, ctx, 0, rc), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("reversed queries are recorded and applied") {
    SyntheticSpec spec = tiny_spec();
    fs::path dir = fresh_dir("revq");
    generate_synthetic_dataset(spec, dir);
    Dataset ds = Dataset::load(dir);

    PerturbationSpec plain;
    PerturbationSpec rev = plain;
    rev.reverse_query = true;
    Rng ra(77), rb(77);
    Episode e_plain = sample_episode(ds, 2, 1, 1, ra, plain, false, 6);
    Episode e_rev = sample_episode(ds, 2, 1, 1, rb, rev, false, 6);
    for (std::size_t q = 0; q < e_plain.queries.size(); ++q) {
        CHECK(max_abs_diff(reverse_order(e_plain.queries[q]), e_rev.queries[q]) == 0.0);
    }
    for (std::size_t w = 0; w < 2; ++w) {
        CHECK(max_abs_diff(e_plain.support[w][0], e_rev.support[w][0]) == 0.0);
    }
    fs::remove_all(dir);
}
