#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "soap/rng.hpp"
#include "soap/tensor.hpp"

namespace soap {

// ---- clip files and manifests ----

// Binary clip format: magic "SOAPCLIP", version byte 0x01, four u32
// little-endian dims L,C,H,W, then L*C*H*W float32 little-endian values in
// (frame, channel, row, column) order. Values are stored in [0,1].
void write_clip(const std::filesystem::path& path, const Tensor& frames);
Tensor read_clip(const std::filesystem::path& path);

struct ClipRecord {
    Tensor frames;  // L x C x H x W, L >= frames needed after thinning
    std::size_t class_id = 0;
    std::string source_id;
};

class Dataset {
public:
    struct ClassData {
        std::string name;
        std::vector<ClipRecord> clips;
    };

    // dir containing manifest.json, or the manifest path itself
    static Dataset load(const std::filesystem::path& path);

    std::size_t class_count() const { return classes_.size(); }
    const ClassData& class_at(std::size_t i) const { return classes_.at(i); }
    const ClipRecord& clip(std::size_t class_idx, std::size_t clip_idx) const {
        return classes_.at(class_idx).clips.at(clip_idx);
    }
    std::size_t channels() const { return channels_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }

private:
    std::vector<ClassData> classes_;
    std::size_t channels_ = 0, height_ = 0, width_ = 0;
};

// ---- synthetic data ----

enum class MotionKind {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    StaticTextured,
};

MotionKind motion_kind_from_string(const std::string& s);
std::string to_string(MotionKind k);

struct SyntheticClassSpec {
    std::string name;
    MotionKind kind = MotionKind::StaticTextured;
    double speed = 0.0;              // pixels per stored frame
    std::size_t object_size = 8;
    double noise_amplitude = 0.08;   // background noise, frozen per clip
};

struct SyntheticSpec {
    std::vector<SyntheticClassSpec> classes;
    std::size_t clips_per_class = 40;
    std::size_t clip_length = 48;
    std::size_t channels = 3, height = 32, width = 32;
    std::uint64_t seed = 1;

    static SyntheticSpec from_json_file(const std::filesystem::path& path);
    void validate() const;
};

// one clip, deterministic in (spec.seed, class index, clip index)
Tensor synthesize_clip(const SyntheticSpec& spec, std::size_t class_idx, std::size_t clip_idx);

// writes clips plus manifest.json; byte-identical for identical specs
void generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

// ---- frame selection ----

// keep frames 0, interval, 2*interval, ...; rejects results shorter than min_frames
Tensor apply_interval(const Tensor& frames, std::size_t interval, std::size_t min_frames = 1);

// TSN-style: split into frames_out equal segments, center frame per segment
// when evaluating, a seeded uniform frame per segment when training
Tensor uniform_sparse_sample(const Tensor& frames, std::size_t frames_out, bool training, Rng& rng);

Tensor reverse_order(const Tensor& clip);  // reverse the frame axis

// ---- episodes ----

struct PerturbationSpec {
    std::size_t interval = 1;
    bool reverse_query = false;
    double sample_noise_ratio = 0.0;
    std::size_t frame_noise_count = 0;
    std::optional<std::pair<std::size_t, std::size_t>> any_shot_range;  // inclusive
};

struct Episode {
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::vector<std::vector<Tensor>> support;          // [way][shot], F x C x H x W
    std::vector<std::vector<std::string>> support_sources;
    std::vector<std::size_t> support_class_ids;        // dataset class per way
    std::vector<Tensor> queries;
    std::vector<std::size_t> query_labels;             // way indices
    std::vector<std::string> query_sources;
    PerturbationSpec applied;
};

struct SamplerContext {
    const Dataset& data;
    std::size_t frames_out;
    std::size_t interval = 1;
    bool training = false;
};

// replaces round(ratio*K) support shots per way with pipeline-processed clips
// from other dataset classes; labels and queries are untouched
void inject_sample_noise(Episode& episode, double ratio, const SamplerContext& ctx, Rng& rng);

// replaces `count` distinct frame positions with frames from other classes
void inject_frame_noise(Tensor& clip, std::size_t count, const SamplerContext& ctx,
                        std::size_t own_class, Rng& rng);

Episode sample_episode(const Dataset& data, std::size_t n_way, std::size_t k_shot,
                       std::size_t queries_per_class, Rng& rng,
                       const PerturbationSpec& pert, bool training,
                       std::size_t frames_out);

}  // namespace soap
