#include "soap/episodic.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace soap {

namespace {

constexpr char kMagic[8] = {'S', 'O', 'A', 'P', 'C', 'L', 'I', 'P'};
constexpr std::uint8_t kVersion = 0x01;

static_assert(std::endian::native == std::endian::little,
              "clip io assumes a little-endian host");

void put_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

std::size_t wrap(long v, std::size_t n) {
    const long m = static_cast<long>(n);
    long r = v % m;
    if (r < 0) r += m;
    return static_cast<std::size_t>(r);
}

}  // namespace

void write_clip(const std::filesystem::path& path, const Tensor& frames) {
    if (frames.rank() != 4) {
        throw std::invalid_argument("write_clip: expected L x C x H x W, got " +
                                    shape_str(frames.shape()));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_clip: cannot open " + path.string());
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&kVersion), 1);
    for (std::size_t d = 0; d < 4; ++d) put_u32(out, static_cast<std::uint32_t>(frames.dim(d)));
    std::vector<float> buf(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) buf[i] = static_cast<float>(frames[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write_clip: write failed for " + path.string());
}

Tensor read_clip(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_clip: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("read_clip: bad magic in " + path.string());
    }
    std::uint8_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 1);
    if (version != kVersion) {
        throw std::runtime_error("read_clip: unsupported version " + std::to_string(version));
    }
    Shape shape(4);
    for (std::size_t d = 0; d < 4; ++d) shape[d] = get_u32(in);
    const std::size_t n = shape_numel(shape);
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw std::runtime_error("read_clip: truncated file " + path.string());
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(buf[i]);
    return Tensor(shape, std::move(data));
}

Dataset Dataset::load(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("Dataset: cannot open manifest " + manifest.string());
    nlohmann::json j;
    in >> j;
    Dataset ds;
    ds.channels_ = j.at("dims").at("C").get<std::size_t>();
    ds.height_ = j.at("dims").at("H").get<std::size_t>();
    ds.width_ = j.at("dims").at("W").get<std::size_t>();
    const fs::path root = manifest.parent_path();
    std::size_t class_id = 0;
    for (const auto& cls : j.at("classes")) {
        ClassData cd;
        cd.name = cls.at("name").get<std::string>();
        for (const auto& rel : cls.at("clips")) {
            ClipRecord rec;
            rec.source_id = rel.get<std::string>();
            rec.frames = read_clip(root / rec.source_id);
            rec.class_id = class_id;
            if (rec.frames.dim(1) != ds.channels_ || rec.frames.dim(2) != ds.height_ ||
                rec.frames.dim(3) != ds.width_) {
                throw std::runtime_error("Dataset: clip " + rec.source_id + " dims " +
                                         shape_str(rec.frames.shape()) + " disagree with manifest");
            }
            cd.clips.push_back(std::move(rec));
        }
        ds.classes_.push_back(std::move(cd));
        ++class_id;
    }
    return ds;
}

// ---- synthetic data ----

MotionKind motion_kind_from_string(const std::string& s) {
    if (s == "translate-left") return MotionKind::TranslateLeft;
    if (s == "translate-right") return MotionKind::TranslateRight;
    if (s == "translate-up") return MotionKind::TranslateUp;
    if (s == "translate-down") return MotionKind::TranslateDown;
    if (s == "static-textured") return MotionKind::StaticTextured;
    throw std::invalid_argument("unknown motion kind: " + s);
}

std::string to_string(MotionKind k) {
    switch (k) {
        case MotionKind::TranslateLeft: return "translate-left";
        case MotionKind::TranslateRight: return "translate-right";
        case MotionKind::TranslateUp: return "translate-up";
        case MotionKind::TranslateDown: return "translate-down";
        case MotionKind::StaticTextured: return "static-textured";
    }
    return "?";
}

SyntheticSpec SyntheticSpec::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("SyntheticSpec: cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    SyntheticSpec spec;
    spec.seed = j.value("seed", std::uint64_t{1});
    spec.clips_per_class = j.value("clips_per_class", std::size_t{40});
    spec.clip_length = j.value("clip_length", std::size_t{48});
    spec.channels = j.value("channels", std::size_t{3});
    spec.height = j.value("height", std::size_t{32});
    spec.width = j.value("width", std::size_t{32});
    for (const auto& c : j.at("classes")) {
        SyntheticClassSpec cs;
        cs.name = c.at("name").get<std::string>();
        cs.kind = motion_kind_from_string(c.at("kind").get<std::string>());
        cs.speed = c.value("speed", 0.0);
        cs.object_size = c.value("object_size", std::size_t{8});
        cs.noise_amplitude = c.value("noise_amplitude", 0.08);
        spec.classes.push_back(std::move(cs));
    }
    spec.validate();
    return spec;
}

void SyntheticSpec::validate() const {
    if (classes.empty()) throw std::invalid_argument("SyntheticSpec: no classes");
    if (clips_per_class == 0 || clip_length == 0) {
        throw std::invalid_argument("SyntheticSpec: counts must be positive");
    }
    if (channels == 0 || height == 0 || width == 0) {
        throw std::invalid_argument("SyntheticSpec: dims must be positive");
    }
    for (const auto& c : classes) {
        if (c.object_size == 0 || c.object_size > std::min(height, width)) {
            throw std::invalid_argument("SyntheticSpec: object size out of range for class " + c.name);
        }
        if (c.noise_amplitude < 0.0 || c.noise_amplitude > 0.5) {
            throw std::invalid_argument("SyntheticSpec: noise amplitude must lie in [0, 0.5]");
        }
    }
}

Tensor synthesize_clip(const SyntheticSpec& spec, std::size_t class_idx, std::size_t clip_idx) {
    const SyntheticClassSpec& cls = spec.classes.at(class_idx);
    const std::size_t L = spec.clip_length, C = spec.channels, H = spec.height, W = spec.width;
    Rng rng(Rng::mix(Rng::mix(spec.seed, class_idx + 1), clip_idx + 1));
    Tensor frames(Shape{L, C, H, W});
    const std::size_t plane = C * H * W;

    // background drawn once per clip so zero-speed clips are truly static
    std::vector<double> background(plane);
    if (cls.kind == MotionKind::StaticTextured) {
        // class texture is stable across clips; clip noise rides on top
        Rng texture_rng(Rng::mix(spec.seed, 0xC1A55000u + class_idx));
        for (std::size_t i = 0; i < plane; ++i) {
            const double texture = 0.2 + 0.6 * texture_rng.u01();
            const double noise = cls.noise_amplitude * (2.0 * rng.u01() - 1.0);
            background[i] = std::min(1.0, std::max(0.0, texture + noise));
        }
        for (std::size_t t = 0; t < L; ++t) {
            std::memcpy(frames.data() + t * plane, background.data(), plane * sizeof(double));
        }
        return frames;
    }

    for (std::size_t i = 0; i < plane; ++i) background[i] = cls.noise_amplitude * rng.u01();
    double dx = 0.0, dy = 0.0;
    switch (cls.kind) {
        case MotionKind::TranslateLeft: dx = -cls.speed; break;
        case MotionKind::TranslateRight: dx = cls.speed; break;
        case MotionKind::TranslateUp: dy = -cls.speed; break;
        case MotionKind::TranslateDown: dy = cls.speed; break;
        case MotionKind::StaticTextured: break;
    }
    // the moving object is a textured patch so its interior carries motion
    // information too; at object_size == width it is a full-field scroll
    const std::size_t os = cls.object_size;
    std::vector<double> patch(C * os * os);
    for (double& v : patch) v = 0.5 + 0.5 * rng.u01();
    const double x0 = static_cast<double>(rng.below(W));
    const double y0 = static_cast<double>(rng.below(H));
    for (std::size_t t = 0; t < L; ++t) {
        double* f = frames.data() + t * plane;
        std::memcpy(f, background.data(), plane * sizeof(double));
        const long ox = static_cast<long>(std::floor(x0 + static_cast<double>(t) * dx + 0.5));
        const long oy = static_cast<long>(std::floor(y0 + static_cast<double>(t) * dy + 0.5));
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < os; ++i) {
                const std::size_t row = wrap(oy + static_cast<long>(i), H);
                for (std::size_t jj = 0; jj < os; ++jj) {
                    const std::size_t col = wrap(ox + static_cast<long>(jj), W);
                    f[(c * H + row) * W + col] = patch[(c * os + i) * os + jj];
                }
            }
        }
    }
    return frames;
}

void generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("generate_synthetic_dataset: cannot create " + out_dir.string());

    nlohmann::json manifest;
    manifest["dims"] = {{"C", spec.channels}, {"H", spec.height}, {"W", spec.width}};
    manifest["classes"] = nlohmann::json::array();
    for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
        const auto& cls = spec.classes[ci];
        fs::create_directories(out_dir / cls.name, ec);
        if (ec) throw std::runtime_error("generate_synthetic_dataset: cannot create class dir " + cls.name);
        nlohmann::json entry;
        entry["name"] = cls.name;
        entry["clips"] = nlohmann::json::array();
        for (std::size_t j = 0; j < spec.clips_per_class; ++j) {
            char leaf[32];
            std::snprintf(leaf, sizeof(leaf), "clip_%04zu.bin", j);
            const std::string rel = cls.name + "/" + leaf;
            write_clip(out_dir / rel, synthesize_clip(spec, ci, j));
            entry["clips"].push_back(rel);
        }
        manifest["classes"].push_back(std::move(entry));
    }
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw std::runtime_error("generate_synthetic_dataset: cannot write manifest");
    out << manifest.dump(2) << "\n";
}

// ---- frame selection ----

Tensor apply_interval(const Tensor& frames, std::size_t interval, std::size_t min_frames) {
    if (interval == 0) throw std::invalid_argument("apply_interval: interval must be >= 1");
    if (frames.rank() < 1) throw std::invalid_argument("apply_interval: empty tensor");
    const std::size_t L = frames.dim(0);
    const std::size_t kept = (L + interval - 1) / interval;
    if (kept < min_frames) {
        throw std::invalid_argument("apply_interval: interval " + std::to_string(interval) +
                                    " leaves " + std::to_string(kept) + " of " + std::to_string(L) +
                                    " frames, need " + std::to_string(min_frames));
    }
    if (interval == 1) return frames;
    Shape oshape = frames.shape();
    oshape[0] = kept;
    Tensor out(oshape);
    const std::size_t plane = frames.size() / L;
    for (std::size_t i = 0; i < kept; ++i) {
        std::memcpy(out.data() + i * plane, frames.data() + (i * interval) * plane,
                    plane * sizeof(double));
    }
    return out;
}

Tensor uniform_sparse_sample(const Tensor& frames, std::size_t frames_out, bool training, Rng& rng) {
    if (frames.rank() < 1 || frames_out == 0) {
        throw std::invalid_argument("uniform_sparse_sample: bad arguments");
    }
    const std::size_t L = frames.dim(0);
    if (L < frames_out) {
        throw std::invalid_argument("uniform_sparse_sample: clip has " + std::to_string(L) +
                                    " frames, need " + std::to_string(frames_out));
    }
    Shape oshape = frames.shape();
    oshape[0] = frames_out;
    Tensor out(oshape);
    const std::size_t plane = frames.size() / L;
    for (std::size_t i = 0; i < frames_out; ++i) {
        const std::size_t lo = i * L / frames_out;
        const std::size_t hi = (i + 1) * L / frames_out;
        const std::size_t idx = training ? lo + rng.below(hi - lo) : (lo + hi) / 2;
        std::memcpy(out.data() + i * plane, frames.data() + idx * plane, plane * sizeof(double));
    }
    return out;
}

Tensor reverse_order(const Tensor& clip) {
    if (clip.rank() < 1) throw std::invalid_argument("reverse_order: empty tensor");
    const std::size_t L = clip.dim(0);
    Tensor out(clip.shape());
    const std::size_t plane = clip.size() / L;
    for (std::size_t i = 0; i < L; ++i) {
        std::memcpy(out.data() + i * plane, clip.data() + (L - 1 - i) * plane,
                    plane * sizeof(double));
    }
    return out;
}

// ---- episodes ----

namespace {

Tensor pipeline_clip(const ClipRecord& rec, const SamplerContext& ctx, Rng& rng) {
    Tensor thinned = apply_interval(rec.frames, ctx.interval, ctx.frames_out);
    return uniform_sparse_sample(thinned, ctx.frames_out, ctx.training, rng);
}

std::size_t pick_other_class(std::size_t own, std::size_t class_count, Rng& rng) {
    std::size_t idx = rng.below(class_count - 1);
    return idx >= own ? idx + 1 : idx;
}

std::size_t noise_replacements(double ratio, std::size_t k) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(k) + 0.5));
}

}  // namespace

void inject_sample_noise(Episode& episode, double ratio, const SamplerContext& ctx, Rng& rng) {
    if (ratio < 0.0 || ratio >= 1.0) {
        throw std::invalid_argument("inject_sample_noise: ratio must lie in [0, 1)");
    }
    if (ctx.data.class_count() < 2) {
        throw std::invalid_argument("inject_sample_noise: need at least two classes for donors");
    }
    const std::size_t k = episode.k_shot;
    const std::size_t replaced = noise_replacements(ratio, k);
    if (replaced >= k) {
        throw std::invalid_argument("inject_sample_noise: ratio " + std::to_string(ratio) +
                                    " would replace every one of " + std::to_string(k) + " shots");
    }
    if (replaced == 0) return;
    for (std::size_t way = 0; way < episode.n_way; ++way) {
        const std::size_t own = episode.support_class_ids[way];
        std::vector<std::size_t> victims = rng.sample_indices(k, replaced);
        for (std::size_t v : victims) {
            const std::size_t donor_class = pick_other_class(own, ctx.data.class_count(), rng);
            const std::size_t donor_clip = rng.below(ctx.data.class_at(donor_class).clips.size());
            episode.support[way][v] = pipeline_clip(ctx.data.clip(donor_class, donor_clip), ctx, rng);
            // the slot keeps its original label; that is what makes it noise
        }
    }
    episode.applied.sample_noise_ratio = ratio;
}

void inject_frame_noise(Tensor& clip, std::size_t count, const SamplerContext& ctx,
                        std::size_t own_class, Rng& rng) {
    const std::size_t F = clip.dim(0);
    if (count >= F) {
        throw std::invalid_argument("inject_frame_noise: count " + std::to_string(count) +
                                    " must be below the frame count " + std::to_string(F));
    }
    if (count == 0) return;
    if (ctx.data.class_count() < 2) {
        throw std::invalid_argument("inject_frame_noise: need at least two classes for donors");
    }
    const std::size_t plane = clip.size() / F;
    std::vector<std::size_t> positions = rng.sample_indices(F, count);
    for (std::size_t pos : positions) {
        const std::size_t donor_class = pick_other_class(own_class, ctx.data.class_count(), rng);
        const ClipRecord& donor = ctx.data.clip(donor_class,
                                                rng.below(ctx.data.class_at(donor_class).clips.size()));
        const std::size_t frame = rng.below(donor.frames.dim(0));
        std::memcpy(clip.data() + pos * plane, donor.frames.data() + frame * plane,
                    plane * sizeof(double));
    }
}

Episode sample_episode(const Dataset& data, std::size_t n_way, std::size_t k_shot,
                       std::size_t queries_per_class, Rng& rng,
                       const PerturbationSpec& pert, bool training,
                       std::size_t frames_out) {
    if (n_way == 0 || k_shot == 0 || queries_per_class == 0) {
        throw std::invalid_argument("sample_episode: counts must be positive");
    }
    if (data.class_count() < n_way) {
        throw std::invalid_argument("sample_episode: dataset has " +
                                    std::to_string(data.class_count()) + " classes, need " +
                                    std::to_string(n_way));
    }
    std::size_t k = k_shot;
    if (pert.any_shot_range) {
        const auto [lo, hi] = *pert.any_shot_range;
        if (lo < 1 || hi < lo) {
            throw std::invalid_argument("sample_episode: bad any-shot range");
        }
        k = lo + rng.below(hi - lo + 1);
    }
    const std::size_t per_class = k + queries_per_class;

    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k;
    ep.applied = pert;
    ep.applied.sample_noise_ratio = 0.0;  // set when actually injected
    SamplerContext ctx{data, frames_out, pert.interval, training};

    ep.support_class_ids = rng.sample_indices(data.class_count(), n_way);
    ep.support.resize(n_way);
    ep.support_sources.resize(n_way);
    for (std::size_t way = 0; way < n_way; ++way) {
        const auto& cls = data.class_at(ep.support_class_ids[way]);
        if (cls.clips.size() < per_class) {
            throw std::invalid_argument("sample_episode: class " + cls.name + " has " +
                                        std::to_string(cls.clips.size()) + " clips, need " +
                                        std::to_string(per_class));
        }
        std::vector<std::size_t> picks = rng.sample_indices(cls.clips.size(), per_class);
        for (std::size_t s = 0; s < k; ++s) {
            const ClipRecord& rec = cls.clips[picks[s]];
            ep.support[way].push_back(pipeline_clip(rec, ctx, rng));
            ep.support_sources[way].push_back(rec.source_id);
        }
        for (std::size_t q = 0; q < queries_per_class; ++q) {
            const ClipRecord& rec = cls.clips[picks[k + q]];
            ep.queries.push_back(pipeline_clip(rec, ctx, rng));
            ep.query_labels.push_back(way);
            ep.query_sources.push_back(rec.source_id);
        }
    }

    if (pert.sample_noise_ratio > 0.0) {
        inject_sample_noise(ep, pert.sample_noise_ratio, ctx, rng);
    }
    if (pert.frame_noise_count > 0) {
        for (std::size_t way = 0; way < n_way; ++way) {
            for (Tensor& clip : ep.support[way]) {
                inject_frame_noise(clip, pert.frame_noise_count, ctx,
                                   ep.support_class_ids[way], rng);
            }
        }
    }
    if (pert.reverse_query) {
        for (Tensor& q : ep.queries) q = reverse_order(q);
    }
    return ep;
}

}  // namespace soap
