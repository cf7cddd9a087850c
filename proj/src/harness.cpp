#include "soap/harness.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace soap {

namespace {

using nlohmann::json;

constexpr std::uint64_t kTrainStream = 0x7452414Eull;  // train episodes
constexpr std::uint64_t kEvalStream = 0x4556414Cull;   // eval episodes

Rng episode_rng(std::uint64_t seed, std::uint64_t stream, std::size_t episode) {
    return Rng(Rng::mix(Rng::mix(seed, stream), episode + 1));
}

json pert_to_json(const PerturbationSpec& p) {
    json j;
    j["interval"] = p.interval;
    j["reverse_query"] = p.reverse_query;
    j["sample_noise_ratio"] = p.sample_noise_ratio;
    j["frame_noise_count"] = p.frame_noise_count;
    if (p.any_shot_range) {
        j["any_shot_range"] = {p.any_shot_range->first, p.any_shot_range->second};
    } else {
        j["any_shot_range"] = nullptr;
    }
    return j;
}

PerturbationSpec pert_from_json(const json& j) {
    PerturbationSpec p;
    p.interval = j.value("interval", std::size_t{1});
    p.reverse_query = j.value("reverse_query", false);
    p.sample_noise_ratio = j.value("sample_noise_ratio", 0.0);
    p.frame_noise_count = j.value("frame_noise_count", std::size_t{0});
    if (j.contains("any_shot_range") && !j["any_shot_range"].is_null()) {
        const auto& r = j["any_shot_range"];
        p.any_shot_range = std::make_pair(r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>());
    }
    return p;
}

json config_to_json(const RunConfig& c) {
    json j;
    j["dataset"] = c.dataset;
    j["n_way"] = c.n_way;
    j["k_shot"] = c.k_shot;
    j["queries_per_class"] = c.queries_per_class;
    j["frames"] = c.frames;
    j["channels"] = c.channels;
    j["height"] = c.height;
    j["width"] = c.width;
    j["conv3d_extent"] = c.conv3d_extent;
    j["c_r"] = c.c_r;
    j["conv1d_extent"] = c.conv1d_extent;
    j["tuple_set"] = c.tuple_set;
    j["motion_conv_extent"] = c.motion_conv_extent;
    j["embed_dim"] = c.embed_dim;
    j["pe_kind"] = c.pe_kind;
    j["backbone"] = json::array();
    for (const auto& [ch, k] : c.backbone) j["backbone"].push_back({ch, k});
    j["embed_input_scale"] = c.embed_input_scale;
    j["d_k"] = c.d_k;
    j["d_v"] = c.d_v;
    j["enable_3dem"] = c.enable_3dem;
    j["enable_cwem"] = c.enable_cwem;
    j["enable_hmem"] = c.enable_hmem;
    j["optimizer"] = {{"kind", c.optimizer.kind},
                      {"learning_rate", c.optimizer.learning_rate},
                      {"momentum", c.optimizer.momentum}};
    j["episodes_train"] = c.episodes_train;
    j["episodes_eval"] = c.episodes_eval;
    j["seed"] = c.seed;
    j["metrics_every"] = c.metrics_every;
    j["perturbations"] = pert_to_json(c.perturbations);
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    c.dataset = j.value("dataset", std::string{});
    c.n_way = j.value("n_way", c.n_way);
    c.k_shot = j.value("k_shot", c.k_shot);
    c.queries_per_class = j.value("queries_per_class", c.queries_per_class);
    c.frames = j.value("frames", c.frames);
    c.channels = j.value("channels", c.channels);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.conv3d_extent = j.value("conv3d_extent", c.conv3d_extent);
    c.c_r = j.value("c_r", c.c_r);
    c.conv1d_extent = j.value("conv1d_extent", c.conv1d_extent);
    if (j.contains("tuple_set")) c.tuple_set = j["tuple_set"].get<std::vector<std::size_t>>();
    c.motion_conv_extent = j.value("motion_conv_extent", c.motion_conv_extent);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.pe_kind = j.value("pe_kind", c.pe_kind);
    if (j.contains("backbone")) {
        c.backbone.clear();
        for (const auto& st : j["backbone"]) {
            c.backbone.emplace_back(st.at(0).get<std::size_t>(), st.at(1).get<std::size_t>());
        }
    }
    c.embed_input_scale = j.value("embed_input_scale", c.embed_input_scale);
    c.d_k = j.value("d_k", c.d_k);
    c.d_v = j.value("d_v", c.d_v);
    c.enable_3dem = j.value("enable_3dem", c.enable_3dem);
    c.enable_cwem = j.value("enable_cwem", c.enable_cwem);
    c.enable_hmem = j.value("enable_hmem", c.enable_hmem);
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        c.optimizer.kind = o.value("kind", c.optimizer.kind);
        c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
        c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    }
    c.episodes_train = j.value("episodes_train", c.episodes_train);
    c.episodes_eval = j.value("episodes_eval", c.episodes_eval);
    c.seed = j.value("seed", c.seed);
    c.metrics_every = j.value("metrics_every", c.metrics_every);
    if (j.contains("perturbations")) c.perturbations = pert_from_json(j["perturbations"]);
    return c;
}

void require_dataset_dims(const Dataset& data, const RunConfig& cfg) {
    if (data.channels() != cfg.channels || data.height() != cfg.height ||
        data.width() != cfg.width) {
        throw std::invalid_argument("dataset dims C=" + std::to_string(data.channels()) + ",H=" +
                                    std::to_string(data.height()) + ",W=" + std::to_string(data.width()) +
                                    " do not match config C=" + std::to_string(cfg.channels) + ",H=" +
                                    std::to_string(cfg.height) + ",W=" + std::to_string(cfg.width));
    }
}

void require_episode_counts(const Dataset& data, const RunConfig& cfg, std::size_t k_needed) {
    if (data.class_count() < cfg.n_way) {
        throw std::invalid_argument("dataset has " + std::to_string(data.class_count()) +
                                    " classes, episode needs " + std::to_string(cfg.n_way));
    }
    const std::size_t per_class = k_needed + cfg.queries_per_class;
    for (std::size_t c = 0; c < data.class_count(); ++c) {
        if (data.class_at(c).clips.size() < per_class) {
            throw std::invalid_argument("class " + data.class_at(c).name + " has " +
                                        std::to_string(data.class_at(c).clips.size()) +
                                        " clips, episodes need " + std::to_string(per_class));
        }
    }
}

double param_l2(const ParamRegistry& params) {
    double sq = 0.0;
    for (const auto& item : params.items()) {
        for (std::size_t i = 0; i < item.tensor->size(); ++i) {
            const double v = (*item.tensor)[i];
            sq += v * v;
        }
    }
    return std::sqrt(sq);
}

std::string json_number(double v) {
    json j = v;
    return j.dump();
}

}  // namespace

void RunConfig::validate() const {
    if (n_way == 0 || k_shot == 0 || queries_per_class == 0) {
        throw std::invalid_argument("RunConfig: episode counts must be positive");
    }
    if (frames == 0 || channels == 0 || height == 0 || width == 0 || embed_dim == 0 ||
        d_k == 0 || d_v == 0) {
        throw std::invalid_argument("RunConfig: dimensions must be positive");
    }
    for (std::size_t t : tuple_set) {
        if (t >= frames) {
            throw std::invalid_argument("RunConfig: tuple size " + std::to_string(t) +
                                        " must be below frames " + std::to_string(frames));
        }
    }
    if (optimizer.kind != "sgd") {
        throw std::invalid_argument("RunConfig: unsupported optimizer kind " + optimizer.kind);
    }
    if (pe_kind != "sinusoidal" && pe_kind != "learnable") {
        throw std::invalid_argument("RunConfig: pe_kind must be sinusoidal or learnable");
    }
    if (metrics_every == 0) {
        throw std::invalid_argument("RunConfig: metrics_every must be positive");
    }
    model_config_from(*this).validate();
}

RunConfig RunConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("RunConfig: cannot open " + path.string());
    json j;
    in >> j;
    return config_from_json(j);
}

RunConfig RunConfig::from_json_string(const std::string& text) {
    return config_from_json(json::parse(text));
}

std::string RunConfig::to_json_string(int indent) const {
    return config_to_json(*this).dump(indent);
}

ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig m;
    m.soap.frames = cfg.frames;
    m.soap.channels = cfg.channels;
    m.soap.height = cfg.height;
    m.soap.width = cfg.width;
    m.soap.conv3d_extent = cfg.conv3d_extent;
    m.soap.expanded_channels = cfg.c_r;
    m.soap.conv1d_extent = cfg.conv1d_extent;
    m.soap.tuple_sizes = cfg.tuple_set;
    m.soap.motion_conv_extent = cfg.motion_conv_extent;
    m.embed.dim = cfg.embed_dim;
    m.embed.pe_kind = cfg.pe_kind == "learnable" ? PeKind::Learnable : PeKind::Sinusoidal;
    m.embed.stages.clear();
    for (const auto& [ch, k] : cfg.backbone) m.embed.stages.push_back(EmbedStage{ch, k});
    m.embed.input_scale = cfg.embed_input_scale;
    m.head.d_k = cfg.d_k;
    m.head.d_v = cfg.d_v;
    m.enable_3dem = cfg.enable_3dem;
    m.enable_cwem = cfg.enable_cwem;
    m.enable_hmem = cfg.enable_hmem;
    m.init_seed = cfg.seed;
    return m;
}

TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    cfg.validate();
    Dataset data = Dataset::load(cfg.dataset);
    require_dataset_dims(data, cfg);
    require_episode_counts(data, cfg, cfg.k_shot);

    auto model_ptr = std::make_unique<SoapNet>(model_config_from(cfg));
    SoapNet& model = *model_ptr;
    SgdOptimizer opt(cfg.optimizer.learning_rate, cfg.optimizer.momentum);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    const fs::path metrics_path = out_dir / "metrics.jsonl";
    std::ofstream metrics(metrics_path);
    if (!metrics) throw std::runtime_error("run_train: cannot write " + metrics_path.string());

    // training perturbation: only the decode-time interval applies; the
    // inference-side protocols (noise, reversal, any-shot) are eval concerns
    PerturbationSpec train_pert;
    train_pert.interval = cfg.perturbations.interval;

    double last_loss = 0.0;
    for (std::size_t ep = 0; ep < cfg.episodes_train; ++ep) {
        Rng rng = episode_rng(cfg.seed, kTrainStream, ep);
        Episode episode = sample_episode(data, cfg.n_way, cfg.k_shot, cfg.queries_per_class,
                                         rng, train_pert, /*training=*/true, cfg.frames);
        Tape tape;
        model.params().watch_all(tape);
        Tensor loss = model.episode_loss(episode.support, episode.queries, episode.query_labels);
        last_loss = loss.item();
        if (!std::isfinite(last_loss)) {
            throw NumericalAbort("run_train: non-finite loss at episode " + std::to_string(ep + 1) +
                                 ", parameter l2 norm " + std::to_string(param_l2(model.params())));
        }
        tape.backward(loss);
        opt.step(model.params(), tape);
        if ((ep + 1) % cfg.metrics_every == 0 || ep + 1 == cfg.episodes_train) {
            metrics << "{\"episode\":" << (ep + 1) << ",\"loss\":" << json_number(last_loss) << "}\n";
            metrics.flush();
        }
    }
    save_checkpoint(out_dir, model, cfg);
    return TrainResult{cfg.episodes_train, last_loss, out_dir, metrics_path, std::move(model_ptr)};
}

std::string EvalSummary::to_json_line() const {
    json j;
    j["episodes"] = episodes;
    j["accuracy"] = accuracy;
    j["ci95"] = ci95;
    j["perturbations"] = pert_to_json(perturbations);
    return j.dump();
}

EvalSummary run_eval(const SoapNet& model, const Dataset& data, const RunConfig& cfg) {
    require_dataset_dims(data, cfg);
    std::size_t k_needed = cfg.k_shot;
    if (cfg.perturbations.any_shot_range) k_needed = cfg.perturbations.any_shot_range->second;
    require_episode_counts(data, cfg, k_needed);
    if (cfg.episodes_eval == 0) throw std::invalid_argument("run_eval: episodes_eval must be positive");

    double acc_sum = 0.0;
    for (std::size_t ep = 0; ep < cfg.episodes_eval; ++ep) {
        Rng rng = episode_rng(cfg.seed, kEvalStream, ep);
        Episode episode = sample_episode(data, cfg.n_way, cfg.k_shot, cfg.queries_per_class,
                                         rng, cfg.perturbations, /*training=*/false, cfg.frames);
        std::vector<std::size_t> preds = model.predict(episode.support, episode.queries);
        std::size_t correct = 0;
        for (std::size_t q = 0; q < preds.size(); ++q) {
            if (preds[q] == episode.query_labels[q]) ++correct;
        }
        acc_sum += static_cast<double>(correct) / static_cast<double>(preds.size());
    }
    EvalSummary s;
    s.episodes = cfg.episodes_eval;
    s.accuracy = acc_sum / static_cast<double>(cfg.episodes_eval);
    s.ci95 = 1.96 * std::sqrt(s.accuracy * (1.0 - s.accuracy) / static_cast<double>(cfg.episodes_eval));
    s.perturbations = cfg.perturbations;
    return s;
}

void save_checkpoint(const std::filesystem::path& dir, const SoapNet& model, const RunConfig& cfg) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);

    json manifest;
    manifest["format"] = "soap-checkpoint";
    manifest["version"] = 1;
    manifest["rng_seed"] = cfg.seed;
    manifest["config"] = json::parse(cfg.to_json_string());
    manifest["params"] = json::array();

    std::vector<float> blob;
    for (const auto& item : model.params().items()) {
        json entry;
        entry["name"] = item.name;
        entry["shape"] = item.tensor->shape();
        entry["byte_offset"] = blob.size() * sizeof(float);
        manifest["params"].push_back(std::move(entry));
        for (std::size_t i = 0; i < item.tensor->size(); ++i) {
            blob.push_back(static_cast<float>((*item.tensor)[i]));
        }
    }
    manifest["blob_bytes"] = blob.size() * sizeof(float);

    std::ofstream mj(dir / "params.json");
    if (!mj) throw std::runtime_error("save_checkpoint: cannot write " + (dir / "params.json").string());
    mj << manifest.dump(2) << "\n";
    std::ofstream mb(dir / "params.bin", std::ios::binary);
    if (!mb) throw std::runtime_error("save_checkpoint: cannot write " + (dir / "params.bin").string());
    mb.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::is_directory(path) ? path : path.parent_path();
    const fs::path manifest_path = fs::is_directory(path) ? path / "params.json" : path;
    std::ifstream mj(manifest_path);
    if (!mj) throw std::invalid_argument("load_checkpoint: cannot open " + manifest_path.string());
    json manifest;
    mj >> manifest;
    if (manifest.value("format", std::string{}) != "soap-checkpoint") {
        throw std::invalid_argument("load_checkpoint: not a checkpoint manifest: " + manifest_path.string());
    }

    LoadedModel out;
    out.config = RunConfig::from_json_string(manifest.at("config").dump());
    out.model = std::make_unique<SoapNet>(model_config_from(out.config));

    std::ifstream mb(dir / "params.bin", std::ios::binary);
    if (!mb) throw std::invalid_argument("load_checkpoint: cannot open " + (dir / "params.bin").string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(mb)), std::istreambuf_iterator<char>());
    const std::size_t expect = manifest.value("blob_bytes", std::size_t{0});
    if (bytes.size() != expect) {
        throw std::invalid_argument("load_checkpoint: blob is " + std::to_string(bytes.size()) +
                                    " bytes, manifest expects " + std::to_string(expect));
    }

    std::size_t seen = 0;
    for (const auto& entry : manifest.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        Tensor* t = out.model->params().find(name);
        if (!t) throw std::invalid_argument("load_checkpoint: unknown parameter " + name);
        const Shape shape = entry.at("shape").get<Shape>();
        if (t->shape() != shape) {
            throw std::invalid_argument("load_checkpoint: parameter " + name + " shape " +
                                        shape_str(shape) + " vs model " + shape_str(t->shape()));
        }
        const std::size_t off = entry.at("byte_offset").get<std::size_t>();
        if (off + t->size() * sizeof(float) > bytes.size()) {
            throw std::invalid_argument("load_checkpoint: parameter " + name + " overruns the blob");
        }
        const float* src = reinterpret_cast<const float*>(bytes.data() + off);
        for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<double>(src[i]);
        ++seen;
    }
    if (seen != out.model->params().count()) {
        throw std::invalid_argument("load_checkpoint: manifest lists " + std::to_string(seen) +
                                    " parameters, model has " +
                                    std::to_string(out.model->params().count()));
    }
    return out;
}

void check_model_compat(const RunConfig& ck, const RunConfig& ev) {
    std::ostringstream diff;
    auto cmp = [&diff](const char* field, auto a, auto b) {
        if (a != b) {
            std::ostringstream line;
            line << "  " << field << ": checkpoint=" << a << " eval=" << b << "\n";
            diff << line.str();
        }
    };
    cmp("frames", ck.frames, ev.frames);
    cmp("channels", ck.channels, ev.channels);
    cmp("height", ck.height, ev.height);
    cmp("width", ck.width, ev.width);
    cmp("conv3d_extent", ck.conv3d_extent, ev.conv3d_extent);
    cmp("c_r", ck.c_r, ev.c_r);
    cmp("conv1d_extent", ck.conv1d_extent, ev.conv1d_extent);
    cmp("motion_conv_extent", ck.motion_conv_extent, ev.motion_conv_extent);
    cmp("embed_dim", ck.embed_dim, ev.embed_dim);
    cmp("embed_input_scale", ck.embed_input_scale, ev.embed_input_scale);
    cmp("pe_kind", ck.pe_kind, ev.pe_kind);
    cmp("d_k", ck.d_k, ev.d_k);
    cmp("d_v", ck.d_v, ev.d_v);
    cmp("enable_3dem", ck.enable_3dem, ev.enable_3dem);
    cmp("enable_cwem", ck.enable_cwem, ev.enable_cwem);
    cmp("enable_hmem", ck.enable_hmem, ev.enable_hmem);
    if (ck.tuple_set != ev.tuple_set) diff << "  tuple_set differs\n";
    if (ck.backbone != ev.backbone) diff << "  backbone differs\n";
    const std::string d = diff.str();
    if (!d.empty()) {
        throw std::invalid_argument("checkpoint is incompatible with the eval config:\n" + d);
    }
}

GradCheckReport run_pipeline_gradcheck(std::uint64_t seed, std::size_t samples_per_param) {
    RunConfig cfg;
    cfg.frames = 4;
    cfg.channels = 2;
    cfg.height = 8;
    cfg.width = 8;
    cfg.embed_dim = 16;
    cfg.d_k = 8;
    cfg.d_v = 8;
    cfg.tuple_set = {1, 2};
    cfg.c_r = 8;
    cfg.backbone = {{4, 3}, {8, 3}};
    cfg.seed = seed;
    SoapNet model(model_config_from(cfg));

    // fixed random mini-episode: 2 ways, 1 shot, 1 query per way
    Rng rng(Rng::mix(seed, 0x47434845ull));
    auto random_clip = [&]() {
        Tensor t(Shape{cfg.frames, cfg.channels, cfg.height, cfg.width});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.u01();
        return t;
    };
    std::vector<std::vector<Tensor>> support{{random_clip()}, {random_clip()}};
    std::vector<Tensor> queries{random_clip(), random_clip()};
    std::vector<std::size_t> labels{0, 1};

    GradCheckOptions opt;
    opt.step = 1e-4;
    opt.tolerance = 1e-4;
    opt.samples_per_param = samples_per_param;
    opt.seed = seed;
    return finite_diff_check(model.params(),
                             [&]() { return model.episode_loss(support, queries, labels); }, opt);
}

}  // namespace soap
