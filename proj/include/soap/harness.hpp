#pragma once

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>

#include "soap/episodic.hpp"
#include "soap/gradcheck.hpp"
#include "soap/model.hpp"

namespace soap {

struct OptimizerConfig {
    std::string kind = "sgd";
    double learning_rate = 1e-3;
    double momentum = 0.0;
};

struct RunConfig {
    std::string dataset;
    std::size_t n_way = 5, k_shot = 1, queries_per_class = 1;
    std::size_t frames = 8, channels = 3, height = 32, width = 32;

    std::size_t conv3d_extent = 3;
    std::size_t c_r = 16;
    std::size_t conv1d_extent = 3;
    std::vector<std::size_t> tuple_set = {1, 2, 3};
    std::size_t motion_conv_extent = 3;

    std::size_t embed_dim = 64;
    std::string pe_kind = "sinusoidal";  // or "learnable"
    std::vector<std::pair<std::size_t, std::size_t>> backbone = {{8, 3}, {16, 3}};
    double embed_input_scale = 0.25;
    std::size_t d_k = 48, d_v = 48;
    bool enable_3dem = true, enable_cwem = true, enable_hmem = true;

    OptimizerConfig optimizer;
    std::size_t episodes_train = 2000, episodes_eval = 1000;
    std::uint64_t seed = 1;
    std::size_t metrics_every = 10;
    PerturbationSpec perturbations;

    void validate() const;
    static RunConfig from_json_file(const std::filesystem::path& path);
    static RunConfig from_json_string(const std::string& text);
    std::string to_json_string(int indent = 2) const;
};

ModelConfig model_config_from(const RunConfig& cfg);

// raised when training produces a non-finite loss; maps to exit code 2
struct NumericalAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    std::size_t episodes = 0;
    double final_loss = 0.0;
    std::filesystem::path checkpoint_dir;
    std::filesystem::path metrics_path;
    std::unique_ptr<SoapNet> model;  // the trained in-memory model
};

// trains on cfg.dataset, streaming JSONL metrics and writing the final
// checkpoint under out_dir
TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& out_dir);

struct EvalSummary {
    std::size_t episodes = 0;
    double accuracy = 0.0;
    double ci95 = 0.0;
    PerturbationSpec perturbations;
    std::string to_json_line() const;
};

EvalSummary run_eval(const SoapNet& model, const Dataset& data, const RunConfig& cfg);

// checkpoint = params.json manifest (names, shapes, byte offsets, config
// snapshot, rng seed) plus params.bin (concatenated float32)
void save_checkpoint(const std::filesystem::path& dir, const SoapNet& model, const RunConfig& cfg);

struct LoadedModel {
    RunConfig config;
    std::unique_ptr<SoapNet> model;
};

LoadedModel load_checkpoint(const std::filesystem::path& path);

// throws with a field-by-field diff when model structure disagrees
void check_model_compat(const RunConfig& checkpoint_cfg, const RunConfig& eval_cfg);

// gradient check of every named parameter through the full episode loss on a
// tiny model (F=4, C=2, H=W=8, D=16, d_k=d_v=8, tuples {1,2})
GradCheckReport run_pipeline_gradcheck(std::uint64_t seed, std::size_t samples_per_param);

}  // namespace soap
