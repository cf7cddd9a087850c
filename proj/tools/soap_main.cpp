#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "soap/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
    soap::SyntheticSpec spec = soap::SyntheticSpec::from_json_file(spec_path);
    soap::generate_synthetic_dataset(spec, out_dir);
    std::cout << "wrote " << spec.classes.size() << " classes x " << spec.clips_per_class
              << " clips to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    soap::RunConfig cfg = soap::RunConfig::from_json_file(config_path);
    soap::TrainResult res = soap::run_train(cfg, out_dir);
    std::cout << "trained " << res.episodes << " episodes, final loss " << res.final_loss
              << ", checkpoint in " << res.checkpoint_dir.string() << "\n";
    return kExitOk;
}

struct EvalOverrides {
    std::size_t episodes = 0;
    std::size_t interval = 0;
    bool reverse_query = false;
    double sample_noise = -1.0;
    long frame_noise = -1;
    std::string any_shot;  // "LO:HI"
    std::string out_file;
};

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const EvalOverrides& ov) {
    soap::RunConfig eval_cfg = soap::RunConfig::from_json_file(config_path);
    if (ov.episodes) eval_cfg.episodes_eval = ov.episodes;
    if (ov.interval) eval_cfg.perturbations.interval = ov.interval;
    if (ov.reverse_query) eval_cfg.perturbations.reverse_query = true;
    if (ov.sample_noise >= 0.0) eval_cfg.perturbations.sample_noise_ratio = ov.sample_noise;
    if (ov.frame_noise >= 0) eval_cfg.perturbations.frame_noise_count = static_cast<std::size_t>(ov.frame_noise);
    if (!ov.any_shot.empty()) {
        const auto colon = ov.any_shot.find(':');
        if (colon == std::string::npos) {
            throw std::invalid_argument("--any-shot expects LO:HI");
        }
        eval_cfg.perturbations.any_shot_range =
            std::make_pair(static_cast<std::size_t>(std::stoul(ov.any_shot.substr(0, colon))),
                           static_cast<std::size_t>(std::stoul(ov.any_shot.substr(colon + 1))));
    }

    soap::LoadedModel loaded = soap::load_checkpoint(checkpoint);
    soap::check_model_compat(loaded.config, eval_cfg);
    soap::Dataset data = soap::Dataset::load(eval_cfg.dataset);
    soap::EvalSummary summary = soap::run_eval(*loaded.model, data, eval_cfg);
    const std::string line = summary.to_json_line();
    std::cout << line << "\n";
    if (!ov.out_file.empty()) {
        std::ofstream out(ov.out_file, std::ios::app);
        if (!out) throw std::runtime_error("cannot open " + ov.out_file);
        out << line << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t samples) {
    soap::GradCheckReport report = soap::run_pipeline_gradcheck(seed, samples);
    std::printf("checked %zu coordinates, max relative error %.3e (%s[%zu])\n",
                report.records.size(), report.max_rel_err, report.worst_param.c_str(),
                report.worst_index);
    if (report.pass) {
        std::printf("PASS\n");
        return kExitOk;
    }
    std::printf("FAIL: parameter %s coordinate %zu, analytic vs numeric disagree\n",
                report.worst_param.c_str(), report.worst_index);
    return kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SOAP few-shot action recognition harness"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic clip dataset");
    std::string spec_path, gen_out;
    gen->add_option("--spec", spec_path, "synthetic spec json")->required();
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "episodic training");
    std::string train_config, train_out;
    train->add_option("--config", train_config, "run config json")->required();
    train->add_option("--out", train_out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_config, eval_ckpt;
    EvalOverrides ov;
    eval->add_option("--config", eval_config, "run config json")->required();
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint dir or params.json")->required();
    eval->add_option("--episodes", ov.episodes, "override episodes_eval");
    eval->add_option("--interval", ov.interval, "frame sampling interval 1..6");
    eval->add_flag("--reverse-query", ov.reverse_query, "reverse query frame order");
    eval->add_option("--sample-noise", ov.sample_noise, "sample-level noise ratio");
    eval->add_option("--frame-noise", ov.frame_noise, "frame-level noise count");
    eval->add_option("--any-shot", ov.any_shot, "draw shots per episode from LO:HI");
    eval->add_option("--out", ov.out_file, "append the summary line to this file");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
    std::uint64_t gc_seed = 1;
    std::size_t gc_samples = 8;
    gc->add_option("--seed", gc_seed, "rng seed");
    gc->add_option("--samples", gc_samples, "coordinates sampled per parameter (0 = all)");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(spec_path, gen_out);
        if (train->parsed()) return cmd_train(train_config, train_out);
        if (eval->parsed()) return cmd_eval(eval_config, eval_ckpt, ov);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_samples);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitValidation;
    } catch (const soap::NumericalAbort& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitValidation;
}
