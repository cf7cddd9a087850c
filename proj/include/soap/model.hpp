#pragma once

#include <memory>
#include <vector>

#include "soap/embedder.hpp"
#include "soap/params.hpp"
#include "soap/priors.hpp"
#include "soap/prototype.hpp"

namespace soap {

struct ModelConfig {
    SoapConfig soap;
    EmbedConfig embed;
    HeadConfig head;
    bool enable_3dem = true;
    bool enable_cwem = true;
    bool enable_hmem = true;
    std::uint64_t init_seed = 1;

    void validate() const;
};

// The full pipeline: prior enhancement, frame embedding, query-specific
// prototypes and distance classification. Parameters are owned by the module
// structs; the registry exposes them by name for training, checkpointing and
// gradient checks. Forward methods are const and safe to call concurrently
// with read-only parameters.
class SoapNet {
public:
    explicit SoapNet(ModelConfig cfg);
    SoapNet(const SoapNet&) = delete;
    SoapNet& operator=(const SoapNet&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& params() { return registry_; }
    const ParamRegistry& params() const { return registry_; }

    PriorBundle enhance(const Tensor& clip) const;  // always all three priors
    Tensor fused(const Tensor& clip) const;         // honors the enable flags
    Tensor features(const Tensor& clip) const;      // fused -> F x D

    // per-class distance scalars for one query against per-class support features
    std::vector<Tensor> class_distances(const Tensor& query_feat,
                                        const std::vector<std::vector<Tensor>>& support_feats) const;

    // mean cross entropy over the episode's queries
    Tensor episode_loss(const std::vector<std::vector<Tensor>>& support_clips,
                        const std::vector<Tensor>& query_clips,
                        const std::vector<std::size_t>& query_labels) const;

    // predicted way indices for each query (no tape required)
    std::vector<std::size_t> predict(const std::vector<std::vector<Tensor>>& support_clips,
                                     const std::vector<Tensor>& query_clips) const;

    const ThreeDimParams& three_dim() const { return p3d_; }
    const ChannelWiseParams& channel_wise() const { return pcw_; }
    const HybridMotionParams& hybrid_motion() const { return pmo_; }
    const EmbedParams& embed() const { return emb_; }
    const HeadParams& head() const { return head_; }

private:
    ModelConfig cfg_;
    ThreeDimParams p3d_;
    ChannelWiseParams pcw_;
    HybridMotionParams pmo_;
    EmbedParams emb_;
    HeadParams head_;
    ParamRegistry registry_;
};

}  // namespace soap
