#include "soap/model.hpp"

#include <stdexcept>

#include "soap/ops.hpp"

namespace soap {

void ModelConfig::validate() const {
    soap.validate();
    embed.validate();
    if (head.d_k == 0 || head.d_v == 0) {
        throw std::invalid_argument("ModelConfig: head dimensions must be positive");
    }
}

SoapNet::SoapNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(Rng::mix(cfg_.init_seed, 0x50415241u));  // parameter stream
    p3d_ = make_three_dim_params(cfg_.soap, rng);
    pcw_ = make_channel_wise_params(cfg_.soap, rng);
    pmo_ = make_hybrid_motion_params(cfg_.soap, rng);
    emb_ = make_embed_params(cfg_.embed, cfg_.soap.channels, cfg_.soap.frames, rng);
    head_ = make_head_params(cfg_.embed.dim, cfg_.head, rng);

    registry_.add("p3d.conv.w", p3d_.conv_w);
    registry_.add("p3d.conv.b", p3d_.conv_b);
    registry_.add("cwem.expand.w", pcw_.expand_w);
    registry_.add("cwem.expand.b", pcw_.expand_b);
    registry_.add("cwem.temporal.w", pcw_.temporal_w);
    registry_.add("cwem.temporal.b", pcw_.temporal_b);
    registry_.add("cwem.restore.w", pcw_.restore_w);
    registry_.add("cwem.restore.b", pcw_.restore_b);
    registry_.add("hmem.motion.w", pmo_.motion_w);
    registry_.add("hmem.motion.b", pmo_.motion_b);
    registry_.add("hmem.mix.w", pmo_.mix_w);
    registry_.add("hmem.mix.b", pmo_.mix_b);
    for (std::size_t s = 0; s < emb_.stage_w.size(); ++s) {
        registry_.add("embed.stage" + std::to_string(s) + ".w", emb_.stage_w[s]);
        registry_.add("embed.stage" + std::to_string(s) + ".b", emb_.stage_b[s]);
    }
    registry_.add("embed.proj.w", emb_.proj_w);
    registry_.add("embed.proj.b", emb_.proj_b);
    if (cfg_.embed.pe_kind == PeKind::Learnable) {
        registry_.add("embed.pe", emb_.pe_table);
    }
    registry_.add("head.psi.w", head_.psi_w);
    registry_.add("head.gamma.w", head_.gamma_w);
    registry_.add("head.lambda.w", head_.lambda_w);
}

PriorBundle SoapNet::enhance(const Tensor& clip) const {
    Tensor a = three_dim_prior(clip, p3d_, cfg_.soap);
    Tensor b = channel_wise_prior(clip, pcw_, cfg_.soap);
    Tensor c = hybrid_motion_prior(clip, pmo_, cfg_.soap);
    return fuse_priors(clip, a, b, c);
}

Tensor SoapNet::fused(const Tensor& clip) const {
    Tensor out = clip;
    if (cfg_.enable_3dem) out = add(out, three_dim_prior(clip, p3d_, cfg_.soap));
    if (cfg_.enable_cwem) out = add(out, channel_wise_prior(clip, pcw_, cfg_.soap));
    if (cfg_.enable_hmem) out = add(out, hybrid_motion_prior(clip, pmo_, cfg_.soap));
    return out;
}

Tensor SoapNet::features(const Tensor& clip) const {
    return embed_frames(fused(clip), emb_, cfg_.embed);
}

std::vector<Tensor> SoapNet::class_distances(
    const Tensor& query_feat, const std::vector<std::vector<Tensor>>& support_feats) const {
    std::vector<Tensor> out;
    out.reserve(support_feats.size());
    for (std::size_t c = 0; c < support_feats.size(); ++c) {
        Prototype proto = build_prototype(query_feat, support_feats[c], head_, static_cast<int>(c));
        out.push_back(distance(proto, query_feat, head_));
    }
    return out;
}

Tensor SoapNet::episode_loss(const std::vector<std::vector<Tensor>>& support_clips,
                             const std::vector<Tensor>& query_clips,
                             const std::vector<std::size_t>& query_labels) const {
    if (query_clips.size() != query_labels.size() || query_clips.empty()) {
        throw std::invalid_argument("episode_loss: queries and labels must align and be non-empty");
    }
    std::vector<std::vector<Tensor>> support_feats(support_clips.size());
    for (std::size_t c = 0; c < support_clips.size(); ++c) {
        for (const Tensor& clip : support_clips[c]) {
            support_feats[c].push_back(features(clip));
        }
    }
    std::vector<Tensor> losses;
    losses.reserve(query_clips.size());
    for (std::size_t q = 0; q < query_clips.size(); ++q) {
        Tensor qf = features(query_clips[q]);
        std::vector<Tensor> dists = class_distances(qf, support_feats);
        losses.push_back(loss_ce(dists, query_labels[q]));
    }
    return reduce_mean(concat(losses, 0), {0}, false);
}

std::vector<std::size_t> SoapNet::predict(const std::vector<std::vector<Tensor>>& support_clips,
                                          const std::vector<Tensor>& query_clips) const {
    std::vector<std::vector<Tensor>> support_feats(support_clips.size());
    for (std::size_t c = 0; c < support_clips.size(); ++c) {
        for (const Tensor& clip : support_clips[c]) {
            support_feats[c].push_back(features(clip));
        }
    }
    std::vector<std::size_t> out;
    out.reserve(query_clips.size());
    for (const Tensor& q : query_clips) {
        Tensor qf = features(q);
        std::vector<Tensor> dists = class_distances(qf, support_feats);
        std::vector<double> values;
        values.reserve(dists.size());
        for (const Tensor& d : dists) values.push_back(d.item());
        out.push_back(classify(values));
    }
    return out;
}

}  // namespace soap
