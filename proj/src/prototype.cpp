#include "soap/prototype.hpp"

#include <stdexcept>

#include "soap/ops.hpp"

namespace soap {

HeadParams make_head_params(std::size_t feature_dim, const HeadConfig& cfg, Rng& rng) {
    if (feature_dim == 0 || cfg.d_k == 0 || cfg.d_v == 0) {
        throw std::invalid_argument("make_head_params: dimensions must be positive");
    }
    HeadParams p;
    p.psi_w = Tensor(Shape{feature_dim, cfg.d_k});
    p.gamma_w = Tensor(Shape{feature_dim, cfg.d_k});
    p.lambda_w = Tensor(Shape{feature_dim, cfg.d_v});
    init_uniform_fan_in(p.psi_w, feature_dim, rng);
    init_uniform_fan_in(p.gamma_w, feature_dim, rng);
    init_uniform_fan_in(p.lambda_w, feature_dim, rng);
    return p;
}

Prototype build_prototype(const Tensor& query_feat, const std::vector<Tensor>& support_feats,
                          const HeadParams& params, int class_id) {
    if (support_feats.empty()) {
        throw std::invalid_argument("build_prototype: support list is empty");
    }
    for (const Tensor& s : support_feats) {
        if (s.shape() != query_feat.shape()) {
            throw std::invalid_argument("build_prototype: feature shape mismatch " +
                                        shape_str(query_feat.shape()) + " vs " + shape_str(s.shape()));
        }
    }
    // normalized per frame row over the key dimension
    Tensor lnq = layer_norm(linear(query_feat, params.psi_w), 1);
    Tensor acc;
    for (const Tensor& s : support_feats) {
        Tensor lns = layer_norm(linear(s, params.gamma_w), 1);
        Tensor attn = matmul(lnq, transpose(lns, {1, 0}));  // F x F
        Tensor weights = softmax(attn, 1);                  // rows over support frames
        Tensor contrib = matmul(weights, linear(s, params.lambda_w));
        acc = acc.size() == 0 ? contrib : add(acc, contrib);
    }
    Prototype proto;
    proto.value = scale(acc, 1.0 / static_cast<double>(support_feats.size()));
    proto.class_id = class_id;
    return proto;
}

Tensor distance(const Prototype& proto, const Tensor& query_feat, const HeadParams& params) {
    Tensor projected = linear(query_feat, params.lambda_w);
    if (projected.shape() != proto.value.shape()) {
        throw std::invalid_argument("distance: prototype " + shape_str(proto.value.shape()) +
                                    " vs projected query " + shape_str(projected.shape()));
    }
    return frobenius_norm(sub(proto.value, projected));
}

std::size_t classify(const std::vector<double>& distances) {
    if (distances.empty()) {
        throw std::invalid_argument("classify: no distances given");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < distances.size(); ++i) {
        if (distances[i] < distances[best]) best = i;
    }
    return best;
}

Tensor loss_ce(const std::vector<Tensor>& distances, std::size_t true_class) {
    if (distances.empty()) {
        throw std::invalid_argument("loss_ce: no distances given");
    }
    if (true_class >= distances.size()) {
        throw std::invalid_argument("loss_ce: class " + std::to_string(true_class) +
                                    " out of range for " + std::to_string(distances.size()) + " classes");
    }
    std::vector<Tensor> scalars;
    scalars.reserve(distances.size());
    for (const Tensor& d : distances) {
        if (d.size() != 1) {
            throw std::invalid_argument("loss_ce: distances must be scalars, got " + shape_str(d.shape()));
        }
        scalars.push_back(d);
    }
    Tensor dvec = concat(scalars, 0);
    return softmax_cross_entropy(scale(dvec, -1.0), true_class);
}

}  // namespace soap
