#pragma once

#include <vector>

#include "soap/params.hpp"
#include "soap/rng.hpp"
#include "soap/tensor.hpp"

namespace soap {

struct HeadConfig {
    std::size_t d_k = 48;
    std::size_t d_v = 48;
};

// pure linear maps, no bias terms (a value-projection bias would cancel
// exactly between the prototype and the projected query anyway)
struct HeadParams {
    Tensor psi_w;     // D -> d_k, applied to query features
    Tensor gamma_w;   // D -> d_k, applied to support features
    Tensor lambda_w;  // D -> d_v, value projection
};

HeadParams make_head_params(std::size_t feature_dim, const HeadConfig& cfg, Rng& rng);

struct Prototype {
    Tensor value;  // F x d_v
    int class_id = -1;
};

// Query-specific prototype: per support sample an F x F attention map between
// normalized query and support projections, rows softmaxed over support
// frames, applied to the support values; averaged over the K shots.
Prototype build_prototype(const Tensor& query_feat, const std::vector<Tensor>& support_feats,
                          const HeadParams& params, int class_id = -1);

// Frobenius norm of (prototype - value-projected query), a scalar tensor
Tensor distance(const Prototype& proto, const Tensor& query_feat, const HeadParams& params);

// argmin over per-class distances; ties break toward the lowest index
std::size_t classify(const std::vector<double>& distances);

// cross entropy of softmax(-distances) against the true class
Tensor loss_ce(const std::vector<Tensor>& distances, std::size_t true_class);

}  // namespace soap
