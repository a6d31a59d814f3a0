#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nd/tensor.hpp"

namespace stan {

// Mixing parameters for one multi-head stage: H square score matrices plus
// the head logits whose softmax blends the per-head results.
struct HeadParams {
    std::vector<nd::Tensor> W_M;  // H matrices, each [n_e, n_e]
    nd::Tensor a;                 // [H] logits
    std::int64_t heads() const { return static_cast<std::int64_t>(W_M.size()); }
};

enum class MapKind { spatial, temporal };

// Row-stochastic map per head over L graph nodes (channels or timestamps).
struct AttentionMap {
    std::vector<nd::Tensor> heads;  // H tensors [L, L]
    MapKind kind = MapKind::spatial;
    std::int64_t L = 0;
};

// Channel-graph stage. The time encoder is one conv shared by every channel;
// its pooled embeddings are the node vectors.
struct SpatialModuleParams {
    nd::Tensor enc_kernels;  // [n_e, 1, k]
    nd::Tensor enc_bias;     // [n_e]
    HeadParams heads;        // n_e-dim quadratic forms over channel nodes
    nd::Tensor W_out;        // [n_e, T] projection back to the time axis
    nd::Tensor b_out;        // [T]
    nd::Tensor ln_gain;      // [T]
    nd::Tensor ln_bias;      // [T]
};

// Timestamp-graph stage. The cross-channel encoder consumes one time step
// (valid kernel-2 conv), leaving T' = T-1 nodes; two projections restore the
// [n, T] block shape for cascading.
struct TemporalModuleParams {
    nd::Tensor enc_kernels;  // [n_e, n, k]
    nd::Tensor enc_bias;     // [n_e]
    HeadParams heads;        // n_e-dim forms over timestamp nodes
    nd::Tensor W_chan;       // [n_e, n]
    nd::Tensor W_time;       // [T-k+1, T]
    nd::Tensor b_out;        // [T]
    nd::Tensor ln_gain;      // [T]
    nd::Tensor ln_bias;      // [T]
};

struct ModuleOutput {
    nd::Tensor out;  // [n, T]
    AttentionMap map;
};

// Pairwise scores M[i][j] = z_i^T W z_j for all node pairs.
nd::Tensor alignment_scores(const nd::Tensor& z, const nd::Tensor& W_M);

// Row-wise softmax of a score matrix; one head slice of an AttentionMap.
nd::Tensor attention_map(const nd::Tensor& scores);

// out_i = tanh(sum_k alpha_k sum_j A^k_ij v_j), alpha = softmax(a).
nd::Tensor aggregate_heads(std::span<const nd::Tensor> maps,
                           const nd::Tensor& values, const nd::Tensor& a);

ModuleOutput spatial_forward(const nd::Tensor& x, const SpatialModuleParams& p);
ModuleOutput temporal_forward(const nd::Tensor& x, const TemporalModuleParams& p);

SpatialModuleParams make_spatial_params(std::int64_t n, std::int64_t T,
                                        std::int64_t n_e, std::int64_t H,
                                        std::int64_t k, nd::Rng& rng);
TemporalModuleParams make_temporal_params(std::int64_t n, std::int64_t T,
                                          std::int64_t n_e, std::int64_t H,
                                          std::int64_t k, nd::Rng& rng);

using ParamVisitor = std::function<void(const std::string&, nd::Tensor&)>;

void visit_params(SpatialModuleParams& p, const std::string& prefix,
                  const ParamVisitor& fn);
void visit_params(TemporalModuleParams& p, const std::string& prefix,
                  const ParamVisitor& fn);

}  // namespace stan
