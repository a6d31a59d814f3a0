#pragma once

#include <cstdint>
#include <vector>

#include "nd/optim.hpp"
#include "nd/tensor.hpp"
#include "stan/attention.hpp"

namespace stan {

struct StanConfig {
    std::int64_t M = 3;             // cascaded blocks
    std::int64_t H = 4;             // attention heads
    std::int64_t n = 19;            // EEG channels
    std::int64_t T = 256;           // window samples
    std::int64_t spatial_dim = 50;  // channel-node embedding width
    std::int64_t temporal_dim = 100;
    std::int64_t kernel = 2;
    bool use_spatial = true;        // ablation switches
    bool use_temporal = true;

    void validate() const;
    std::int64_t t_prime() const { return T - kernel + 1; }
};

// One cascade stage: spatial stage feeding the temporal stage.
struct BlockParams {
    SpatialModuleParams spatial;
    TemporalModuleParams temporal;
};

struct StanParams {
    std::vector<BlockParams> blocks;
    nd::Tensor W_dec;  // [T, T] affine reconstruction decoder
    nd::Tensor b_dec;  // [T]
};

// M maps of each kind, one per block, in cascade order. Ablations that drop
// a module kind leave that list empty.
struct AttentionMapSet {
    std::vector<AttentionMap> spatial;
    std::vector<AttentionMap> temporal;
};

struct ForwardResult {
    nd::Tensor features;  // [n, T] final block output
    AttentionMapSet maps;
};

StanParams make_stan_params(const StanConfig& cfg, nd::Rng& rng);

void visit_params(StanParams& p, const ParamVisitor& fn);
std::int64_t param_count(StanParams& p);

// FNV-1a over the raw value bytes of every parameter, in visit order.
std::uint64_t params_checksum(StanParams& p);

// Marks every backbone parameter frozen and grad-free.
void freeze(StanParams& p);

ForwardResult forward_with_maps(const nd::Tensor& x, const StanConfig& cfg,
                                const StanParams& p);

// Affine decoder from the final block output back to window shape.
nd::Tensor reconstruct(const nd::Tensor& features, const StanParams& p);

// Squared L2 reconstruction error, summed over all entries.
nd::Tensor recon_loss(const nd::Tensor& xhat, const nd::Tensor& x);

// One Adam update on mean per-window reconstruction loss. Returns the loss.
double pretrain_step(const std::vector<nd::Tensor>& batch,
                     const StanConfig& cfg, StanParams& p, nd::Adam& opt);

}  // namespace stan
