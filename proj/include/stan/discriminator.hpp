#pragma once

#include <cstdint>
#include <vector>

#include "nd/rng.hpp"
#include "nd/tensor.hpp"
#include "stan/model.hpp"

namespace stan {

struct DiscriminatorConfig {
    std::int64_t spatial_kernel = 5;    // over n x n channel maps
    std::int64_t temporal_kernel = 8;   // over T' x T' timestamp maps
    std::int64_t spatial_filters = 8;
    std::int64_t temporal_filters = 4;
    std::int64_t spatial_pool = 2;      // average pool after the conv
    std::int64_t temporal_pool = 16;
    std::int64_t feature_dim = 512;
    std::int64_t fc_units = 256;
    double dropout_p = 0.2;
    double lambda_gp = 0.05;
    double drift_eps = 0.0;   // weight of the mean-logit centering term
    bool sum_fusion = false;  // sum the six vectors instead of concatenating

    void validate() const;
};

// One map-kind extractor: conv over the H head slices, pool, then a linear
// lift to feature_dim. Shared across the M maps of its kind.
struct ExtractorParams {
    nd::Tensor conv;   // [filters, H, k, k]
    nd::Tensor bias;   // [filters]
    nd::Tensor lin_w;  // [flattened, feature_dim]
    nd::Tensor lin_b;  // [feature_dim]
};

struct DiscParams {
    ExtractorParams spatial;
    ExtractorParams temporal;
    nd::Tensor fc1_w, fc1_b;
    nd::Tensor fc2_w, fc2_b;
    nd::Tensor fc3_w, fc3_b;
    nd::Tensor head_w, head_b;  // [fc_units, 1], [1]
};

// Runtime switches for the forward passes. `relu` exists for linearity
// probes in tests; training mode enables dropout (rng then required).
struct EvalMode {
    bool training = false;
    bool relu = true;
    nd::Rng* rng = nullptr;
};

struct CriticOutput {
    nd::Tensor logit;  // [1], unbounded
    nd::Tensor risk;   // [1], sigmoid(logit)
};

enum class DiscObjective { wgan_gp, bce };

struct DiscLoss {
    nd::Tensor total;       // taped scalar
    double mean_logit_inter = 0.0;
    double mean_logit_pre = 0.0;
    double penalty = 0.0;   // unweighted GP term (0 for bce)
};

DiscParams make_disc_params(const DiscriminatorConfig& dc, const StanConfig& mc,
                            nd::Rng& rng);

void visit_params(DiscParams& p, const ParamVisitor& fn);
std::int64_t param_count(DiscParams& p);
std::uint64_t params_checksum(DiscParams& p);

// Feature vector F: per-kind extractor applied to every collected map, fused
// by concatenation (default) or summation.
nd::Tensor extract_features(const AttentionMapSet& maps,
                            const DiscriminatorConfig& dc, const DiscParams& p,
                            const EvalMode& mode);

CriticOutput score(const nd::Tensor& features, const DiscriminatorConfig& dc,
                   const DiscParams& p, const EvalMode& mode);

// Mean (||grad_f D(f_hat)|| - 1)^2 over interpolated feature pairs. The
// input gradient is assembled in closed form from the FC chain, so one
// ordinary backward pass differentiates the penalty w.r.t. the critic
// weights. Dropout never applies on this path.
nd::Tensor gradient_penalty(const std::vector<nd::Tensor>& f_inter,
                            const std::vector<nd::Tensor>& f_pre,
                            const DiscriminatorConfig& dc, const DiscParams& p,
                            nd::Rng& rng);

// L_D = E_pre[logit] - E_inter[logit] + lambda * GP (wgan_gp), or the
// supervised cross-entropy with interictal as class 1 (bce).
DiscLoss discriminator_loss(const std::vector<AttentionMapSet>& batch_inter,
                            const std::vector<AttentionMapSet>& batch_pre,
                            const DiscriminatorConfig& dc, const DiscParams& p,
                            nd::Rng& rng, DiscObjective objective,
                            bool training = true);

}  // namespace stan
