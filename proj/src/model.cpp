#include "stan/model.hpp"

#include <cstring>

namespace stan {

using nd::Tensor;

void StanConfig::validate() const {
    if (M < 1) throw ContractError("config: M must be >= 1, got " + std::to_string(M));
    if (H < 1) throw ContractError("config: H must be >= 1, got " + std::to_string(H));
    if (T < 2) throw ContractError("config: T must be >= 2, got " + std::to_string(T));
    if (n < 2) throw ContractError("config: n must be >= 2, got " + std::to_string(n));
    if (kernel < 1 || kernel > T)
        throw ContractError("config: kernel " + std::to_string(kernel) +
                            " incompatible with T=" + std::to_string(T));
    if (spatial_dim < 1 || temporal_dim < 1)
        throw ContractError("config: embedding dims must be positive");
    if (!use_spatial && !use_temporal)
        throw ContractError("config: at least one module kind must be enabled");
}

StanParams make_stan_params(const StanConfig& cfg, nd::Rng& rng) {
    cfg.validate();
    StanParams p;
    p.blocks.reserve(static_cast<std::size_t>(cfg.M));
    for (std::int64_t m = 0; m < cfg.M; ++m) {
        BlockParams b;
        nd::Rng brs = rng.fork("block_spatial", static_cast<std::uint64_t>(m));
        nd::Rng brt = rng.fork("block_temporal", static_cast<std::uint64_t>(m));
        if (cfg.use_spatial)
            b.spatial = make_spatial_params(cfg.n, cfg.T, cfg.spatial_dim, cfg.H,
                                            cfg.kernel, brs);
        if (cfg.use_temporal)
            b.temporal = make_temporal_params(cfg.n, cfg.T, cfg.temporal_dim,
                                              cfg.H, cfg.kernel, brt);
        p.blocks.push_back(std::move(b));
    }
    nd::Rng dec = rng.fork("decoder");
    p.W_dec = Tensor::xavier({cfg.T, cfg.T}, cfg.T, cfg.T, dec);
    p.b_dec = Tensor::zeros({cfg.T}, true);
    return p;
}

void visit_params(StanParams& p, const ParamVisitor& fn) {
    for (std::size_t m = 0; m < p.blocks.size(); ++m) {
        const std::string prefix = "block" + std::to_string(m);
        if (p.blocks[m].spatial.enc_kernels.defined())
            visit_params(p.blocks[m].spatial, prefix + ".spatial", fn);
        if (p.blocks[m].temporal.enc_kernels.defined())
            visit_params(p.blocks[m].temporal, prefix + ".temporal", fn);
    }
    fn("decoder.w", p.W_dec);
    fn("decoder.b", p.b_dec);
}

std::int64_t param_count(StanParams& p) {
    std::int64_t count = 0;
    visit_params(p, [&](const std::string&, Tensor& t) { count += t.numel(); });
    return count;
}

std::uint64_t params_checksum(StanParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    visit_params(p, [&](const std::string&, Tensor& t) {
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    });
    return h;
}

void freeze(StanParams& p) {
    visit_params(p, [](const std::string&, Tensor& t) {
        t.set_frozen(true);
        t.set_requires_grad(false);
    });
}

ForwardResult forward_with_maps(const Tensor& x, const StanConfig& cfg,
                                const StanParams& p) {
    cfg.validate();
    if (x.ndim() != 2 || x.dim(0) != cfg.n || x.dim(1) != cfg.T)
        throw ContractError("forward: window " + nd::shape_str(x.shape()) +
                            " does not match configured [" +
                            std::to_string(cfg.n) + "x" + std::to_string(cfg.T) +
                            "]");
    if (p.blocks.size() != static_cast<std::size_t>(cfg.M))
        throw ContractError("forward: params hold " +
                            std::to_string(p.blocks.size()) +
                            " blocks, config wants " + std::to_string(cfg.M));
    ForwardResult res;
    Tensor cur = x;
    for (const BlockParams& b : p.blocks) {
        if (cfg.use_spatial) {
            ModuleOutput s = spatial_forward(cur, b.spatial);
            cur = s.out;
            res.maps.spatial.push_back(std::move(s.map));
        }
        if (cfg.use_temporal) {
            ModuleOutput t = temporal_forward(cur, b.temporal);
            cur = t.out;
            res.maps.temporal.push_back(std::move(t.map));
        }
    }
    res.features = cur;
    return res;
}

nd::Tensor reconstruct(const Tensor& features, const StanParams& p) {
    return nd::row_bias(nd::matmul(features, p.W_dec), p.b_dec);
}

nd::Tensor recon_loss(const Tensor& xhat, const Tensor& x) {
    Tensor d = nd::sub(xhat, x);
    return nd::sum(nd::mul(d, d));
}

double pretrain_step(const std::vector<Tensor>& batch, const StanConfig& cfg,
                     StanParams& p, nd::Adam& opt) {
    if (batch.empty()) throw ContractError("pretrain_step: empty batch");
    opt.zero_grad();
    Tensor total = Tensor::scalar(0.0);
    for (const Tensor& x : batch) {
        ForwardResult fwd = forward_with_maps(x, cfg, p);
        total = nd::add(total, recon_loss(reconstruct(fwd.features, p), x));
    }
    Tensor loss = nd::affine(total, 1.0 / static_cast<double>(batch.size()), 0.0);
    const double value = loss.item();
    if (!std::isfinite(value)) {
        nd::Tape::active().clear();
        throw NumericError("pretrain_step: loss became " + std::to_string(value) +
                           " on a batch of " + std::to_string(batch.size()));
    }
    nd::backward(loss);
    opt.step();
    return value;
}

}  // namespace stan
