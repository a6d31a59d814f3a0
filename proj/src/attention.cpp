#include "stan/attention.hpp"

namespace stan {

using nd::Tensor;

nd::Tensor alignment_scores(const Tensor& z, const Tensor& W_M) {
    if (z.ndim() != 2 || W_M.ndim() != 2 || W_M.dim(0) != W_M.dim(1) ||
        z.dim(1) != W_M.dim(0))
        throw ContractError("alignment_scores: embeddings " +
                            nd::shape_str(z.shape()) + " do not fit form " +
                            nd::shape_str(W_M.shape()));
    return nd::matmul(nd::matmul(z, W_M), nd::transpose(z));
}

nd::Tensor attention_map(const Tensor& scores) {
    if (scores.ndim() != 2 || scores.dim(0) != scores.dim(1))
        throw ContractError("attention_map: scores must be square, got " +
                            nd::shape_str(scores.shape()));
    return nd::softmax(scores, -1);
}

nd::Tensor aggregate_heads(std::span<const Tensor> maps, const Tensor& values,
                           const Tensor& a) {
    if (maps.empty()) throw ContractError("aggregate_heads: no heads");
    if (a.ndim() != 1 || a.dim(0) != static_cast<std::int64_t>(maps.size()))
        throw ContractError("aggregate_heads: logits " +
                            nd::shape_str(a.shape()) + " do not match " +
                            std::to_string(maps.size()) + " heads");
    const std::int64_t L = values.dim(0);
    for (const Tensor& m : maps)
        if (m.ndim() != 2 || m.dim(0) != L || m.dim(1) != L)
            throw ContractError("aggregate_heads: map " +
                                nd::shape_str(m.shape()) +
                                " inconsistent with values " +
                                nd::shape_str(values.shape()));
    Tensor alpha = nd::softmax(a, -1);
    std::vector<Tensor> mixed;
    mixed.reserve(maps.size());
    for (const Tensor& m : maps) mixed.push_back(nd::matmul(m, values));
    return nd::tanh(nd::weighted_sum(mixed, alpha));
}

namespace {

AttentionMap run_heads(const Tensor& z, const HeadParams& h, MapKind kind) {
    AttentionMap map;
    map.kind = kind;
    map.L = z.dim(0);
    map.heads.reserve(static_cast<std::size_t>(h.heads()));
    for (const Tensor& W : h.W_M)
        map.heads.push_back(attention_map(alignment_scores(z, W)));
    return map;
}

}  // namespace

ModuleOutput spatial_forward(const Tensor& x, const SpatialModuleParams& p) {
    if (x.ndim() != 2)
        throw ContractError("spatial_forward: expects [n,T], got " +
                            nd::shape_str(x.shape()));
    const std::int64_t n = x.dim(0);
    // One embedding per channel: shared conv over that channel's samples,
    // tanh, then mean over the remaining time axis.
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (std::int64_t c = 0; c < n; ++c) {
        Tensor xc = nd::reshape(nd::row(x, c), {1, x.dim(1)});
        Tensor e = nd::tanh(nd::channel_bias(nd::conv1d(xc, p.enc_kernels),
                                             p.enc_bias));
        rows.push_back(nd::mean_cols(e));
    }
    Tensor z = nd::stack_rows(rows);  // [n, n_e]

    ModuleOutput res;
    res.map = run_heads(z, p.heads, MapKind::spatial);
    Tensor agg = aggregate_heads(res.map.heads, z, p.heads.a);  // [n, n_e]
    Tensor proj = nd::row_bias(nd::matmul(agg, p.W_out), p.b_out);  // [n, T]
    res.out = nd::layer_norm(nd::add(x, nd::tanh(proj)), p.ln_gain, p.ln_bias);
    return res;
}

ModuleOutput temporal_forward(const Tensor& x, const TemporalModuleParams& p) {
    if (x.ndim() != 2)
        throw ContractError("temporal_forward: expects [n,T], got " +
                            nd::shape_str(x.shape()));
    if (x.dim(0) < 2)
        throw ContractError("temporal_forward: needs at least 2 channels, got " +
                            std::to_string(x.dim(0)));
    // Cross-channel conv embeds each timestamp; kernel-2 valid conv leaves
    // T' = T-1 graph nodes.
    Tensor e = nd::tanh(nd::channel_bias(nd::conv1d(x, p.enc_kernels),
                                         p.enc_bias));  // [n_e, T']
    Tensor z = nd::transpose(e);                        // [T', n_e]

    ModuleOutput res;
    res.map = run_heads(z, p.heads, MapKind::temporal);
    Tensor agg = aggregate_heads(res.map.heads, z, p.heads.a);  // [T', n_e]
    Tensor chan = nd::transpose(nd::matmul(agg, p.W_chan));     // [n, T']
    Tensor restored =
        nd::row_bias(nd::matmul(chan, p.W_time), p.b_out);      // [n, T]
    res.out =
        nd::layer_norm(nd::add(x, nd::tanh(restored)), p.ln_gain, p.ln_bias);
    return res;
}

namespace {

HeadParams make_heads(std::int64_t n_e, std::int64_t H, nd::Rng& rng) {
    HeadParams h;
    h.W_M.reserve(static_cast<std::size_t>(H));
    for (std::int64_t k = 0; k < H; ++k)
        h.W_M.push_back(Tensor::xavier({n_e, n_e}, n_e, n_e, rng));
    h.a = Tensor::zeros({H}, true);
    return h;
}

}  // namespace

SpatialModuleParams make_spatial_params(std::int64_t n, std::int64_t T,
                                        std::int64_t n_e, std::int64_t H,
                                        std::int64_t k, nd::Rng& rng) {
    (void)n;  // encoder is channel-shared; n only shapes the runtime input
    SpatialModuleParams p;
    p.enc_kernels = Tensor::xavier({n_e, 1, k}, k, n_e * k, rng);
    p.enc_bias = Tensor::zeros({n_e}, true);
    p.heads = make_heads(n_e, H, rng);
    p.W_out = Tensor::xavier({n_e, T}, n_e, T, rng);
    p.b_out = Tensor::zeros({T}, true);
    p.ln_gain = Tensor::full({T}, 1.0, true);
    p.ln_bias = Tensor::zeros({T}, true);
    return p;
}

TemporalModuleParams make_temporal_params(std::int64_t n, std::int64_t T,
                                          std::int64_t n_e, std::int64_t H,
                                          std::int64_t k, nd::Rng& rng) {
    const std::int64_t Tp = T - k + 1;
    if (Tp < 1)
        throw ContractError("temporal params: window of " + std::to_string(T) +
                            " samples cannot fit kernel " + std::to_string(k));
    TemporalModuleParams p;
    p.enc_kernels = Tensor::xavier({n_e, n, k}, n * k, n_e * k, rng);
    p.enc_bias = Tensor::zeros({n_e}, true);
    p.heads = make_heads(n_e, H, rng);
    p.W_chan = Tensor::xavier({n_e, n}, n_e, n, rng);
    p.W_time = Tensor::xavier({Tp, T}, Tp, T, rng);
    p.b_out = Tensor::zeros({T}, true);
    p.ln_gain = Tensor::full({T}, 1.0, true);
    p.ln_bias = Tensor::zeros({T}, true);
    return p;
}

namespace {

void visit_heads(HeadParams& h, const std::string& prefix,
                 const ParamVisitor& fn) {
    for (std::size_t k = 0; k < h.W_M.size(); ++k)
        fn(prefix + ".w_m" + std::to_string(k), h.W_M[k]);
    fn(prefix + ".a", h.a);
}

}  // namespace

void visit_params(SpatialModuleParams& p, const std::string& prefix,
                  const ParamVisitor& fn) {
    fn(prefix + ".enc_kernels", p.enc_kernels);
    fn(prefix + ".enc_bias", p.enc_bias);
    visit_heads(p.heads, prefix + ".heads", fn);
    fn(prefix + ".w_out", p.W_out);
    fn(prefix + ".b_out", p.b_out);
    fn(prefix + ".ln_gain", p.ln_gain);
    fn(prefix + ".ln_bias", p.ln_bias);
}

void visit_params(TemporalModuleParams& p, const std::string& prefix,
                  const ParamVisitor& fn) {
    fn(prefix + ".enc_kernels", p.enc_kernels);
    fn(prefix + ".enc_bias", p.enc_bias);
    visit_heads(p.heads, prefix + ".heads", fn);
    fn(prefix + ".w_chan", p.W_chan);
    fn(prefix + ".w_time", p.W_time);
    fn(prefix + ".b_out", p.b_out);
    fn(prefix + ".ln_gain", p.ln_gain);
    fn(prefix + ".ln_bias", p.ln_bias);
}

}  // namespace stan
