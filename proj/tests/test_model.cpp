#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "stan/checkpoint.hpp"
#include "stan/model.hpp"
#include "testutil.hpp"

using nd::Tensor;

namespace {

Tensor randn(nd::Shape shape, nd::Rng& rng, bool rg = false) {
    std::vector<double> v(static_cast<std::size_t>(nd::shape_numel(shape)));
    for (double& x : v) x = rng.normal();
    return Tensor::from_data(std::move(shape), std::move(v), rg);
}

stan::StanConfig toy_config() {
    stan::StanConfig cfg;
    cfg.M = 1;
    cfg.H = 2;
    cfg.n = 2;
    cfg.T = 8;
    cfg.spatial_dim = 3;
    cfg.temporal_dim = 4;
    return cfg;
}

}  // namespace

TEST_CASE("config validation") {
    stan::StanConfig cfg = toy_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.M = 0;
    CHECK_THROWS_AS(cfg.validate(), stan::ContractError);
    cfg = toy_config();
    cfg.n = 1;
    CHECK_THROWS_AS(cfg.validate(), stan::ContractError);
    cfg = toy_config();
    cfg.use_spatial = cfg.use_temporal = false;
    CHECK_THROWS_AS(cfg.validate(), stan::ContractError);
}

TEST_CASE("single-block cascade equals module composition") {
    nd::Rng rng(50);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    nd::Rng xr(51);
    Tensor x = randn({cfg.n, cfg.T}, xr);

    auto fwd = stan::forward_with_maps(x, cfg, params);
    auto s = stan::spatial_forward(x, params.blocks[0].spatial);
    auto t = stan::temporal_forward(s.out, params.blocks[0].temporal);
    for (std::int64_t i = 0; i < cfg.n; ++i)
        for (std::int64_t j = 0; j < cfg.T; ++j)
            CHECK(fwd.features.at({i, j}) == t.out.at({i, j}));
    nd::Tape::active().clear();
}

TEST_CASE("map set is structurally complete and blocks differ") {
    nd::Rng rng(52);
    stan::StanConfig cfg;
    cfg.M = 3;
    cfg.H = 2;
    cfg.n = 4;
    cfg.T = 16;
    cfg.spatial_dim = 5;
    cfg.temporal_dim = 6;
    auto params = stan::make_stan_params(cfg, rng);
    nd::Rng xr(53);
    Tensor x = randn({4, 16}, xr);
    auto fwd = stan::forward_with_maps(x, cfg, params);
    CHECK(fwd.maps.spatial.size() == 3);
    CHECK(fwd.maps.temporal.size() == 3);
    for (const auto& m : fwd.maps.spatial) CHECK(m.L == 4);
    for (const auto& m : fwd.maps.temporal) CHECK(m.L == 15);

    bool any_diff = false;
    const Tensor& a = fwd.maps.spatial[0].heads[0];
    const Tensor& b = fwd.maps.spatial[1].heads[0];
    for (std::int64_t i = 0; i < 4 && !any_diff; ++i)
        for (std::int64_t j = 0; j < 4; ++j)
            if (a.at({i, j}) != b.at({i, j})) {
                any_diff = true;
                break;
            }
    CHECK(any_diff);
    nd::Tape::active().clear();
}

TEST_CASE("forward rejects mismatched window") {
    nd::Rng rng(54);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    CHECK_THROWS_AS(stan::forward_with_maps(Tensor::zeros({3, 8}), cfg, params),
                    stan::ContractError);
}

TEST_CASE("identity decoder reconstructs perfectly") {
    nd::Rng rng(55);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    std::vector<double> eye(8 * 8, 0.0);
    for (int i = 0; i < 8; ++i) eye[static_cast<std::size_t>(i * 8 + i)] = 1.0;
    params.W_dec = Tensor::from_data({8, 8}, std::move(eye), true);
    params.b_dec = Tensor::zeros({8}, true);
    nd::Rng xr(56);
    Tensor f = randn({2, 8}, xr);
    Tensor loss = stan::recon_loss(stan::reconstruct(f, params), f);
    CHECK(loss.item() == 0.0);
    nd::Tape::active().clear();
}

TEST_CASE("reconstruction loss is nonnegative") {
    nd::Rng rng(57);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = randn({2, 8}, rng);
        auto fwd = stan::forward_with_maps(x, cfg, params);
        CHECK(stan::recon_loss(stan::reconstruct(fwd.features, params), x).item() >=
              0.0);
    }
    nd::Tape::active().clear();
}

TEST_CASE("pretraining decreases smoothed reconstruction loss") {
    nd::Rng rng(58);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    std::vector<Tensor> windows;
    nd::Rng xr(59);
    for (int i = 0; i < 8; ++i) windows.push_back(randn({2, 8}, xr));

    std::vector<Tensor> opt_params;
    stan::visit_params(params, [&](const std::string&, Tensor& t) {
        opt_params.push_back(t);
    });
    nd::Adam opt(opt_params, 0.001);
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step)
        losses.push_back(stan::pretrain_step(windows, cfg, params, opt));
    auto smooth = [&](std::size_t begin) {
        double acc = 0.0;
        for (std::size_t i = begin; i < begin + 20; ++i) acc += losses[i];
        return acc / 20.0;
    };
    CHECK(smooth(180) < smooth(0));
}

TEST_CASE("zero learning rate leaves parameters untouched") {
    nd::Rng rng(60);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    std::vector<Tensor> opt_params;
    stan::visit_params(params, [&](const std::string&, Tensor& t) {
        opt_params.push_back(t);
    });
    nd::Adam opt(opt_params, 0.0);
    nd::Rng xr(61);
    std::vector<Tensor> batch = {randn({2, 8}, xr)};
    const std::uint64_t before = stan::params_checksum(params);
    stan::pretrain_step(batch, cfg, params, opt);
    CHECK(stan::params_checksum(params) == before);
}

TEST_CASE("single-sample batch loss equals direct recomputation") {
    nd::Rng rng(62);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    nd::Rng xr(63);
    Tensor x = randn({2, 8}, xr);

    double expect = 0.0;
    {
        nd::NoGradGuard ng;
        auto fwd = stan::forward_with_maps(x, cfg, params);
        Tensor xhat = stan::reconstruct(fwd.features, params);
        for (std::int64_t i = 0; i < 2; ++i)
            for (std::int64_t j = 0; j < 8; ++j) {
                const double d = xhat.at({i, j}) - x.at({i, j});
                expect += d * d;
            }
    }
    std::vector<Tensor> opt_params;
    stan::visit_params(params, [&](const std::string&, Tensor& t) {
        opt_params.push_back(t);
    });
    nd::Adam opt(opt_params, 0.0);
    const double loss = stan::pretrain_step({x}, cfg, params, opt);
    CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("end-to-end pretrain gradients match finite differences") {
    nd::Rng rng(64);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    nd::Rng xr(65);
    Tensor x = randn({2, 8}, xr);

    std::vector<Tensor> inputs;
    stan::visit_params(params, [&](const std::string&, Tensor& t) {
        inputs.push_back(t);
    });
    auto res = testutil::grad_check(inputs, [&] {
        auto fwd = stan::forward_with_maps(x, cfg, params);
        return stan::recon_loss(stan::reconstruct(fwd.features, params), x);
    }, 1e-3);
    INFO(res.detail);
    CHECK(res.ok);
}

TEST_CASE("parameter count grows strictly with depth") {
    std::int64_t prev = 0;
    for (std::int64_t M = 1; M <= 3; ++M) {
        nd::Rng rng(66);
        stan::StanConfig cfg = toy_config();
        cfg.M = M;
        auto params = stan::make_stan_params(cfg, rng);
        const std::int64_t count = stan::param_count(params);
        CHECK(count > prev);
        prev = count;
    }
}

TEST_CASE("freeze blocks gradient accumulation and preserves bits") {
    nd::Rng rng(67);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    stan::freeze(params);
    const std::uint64_t before = stan::params_checksum(params);

    nd::Rng xr(68);
    Tensor x = randn({2, 8}, xr, true);  // keeps the tape non-empty
    auto fwd = stan::forward_with_maps(x, cfg, params);
    nd::backward(nd::sum(fwd.features));
    CHECK(x.has_grad());
    stan::visit_params(params, [&](const std::string& name, Tensor& t) {
        INFO(name);
        CHECK_FALSE(t.has_grad());
        CHECK(t.frozen());
    });
    CHECK(stan::params_checksum(params) == before);
}

TEST_CASE("checkpoint round trip preserves every bit") {
    nd::Rng rng(69);
    stan::Checkpoint ck;
    ck.model_cfg = toy_config();
    ck.backbone = stan::make_stan_params(ck.model_cfg, rng);
    ck.disc_cfg.spatial_kernel = 2;
    ck.disc_cfg.temporal_kernel = 3;
    ck.disc_cfg.spatial_pool = 1;
    ck.disc_cfg.temporal_pool = 2;
    ck.disc_cfg.spatial_filters = 2;
    ck.disc_cfg.temporal_filters = 2;
    ck.disc_cfg.feature_dim = 8;
    ck.disc_cfg.fc_units = 6;
    ck.has_disc = true;
    ck.disc = stan::make_disc_params(ck.disc_cfg, ck.model_cfg, rng);
    ck.has_norm = true;
    ck.norm_mean = {0.5, -0.25};
    ck.norm_std = {1.5, 2.0};

    const std::string path = "/tmp/test_model_ckpt.bin";
    stan::save_checkpoint(path, ck);
    stan::Checkpoint back = stan::load_checkpoint(path);

    CHECK(back.model_cfg.M == ck.model_cfg.M);
    CHECK(back.model_cfg.T == ck.model_cfg.T);
    CHECK(back.disc_cfg.feature_dim == 8);
    CHECK(back.has_disc);
    CHECK(stan::params_checksum(back.backbone) == stan::params_checksum(ck.backbone));
    std::vector<double> a, b;
    stan::visit_params(back.disc, [&](const std::string&, Tensor& t) {
        for (double v : t.values()) a.push_back(v);
    });
    stan::visit_params(ck.disc, [&](const std::string&, Tensor& t) {
        for (double v : t.values()) b.push_back(v);
    });
    CHECK(a == b);
    CHECK(back.norm_mean == ck.norm_mean);
    CHECK(back.norm_std == ck.norm_std);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects foreign and truncated files") {
    const std::string bad = "/tmp/test_model_bad.bin";
    {
        std::ofstream out(bad, std::ios::binary);
        out << "NOTACKPTxxxxxxxxxxxxxxxx";
    }
    CHECK_THROWS_AS(stan::load_checkpoint(bad), stan::UnsupportedFormatError);
    {
        std::ofstream out(bad, std::ios::binary);
        out << "STANCKPT";  // magic only, then EOF
    }
    CHECK_THROWS_AS(stan::load_checkpoint(bad), stan::ParseError);
    std::remove(bad.c_str());
    CHECK_THROWS_AS(stan::load_checkpoint("/tmp/test_model_absent.bin"),
                    stan::Error);
}

TEST_CASE("forward is deterministic for fixed params and input") {
    nd::Rng rng(70);
    stan::StanConfig cfg = toy_config();
    auto params = stan::make_stan_params(cfg, rng);
    nd::Rng xr(71);
    Tensor x = randn({2, 8}, xr);
    nd::NoGradGuard ng;
    auto f1 = stan::forward_with_maps(x, cfg, params);
    auto f2 = stan::forward_with_maps(x, cfg, params);
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 8; ++j)
            CHECK(f1.features.at({i, j}) == f2.features.at({i, j}));
}
