#include "stan/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

namespace stan {
namespace {

std::string norms_summary(StanParams& p) {
    std::string out;
    visit_params(p, [&](const std::string& name, nd::Tensor& t) {
        double sq = 0.0;
        for (double v : t.values()) sq += v * v;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6g", std::sqrt(sq));
        out += "\n  " + name + " |.|=" + buf;
    });
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<nd::Tensor> collect(StanParams& p) {
    std::vector<nd::Tensor> out;
    visit_params(p, [&](const std::string&, nd::Tensor& t) { out.push_back(t); });
    return out;
}

std::vector<nd::Tensor> collect(DiscParams& p) {
    std::vector<nd::Tensor> out;
    visit_params(p, [&](const std::string&, nd::Tensor& t) { out.push_back(t); });
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (pretrain_epochs < 0 || disc_epochs < 0)
        throw ConfigError("epoch counts cannot be negative");
    if (pretrain_lr < 0.0 || disc_lr < 0.0)
        throw ConfigError("learning rates cannot be negative");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (lambda_gp < 0.0)
        throw ConfigError("gradient-penalty weight cannot be negative");
    if (drift_eps < 0.0)
        throw ConfigError("drift-penalty weight cannot be negative");
}

PretrainResult pretrain(StanParams& p, const StanConfig& cfg,
                        const std::vector<LabeledWindow>& windows,
                        const TrainConfig& tc, const std::string& out_dir,
                        const NormStats* norm) {
    tc.validate();
    cfg.validate();
    if (windows.empty()) throw DataError("pretraining needs at least one window");
    for (const auto& lw : windows) {
        if (lw.window.dim(0) != cfg.n || lw.window.dim(1) != cfg.T)
            throw ShapeError("window shape does not match the model config");
    }

    auto make_ck = [&]() {
        Checkpoint ck;
        ck.model_cfg = cfg;
        ck.backbone = p;
        if (norm != nullptr) {
            ck.has_norm = true;
            ck.norm_mean = norm->mean;
            ck.norm_std = norm->std_dev;
        }
        return ck;
    };
    const bool save = !out_dir.empty();
    if (save) std::filesystem::create_directories(out_dir);

    PretrainResult res;
    res.best_loss = std::numeric_limits<double>::infinity();
    if (save) {
        res.last_path = out_dir + "/last.ckpt";
        res.best_path = out_dir + "/best.ckpt";
    }
    if (tc.pretrain_epochs == 0) {
        if (save) {
            auto ck = make_ck();
            save_checkpoint(res.last_path, ck);
            res.best_path.clear();
        }
        return res;
    }

    nd::Adam opt(collect(p), tc.pretrain_lr);
    nd::Rng rng(tc.seed);
    std::vector<std::size_t> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < tc.pretrain_epochs; ++epoch) {
        auto er = rng.fork("pretrain_epoch", static_cast<std::uint64_t>(epoch));
        er.shuffle(order);
        double loss_sum = 0.0;
        std::size_t seen = 0, batch_index = 0;
        for (std::size_t at = 0; at < order.size();
             at += static_cast<std::size_t>(tc.batch_size), ++batch_index) {
            const std::size_t hi = std::min(
                order.size(), at + static_cast<std::size_t>(tc.batch_size));
            std::vector<nd::Tensor> batch;
            batch.reserve(hi - at);
            for (std::size_t i = at; i < hi; ++i)
                batch.push_back(windows[order[i]].window);
            double loss;
            try {
                loss = pretrain_step(batch, cfg, p, opt);
            } catch (const NumericError& e) {
                throw NumericError(
                    std::string(e.what()) + "; pretraining aborted at epoch " +
                    std::to_string(epoch) + ", batch " +
                    std::to_string(batch_index) +
                    "; parameter norms:" + norms_summary(p));
            }
            loss_sum += loss * static_cast<double>(hi - at);
            seen += hi - at;
        }
        const double mean_loss = loss_sum / static_cast<double>(seen);
        res.epoch_loss.push_back(mean_loss);
        if (mean_loss < res.best_loss) {
            res.best_loss = mean_loss;
            res.best_epoch = epoch;
            if (save) {
                auto ck = make_ck();
                save_checkpoint(res.best_path, ck);
            }
        }
    }
    if (save) {
        auto ck = make_ck();
        save_checkpoint(res.last_path, ck);
    }
    return res;
}

DiscTrainResult train_discriminator(const StanParams& backbone,
                                    const StanConfig& cfg, DiscParams& disc,
                                    const DiscriminatorConfig& dc,
                                    const std::vector<LabeledWindow>& windows,
                                    const TrainConfig& tc,
                                    const std::string& log_path,
                                    DiscObjective objective) {
    tc.validate();
    cfg.validate();
    DiscriminatorConfig d = dc;
    d.lambda_gp = tc.lambda_gp;
    d.drift_eps = tc.drift_eps;
    d.validate();

    bool any_live = false;
    auto& bb = const_cast<StanParams&>(backbone);
    visit_params(bb, [&](const std::string&, nd::Tensor& t) {
        if (!t.frozen() || t.requires_grad()) any_live = true;
    });
    if (any_live)
        throw ContractError(
            "the backbone must be frozen before adversarial training");

    std::vector<std::size_t> pre, inter;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i].window.dim(0) != cfg.n || windows[i].window.dim(1) != cfg.T)
            throw ShapeError("window shape does not match the model config");
        (windows[i].label == kPreictal ? pre : inter).push_back(i);
    }
    if (pre.empty() || inter.empty())
        throw DataError("adversarial training needs windows of both classes");

    DiscTrainResult res;
    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw DataError("cannot write training log '" + log_path + "'");
        log << "epoch,loss,mean_logit_inter,mean_logit_pre\n";
    }
    if (tc.disc_epochs == 0) return res;

    nd::Adam opt(collect(disc), tc.disc_lr);
    nd::Rng rng(tc.seed);
    auto noise = rng.fork("disc_noise", 0);  // dropout and GP interpolation

    const auto batch = static_cast<std::size_t>(tc.batch_size);
    const std::size_t steps =
        (std::max(pre.size(), inter.size()) + batch - 1) / batch;
    int hot_streak = 0;

    auto maps_of = [&](std::size_t idx) {
        return forward_with_maps(windows[idx].window, cfg, backbone).maps;
    };

    for (int epoch = 0; epoch < tc.disc_epochs; ++epoch) {
        auto ep = rng.fork("disc_pre", static_cast<std::uint64_t>(epoch));
        auto ei = rng.fork("disc_inter", static_cast<std::uint64_t>(epoch));
        auto pre_order = pre;
        auto inter_order = inter;
        ep.shuffle(pre_order);
        ei.shuffle(inter_order);

        double loss_sum = 0.0, li_sum = 0.0, lp_sum = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<AttentionMapSet> batch_inter, batch_pre;
            for (std::size_t k = 0; k < batch; ++k) {
                const std::size_t j = s * batch + k;
                batch_pre.push_back(maps_of(pre_order[j % pre_order.size()]));
                batch_inter.push_back(
                    maps_of(inter_order[j % inter_order.size()]));
            }
            opt.zero_grad();
            auto loss = discriminator_loss(batch_inter, batch_pre, d, disc,
                                           noise, objective, true);
            if (objective == DiscObjective::wgan_gp && loss.penalty > 100.0) {
                if (++hot_streak >= 10)
                    throw NumericError(
                        "gradient penalty above 100 for 10 consecutive steps "
                        "(epoch " + std::to_string(epoch) + ", step " +
                        std::to_string(s) + ", penalty " + fmt(loss.penalty) +
                        "); adversarial training diverged");
            } else {
                hot_streak = 0;
            }
            nd::backward(loss.total);
            opt.step();
            loss_sum += loss.total.item();
            li_sum += loss.mean_logit_inter;
            lp_sum += loss.mean_logit_pre;
        }
        const double n = static_cast<double>(steps);
        res.epoch_loss.push_back(loss_sum / n);
        res.epoch_logit_inter.push_back(li_sum / n);
        res.epoch_logit_pre.push_back(lp_sum / n);
        if (log.is_open()) {
            log << epoch << ',' << fmt(res.epoch_loss.back()) << ','
                << fmt(res.epoch_logit_inter.back()) << ','
                << fmt(res.epoch_logit_pre.back()) << '\n';
            log.flush();
        }
    }
    return res;
}

}  // namespace stan
