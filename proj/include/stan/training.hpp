#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stan/checkpoint.hpp"
#include "stan/data.hpp"
#include "stan/discriminator.hpp"
#include "stan/model.hpp"

namespace stan {

struct TrainConfig {
    int pretrain_epochs = 50;
    double pretrain_lr = 0.001;
    int disc_epochs = 100;
    double disc_lr = 0.00004;
    int batch_size = 32;
    double lambda_gp = 0.05;
    double drift_eps = 0.1;  // keeps the critic's mean logit near 0
    std::uint64_t seed = 0;

    void validate() const;
};

struct PretrainResult {
    std::vector<double> epoch_loss;  // mean per-window loss, one per epoch
    int best_epoch = -1;
    double best_loss = 0.0;
    std::string best_path;  // empty when no out_dir was given
    std::string last_path;
};

// Reconstruction pretraining of the backbone. Writes best.ckpt / last.ckpt
// under out_dir when given; a non-finite loss aborts with the epoch, batch
// index, and per-tensor parameter norms in the message.
PretrainResult pretrain(StanParams& p, const StanConfig& cfg,
                        const std::vector<LabeledWindow>& windows,
                        const TrainConfig& tc, const std::string& out_dir = "",
                        const NormStats* norm = nullptr);

struct DiscTrainResult {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_logit_inter;
    std::vector<double> epoch_logit_pre;
};

// Adversarial stage over a frozen backbone: per step one batch of each
// class is pushed through the backbone and the critic takes one Adam step.
// Refuses an unfrozen backbone; aborts when the unweighted gradient penalty
// exceeds 100 for ten consecutive steps. Appends one CSV row per epoch
// ("epoch,loss,mean_logit_inter,mean_logit_pre") to log_path when given.
DiscTrainResult train_discriminator(const StanParams& backbone,
                                    const StanConfig& cfg, DiscParams& disc,
                                    const DiscriminatorConfig& dc,
                                    const std::vector<LabeledWindow>& windows,
                                    const TrainConfig& tc,
                                    const std::string& log_path = "",
                                    DiscObjective objective =
                                        DiscObjective::wgan_gp);

}  // namespace stan
