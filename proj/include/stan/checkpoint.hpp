#pragma once

#include <string>
#include <vector>

#include "stan/discriminator.hpp"
#include "stan/model.hpp"

namespace stan {

// On-disk training state. Format (all integers little-endian):
//   magic "STANCKPT" | u32 version | fixed-order config fields |
//   u8 has_disc | u8 has_norm | named f64 blobs per present section.
// Blob names follow the visit_params naming scheme, so a loaded file can be
// validated tensor by tensor.
struct Checkpoint {
    StanConfig model_cfg;
    DiscriminatorConfig disc_cfg;
    StanParams backbone;
    bool has_disc = false;
    DiscParams disc;
    bool has_norm = false;
    std::vector<double> norm_mean;  // per channel
    std::vector<double> norm_std;
};

void save_checkpoint(const std::string& path, Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace stan
