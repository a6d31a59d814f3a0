#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nd/rng.hpp"
#include "nd/tensor.hpp"
#include "stan/errors.hpp"

namespace stan {

struct Recording {
    std::string subject_id;
    std::string name;  // recording identity within a subject
    std::vector<std::string> channels;
    double sample_rate = 256.0;
    std::vector<std::vector<double>> samples;  // [channel][sample]
    std::vector<double> onsets;                // seizure starts, seconds

    std::int64_t n_channels() const {
        return static_cast<std::int64_t>(samples.size());
    }
    std::int64_t n_samples() const {
        return samples.empty() ? 0
                               : static_cast<std::int64_t>(samples[0].size());
    }
    double duration() const {
        return static_cast<double>(n_samples()) / sample_rate;
    }
    // DataError on inconsistent channels, non-increasing onsets, onsets
    // beyond the recorded span, or a non-positive sample rate.
    void validate() const;
};

enum class Zone { preictal, interictal, unlabeled };

struct LabelConfig {
    double horizon = 15.0 * 60.0;   // preictal span before each onset
    double margin = 4.0 * 3600.0;   // interictal distance from every onset
};

// Point label: preictal iff t in [onset - horizon, onset) for some onset,
// interictal iff strictly farther than margin from every onset (both sides).
Zone label_window(double t_start, std::span<const double> onsets,
                  const LabelConfig& lc = {});

// Window label with the straddle rule: the whole [t, t+len) span must sit in
// one zone, else the window is unlabeled.
Zone window_zone(double t_start, double len, std::span<const double> onsets,
                 const LabelConfig& lc = {});

struct WindowSource {
    std::string subject_id;
    std::string recording;
    double offset_seconds = 0.0;
};

struct LabeledWindow {
    nd::Tensor window;  // [n, T]
    int label = 0;      // preictal = 0, interictal = 1
    WindowSource source;
};

inline constexpr int kPreictal = 0;
inline constexpr int kInterictal = 1;

// Non-overlapping windows of window_samples, offsets at integer multiples,
// straddling or unlabeled spans skipped.
std::vector<LabeledWindow> make_windows(const Recording& rec,
                                        std::int64_t window_samples,
                                        const LabelConfig& lc = {});

// Keeps every preictal window; subsamples interictal windows per subject,
// without replacement, down to that subject's preictal count.
std::vector<LabeledWindow> make_training_set(
    const std::vector<LabeledWindow>& windows, std::uint64_t seed);

struct SyntheticSpec {
    std::int64_t n = 6;
    double duration = 1800.0;
    double sample_rate = 256.0;
    std::vector<double> onsets;
    double strength = 1.0;       // preictal coupling + rhythm gain
    double preictal_len = 900.0; // ramp length before each onset
    double noise = 1.0;
    std::uint64_t seed = 0;
    std::string subject_id = "synthetic";
    std::string name = "synthetic";
};

// Interictal background: per-channel AR(1) noise plus a weakly shared
// source. In the preictal ramp the shared coupling and an upward-drifting
// rhythm scale linearly from 0 to `strength`.
Recording generate_synthetic(const SyntheticSpec& spec);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std_dev;
};

NormStats compute_norm(const std::vector<LabeledWindow>& windows);
nd::Tensor normalize_window(const nd::Tensor& w, const NormStats& stats);
void apply_norm(std::vector<LabeledWindow>& windows, const NormStats& stats);

}  // namespace stan
