#include "stan/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace stan {

void Recording::validate() const {
    if (sample_rate <= 0.0) throw DataError("sample rate must be positive");
    for (const auto& ch : samples) {
        if (static_cast<std::int64_t>(ch.size()) != n_samples())
            throw DataError("channels of '" + subject_id +
                            "' have unequal lengths");
    }
    if (channels.size() != samples.size())
        throw DataError("channel label count does not match signal count");
    for (std::size_t i = 1; i < onsets.size(); ++i) {
        if (onsets[i] <= onsets[i - 1])
            throw DataError("onsets must be strictly increasing");
    }
    for (double t : onsets) {
        if (t < 0.0 || t > duration())
            throw DataError("onset at " + std::to_string(t) +
                            " s lies outside the recording of '" + subject_id +
                            "'");
    }
}

Zone label_window(double t_start, std::span<const double> onsets,
                  const LabelConfig& lc) {
    bool clear = true;
    for (double onset : onsets) {
        if (t_start >= onset - lc.horizon && t_start < onset)
            return Zone::preictal;
        if (std::abs(t_start - onset) <= lc.margin) clear = false;
    }
    return clear ? Zone::interictal : Zone::unlabeled;
}

Zone window_zone(double t_start, double len, std::span<const double> onsets,
                 const LabelConfig& lc) {
    if (len <= 0.0) throw ContractError("window length must be positive");
    // Entirely inside one preictal span?
    for (double onset : onsets) {
        if (t_start >= onset - lc.horizon && t_start + len <= onset)
            return Zone::preictal;
    }
    // Entirely clear of every onset by more than the margin?
    bool clear = true;
    for (double onset : onsets) {
        double lo = t_start - onset;          // window start relative to onset
        double hi = t_start + len - onset;    // window end relative to onset
        double dist = 0.0;
        if (hi < 0.0) dist = -hi;
        else if (lo > 0.0) dist = lo;
        if (dist <= lc.margin) clear = false;
    }
    return clear ? Zone::interictal : Zone::unlabeled;
}

std::vector<LabeledWindow> make_windows(const Recording& rec,
                                        std::int64_t window_samples,
                                        const LabelConfig& lc) {
    rec.validate();
    if (window_samples <= 0)
        throw ContractError("window_samples must be positive");
    const std::int64_t n = rec.n_channels();
    const std::int64_t total = rec.n_samples();
    const double len = static_cast<double>(window_samples) / rec.sample_rate;
    std::vector<LabeledWindow> out;
    for (std::int64_t start = 0; start + window_samples <= total;
         start += window_samples) {
        const double t = static_cast<double>(start) / rec.sample_rate;
        Zone z = window_zone(t, len, rec.onsets, lc);
        if (z == Zone::unlabeled) continue;
        auto w = nd::Tensor::zeros({n, window_samples});
        double* d = w.data();
        for (std::int64_t c = 0; c < n; ++c)
            for (std::int64_t j = 0; j < window_samples; ++j)
                d[c * window_samples + j] = rec.samples[c][start + j];
        LabeledWindow lw;
        lw.window = w;
        lw.label = z == Zone::preictal ? kPreictal : kInterictal;
        lw.source = {rec.subject_id, rec.name.empty() ? rec.subject_id : rec.name, t};
        out.push_back(std::move(lw));
    }
    return out;
}

std::vector<LabeledWindow> make_training_set(
    const std::vector<LabeledWindow>& windows, std::uint64_t seed) {
    // Group window indices by subject, preserving order within each group.
    std::map<std::string, std::pair<std::vector<std::size_t>,
                                    std::vector<std::size_t>>>
        by_subject;  // subject -> (preictal idx, interictal idx)
    for (std::size_t i = 0; i < windows.size(); ++i) {
        auto& entry = by_subject[windows[i].source.subject_id];
        if (windows[i].label == kPreictal) entry.first.push_back(i);
        else entry.second.push_back(i);
    }
    nd::Rng rng(seed);
    std::vector<LabeledWindow> out;
    std::size_t subject_index = 0;
    for (auto& [subject, groups] : by_subject) {
        auto& [pre, inter] = groups;
        if (pre.empty())
            throw DataError("subject '" + subject + "' has no preictal windows");
        if (inter.empty())
            throw DataError("subject '" + subject +
                            "' has no interictal windows");
        if (inter.size() < pre.size())
            throw DataError("subject '" + subject +
                            "' has fewer interictal than preictal windows");
        auto child = rng.fork("balance", subject_index++);
        child.shuffle(inter);
        inter.resize(pre.size());
        std::sort(inter.begin(), inter.end());
        for (std::size_t i : pre) out.push_back(windows[i]);
        for (std::size_t i : inter) out.push_back(windows[i]);
    }
    return out;
}

Recording generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n <= 0) throw ContractError("synthetic channel count must be positive");
    if (spec.duration <= 0.0 || spec.sample_rate <= 0.0)
        throw ContractError("synthetic duration and sample rate must be positive");
    const std::int64_t total =
        static_cast<std::int64_t>(std::llround(spec.duration * spec.sample_rate));
    nd::Rng rng(spec.seed);
    auto source_rng = rng.fork("source", 0);
    auto rhythm_rng = rng.fork("rhythm", 0);

    Recording rec;
    rec.subject_id = spec.subject_id;
    rec.name = spec.name;
    rec.sample_rate = spec.sample_rate;
    rec.onsets = spec.onsets;
    rec.samples.assign(static_cast<std::size_t>(spec.n),
                       std::vector<double>(static_cast<std::size_t>(total), 0.0));
    rec.channels.resize(static_cast<std::size_t>(spec.n));
    for (std::int64_t c = 0; c < spec.n; ++c)
        rec.channels[static_cast<std::size_t>(c)] =
            "SYN" + std::to_string(c + 1);

    // Preictal ramp weight at time t: linear 0 -> 1 over the window before
    // each onset, zero elsewhere.
    auto ramp = [&](double t) {
        double w = 0.0;
        for (double onset : spec.onsets) {
            if (t >= onset - spec.preictal_len && t < onset)
                w = std::max(w, 1.0 - (onset - t) / spec.preictal_len);
        }
        return w;
    };

    const double rho = 0.9;           // AR(1) pole for background and source
    const double base_coupling = 0.05;
    const double drive = spec.noise * std::sqrt(1.0 - rho * rho);

    // Shared source, same for every channel.
    std::vector<double> source(static_cast<std::size_t>(total), 0.0);
    double s = 0.0;
    for (std::int64_t i = 0; i < total; ++i) {
        s = rho * s + drive * source_rng.normal();
        source[static_cast<std::size_t>(i)] = s;
    }

    // Shared rhythm whose frequency drifts upward through the ramp.
    std::vector<double> rhythm(static_cast<std::size_t>(total), 0.0);
    double phase = rhythm_rng.uniform() * 2.0 * std::numbers::pi;
    const double f_lo = 3.0, f_hi = 8.0;
    for (std::int64_t i = 0; i < total; ++i) {
        const double t = static_cast<double>(i) / spec.sample_rate;
        const double f = f_lo + (f_hi - f_lo) * ramp(t);
        phase += 2.0 * std::numbers::pi * f / spec.sample_rate;
        rhythm[static_cast<std::size_t>(i)] = std::sin(phase);
    }

    for (std::int64_t c = 0; c < spec.n; ++c) {
        auto ch_rng = rng.fork("channel", static_cast<std::uint64_t>(c));
        auto& ch = rec.samples[static_cast<std::size_t>(c)];
        double x = 0.0;
        for (std::int64_t i = 0; i < total; ++i) {
            const double t = static_cast<double>(i) / spec.sample_rate;
            const double w = ramp(t);
            x = rho * x + drive * ch_rng.normal();
            const double coupling = base_coupling + spec.strength * w;
            ch[static_cast<std::size_t>(i)] =
                x + coupling * source[static_cast<std::size_t>(i)] +
                0.5 * spec.strength * w * rhythm[static_cast<std::size_t>(i)];
        }
    }
    rec.validate();
    return rec;
}

NormStats compute_norm(const std::vector<LabeledWindow>& windows) {
    if (windows.empty())
        throw DataError("cannot compute normalization from zero windows");
    const std::int64_t n = windows[0].window.dim(0);
    NormStats stats;
    stats.mean.assign(static_cast<std::size_t>(n), 0.0);
    stats.std_dev.assign(static_cast<std::size_t>(n), 0.0);
    std::vector<double> sq(static_cast<std::size_t>(n), 0.0);
    std::int64_t count = 0;
    for (const auto& lw : windows) {
        if (lw.window.dim(0) != n)
            throw DataError("windows disagree on channel count");
        const std::int64_t t = lw.window.dim(1);
        const double* d = lw.window.values().data();
        for (std::int64_t c = 0; c < n; ++c) {
            for (std::int64_t j = 0; j < t; ++j) {
                const double v = d[c * t + j];
                stats.mean[static_cast<std::size_t>(c)] += v;
                sq[static_cast<std::size_t>(c)] += v * v;
            }
        }
        count += t;
    }
    for (std::int64_t c = 0; c < n; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        stats.mean[ci] /= static_cast<double>(count);
        const double var =
            sq[ci] / static_cast<double>(count) - stats.mean[ci] * stats.mean[ci];
        stats.std_dev[ci] = std::sqrt(std::max(var, 1e-12));
    }
    return stats;
}

nd::Tensor normalize_window(const nd::Tensor& w, const NormStats& stats) {
    if (w.ndim() != 2)
        throw ShapeError("normalize_window expects a [n, T] window");
    const std::int64_t n = w.dim(0), t = w.dim(1);
    if (static_cast<std::size_t>(n) != stats.mean.size())
        throw DataError("normalization stats cover a different channel count");
    auto out = nd::Tensor::zeros({n, t});
    double* o = out.data();
    const double* d = w.values().data();
    for (std::int64_t c = 0; c < n; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        for (std::int64_t j = 0; j < t; ++j)
            o[c * t + j] = (d[c * t + j] - stats.mean[ci]) / stats.std_dev[ci];
    }
    return out;
}

void apply_norm(std::vector<LabeledWindow>& windows, const NormStats& stats) {
    for (auto& lw : windows) lw.window = normalize_window(lw.window, stats);
}

}  // namespace stan
