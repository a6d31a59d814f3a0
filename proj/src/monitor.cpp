#include "stan/monitor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "stan/discriminator.hpp"

namespace stan {
namespace {

std::int64_t exact_samples(double seconds, double rate, const char* what) {
    const double f = seconds * rate;
    const double r = std::round(f);
    if (std::abs(f - r) > 1e-9 || r < 1.0)
        throw ConfigError(std::string(what) +
                          " does not land on a whole sample count at " +
                          std::to_string(rate) + " Hz");
    return static_cast<std::int64_t>(r);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void MonitorConfig::validate() const {
    if (stride <= 0.0 || window_len <= 0.0 || span <= 0.0)
        throw ConfigError("monitor: stride, window_len, and span must be positive");
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ConfigError("monitor: threshold must lie strictly in (0, 1)");
    if (refractory < 0.0) throw ConfigError("monitor: refractory cannot be negative");
    const double ratio = ma_span / stride;
    if (ma_span < stride || std::abs(ratio - std::round(ratio)) > 1e-9)
        throw ConfigError("monitor: ma_span must be a positive multiple of stride");
}

double score_window(const Checkpoint& ck, const nd::Tensor& window) {
    if (!ck.has_disc)
        throw ContractError("scoring needs a checkpoint with a discriminator");
    nd::Tensor x = window;
    if (ck.has_norm) {
        NormStats stats{ck.norm_mean, ck.norm_std};
        x = normalize_window(x, stats);
    }
    nd::NoGradGuard guard;
    auto maps = forward_with_maps(x, ck.model_cfg, ck.backbone).maps;
    EvalMode eval;
    auto& disc = const_cast<DiscParams&>(ck.disc);
    auto f = extract_features(maps, ck.disc_cfg, disc, eval);
    return score(f, ck.disc_cfg, disc, eval).risk.item();
}

std::vector<double> score_stream(const Recording& rec, double start,
                                 double span, const Checkpoint& ck,
                                 const MonitorConfig& mc) {
    mc.validate();
    rec.validate();
    if (start < 0.0 || start + span > rec.duration() + 1e-9)
        throw InputTooShortError(
            "monitoring span [" + fmt(start) + ", " + fmt(start + span) +
            "] s exceeds the available range [0, " + fmt(rec.duration()) +
            "] s");

    const std::int64_t stride_s =
        exact_samples(mc.stride, rec.sample_rate, "stride");
    const std::int64_t window_s =
        exact_samples(mc.window_len, rec.sample_rate, "window length");
    if (window_s != ck.model_cfg.T)
        throw ConfigError("window length x sample rate (" +
                          std::to_string(window_s) +
                          ") does not match the model's window of " +
                          std::to_string(ck.model_cfg.T) + " samples");
    if (rec.n_channels() != ck.model_cfg.n)
        throw ConfigError("recording has " + std::to_string(rec.n_channels()) +
                          " channels but the model expects " +
                          std::to_string(ck.model_cfg.n));
    if (window_s > stride_s)
        throw ConfigError("monitor: window_len longer than the stride");

    const auto start_s = static_cast<std::int64_t>(
        std::llround(start * rec.sample_rate));
    const auto ticks = static_cast<std::int64_t>(
        std::floor(span / mc.stride + 1e-9));

    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(ticks));
    const std::int64_t n = rec.n_channels();
    for (std::int64_t k = 0; k < ticks; ++k) {
        const std::int64_t end = start_s + (k + 1) * stride_s;
        const std::int64_t lo = end - window_s;
        auto w = nd::Tensor::zeros({n, window_s});
        double* d = w.data();
        for (std::int64_t c = 0; c < n; ++c)
            for (std::int64_t j = 0; j < window_s; ++j)
                d[c * window_s + j] =
                    rec.samples[static_cast<std::size_t>(c)]
                               [static_cast<std::size_t>(lo + j)];
        scores.push_back(score_window(ck, w));
    }
    return scores;
}

std::vector<double> moving_average(const std::vector<double>& raw,
                                   const MonitorConfig& mc) {
    mc.validate();
    if (raw.empty()) throw ContractError("moving_average: empty series");
    const std::int64_t m = mc.ma_points();
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const std::size_t lo =
            i + 1 >= static_cast<std::size_t>(m) ? i + 1 - static_cast<std::size_t>(m) : 0;
        double sum = 0.0;
        for (std::size_t j = lo; j <= i; ++j) sum += raw[j];
        out[i] = sum / static_cast<double>(i - lo + 1);
    }
    return out;
}

StreamingSmoother::StreamingSmoother(std::int64_t points) : points_(points) {
    if (points < 1)
        throw ContractError("StreamingSmoother needs at least one point");
}

double StreamingSmoother::push(double raw) {
    buf_.push_back(raw);
    if (static_cast<std::int64_t>(buf_.size()) > points_)
        buf_.erase(buf_.begin());
    double sum = 0.0;
    for (double v : buf_) sum += v;  // ascending order, as offline
    return sum / static_cast<double>(buf_.size());
}

double AlarmScan::earliest() const {
    if (alarms.empty()) throw ContractError("no alarm fired");
    return alarms.front().time;
}

AlarmScan detect_alarms(const std::vector<double>& times,
                        const std::vector<double>& smoothed,
                        const MonitorConfig& mc) {
    mc.validate();
    if (times.size() != smoothed.size())
        throw ContractError("detect_alarms: times and scores differ in length");
    AlarmScan scan;
    scan.flags.assign(smoothed.size(), 0);
    bool prev_above = true;  // a stream opening below the threshold alarms
    bool armed = false;      // an alarm exists whose refractory may be live
    double last_alarm = 0.0;
    for (std::size_t i = 0; i < smoothed.size(); ++i) {
        const bool below = smoothed[i] < mc.threshold;
        if (below && prev_above) {
            if (!armed || times[i] - last_alarm >= mc.refractory) {
                scan.alarms.push_back({times[i], smoothed[i]});
                scan.flags[i] = 1;
                armed = true;
                last_alarm = times[i];
            }
        }
        prev_above = !below;
    }
    return scan;
}

RiskTrajectory monitor_span(const Recording& rec, double start,
                            const Checkpoint& ck, const MonitorConfig& mc,
                            double reference) {
    RiskTrajectory t;
    t.raw = score_stream(rec, start, mc.span, ck, mc);
    t.smoothed = moving_average(t.raw, mc);
    t.times.reserve(t.raw.size());
    for (std::size_t k = 0; k < t.raw.size(); ++k)
        t.times.push_back(start + (static_cast<double>(k) + 1.0) * mc.stride -
                          reference);
    auto scan = detect_alarms(t.times, t.smoothed, mc);
    t.alarms = std::move(scan.alarms);
    t.alarm_flags = std::move(scan.flags);
    return t;
}

RiskTrajectory monitor_preonset(const Recording& rec, double onset,
                                const Checkpoint& ck, const MonitorConfig& mc) {
    return monitor_span(rec, onset - mc.span, ck, mc, onset);
}

void write_trajectory_csv(const std::string& path, const RiskTrajectory& t) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write trajectory '" + path + "'");
    out << "t_rel_seconds,raw,smoothed,alarm_flag\n";
    for (std::size_t i = 0; i < t.times.size(); ++i)
        out << fmt(t.times[i]) << ',' << fmt(t.raw[i]) << ','
            << fmt(t.smoothed[i]) << ','
            << static_cast<int>(t.alarm_flags[i]) << '\n';
}

void write_alarm_csv(const std::string& path,
                     const std::vector<AlarmEvent>& alarms) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write alarm log '" + path + "'");
    out << "time_seconds,trigger_score\n";
    for (const auto& a : alarms)
        out << fmt(a.time) << ',' << fmt(a.trigger_score) << '\n';
}

}  // namespace stan
