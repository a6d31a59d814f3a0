#include "stan/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "stan/errors.hpp"

namespace stan {

namespace {

std::string recording_key(const Recording& rec) {
    return rec.name.empty() ? rec.subject_id : rec.name;
}

double exclusion_halfwidth(const EvalOptions& opt) {
    return std::max(opt.monitor.span, opt.labels.horizon);
}

double window_seconds(const Recording& rec, const EvalOptions& opt) {
    return static_cast<double>(opt.model.T) / rec.sample_rate;
}

bool in_exclusion_zone(double t_start, double len, double onset, double peri) {
    return t_start < onset + peri && t_start + len > onset - peri;
}

// Maximal intervals farther than `margin` from every seizure, clipped to the
// recording; the complement of the peri-ictal neighbourhoods.
std::vector<std::pair<double, double>> interictal_spans(const Recording& rec,
                                                        const LabelConfig& lc) {
    std::vector<std::pair<double, double>> out;
    double cur = 0.0;
    for (double onset : rec.onsets) {
        double lo = onset - lc.margin;
        if (lo > cur) out.push_back({cur, lo});
        cur = std::max(cur, onset + lc.margin);
    }
    if (cur < rec.duration()) out.push_back({cur, rec.duration()});
    return out;
}

std::vector<std::vector<LabeledWindow>> window_cache(
    const std::vector<Recording>& recs, const EvalOptions& opt) {
    std::vector<std::vector<LabeledWindow>> cache;
    cache.reserve(recs.size());
    for (const Recording& rec : recs)
        cache.push_back(make_windows(rec, opt.model.T, opt.labels));
    return cache;
}

// Subjects contribute to a training pool only when, after the fold's
// exclusion, they still hold both classes; make_training_set would otherwise
// refuse the whole pool over one subject's missing class.
std::vector<LabeledWindow> usable_pool(std::vector<LabeledWindow> pool) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
    for (const LabeledWindow& lw : pool) {
        auto& c = counts[lw.source.subject_id];
        if (lw.label == kPreictal)
            ++c.first;
        else
            ++c.second;
    }
    std::vector<LabeledWindow> kept;
    kept.reserve(pool.size());
    for (LabeledWindow& lw : pool) {
        const auto& c = counts[lw.source.subject_id];
        if (c.first > 0 && c.second >= c.first) kept.push_back(std::move(lw));
    }
    return kept;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    double pos = q * static_cast<double>(sorted.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw DataError("failed while writing " + path);
}

}  // namespace

std::vector<FoldSpec> loso_folds(const std::vector<Recording>& recs,
                                 const EvalOptions& opt) {
    opt.model.validate();
    opt.monitor.validate();
    auto cache = window_cache(recs, opt);

    std::vector<std::pair<std::size_t, double>> seizures;
    for (std::size_t r = 0; r < recs.size(); ++r)
        for (double onset : recs[r].onsets) seizures.push_back({r, onset});
    if (seizures.size() < 2)
        throw DataError("leave-one-seizure-out needs at least 2 seizures, found " +
                        std::to_string(seizures.size()));

    double peri = exclusion_halfwidth(opt);
    std::vector<FoldSpec> folds;
    folds.reserve(seizures.size());
    for (std::size_t f = 0; f < seizures.size(); ++f) {
        auto [ri, onset] = seizures[f];
        FoldSpec fold;
        fold.fold_id = f;
        fold.rec_index = ri;
        fold.subject = recs[ri].subject_id;
        fold.onset = onset;
        for (std::size_t r = 0; r < recs.size(); ++r) {
            if (opt.same_subject_only && recs[r].subject_id != fold.subject)
                continue;
            double len = window_seconds(recs[r], opt);
            for (const LabeledWindow& lw : cache[r]) {
                if (r == ri &&
                    in_exclusion_zone(lw.source.offset_seconds, len, onset, peri))
                    continue;
                fold.train_windows.push_back(lw);
            }
        }
        audit_fold(fold, recs, opt);
        folds.push_back(std::move(fold));
    }
    return folds;
}

void audit_fold(const FoldSpec& fold, const std::vector<Recording>& recs,
                const EvalOptions& opt) {
    if (fold.rec_index >= recs.size())
        throw ContractError("fold " + std::to_string(fold.fold_id) +
                            " points at a missing recording");
    const Recording& test = recs[fold.rec_index];
    double peri = exclusion_halfwidth(opt);
    double len = window_seconds(test, opt);
    std::string key = recording_key(test);
    for (const LabeledWindow& lw : fold.train_windows) {
        if (lw.source.subject_id != test.subject_id ||
            lw.source.recording != key)
            continue;
        if (in_exclusion_zone(lw.source.offset_seconds, len, fold.onset, peri))
            throw ContractError(
                "training pool of fold " + std::to_string(fold.fold_id) +
                " leaks a window at " +
                std::to_string(lw.source.offset_seconds) + " s of " + key +
                ", inside the exclusion zone around the test onset at " +
                std::to_string(fold.onset) + " s");
    }
}

FoldMetrics evaluate_fold(const FoldSpec& fold,
                          const std::vector<Recording>& recs,
                          const EvalOptions& opt) {
    audit_fold(fold, recs, opt);
    const Recording& test = recs[fold.rec_index];

    std::vector<LabeledWindow> pool = usable_pool(fold.train_windows);
    if (pool.empty())
        throw DataError("fold " + std::to_string(fold.fold_id) +
                        " has no usable training subject");

    nd::Rng fold_rng = nd::Rng(opt.train.seed).fork("fold", fold.fold_id);
    TrainConfig tc = opt.train;
    tc.seed = fold_rng.fork("shuffles").seed();

    std::vector<LabeledWindow> balanced =
        make_training_set(pool, fold_rng.fork("balance").seed());
    NormStats norm;
    if (opt.normalize) {
        norm = compute_norm(balanced);
        apply_norm(balanced, norm);
    }

    nd::Rng init = fold_rng.fork("init");
    StanParams backbone = make_stan_params(opt.model, init);
    pretrain(backbone, opt.model, balanced, tc);
    freeze(backbone);

    nd::Rng disc_init = fold_rng.fork("critic");
    DiscParams disc = make_disc_params(opt.disc, opt.model, disc_init);
    train_discriminator(backbone, opt.model, disc, opt.disc, balanced, tc, "",
                        opt.objective);

    Checkpoint ck;
    ck.model_cfg = opt.model;
    ck.disc_cfg = opt.disc;
    ck.backbone = std::move(backbone);
    ck.has_disc = true;
    ck.disc = std::move(disc);
    if (opt.normalize) {
        ck.has_norm = true;
        ck.norm_mean.reserve(norm.mean.size());
        ck.norm_std.reserve(norm.std_dev.size());
        for (double m : norm.mean) ck.norm_mean.push_back(m);
        for (double s : norm.std_dev) ck.norm_std.push_back(s);
    }

    FoldMetrics m;
    m.subject = fold.subject;
    RiskTrajectory traj = monitor_preonset(test, fold.onset, ck, opt.monitor);
    m.predicted = !traj.alarms.empty();
    if (m.predicted) m.detection_minutes = -traj.alarms.front().time / 60.0;

    for (const Recording& rec : recs) {
        if (rec.subject_id != fold.subject) continue;
        for (auto [a, b] : interictal_spans(rec, opt.labels)) {
            double ticks = std::floor((b - a) / opt.monitor.stride + 1e-9);
            if (ticks < 1.0) continue;
            MonitorConfig span_cfg = opt.monitor;
            span_cfg.span = ticks * opt.monitor.stride;
            RiskTrajectory t = monitor_span(rec, a, ck, span_cfg);
            m.false_alarms += static_cast<int>(t.alarms.size());
            m.interictal_hours += span_cfg.span / 3600.0;
        }
    }
    return m;
}

EvalMetrics compute_metrics(const std::vector<FoldMetrics>& folds) {
    if (folds.empty()) throw ContractError("no folds to aggregate");
    int predicted = 0;
    int false_alarms = 0;
    double hours = 0.0;
    for (const FoldMetrics& f : folds) {
        if (f.predicted) ++predicted;
        false_alarms += f.false_alarms;
        hours += f.interictal_hours;
    }
    if (hours <= 0.0)
        throw DataError(
            "false detection rate undefined: zero interictal hours");
    EvalMetrics out;
    out.sn_percent =
        100.0 * static_cast<double>(predicted) / static_cast<double>(folds.size());
    out.fdr_per_hour = static_cast<double>(false_alarms) / hours;
    return out;
}

LosoResult run_loso(const std::vector<Recording>& recs,
                    const EvalOptions& opt) {
    LosoResult res;
    for (const FoldSpec& fold : loso_folds(recs, opt))
        res.folds.push_back(evaluate_fold(fold, recs, opt));

    std::vector<std::string> order;
    std::map<std::string, std::vector<FoldMetrics>> by_subject;
    for (const FoldMetrics& f : res.folds) {
        if (!by_subject.count(f.subject)) order.push_back(f.subject);
        by_subject[f.subject].push_back(f);
    }
    for (const std::string& s : order) {
        SubjectRow row;
        row.subject = s;
        row.folds = static_cast<int>(by_subject[s].size());
        row.metrics = compute_metrics(by_subject[s]);
        res.per_subject.push_back(std::move(row));
    }
    res.overall = compute_metrics(res.folds);
    return res;
}

EvalOptions ablation_variant(const std::string& name, const EvalOptions& base) {
    EvalOptions v = base;
    if (name == "full") return v;
    if (name == "no-adversarial") {
        v.objective = DiscObjective::bce;
        return v;
    }
    if (name == "no-gp") {
        v.train.lambda_gp = 0.0;
        return v;
    }
    if (name == "M=1" || name == "M=2" || name == "M=3") {
        v.model.M = name[2] - '0';
        return v;
    }
    if (name == "spatial-only") {
        v.model.use_temporal = false;
        return v;
    }
    if (name == "temporal-only") {
        v.model.use_spatial = false;
        return v;
    }
    throw ConfigError("unknown ablation configuration '" + name + "'");
}

std::vector<AblationRow> run_ablation(const std::vector<std::string>& names,
                                      const std::vector<Recording>& recs,
                                      const EvalOptions& base) {
    std::vector<AblationRow> rows;
    rows.reserve(names.size());
    for (const std::string& name : names) {
        EvalOptions v = ablation_variant(name, base);
        AblationRow row;
        row.name = name;
        nd::Rng scratch(0);
        StanParams p = make_stan_params(v.model, scratch);
        DiscParams d = make_disc_params(v.disc, v.model, scratch);
        row.param_count = param_count(p) + param_count(d);
        row.metrics = run_loso(recs, v).overall;
        rows.push_back(std::move(row));
    }
    return rows;
}

EfficiencyReport efficiency_report(const StanConfig& mc,
                                   const DiscriminatorConfig& dc,
                                   int iterations) {
    mc.validate();
    dc.validate();
    EfficiencyReport rep;
    rep.iterations = std::max(iterations, 100);

    nd::Rng rng(0);
    Checkpoint ck;
    ck.model_cfg = mc;
    ck.disc_cfg = dc;
    ck.backbone = make_stan_params(mc, rng);
    ck.has_disc = true;
    ck.disc = make_disc_params(dc, mc, rng);
    rep.backbone_params = param_count(ck.backbone);
    rep.disc_params = param_count(ck.disc);
    rep.total_params = rep.backbone_params + rep.disc_params;

    std::vector<double> samples(static_cast<std::size_t>(mc.n * mc.T));
    for (double& v : samples) v = rng.normal();
    nd::Tensor window =
        nd::Tensor::from_data({mc.n, mc.T}, std::move(samples));
    for (int i = 0; i < 3; ++i) score_window(ck, window);

    nd::MemStats::reset_peak();
    std::vector<double> ms;
    ms.reserve(static_cast<std::size_t>(rep.iterations));
    for (int i = 0; i < rep.iterations; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        score_window(ck, window);
        auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    rep.peak_bytes = nd::MemStats::peak_bytes();

    std::sort(ms.begin(), ms.end());
    rep.latency_ms_median = quantile_sorted(ms, 0.5);
    rep.latency_ms_q1 = quantile_sorted(ms, 0.25);
    rep.latency_ms_q3 = quantile_sorted(ms, 0.75);
    return rep;
}

void write_report_csv(const std::string& path, const LosoResult& result) {
    std::string text = "patient,Sn,FDR\n";
    for (const SubjectRow& row : result.per_subject)
        text += row.subject + "," + fmt("%.1f", row.metrics.sn_percent) + "," +
                fmt("%.3f", row.metrics.fdr_per_hour) + "\n";
    text += "overall," + fmt("%.1f", result.overall.sn_percent) + "," +
            fmt("%.3f", result.overall.fdr_per_hour) + "\n";
    write_text_file(path, text);
}

std::string format_report(const LosoResult& result) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof(line), "%-12s %8s %8s %6s\n", "patient", "Sn%",
                  "FDR/h", "folds");
    out << line;
    for (const SubjectRow& row : result.per_subject) {
        std::snprintf(line, sizeof(line), "%-12s %8.1f %8.3f %6d\n",
                      row.subject.c_str(), row.metrics.sn_percent,
                      row.metrics.fdr_per_hour, row.folds);
        out << line;
    }
    std::snprintf(line, sizeof(line), "%-12s %8.1f %8.3f %6zu\n", "overall",
                  result.overall.sn_percent, result.overall.fdr_per_hour,
                  result.folds.size());
    out << line;
    return out.str();
}

void write_ablation_csv(const std::string& path,
                        const std::vector<AblationRow>& rows) {
    std::string text = "config,Sn,FDR,params\n";
    for (const AblationRow& row : rows)
        text += row.name + "," + fmt("%.1f", row.metrics.sn_percent) + "," +
                fmt("%.3f", row.metrics.fdr_per_hour) + "," +
                std::to_string(row.param_count) + "\n";
    write_text_file(path, text);
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof(line), "%-16s %8s %8s %10s\n", "config", "Sn%",
                  "FDR/h", "params");
    out << line;
    for (const AblationRow& row : rows) {
        std::snprintf(line, sizeof(line), "%-16s %8.1f %8.3f %10lld\n",
                      row.name.c_str(), row.metrics.sn_percent,
                      row.metrics.fdr_per_hour,
                      static_cast<long long>(row.param_count));
        out << line;
    }
    return out.str();
}

std::string format_efficiency(const EfficiencyReport& rep) {
    std::ostringstream out;
    out << "parameters: " << rep.total_params << " (backbone "
        << rep.backbone_params << " + critic " << rep.disc_params << ")\n";
    out << "latency: median " << fmt("%.3f", rep.latency_ms_median)
        << " ms, IQR [" << fmt("%.3f", rep.latency_ms_q1) << ", "
        << fmt("%.3f", rep.latency_ms_q3) << "] ms over " << rep.iterations
        << " calls\n";
    out << "peak allocation: " << rep.peak_bytes << " bytes\n";
    return out.str();
}

}  // namespace stan
