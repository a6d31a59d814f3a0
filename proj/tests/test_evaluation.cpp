#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "stan/evaluation.hpp"
#include "testutil.hpp"

using stan::EvalMetrics;
using stan::EvalOptions;
using stan::FoldMetrics;
using stan::FoldSpec;
using stan::LosoResult;
using stan::Recording;

namespace {

const std::string kDir = "/tmp/test_evaluation_files";

struct DirSetup {
    DirSetup() {
        std::filesystem::remove_all(kDir);
        std::filesystem::create_directories(kDir);
    }
} dir_setup;

Recording synth_rec(const std::string& subject, const std::string& name,
                    std::uint64_t seed) {
    stan::SyntheticSpec spec;
    spec.n = 3;
    spec.duration = 240.0;
    spec.sample_rate = 12.0;
    spec.onsets = {200.0};
    spec.strength = 4.0;
    spec.preictal_len = 60.0;
    spec.seed = seed;
    spec.subject_id = subject;
    spec.name = name;
    return stan::generate_synthetic(spec);
}

// Two subjects, two recordings each, one seizure at 200 s in every recording.
std::vector<Recording> corpus() {
    return {synth_rec("A", "A1", 11), synth_rec("A", "A2", 12),
            synth_rec("B", "B1", 13), synth_rec("B", "B2", 14)};
}

EvalOptions base_options() {
    EvalOptions o;
    o.model.M = 1;
    o.model.H = 2;
    o.model.n = 3;
    o.model.T = 12;
    o.model.spatial_dim = 4;
    o.model.temporal_dim = 5;
    o.model.kernel = 2;
    o.disc.spatial_kernel = 2;
    o.disc.temporal_kernel = 4;
    o.disc.spatial_filters = 2;
    o.disc.temporal_filters = 2;
    o.disc.spatial_pool = 1;
    o.disc.temporal_pool = 2;
    o.disc.feature_dim = 8;
    o.disc.fc_units = 6;
    o.train.pretrain_epochs = 2;
    o.train.pretrain_lr = 0.002;
    o.train.disc_epochs = 3;
    o.train.disc_lr = 0.002;
    o.train.batch_size = 16;
    o.train.seed = 5;
    o.monitor.stride = 5.0;
    o.monitor.window_len = 1.0;
    o.monitor.ma_span = 15.0;
    o.monitor.threshold = 0.5;
    o.monitor.refractory = 60.0;
    o.monitor.span = 180.0;
    o.labels.horizon = 60.0;
    o.labels.margin = 30.0;
    return o;
}

// Labeled 1-s windows per 240-s recording with an onset at 200 s, horizon 60,
// margin 30: preictal t in 140..199 (60), interictal t in 0..139 and 231..239
// (149; the preictal zone owns 140..199, and 200..230 is within the margin).
constexpr std::size_t kLabeledPerRec = 209;
// With the exclusion zone [20, 380] around the test onset, only the test
// recording's windows at t in 0..19 survive, all interictal.
constexpr std::size_t kTestRecSurvivors = 20;

bool same_metrics(const FoldMetrics& a, const FoldMetrics& b) {
    return a.subject == b.subject && a.predicted == b.predicted &&
           a.detection_minutes == b.detection_minutes &&
           a.false_alarms == b.false_alarms &&
           a.interictal_hours == b.interictal_hours;
}

}  // namespace

TEST_CASE("loso_folds builds one fold per seizure over the pooled corpus") {
    auto recs = corpus();
    auto opt = base_options();
    auto folds = stan::loso_folds(recs, opt);
    REQUIRE(folds.size() == 4);
    for (std::size_t f = 0; f < folds.size(); ++f) {
        CHECK(folds[f].fold_id == f);
        CHECK(folds[f].rec_index == f);
        CHECK(folds[f].onset == 200.0);
        CHECK(folds[f].train_windows.size() ==
              3 * kLabeledPerRec + kTestRecSurvivors);
    }
    CHECK(folds[0].subject == "A");
    CHECK(folds[1].subject == "A");
    CHECK(folds[2].subject == "B");
    CHECK(folds[3].subject == "B");
}

TEST_CASE("test preictal windows never reach the training pool") {
    auto recs = corpus();
    auto opt = base_options();
    auto folds = stan::loso_folds(recs, opt);
    for (const FoldSpec& fold : folds) {
        const std::string test_rec = recs[fold.rec_index].name;
        std::size_t from_test = 0;
        for (const auto& lw : fold.train_windows) {
            if (lw.source.recording != test_rec) continue;
            ++from_test;
            CHECK(lw.label == stan::kInterictal);
            // strictly before the exclusion zone opens at onset - span
            CHECK(lw.source.offset_seconds + 1.0 <= fold.onset - 180.0);
        }
        CHECK(from_test == kTestRecSurvivors);
    }
}

TEST_CASE("same-subject-only folds drop the other subject entirely") {
    auto recs = corpus();
    auto opt = base_options();
    opt.same_subject_only = true;
    auto folds = stan::loso_folds(recs, opt);
    REQUIRE(folds.size() == 4);
    for (const FoldSpec& fold : folds) {
        CHECK(fold.train_windows.size() == kLabeledPerRec + kTestRecSurvivors);
        for (const auto& lw : fold.train_windows)
            CHECK(lw.source.subject_id == fold.subject);
    }
}

TEST_CASE("fewer than two seizures is an error") {
    std::vector<Recording> recs = {synth_rec("A", "A1", 11)};
    auto opt = base_options();
    CHECK_THROWS_WITH_AS(stan::loso_folds(recs, opt),
                         doctest::Contains("found 1"), stan::DataError);
}

TEST_CASE("the leakage audit rejects a tampered fold") {
    auto recs = corpus();
    auto opt = base_options();
    auto folds = stan::loso_folds(recs, opt);
    FoldSpec bad = folds[0];
    stan::LabeledWindow leak = bad.train_windows[0];
    leak.source.subject_id = "A";
    leak.source.recording = "A1";
    leak.source.offset_seconds = 150.0;  // preictal of the test seizure
    bad.train_windows.push_back(leak);
    CHECK_THROWS_WITH_AS(stan::audit_fold(bad, recs, opt),
                         doctest::Contains("leaks"), stan::ContractError);
    stan::audit_fold(folds[0], recs, opt);  // untouched fold passes
}

TEST_CASE("compute_metrics arithmetic") {
    auto fold = [](bool predicted, int fa, double hours) {
        FoldMetrics m;
        m.subject = "S";
        m.predicted = predicted;
        m.false_alarms = fa;
        m.interictal_hours = hours;
        return m;
    };

    SUBCASE("perfect detection, clean interictal") {
        auto m = stan::compute_metrics(
            {fold(true, 0, 30.0), fold(true, 0, 30.0), fold(true, 0, 30.0)});
        CHECK(m.sn_percent == 100.0);
        CHECK(m.fdr_per_hour == 0.0);
    }
    SUBCASE("two of three, one false alarm over 90 hours") {
        auto m = stan::compute_metrics(
            {fold(true, 0, 30.0), fold(false, 1, 30.0), fold(true, 0, 30.0)});
        CHECK(m.sn_percent == doctest::Approx(200.0 / 3.0));
        CHECK(m.fdr_per_hour == doctest::Approx(1.0 / 90.0));
    }
    SUBCASE("order does not matter") {
        std::vector<FoldMetrics> a = {fold(true, 2, 10.0), fold(false, 0, 20.0),
                                      fold(true, 1, 15.0)};
        std::vector<FoldMetrics> b = {a[2], a[0], a[1]};
        auto ma = stan::compute_metrics(a);
        auto mb = stan::compute_metrics(b);
        CHECK(ma.sn_percent == doctest::Approx(mb.sn_percent).epsilon(1e-12));
        CHECK(ma.fdr_per_hour ==
              doctest::Approx(mb.fdr_per_hour).epsilon(1e-12));
    }
    SUBCASE("zero interictal hours is undefined") {
        CHECK_THROWS_WITH_AS(stan::compute_metrics({fold(true, 0, 0.0)}),
                             doctest::Contains("zero interictal"),
                             stan::DataError);
    }
    SUBCASE("no folds at all") {
        CHECK_THROWS_AS(stan::compute_metrics({}), stan::ContractError);
    }
}

TEST_CASE("evaluate_fold monitors the seizure and the interictal spans") {
    auto recs = corpus();
    auto opt = base_options();
    auto folds = stan::loso_folds(recs, opt);
    FoldMetrics m = stan::evaluate_fold(folds[0], recs, opt);
    CHECK(m.subject == "A");
    // per recording: [0, 170] -> 34 strides, [230, 240] -> 2 strides;
    // two recordings of subject A give (170 + 10) * 2 / 3600 hours
    CHECK(m.interictal_hours == doctest::Approx(360.0 / 3600.0));
    CHECK(m.false_alarms >= 0);
    if (m.predicted) {
        CHECK(m.detection_minutes > 0.0);
        CHECK(m.detection_minutes <= opt.monitor.span / 60.0);
    } else {
        CHECK(m.detection_minutes == 0.0);
    }
}

TEST_CASE("run_loso is deterministic and aggregates per subject") {
    auto recs = corpus();
    auto opt = base_options();
    LosoResult r1 = stan::run_loso(recs, opt);
    LosoResult r2 = stan::run_loso(recs, opt);
    REQUIRE(r1.folds.size() == 4);
    REQUIRE(r2.folds.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(same_metrics(r1.folds[i], r2.folds[i]));

    REQUIRE(r1.per_subject.size() == 2);
    CHECK(r1.per_subject[0].subject == "A");
    CHECK(r1.per_subject[1].subject == "B");
    CHECK(r1.per_subject[0].folds == 2);
    CHECK(r1.per_subject[1].folds == 2);

    EvalMetrics again = stan::compute_metrics(r1.folds);
    CHECK(r1.overall.sn_percent == again.sn_percent);
    CHECK(r1.overall.fdr_per_hour == again.fdr_per_hour);
    CHECK(r1.overall.sn_percent == r2.overall.sn_percent);
    CHECK(r1.overall.fdr_per_hour == r2.overall.fdr_per_hour);
}

TEST_CASE("ablation_variant maps names onto configuration changes") {
    auto base = base_options();
    REQUIRE(stan::kAblationConfigs.size() == 8);

    auto full = stan::ablation_variant("full", base);
    CHECK(full.model.M == base.model.M);
    CHECK(full.objective == stan::DiscObjective::wgan_gp);
    CHECK(full.train.lambda_gp == base.train.lambda_gp);

    auto bce = stan::ablation_variant("no-adversarial", base);
    CHECK(bce.objective == stan::DiscObjective::bce);
    CHECK(bce.model.M == base.model.M);

    auto nogp = stan::ablation_variant("no-gp", base);
    CHECK(nogp.train.lambda_gp == 0.0);
    CHECK(nogp.objective == stan::DiscObjective::wgan_gp);

    CHECK(stan::ablation_variant("M=1", base).model.M == 1);
    CHECK(stan::ablation_variant("M=2", base).model.M == 2);
    CHECK(stan::ablation_variant("M=3", base).model.M == 3);

    auto sp = stan::ablation_variant("spatial-only", base);
    CHECK(sp.model.use_spatial);
    CHECK_FALSE(sp.model.use_temporal);
    auto tp = stan::ablation_variant("temporal-only", base);
    CHECK_FALSE(tp.model.use_spatial);
    CHECK(tp.model.use_temporal);

    // variants never touch the fold seed, so every config sees the same folds
    for (const std::string& name : stan::kAblationConfigs)
        CHECK(stan::ablation_variant(name, base).train.seed == base.train.seed);

    CHECK_THROWS_WITH_AS(stan::ablation_variant("dropout-off", base),
                         doctest::Contains("dropout-off"), stan::ConfigError);
}

TEST_CASE("run_ablation orders depth variants by parameter count") {
    std::vector<Recording> recs = {synth_rec("A", "A1", 11),
                                   synth_rec("A", "A2", 12)};
    auto opt = base_options();
    auto rows = stan::run_ablation({"M=1", "M=2"}, recs, opt);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].name == "M=1");
    CHECK(rows[1].name == "M=2");
    CHECK(rows[0].param_count > 0);
    CHECK(rows[0].param_count < rows[1].param_count);
    CHECK(std::isfinite(rows[0].metrics.sn_percent));
    CHECK(std::isfinite(rows[0].metrics.fdr_per_hour));
    CHECK(rows[0].metrics.fdr_per_hour >= 0.0);
}

TEST_CASE("efficiency report matches the hand-counted parameter total") {
    auto opt = base_options();
    // backbone, counted layer by layer for M=1, H=2, n=3, T=12, s=4, t_e=5,
    // k=2, T'=11:
    //   spatial: enc 4*1*2+4, heads 2*4*4+2, W_out 4*12, b_out 12, ln 2*12
    const std::int64_t spatial = (4 * 1 * 2 + 4) + (2 * 4 * 4 + 2) + 4 * 12 +
                                 12 + 2 * 12;
    //   temporal: enc 5*3*2+5, heads 2*5*5+2, W_chan 5*3, W_time 11*12,
    //   b_out 12, ln 2*12
    const std::int64_t temporal = (5 * 3 * 2 + 5) + (2 * 5 * 5 + 2) + 5 * 3 +
                                  11 * 12 + 12 + 2 * 12;
    //   decoder: 12*12 + 12
    const std::int64_t backbone = spatial + temporal + (12 * 12 + 12);
    // critic: spatial extractor conv 2*2*2*2+2 on 3x3 maps -> 2x2 conv out,
    // pool 1 -> flat 8, lift 8*8+8; temporal extractor conv 2*2*4*4+2 on
    // 11x11 maps -> 8x8, pool 2 -> 4x4, flat 32, lift 32*8+8; concat fusion
    // of 2 vectors -> fc1 16*6+6, fc2/fc3 6*6+6, head 6*1+1
    const std::int64_t critic = (2 * 2 * 2 * 2 + 2 + 8 * 8 + 8) +
                                (2 * 2 * 4 * 4 + 2 + 32 * 8 + 8) +
                                (16 * 6 + 6) + 2 * (6 * 6 + 6) + (6 * 1 + 1);

    auto rep = stan::efficiency_report(opt.model, opt.disc, 10);
    CHECK(rep.backbone_params == backbone);
    CHECK(rep.disc_params == critic);
    CHECK(rep.total_params == backbone + critic);
    CHECK(rep.iterations == 100);  // requested 10, floor is 100
    CHECK(rep.latency_ms_median > 0.0);
    CHECK(rep.latency_ms_q1 <= rep.latency_ms_median);
    CHECK(rep.latency_ms_median <= rep.latency_ms_q3);
    CHECK(rep.peak_bytes > 0);

    std::string text = stan::format_efficiency(rep);
    CHECK(text.find("parameters:") != std::string::npos);
    CHECK(text.find("median") != std::string::npos);
}

TEST_CASE("report formatting round-trips through CSV") {
    LosoResult res;
    FoldMetrics f1;
    f1.subject = "chb01";
    f1.predicted = true;
    f1.detection_minutes = 12.0;
    f1.false_alarms = 1;
    f1.interictal_hours = 9.6;
    FoldMetrics f2 = f1;
    f2.predicted = false;
    f2.false_alarms = 0;
    res.folds = {f1, f2};
    stan::SubjectRow row;
    row.subject = "chb01";
    row.folds = 2;
    row.metrics = stan::compute_metrics(res.folds);
    res.per_subject = {row};
    res.overall = row.metrics;

    std::string text = stan::format_report(res);
    CHECK(text.find("patient") != std::string::npos);
    CHECK(text.find("chb01") != std::string::npos);
    CHECK(text.find("overall") != std::string::npos);
    CHECK(text.find("50.0") != std::string::npos);

    const std::string csv = kDir + "/report.csv";
    stan::write_report_csv(csv, res);
    std::ifstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "patient,Sn,FDR");
    REQUIRE(std::getline(in, line));
    CHECK(line == "chb01,50.0,0.052");  // 1 alarm / 19.2 h
    REQUIRE(std::getline(in, line));
    CHECK(line == "overall,50.0,0.052");
    CHECK_FALSE(std::getline(in, line));

    stan::AblationRow ab;
    ab.name = "full";
    ab.metrics = row.metrics;
    ab.param_count = 1234;
    const std::string abcsv = kDir + "/ablation.csv";
    stan::write_ablation_csv(abcsv, {ab});
    std::ifstream ain(abcsv);
    REQUIRE(std::getline(ain, line));
    CHECK(line == "config,Sn,FDR,params");
    REQUIRE(std::getline(ain, line));
    CHECK(line == "full,50.0,0.052,1234");
    std::string table = stan::format_ablation({ab});
    CHECK(table.find("config") != std::string::npos);
    CHECK(table.find("1234") != std::string::npos);
}
