#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stan/data.hpp"
#include "stan/monitor.hpp"
#include "stan/training.hpp"

namespace stan {

struct EvalOptions {
    StanConfig model;
    DiscriminatorConfig disc;
    TrainConfig train;
    MonitorConfig monitor;
    LabelConfig labels;
    DiscObjective objective = DiscObjective::wgan_gp;
    bool same_subject_only = false;  // restrict training pools to the test subject
    bool normalize = true;
};

struct FoldSpec {
    std::size_t fold_id = 0;
    std::size_t rec_index = 0;  // recording holding the test seizure
    std::string subject;
    double onset = 0.0;
    std::vector<LabeledWindow> train_windows;
};

struct FoldMetrics {
    std::string subject;
    bool predicted = false;
    double detection_minutes = 0.0;  // before onset, when predicted
    int false_alarms = 0;
    double interictal_hours = 0.0;
};

struct EvalMetrics {
    double sn_percent = 0.0;
    double fdr_per_hour = 0.0;
};

// One fold per seizure; the training pool holds every labeled window except
// the test recording's windows inside the peri-onset exclusion zone
// (max(monitor span, preictal horizon) around the test onset). Runs the
// leakage audit on each fold before returning it.
std::vector<FoldSpec> loso_folds(const std::vector<Recording>& recs,
                                 const EvalOptions& opt);

// Throws ContractError when a training window of the test recording lies
// inside the exclusion zone.
void audit_fold(const FoldSpec& fold, const std::vector<Recording>& recs,
                const EvalOptions& opt);

// Trains the full pipeline on the fold's pool and monitors the test seizure
// plus the test subject's interictal spans.
FoldMetrics evaluate_fold(const FoldSpec& fold,
                          const std::vector<Recording>& recs,
                          const EvalOptions& opt);

// Sn = 100 * predicted / folds; FDR = total false alarms / total interictal
// hours. Zero interictal hours -> DataError.
EvalMetrics compute_metrics(const std::vector<FoldMetrics>& folds);

struct SubjectRow {
    std::string subject;
    EvalMetrics metrics;
    int folds = 0;
};

struct LosoResult {
    std::vector<FoldMetrics> folds;
    std::vector<SubjectRow> per_subject;
    EvalMetrics overall;
};

LosoResult run_loso(const std::vector<Recording>& recs, const EvalOptions& opt);

inline const std::vector<std::string> kAblationConfigs = {
    "full",      "no-adversarial", "no-gp",         "M=1",
    "M=2",       "M=3",            "spatial-only",  "temporal-only"};

// Derives a variant of the base options for one ablation name; unknown
// names raise ConfigError.
EvalOptions ablation_variant(const std::string& name, const EvalOptions& base);

struct AblationRow {
    std::string name;
    EvalMetrics metrics;
    std::int64_t param_count = 0;  // backbone + critic
};

// Same folds and seeds for every configuration.
std::vector<AblationRow> run_ablation(const std::vector<std::string>& names,
                                      const std::vector<Recording>& recs,
                                      const EvalOptions& base);

struct EfficiencyReport {
    std::int64_t backbone_params = 0;
    std::int64_t disc_params = 0;
    std::int64_t total_params = 0;
    double latency_ms_median = 0.0;
    double latency_ms_q1 = 0.0;
    double latency_ms_q3 = 0.0;
    std::int64_t peak_bytes = 0;
    int iterations = 0;
};

// Exact parameter counts plus median/IQR single-window scoring latency over
// at least `iterations` calls and the allocator's peak during them.
EfficiencyReport efficiency_report(const StanConfig& mc,
                                   const DiscriminatorConfig& dc,
                                   int iterations = 100);

// `patient,Sn,FDR` rows per subject plus an `overall` row.
void write_report_csv(const std::string& path, const LosoResult& result);
std::string format_report(const LosoResult& result);

void write_ablation_csv(const std::string& path,
                        const std::vector<AblationRow>& rows);
std::string format_ablation(const std::vector<AblationRow>& rows);
std::string format_efficiency(const EfficiencyReport& rep);

}  // namespace stan
