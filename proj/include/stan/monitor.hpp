#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stan/checkpoint.hpp"
#include "stan/data.hpp"

namespace stan {

struct MonitorConfig {
    double stride = 5.0;
    double window_len = 1.0;
    double ma_span = 30.0;       // smoothing memory, multiple of stride
    double threshold = 0.5;      // alarm when smoothed risk crosses below
    double refractory = 1800.0;  // suppression window after an alarm
    double span = 90.0 * 60.0;   // pre-onset monitoring span

    void validate() const;
    std::int64_t ma_points() const {
        return static_cast<std::int64_t>(ma_span / stride);
    }
};

struct AlarmEvent {
    double time = 0.0;           // same reference as the trajectory times
    double trigger_score = 0.0;  // smoothed score at the crossing
};

struct RiskTrajectory {
    std::vector<double> times;  // tick times relative to the reference
    std::vector<double> raw;
    std::vector<double> smoothed;
    std::vector<char> alarm_flags;  // 1 where an alarm fired
    std::vector<AlarmEvent> alarms;
};

// Risk of one [n, T] window under a trained pipeline (dropout off,
// normalization applied when the checkpoint carries stats).
double score_window(const Checkpoint& ck, const nd::Tensor& window);

// One risk score per stride across [start, start+span]; the k-th score uses
// the window_len of signal ending at start + (k+1)*stride. Score count is
// floor(span/stride). A span the recording cannot cover raises
// InputTooShortError naming the available range.
std::vector<double> score_stream(const Recording& rec, double start,
                                 double span, const Checkpoint& ck,
                                 const MonitorConfig& mc);

// Trailing mean over the last ma_points scores; the warm-up prefix averages
// what is available.
std::vector<double> moving_average(const std::vector<double>& raw,
                                   const MonitorConfig& mc);

// Streaming form of moving_average; push returns the smoothed value and is
// bitwise identical to the offline result at the same index.
class StreamingSmoother {
  public:
    explicit StreamingSmoother(std::int64_t points);
    double push(double raw);

  private:
    std::vector<double> buf_;
    std::int64_t points_;
};

struct AlarmScan {
    std::vector<AlarmEvent> alarms;
    std::vector<char> flags;  // per input index
    bool any() const { return !alarms.empty(); }
    double earliest() const;  // ContractError when no alarm fired
};

// Fires on each downward crossing of the threshold (a stream that opens
// below it counts), then suppresses crossings within the refractory window.
AlarmScan detect_alarms(const std::vector<double>& times,
                        const std::vector<double>& smoothed,
                        const MonitorConfig& mc);

// Full pipeline over [start, start+span]; times are reported relative to
// `reference` (pass the onset to get non-positive pre-onset times).
RiskTrajectory monitor_span(const Recording& rec, double start,
                            const Checkpoint& ck, const MonitorConfig& mc,
                            double reference = 0.0);

// The pre-onset view: [onset - span, onset], times relative to the onset.
RiskTrajectory monitor_preonset(const Recording& rec, double onset,
                                const Checkpoint& ck, const MonitorConfig& mc);

void write_trajectory_csv(const std::string& path, const RiskTrajectory& t);
void write_alarm_csv(const std::string& path,
                     const std::vector<AlarmEvent>& alarms);

}  // namespace stan
