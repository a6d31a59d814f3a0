#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "stan/data.hpp"
#include "stan/edf.hpp"
#include "testutil.hpp"

using stan::LabelConfig;
using stan::LabeledWindow;
using stan::Recording;
using stan::Zone;

namespace {

const std::string kDir = "/tmp/test_data_files";

struct DirSetup {
    DirSetup() {
        std::filesystem::remove_all(kDir);
        std::filesystem::create_directories(kDir);
    }
} dir_setup;

Recording small_recording() {
    Recording rec;
    rec.subject_id = "S1";
    rec.sample_rate = 8.0;
    rec.channels = {"C1", "C2", "C3"};
    const std::int64_t total = 80;  // 10 s
    rec.samples.assign(3, std::vector<double>(total, 0.0));
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < total; ++i)
            rec.samples[c][i] = 20.0 * std::sin(0.37 * (i + 11.0 * c)) +
                                0.5 * std::cos(1.7 * i);
    return rec;
}

std::string patch_file(const std::string& path, std::size_t at,
                       const std::string& bytes) {
    std::ifstream in(path, std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    raw.replace(at, bytes.size(), bytes);
    const std::string out = path + ".patched";
    std::ofstream o(out, std::ios::binary);
    o.write(raw.data(), static_cast<std::streamsize>(raw.size()));
    return out;
}

double channel_corr(const std::vector<double>& a, const std::vector<double>& b,
                    std::size_t lo, std::size_t hi) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = lo; i < hi; ++i) { ma += a[i]; mb += b[i]; }
    const double n = static_cast<double>(hi - lo);
    ma /= n; mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

double mean_pairwise_corr(const Recording& rec, double t_lo, double t_hi) {
    const auto lo = static_cast<std::size_t>(t_lo * rec.sample_rate);
    const auto hi = static_cast<std::size_t>(t_hi * rec.sample_rate);
    double sum = 0.0;
    int count = 0;
    for (std::size_t a = 0; a < rec.samples.size(); ++a)
        for (std::size_t b = a + 1; b < rec.samples.size(); ++b) {
            sum += channel_corr(rec.samples[a], rec.samples[b], lo, hi);
            ++count;
        }
    return sum / count;
}

LabeledWindow tiny_window(const std::string& subject, int label, double off) {
    LabeledWindow lw;
    lw.window = nd::Tensor::full({1, 1}, off);
    lw.label = label;
    lw.source = {subject, subject, off};
    return lw;
}

}  // namespace

TEST_CASE("edf round-trip stays within quantization error") {
    Recording rec = small_recording();
    rec.onsets = {4.0, 7.5};
    const std::string path = kDir + "/rt.edf";
    stan::write_edf(path, rec);
    Recording back = stan::load_edf(path);

    CHECK(back.subject_id == "rt");  // defaults to the file stem
    CHECK(back.channels == rec.channels);
    CHECK(back.sample_rate == doctest::Approx(8.0));
    CHECK(back.n_samples() == rec.n_samples());
    REQUIRE(back.onsets.size() == 2);
    CHECK(back.onsets[0] == doctest::Approx(4.0));
    CHECK(back.onsets[1] == doctest::Approx(7.5));

    for (std::size_t c = 0; c < 3; ++c) {
        double peak = 1.0;
        for (double v : rec.samples[c]) peak = std::max(peak, std::abs(v));
        const double step = 2.0 * peak / 65535.0;
        for (std::size_t i = 0; i < rec.samples[c].size(); ++i)
            CHECK(std::abs(back.samples[c][i] - rec.samples[c][i]) <= step);
    }
}

TEST_CASE("edf subject override and channel exclusion") {
    Recording rec = small_recording();
    const std::string path = kDir + "/ex.edf";
    stan::write_edf(path, rec);

    stan::EdfOptions opts;
    opts.subject_id = "S9";
    opts.exclude_channels = {" c2 "};  // trimmed, case-insensitive
    Recording back = stan::load_edf(path, opts);
    CHECK(back.subject_id == "S9");
    REQUIRE(back.channels == std::vector<std::string>{"C1", "C3"});
    CHECK(back.samples.size() == 2);

    stan::EdfOptions all;
    all.exclude_channels = {"C1", "C2", "C3"};
    CHECK_THROWS_AS((void)stan::load_edf(path, all), stan::ConfigError);
}

TEST_CASE("edf mixed sample rates are rejected") {
    Recording rec = small_recording();
    rec.samples.pop_back();
    rec.channels.pop_back();  // 2 signals -> known header offsets
    const std::string path = kDir + "/mixed.edf";
    stan::write_edf(path, rec);
    // Samples-per-record fields start at 256 + 2*216 = 688; signal 2 at 696.
    const std::string patched = patch_file(path, 696, "4       ");
    CHECK_THROWS_AS((void)stan::load_edf(patched), stan::UnsupportedFormatError);
}

TEST_CASE("edf parse errors carry byte offsets") {
    Recording rec = small_recording();
    rec.samples.pop_back();
    rec.channels.pop_back();
    const std::string path = kDir + "/bad.edf";
    stan::write_edf(path, rec);

    // Corrupt the first physical-minimum field (offset 464 for 2 signals).
    const std::string corrupt = patch_file(path, 464, "x       ");
    try {
        (void)stan::load_edf(corrupt);
        FAIL("expected ParseError");
    } catch (const stan::ParseError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("physical minimum") != std::string::npos);
        CHECK(msg.find("byte offset 464") != std::string::npos);
    }

    // Truncated header.
    std::ifstream in(path, std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    raw.resize(100);
    const std::string trunc = kDir + "/trunc.edf";
    std::ofstream o(trunc, std::ios::binary);
    o.write(raw.data(), 100);
    o.close();
    CHECK_THROWS_AS((void)stan::load_edf(trunc), stan::ParseError);
}

TEST_CASE("onset beyond the recording is rejected") {
    Recording rec = small_recording();
    const std::string path = kDir + "/far.edf";
    stan::write_edf(path, rec);
    stan::write_onset_sidecar(stan::sidecar_path(path), {9999.0});
    CHECK_THROWS_AS((void)stan::load_edf(path), stan::DataError);
}

TEST_CASE("sidecar path derivation") {
    CHECK(stan::sidecar_path("a/b/rec.edf") == "a/b/rec.onsets.txt");
    CHECK(stan::sidecar_path("plain") == "plain.onsets.txt");
}

TEST_CASE("three-zone point labels on a dense grid") {
    const std::vector<double> onsets = {43200.0};
    const LabelConfig lc;  // 900 s horizon, 14400 s margin
    for (double t = 0.0; t <= 86400.0; t += 100.0) {
        Zone z = stan::label_window(t, onsets, lc);
        Zone want;
        if (t >= 42300.0 && t < 43200.0) want = Zone::preictal;
        else if (std::abs(t - 43200.0) > 14400.0) want = Zone::interictal;
        else want = Zone::unlabeled;
        CHECK(z == want);
    }
    CHECK(stan::label_window(3000.0, std::vector<double>{3600.0}, lc) ==
          Zone::preictal);
    CHECK(stan::label_window(3600.0 + 5.0 * 3600.0, std::vector<double>{3600.0},
                             lc) == Zone::interictal);
    CHECK(stan::label_window(1800.0, std::vector<double>{3600.0}, lc) ==
          Zone::unlabeled);
    CHECK(stan::label_window(3600.0, std::vector<double>{3600.0}, lc) ==
          Zone::unlabeled);
}

TEST_CASE("windows straddling a boundary are unlabeled") {
    const std::vector<double> onsets = {3600.0};
    const LabelConfig lc;
    CHECK(stan::window_zone(2695.0, 10.0, onsets, lc) == Zone::unlabeled);
    CHECK(stan::window_zone(2700.0, 10.0, onsets, lc) == Zone::preictal);
    CHECK(stan::window_zone(3595.0, 10.0, onsets, lc) == Zone::unlabeled);
    CHECK(stan::window_zone(30000.0, 10.0, onsets, lc) == Zone::interictal);
    CHECK(stan::window_zone(17990.0, 20.0, onsets, lc) == Zone::unlabeled);
}

TEST_CASE("make_windows keeps labeled non-overlapping windows") {
    Recording rec;
    rec.subject_id = "W";
    rec.sample_rate = 1.0;
    rec.channels = {"A", "B"};
    rec.samples.assign(2, std::vector<double>(100));
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 100; ++i)
            rec.samples[c][i] = c * 1000 + i;
    rec.onsets = {50.0};
    LabelConfig lc;
    lc.horizon = 20.0;
    lc.margin = 30.0;

    auto windows = stan::make_windows(rec, 10, lc);
    REQUIRE(windows.size() == 4);
    std::vector<double> offsets;
    for (const auto& w : windows) offsets.push_back(w.source.offset_seconds);
    CHECK(offsets == std::vector<double>{0.0, 30.0, 40.0, 90.0});
    CHECK(windows[0].label == stan::kInterictal);
    CHECK(windows[1].label == stan::kPreictal);
    CHECK(windows[2].label == stan::kPreictal);
    CHECK(windows[3].label == stan::kInterictal);
    // Window content: channel-major copy of the raw signal.
    CHECK(windows[1].window.at({0, 0}) == 30.0);
    CHECK(windows[1].window.at({1, 3}) == 1033.0);
    CHECK(windows[0].source.subject_id == "W");
}

TEST_CASE("training-set balancing subsamples per subject") {
    std::vector<LabeledWindow> windows;
    for (int i = 0; i < 9; ++i)
        windows.push_back(tiny_window("A", stan::kPreictal, i));
    for (int i = 0; i < 400; ++i)
        windows.push_back(tiny_window("A", stan::kInterictal, 1000 + i));
    for (int i = 0; i < 5; ++i)
        windows.push_back(tiny_window("B", stan::kPreictal, i));
    for (int i = 0; i < 7; ++i)
        windows.push_back(tiny_window("B", stan::kInterictal, 100 + i));

    auto out = stan::make_training_set(windows, 17);
    int a_pre = 0, a_inter = 0, b_pre = 0, b_inter = 0;
    for (const auto& w : out) {
        if (w.source.subject_id == "A")
            (w.label == stan::kPreictal ? a_pre : a_inter)++;
        else
            (w.label == stan::kPreictal ? b_pre : b_inter)++;
    }
    CHECK(a_pre == 9);
    CHECK(a_inter == 9);
    CHECK(b_pre == 5);
    CHECK(b_inter == 5);

    // Deterministic in the seed.
    auto again = stan::make_training_set(windows, 17);
    REQUIRE(again.size() == out.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(again[i].source.offset_seconds == out[i].source.offset_seconds);

    auto other = stan::make_training_set(windows, 18);
    bool any_different = false;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (other[i].source.offset_seconds != out[i].source.offset_seconds)
            any_different = true;
    CHECK(any_different);
}

TEST_CASE("balancing keeps already-equal classes intact") {
    std::vector<LabeledWindow> windows;
    for (int i = 0; i < 3; ++i)
        windows.push_back(tiny_window("C", stan::kPreictal, i));
    for (int i = 0; i < 3; ++i)
        windows.push_back(tiny_window("C", stan::kInterictal, 10 + i));
    auto out = stan::make_training_set(windows, 5);
    REQUIRE(out.size() == 6);
    std::set<double> offs;
    for (const auto& w : out) offs.insert(w.source.offset_seconds);
    CHECK(offs == std::set<double>{0, 1, 2, 10, 11, 12});
}

TEST_CASE("missing class names the subject") {
    std::vector<LabeledWindow> windows;
    windows.push_back(tiny_window("S7", stan::kInterictal, 0));
    try {
        (void)stan::make_training_set(windows, 1);
        FAIL("expected DataError");
    } catch (const stan::DataError& e) {
        CHECK(std::string(e.what()).find("S7") != std::string::npos);
    }
}

TEST_CASE("synthetic preictal coupling is visible only with strength") {
    stan::SyntheticSpec spec;
    spec.n = 4;
    spec.sample_rate = 64.0;
    spec.duration = 600.0;
    spec.onsets = {500.0};
    spec.preictal_len = 200.0;
    spec.seed = 1;

    spec.strength = 0.0;
    Recording flat = generate_synthetic(spec);
    const double flat_pre = mean_pairwise_corr(flat, 400.0, 500.0);
    const double flat_inter = mean_pairwise_corr(flat, 0.0, 200.0);
    CHECK(std::abs(flat_pre - flat_inter) < 0.15);

    spec.strength = 5.0;
    Recording strong = generate_synthetic(spec);
    const double strong_pre = mean_pairwise_corr(strong, 400.0, 500.0);
    const double strong_inter = mean_pairwise_corr(strong, 0.0, 200.0);
    CHECK(strong_pre - strong_inter > 0.3);
    CHECK(strong_pre > 0.5);
}

TEST_CASE("synthetic generation is bit-identical for a fixed seed") {
    stan::SyntheticSpec spec;
    spec.n = 3;
    spec.sample_rate = 32.0;
    spec.duration = 120.0;
    spec.onsets = {100.0};
    spec.seed = 42;
    Recording a = generate_synthetic(spec);
    Recording b = generate_synthetic(spec);
    for (std::size_t c = 0; c < a.samples.size(); ++c)
        for (std::size_t i = 0; i < a.samples[c].size(); ++i)
            CHECK(a.samples[c][i] == b.samples[c][i]);
}

TEST_CASE("normalization stats zero the mean and scale the variance") {
    nd::Rng rng(3);
    std::vector<LabeledWindow> windows;
    for (int k = 0; k < 8; ++k) {
        auto w = nd::Tensor::zeros({2, 16});
        double* d = w.data();
        for (int i = 0; i < 16; ++i) {
            d[i] = 5.0 + 2.0 * rng.normal();        // channel 0
            d[16 + i] = -3.0 + 0.5 * rng.normal();  // channel 1
        }
        LabeledWindow lw;
        lw.window = w;
        lw.label = k % 2;
        windows.push_back(lw);
    }
    auto stats = stan::compute_norm(windows);
    CHECK(stats.mean[0] == doctest::Approx(5.0).epsilon(0.2));
    CHECK(stats.mean[1] == doctest::Approx(-3.0).epsilon(0.2));

    stan::apply_norm(windows, stats);
    double m0 = 0.0, v0 = 0.0;
    for (const auto& lw : windows)
        for (int i = 0; i < 16; ++i) m0 += lw.window.at({0, i});
    m0 /= 8 * 16;
    for (const auto& lw : windows)
        for (int i = 0; i < 16; ++i)
            v0 += (lw.window.at({0, i}) - m0) * (lw.window.at({0, i}) - m0);
    v0 /= 8 * 16;
    CHECK(std::abs(m0) < 1e-9);
    CHECK(v0 == doctest::Approx(1.0).epsilon(1e-6));

    auto wrong = nd::Tensor::zeros({3, 16});
    CHECK_THROWS_AS((void)stan::normalize_window(wrong, stats),
                    stan::DataError);
}

TEST_CASE("constant channel gets a variance floor, not a NaN") {
    std::vector<LabeledWindow> windows;
    auto w = nd::Tensor::full({1, 8}, 2.5);
    LabeledWindow lw;
    lw.window = w;
    windows.push_back(lw);
    auto stats = stan::compute_norm(windows);
    auto z = stan::normalize_window(w, stats);
    for (int i = 0; i < 8; ++i) CHECK(std::isfinite(z.at({0, i})));
}

TEST_CASE("chb-mit summary parsing") {
    const std::string text =
        "Data Sampling Rate: 256 Hz\n"
        "\n"
        "File Name: chb01_01.edf\n"
        "File Start Time: 11:42:54\n"
        "File End Time: 12:42:54\n"
        "Number of Seizures in File: 0\n"
        "\n"
        "File Name: chb01_03.edf\n"
        "File Start Time: 13:43:04\n"
        "File End Time: 14:43:04\n"
        "Number of Seizures in File: 2\n"
        "Seizure 1 Start Time: 2996 seconds\n"
        "Seizure 1 End Time: 3036 seconds\n"
        "Seizure 2 Start Time: 3400 seconds\n"
        "Seizure 2 End Time: 3425 seconds\n";
    auto entries = stan::parse_chbmit_summary(text);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].file == "chb01_01.edf");
    CHECK(entries[0].onsets.empty());
    CHECK(entries[1].file == "chb01_03.edf");
    REQUIRE(entries[1].onsets.size() == 2);
    CHECK(entries[1].onsets[0] == doctest::Approx(2996.0));
    CHECK(entries[1].onsets[1] == doctest::Approx(3400.0));

    const std::string bad =
        "File Name: x.edf\n"
        "Number of Seizures in File: 2\n"
        "Seizure 1 Start Time: 10 seconds\n";
    CHECK_THROWS_AS((void)stan::parse_chbmit_summary(bad), stan::ParseError);
}
