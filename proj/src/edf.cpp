#include "stan/edf.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace stan {
namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

struct FieldReader {
    const std::string& raw;
    std::size_t pos = 0;

    std::string take(std::size_t len, const char* name) {
        if (pos + len > raw.size())
            throw ParseError(std::string("file ends inside ") + name, pos);
        std::string out = raw.substr(pos, len);
        pos += len;
        return out;
    }
    long take_long(std::size_t len, const char* name) {
        const std::size_t at = pos;
        std::string f = trim(take(len, name));
        long v = 0;
        auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
        if (ec != std::errc{} || p != f.data() + f.size())
            throw ParseError(std::string("bad integer in ") + name, at);
        return v;
    }
    double take_double(std::size_t len, const char* name) {
        const std::size_t at = pos;
        std::string f = trim(take(len, name));
        double v = 0.0;
        auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
        if (ec != std::errc{} || p != f.data() + f.size())
            throw ParseError(std::string("bad number in ") + name, at);
        return v;
    }
};

void put_field(std::string& out, std::string value, std::size_t len) {
    if (value.size() > len) value.resize(len);
    value.resize(len, ' ');
    out += value;
}

std::string format_number(double v, std::size_t len) {
    for (int prec = 7; prec >= 0; --prec) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::string_view(buf).size() <= len) return buf;
    }
    throw DataError("number does not fit an EDF header field");
}

std::string file_stem(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

}  // namespace

std::string sidecar_path(const std::string& edf_path) {
    std::filesystem::path p(edf_path);
    if (lower(p.extension().string()) == ".edf")
        return p.replace_extension(".onsets.txt").string();
    return edf_path + ".onsets.txt";
}

std::vector<double> read_onset_sidecar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open onset sidecar '" + path + "'");
    std::vector<double> onsets;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        double v = 0.0;
        auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (ec != std::errc{} || p != t.data() + t.size())
            throw DataError("bad onset on line " + std::to_string(lineno) +
                            " of '" + path + "'");
        onsets.push_back(v);
    }
    return onsets;
}

void write_onset_sidecar(const std::string& path,
                         const std::vector<double>& onsets) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write onset sidecar '" + path + "'");
    for (double t : onsets) out << format_number(t, 32) << "\n";
}

Recording load_edf(const std::string& path, const EdfOptions& opts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string raw((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

    FieldReader r{raw};
    r.take(8, "version");
    r.take(80, "patient id");
    r.take(80, "recording id");
    r.take(8, "start date");
    r.take(8, "start time");
    const long header_bytes = r.take_long(8, "header byte count");
    r.take(44, "reserved header");
    const long declared_records = r.take_long(8, "record count");
    const double record_seconds = r.take_double(8, "record duration");
    const long ns = r.take_long(4, "signal count");
    if (ns <= 0) throw ParseError("signal count must be positive", 252);
    if (record_seconds <= 0.0)
        throw ParseError("record duration must be positive", 244);
    if (header_bytes != 256 * (ns + 1))
        throw ParseError("header byte count disagrees with signal count", 184);
    if (raw.size() < static_cast<std::size_t>(header_bytes))
        throw ParseError("file ends inside the signal headers", raw.size());

    const auto nsz = static_cast<std::size_t>(ns);
    std::vector<std::string> labels(nsz);
    for (auto& l : labels) l = trim(r.take(16, "signal label"));
    for (std::size_t i = 0; i < nsz; ++i) r.take(80, "transducer");
    for (std::size_t i = 0; i < nsz; ++i) r.take(8, "physical dimension");
    std::vector<double> pmin(nsz), pmax(nsz);
    for (auto& v : pmin) v = r.take_double(8, "physical minimum");
    for (auto& v : pmax) v = r.take_double(8, "physical maximum");
    std::vector<long> dmin(nsz), dmax(nsz);
    for (auto& v : dmin) v = r.take_long(8, "digital minimum");
    for (auto& v : dmax) v = r.take_long(8, "digital maximum");
    for (std::size_t i = 0; i < nsz; ++i) r.take(80, "prefiltering");
    std::vector<long> spr(nsz);
    for (auto& v : spr) v = r.take_long(8, "samples per record");
    for (std::size_t i = 0; i < nsz; ++i) r.take(32, "signal reserved");

    for (std::size_t i = 0; i < nsz; ++i) {
        if (spr[i] <= 0)
            throw ParseError("samples per record must be positive", r.pos);
        if (dmax[i] <= dmin[i])
            throw ParseError("digital range is empty", r.pos);
    }

    std::size_t record_values = 0;
    for (long v : spr) record_values += static_cast<std::size_t>(v);
    const std::size_t record_bytes = record_values * 2;
    const std::size_t data_bytes = raw.size() - static_cast<std::size_t>(header_bytes);
    std::size_t n_records;
    if (declared_records >= 0) {
        n_records = static_cast<std::size_t>(declared_records);
        if (data_bytes < n_records * record_bytes)
            throw ParseError("file ends inside the data records", raw.size());
    } else {
        n_records = record_bytes == 0 ? 0 : data_bytes / record_bytes;
    }

    // Channel selection.
    std::vector<std::string> excluded;
    excluded.reserve(opts.exclude_channels.size());
    for (const auto& e : opts.exclude_channels) excluded.push_back(lower(trim(e)));
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < nsz; ++i) {
        if (std::find(excluded.begin(), excluded.end(), lower(labels[i])) ==
            excluded.end())
            keep.push_back(i);
    }
    if (keep.empty())
        throw ConfigError("every channel of '" + path + "' was excluded");
    for (std::size_t i : keep) {
        if (spr[i] != spr[keep[0]])
            throw UnsupportedFormatError(
                "signals '" + labels[keep[0]] + "' and '" + labels[i] +
                "' of '" + path + "' have different sample rates");
    }

    Recording rec;
    rec.subject_id = opts.subject_id.empty() ? file_stem(path) : opts.subject_id;
    rec.name = file_stem(path);
    rec.sample_rate = static_cast<double>(spr[keep[0]]) / record_seconds;
    for (std::size_t i : keep) rec.channels.push_back(labels[i]);
    rec.samples.assign(keep.size(), {});
    const std::size_t per_rec = static_cast<std::size_t>(spr[keep[0]]);
    for (auto& ch : rec.samples) ch.reserve(n_records * per_rec);

    // Value offsets of each signal inside one record.
    std::vector<std::size_t> sig_offset(nsz, 0);
    for (std::size_t i = 1; i < nsz; ++i)
        sig_offset[i] = sig_offset[i - 1] + static_cast<std::size_t>(spr[i - 1]);

    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
    for (std::size_t rec_i = 0; rec_i < n_records; ++rec_i) {
        const std::size_t rec_base =
            static_cast<std::size_t>(header_bytes) + rec_i * record_bytes;
        for (std::size_t k = 0; k < keep.size(); ++k) {
            const std::size_t i = keep[k];
            const double gain = (pmax[i] - pmin[i]) /
                                static_cast<double>(dmax[i] - dmin[i]);
            const std::size_t base = rec_base + sig_offset[i] * 2;
            for (std::size_t j = 0; j < per_rec; ++j) {
                const std::size_t at = base + j * 2;
                const auto u = static_cast<std::uint16_t>(
                    bytes[at] | (static_cast<std::uint16_t>(bytes[at + 1]) << 8));
                const auto dig = static_cast<std::int16_t>(u);
                rec.samples[k].push_back(
                    pmin[i] + (static_cast<double>(dig) -
                               static_cast<double>(dmin[i])) * gain);
            }
        }
    }

    const std::string sidecar = sidecar_path(path);
    if (std::filesystem::exists(sidecar))
        rec.onsets = read_onset_sidecar(sidecar);
    rec.validate();
    return rec;
}

void write_edf(const std::string& path, const Recording& rec) {
    rec.validate();
    const double spr_f = rec.sample_rate;  // one-second records
    if (spr_f != std::floor(spr_f) || spr_f <= 0.0)
        throw UnsupportedFormatError(
            "writer requires an integer sample rate, got " +
            std::to_string(spr_f));
    const auto spr = static_cast<std::int64_t>(spr_f);
    if (rec.n_samples() % spr != 0)
        throw DataError("sample count is not a whole number of one-second records");
    const std::int64_t n_records = rec.n_samples() / spr;
    const auto nsz = static_cast<std::size_t>(rec.n_channels());

    std::vector<double> pmin(nsz), pmax(nsz);
    for (std::size_t i = 0; i < nsz; ++i) {
        double peak = 1.0;
        for (double v : rec.samples[i]) peak = std::max(peak, std::abs(v));
        pmax[i] = peak;
        pmin[i] = -peak;
    }
    const long dmin = -32768, dmax = 32767;

    std::string out;
    put_field(out, "0", 8);
    put_field(out, rec.subject_id, 80);
    put_field(out, "synthetic recording", 80);
    put_field(out, "01.01.00", 8);
    put_field(out, "00.00.00", 8);
    put_field(out, std::to_string(256 * (nsz + 1)), 8);
    put_field(out, "", 44);
    put_field(out, std::to_string(n_records), 8);
    put_field(out, "1", 8);
    put_field(out, std::to_string(nsz), 4);

    for (const auto& l : rec.channels) put_field(out, l, 16);
    for (std::size_t i = 0; i < nsz; ++i) put_field(out, "", 80);
    for (std::size_t i = 0; i < nsz; ++i) put_field(out, "uV", 8);
    for (std::size_t i = 0; i < nsz; ++i)
        put_field(out, format_number(pmin[i], 8), 8);
    for (std::size_t i = 0; i < nsz; ++i)
        put_field(out, format_number(pmax[i], 8), 8);
    for (std::size_t i = 0; i < nsz; ++i)
        put_field(out, std::to_string(dmin), 8);
    for (std::size_t i = 0; i < nsz; ++i)
        put_field(out, std::to_string(dmax), 8);
    for (std::size_t i = 0; i < nsz; ++i) put_field(out, "", 80);
    for (std::size_t i = 0; i < nsz; ++i)
        put_field(out, std::to_string(spr), 8);
    for (std::size_t i = 0; i < nsz; ++i) put_field(out, "", 32);

    // Header fields were formatted from the parsed values; re-parse the
    // ranges so reader and writer quantize against identical numbers.
    std::vector<double> rpmin(nsz), rpmax(nsz);
    for (std::size_t i = 0; i < nsz; ++i) {
        rpmin[i] = std::stod(format_number(pmin[i], 8));
        rpmax[i] = std::stod(format_number(pmax[i], 8));
    }

    for (std::int64_t rec_i = 0; rec_i < n_records; ++rec_i) {
        for (std::size_t i = 0; i < nsz; ++i) {
            const double gain = (rpmax[i] - rpmin[i]) /
                                static_cast<double>(dmax - dmin);
            for (std::int64_t j = 0; j < spr; ++j) {
                const double v =
                    rec.samples[i][static_cast<std::size_t>(rec_i * spr + j)];
                double dig_f = (v - rpmin[i]) / gain + static_cast<double>(dmin);
                long dig = std::lround(dig_f);
                dig = std::clamp(dig, dmin, dmax);
                const auto u = static_cast<std::uint16_t>(
                    static_cast<std::int16_t>(dig));
                out.push_back(static_cast<char>(u & 0xff));
                out.push_back(static_cast<char>((u >> 8) & 0xff));
            }
        }
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to '" + path + "'");
    f.close();
    if (!rec.onsets.empty()) write_onset_sidecar(sidecar_path(path), rec.onsets);
}

std::vector<ChbmitEntry> parse_chbmit_summary(const std::string& text) {
    std::vector<ChbmitEntry> entries;
    std::map<std::size_t, long> declared;  // entry index -> seizure count
    std::size_t offset = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::size_t line_at = offset;
        offset += line.size() + 1;
        std::string t = trim(line);
        if (t.rfind("File Name:", 0) == 0) {
            ChbmitEntry e;
            e.file = trim(t.substr(10));
            if (e.file.empty())
                throw ParseError("empty file name in summary", line_at);
            entries.push_back(std::move(e));
            continue;
        }
        if (t.rfind("Number of Seizures in File:", 0) == 0) {
            if (entries.empty())
                throw ParseError("seizure count before any file name", line_at);
            std::string num = trim(t.substr(27));
            long v = 0;
            auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
            if (ec != std::errc{} || p != num.data() + num.size() || v < 0)
                throw ParseError("bad seizure count", line_at);
            declared[entries.size() - 1] = v;
            continue;
        }
        if (t.rfind("Seizure", 0) == 0) {
            const auto colon = t.find("Start Time:");
            if (colon == std::string::npos) continue;  // "End Time" lines
            if (entries.empty())
                throw ParseError("seizure time before any file name", line_at);
            std::string rest = trim(t.substr(colon + 11));
            const auto sec = rest.find("seconds");
            if (sec != std::string::npos) rest = trim(rest.substr(0, sec));
            double v = 0.0;
            auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
            if (ec != std::errc{} || p != rest.data() + rest.size())
                throw ParseError("bad seizure start time", line_at);
            entries.back().onsets.push_back(v);
        }
    }
    for (const auto& [idx, count] : declared) {
        if (static_cast<long>(entries[idx].onsets.size()) != count)
            throw ParseError("summary lists " + std::to_string(count) +
                                 " seizures for " + entries[idx].file +
                                 " but has " +
                                 std::to_string(entries[idx].onsets.size()) +
                                 " start times",
                             0);
    }
    return entries;
}

std::vector<Recording> load_edf_dir(const std::string& dir,
                                    const EdfOptions& opts) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        throw DataError("dataset root " + dir + " is not a directory");
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".edf")
            paths.push_back(entry.path().string());
    if (paths.empty()) throw DataError("no .edf files under " + dir);
    std::sort(paths.begin(), paths.end());

    std::vector<Recording> recs;
    recs.reserve(paths.size());
    for (const std::string& path : paths) {
        Recording rec = load_edf(path, opts);
        if (opts.subject_id.empty()) {
            std::string stem = file_stem(path);
            rec.subject_id = stem.substr(0, stem.find('_'));
        }
        recs.push_back(std::move(rec));
    }
    return recs;
}

}  // namespace stan
