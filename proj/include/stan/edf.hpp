#pragma once

#include <string>
#include <vector>

#include "stan/data.hpp"

namespace stan {

struct EdfOptions {
    std::vector<std::string> exclude_channels;  // labels dropped after trim
    std::string subject_id;                     // defaults to the file stem
};

// 16-bit EDF reader. Requires every retained signal to share one sample
// rate (UnsupportedFormatError otherwise); ParseError carries the byte
// offset of the offending header field. Seizure onsets come from the
// sidecar "<stem>.onsets.txt" (one seconds value per line) when present.
Recording load_edf(const std::string& path, const EdfOptions& opts = {});

// Writer used for fixtures and round-trips: one-second data records,
// per-channel physical range taken from the data, int16 quantization.
void write_edf(const std::string& path, const Recording& rec);

// Every *.edf directly under `dir`, sorted by file name. Unless the options
// override it, the subject id becomes the file stem up to the first '_'
// (the CHB-MIT convention: "chb01_03.edf" groups under "chb01").
std::vector<Recording> load_edf_dir(const std::string& dir,
                                    const EdfOptions& opts = {});

// "<stem>.onsets.txt" for "<stem>.edf" (appended when no .edf suffix).
std::string sidecar_path(const std::string& edf_path);
std::vector<double> read_onset_sidecar(const std::string& path);
void write_onset_sidecar(const std::string& path,
                         const std::vector<double>& onsets);

struct ChbmitEntry {
    std::string file;             // EDF file name as listed in the summary
    std::vector<double> onsets;   // seconds from file start
};

// Parses a CHB-MIT "-summary.txt" listing into per-file onset lists.
std::vector<ChbmitEntry> parse_chbmit_summary(const std::string& text);

}  // namespace stan
