#pragma once

// CSV and binary emission for experiment artifacts.
//
// Every floating point value is written with std::to_chars, i.e. the
// shortest decimal string that parses back to the same double. Combined
// with the deterministic numerics underneath, identical runs produce
// byte-identical files. Files are written atomically (temp + rename) so
// a crash never leaves a half-written artifact behind.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <cleanprio/analysis.hpp>
#include <cleanprio/network.hpp>
#include <cleanprio/theory.hpp>
#include <cleanprio/trainer.hpp>

namespace cleanprio::io {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw io_error("format_double: conversion failed");
    return {buf, end};
}

inline std::string format_cell(double v) { return format_double(v); }
inline std::string format_cell(long long v) { return std::to_string(v); }
inline std::string format_cell(std::size_t v) { return std::to_string(v); }
inline std::string format_cell(int v) { return std::to_string(v); }
inline std::string format_cell(bool v) { return v ? "1" : "0"; }
inline std::string format_cell(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string{};
}

// Minimal CSV assembly. Our schemas never need quoting, so a cell
// containing a separator is a bug upstream, not something to escape.
class CsvBuilder {
  public:
    explicit CsvBuilder(std::vector<std::string> header) : width_(header.size()) {
        append_row(header);
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != width_)
            throw io_error("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                           std::to_string(width_));
        append_row(cells);
    }

    const std::string& str() const { return out_; }

  private:
    void append_row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (cells[i].find_first_of(",\"\n") != std::string::npos)
                throw io_error("csv cell must not contain separators: " + cells[i]);
            if (i) out_ += ',';
            out_ += cells[i];
        }
        out_ += '\n';
    }

    std::size_t width_;
    std::string out_;
};

// Writes content to a sibling temp file, then renames over the target.
inline void write_text_atomic(const std::filesystem::path& path, std::string_view content) {
    std::error_code ec;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw io_error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp-" + std::to_string(static_cast<unsigned long>(::getpid()));
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error("cannot open " + tmp.string() + " for writing");
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        f.flush();
        if (!f) throw io_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw io_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string());
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw io_error("read failed for " + path.string());
    return s;
}

// Training trace. Fixed scalar columns, then four dominance columns per
// tracked class. Cells stay empty when a value does not exist at that row
// (no noise in the dataset, row not instrumented, degenerate subset).
inline std::string trace_csv(const trainer::DynamicsTrace& trace) {
    std::vector<std::string> header = {"step",    "loss_total", "loss_clean", "loss_noise",
                                       "loss_truth", "err_total", "err_clean",  "err_noise",
                                       "test_loss", "test_err",  "resid_clean", "resid_noise"};
    for (int c : trace.tracked_classes) {
        const std::string s = std::to_string(c);
        header.push_back("ratio_" + s);
        header.push_back("alpha_" + s);
        header.push_back("cos_cn_" + s);
        header.push_back("eta_eff_" + s);
    }
    CsvBuilder csv(header);
    for (const auto& cp : trace.checkpoints) {
        std::vector<std::string> cells = {
            format_cell(cp.step),         format_cell(cp.loss_total), format_cell(cp.loss_clean),
            format_cell(cp.loss_noise),   format_cell(cp.loss_truth), format_cell(cp.err_total),
            format_cell(cp.err_clean),    format_cell(cp.err_noise),  format_cell(cp.test_loss),
            format_cell(cp.test_err),     format_cell(cp.residuals.clean_residual),
            format_cell(cp.residuals.noise_residual)};
        for (int c : trace.tracked_classes) {
            const analysis::DominanceRecord* rec = nullptr;
            if (cp.instrumented)
                for (const auto& d : cp.dominance)
                    if (d.cls == c) rec = &d;
            cells.push_back(rec ? format_cell(rec->ratio) : std::string{});
            cells.push_back(rec ? format_cell(rec->alpha_hat) : std::string{});
            cells.push_back(rec ? format_cell(rec->cos_clean_noise) : std::string{});
            cells.push_back(rec ? format_cell(rec->eta_effective) : std::string{});
        }
        csv.row(cells);
    }
    return csv.str();
}

inline std::string net_kind_name(theory::NetKind k) {
    return k == theory::NetKind::linear ? "linear" : "relu";
}

// Closed form vs Monte Carlo angle curves, one row per grid point.
inline std::string angle_curve_csv(std::span<const theory::AngleCurve> curves) {
    CsvBuilder csv({"theta_d_rad", "theta_h_closed", "theta_h_mc_mean", "theta_h_mc_se", "kind",
                    "depth", "width"});
    for (const auto& curve : curves)
        for (const auto& p : curve.points)
            csv.row({format_cell(p.theta_d), format_cell(p.theta_h_closed),
                     format_cell(p.theta_h_mc_mean), format_cell(p.theta_h_mc_se),
                     net_kind_name(curve.kind), format_cell(curve.depth), format_cell(curve.width)});
    return csv.str();
}

struct LabeledHistogram {
    analysis::AngleKind kind = analysis::AngleKind::within;
    int cls = 0;
    analysis::AngleHistogram hist;
};

// One-degree angle histograms; all bins are emitted, including empty ones,
// so the file shape depends only on the request.
inline std::string theta_hist_csv(std::span<const LabeledHistogram> entries) {
    CsvBuilder csv({"kind", "class", "bin_low_deg", "bin_high_deg", "count"});
    for (const auto& e : entries)
        for (std::size_t b = 0; b < analysis::AngleHistogram::kBins; ++b)
            csv.row({analysis::angle_kind_name(e.kind), format_cell(e.cls), format_cell(b),
                     format_cell(b + 1), format_cell(e.hist.counts[b])});
    return csv.str();
}

inline std::string sweep_csv(std::span<const trainer::SweepRow> rows) {
    CsvBuilder csv({"width", "delta", "seed", "min_test_err", "final_test_err", "stop_step",
                    "below_noise", "early_clean_priority", "aborted"});
    for (const auto& r : rows)
        csv.row({format_cell(r.point.width), format_cell(r.point.delta), format_cell(r.point.seed),
                 format_cell(r.min_test_error), format_cell(r.final_test_error),
                 format_cell(r.stop_step), format_cell(r.below_noise),
                 format_cell(r.early_clean_priority), format_cell(r.aborted)});
    return csv.str();
}

// Raw parameter snapshot: little-endian doubles behind a small header.
inline void save_params(const std::filesystem::path& path, const network::NetworkState& state,
                        long long step = -1) {
    const std::uint32_t magic = 0x43504E50u;  // "PNPC" little-endian on disk
    const std::uint32_t version = 1;
    const std::int64_t step64 = step;
    const std::uint64_t count = state.params.size();
    std::string blob;
    blob.reserve(24 + count * sizeof(double));
    auto put = [&blob](const void* p, std::size_t n) {
        blob.append(static_cast<const char*>(p), n);
    };
    put(&magic, 4);
    put(&version, 4);
    put(&step64, 8);
    put(&count, 8);
    put(state.params.data(), count * sizeof(double));
    write_text_atomic(path, blob);
}

inline long long load_params(const std::filesystem::path& path, network::NetworkState& state) {
    const std::string blob = read_text(path);
    if (blob.size() < 24) throw io_error("parameter snapshot too short: " + path.string());
    std::uint32_t magic = 0, version = 0;
    std::int64_t step = 0;
    std::uint64_t count = 0;
    std::memcpy(&magic, blob.data(), 4);
    std::memcpy(&version, blob.data() + 4, 4);
    std::memcpy(&step, blob.data() + 8, 8);
    std::memcpy(&count, blob.data() + 16, 8);
    if (magic != 0x43504E50u) throw io_error("not a parameter snapshot: " + path.string());
    if (version != 1) throw io_error("unsupported snapshot version in " + path.string());
    if (count != state.params.size())
        throw io_error("snapshot holds " + std::to_string(count) + " parameters, network expects " +
                       std::to_string(state.params.size()));
    if (blob.size() != 24 + count * sizeof(double))
        throw io_error("truncated parameter snapshot: " + path.string());
    std::memcpy(state.params.data(), blob.data() + 24, count * sizeof(double));
    return step;
}

}  // namespace cleanprio::io
