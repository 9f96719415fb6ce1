#pragma once

// Trace-driven adaptive streaming over the prefix-decodable container.
// Sessions run a fixed number of back-to-back windows; each window predicts
// bandwidth (previous window's measured throughput, trace value at t=0 for
// the first), greedily picks the highest level whose missing segments fit
// the deadline, downloads them through the piecewise-constant trace, and
// records a stall when the download overruns the window.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapis/codec.hpp"

namespace lapis {

struct StreamManifest {
    struct Level {
        std::uint64_t bytes = 0;  // upgrade bytes for this layer
        float resolution = 0.f;
        double quality = std::numeric_limits<double>::quiet_NaN();
    };
    std::vector<Level> levels;

    // Optional per-threshold standalone serve sizes (occupancy re-applied).
    struct Variant {
        float threshold = 0.f;
        std::vector<std::uint64_t> level_bytes;
    };
    std::vector<Variant> occupancy_variants;

    std::size_t level_count() const { return levels.size(); }
};

struct TraceSample {
    double time_s = 0;
    double kbps = 0;
};

struct BandwidthTrace {
    std::vector<TraceSample> samples;  // strictly increasing times from 0

    double rate_at(double t) const {
        if (samples.empty()) throw std::invalid_argument("trace: empty");
        std::size_t k = 0;
        while (k + 1 < samples.size() && samples[k + 1].time_s <= t) ++k;
        return samples[k].kbps;
    }
};

struct SessionRecord {
    int window = 0;
    double wall_s = 0;   // decision time
    int level = 0;       // highest complete level after the window
    std::uint64_t bytes = 0;
    double download_s = 0;
    double stall_s = 0;
};

struct SessionLog {
    std::vector<SessionRecord> records;
    std::uint64_t total_bytes = 0;
    double total_stall_s = 0;
};

struct SessionConfig {
    double deadline_s = 1.0;  // window duration and per-window budget
    int window_count = 1;
};

struct SessionMetrics {
    double mean_delivered_level = 0;
    double total_stall_s = 0;
    std::uint64_t total_bytes = 0;
    std::vector<double> quality_timeline;
};

namespace detail {

// Walks level blocks without materializing them: offsets for the manifest.
inline std::vector<PackedModel::Range> scan_layer_ranges(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.take(4);
    if (std::memcmp(magic.data(), "LAPS", 4) != 0)
        throw CodecError(CodecErrc::bad_magic, "container: bad magic");
    if (r.u16() != 1) throw CodecError(CodecErrc::version_mismatch, "container: bad version");
    std::uint16_t n_entries = r.u16();
    std::size_t width = 0;
    for (std::uint16_t i = 0; i < n_entries; ++i) {
        std::uint8_t len = r.u8();
        r.take(len);
        width += r.u8();
    }
    std::uint8_t n_levels = r.u8();
    r.u32();  // full width
    r.u32();  // full height
    std::vector<PackedModel::Range> ranges;
    std::size_t cum = 0;
    for (std::uint8_t l = 0; l < n_levels; ++l) {
        r.layer_context = l;
        std::size_t begin = r.pos();
        r.f32();
        std::uint32_t count = r.u32();
        r.take(static_cast<std::size_t>(count) * width * 4);
        std::uint32_t n_up = r.u32();
        r.take(static_cast<std::size_t>(n_up) * 8);
        cum += count;
        r.take((cum + 7) / 8);
        ranges.push_back({begin, r.pos() - begin});
    }
    return ranges;
}

}  // namespace detail

// One segment per layer, sized by its exact upgrade byte range. Optional
// `qualities` attaches a per-level score (e.g. SSIM against ground truth).
inline StreamManifest build_manifest(std::span<const std::uint8_t> container_bytes,
                                     std::span<const double> qualities = {}) {
    ContainerData c = unpack_raw(container_bytes);  // validates CRC + structure
    auto ranges = detail::scan_layer_ranges(container_bytes);
    if (!qualities.empty() && qualities.size() != ranges.size())
        throw std::invalid_argument("build_manifest: quality score count mismatch");
    StreamManifest m;
    for (std::size_t l = 0; l < ranges.size(); ++l) {
        StreamManifest::Level lvl;
        lvl.bytes = ranges[l].length;
        lvl.resolution = c.resolutions[l];
        if (!qualities.empty()) lvl.quality = qualities[l];
        m.levels.push_back(lvl);
    }
    return m;
}

inline StreamManifest build_manifest(const PackedModel& packed,
                                     std::span<const double> qualities = {}) {
    return build_manifest(std::span<const std::uint8_t>(packed.bytes), qualities);
}

// Standalone serve sizes under re-thresholded occupancy, one per threshold.
template <class Record>
void add_occupancy_variants(StreamManifest& manifest, const LayeredModel<Record>& model,
                            std::span<const float> thresholds) {
    for (float thr : thresholds) {
        LayeredModel<Record> variant = model;
        variant.occupancy = build_occupancy(model, thr);
        StreamManifest::Variant v;
        v.threshold = thr;
        for (std::size_t l = 0; l < model.levels.size(); ++l)
            v.level_bytes.push_back(streamed_level_bytes(variant, l));
        manifest.occupancy_variants.push_back(std::move(v));
    }
}

// CSV lines `time_s,bandwidth_kbps`. Times must strictly increase from 0.
inline BandwidthTrace load_trace(std::string_view text) {
    BandwidthTrace trace;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos
                                                                              : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        auto fail = [&](const std::string& why) {
            return std::invalid_argument("trace line " + std::to_string(line_no) + ": " + why);
        };
        std::size_t comma = line.find(',');
        if (comma == std::string_view::npos) throw fail("expected 'time_s,bandwidth_kbps'");
        double t, bw;
        try {
            t = std::stod(std::string(line.substr(0, comma)));
            bw = std::stod(std::string(line.substr(comma + 1)));
        } catch (const std::exception&) {
            throw fail("parse failure");
        }
        if (bw < 0) throw fail("negative bandwidth");
        if (trace.samples.empty()) {
            if (t != 0.0) throw fail("first sample must be at time 0");
        } else if (!(t > trace.samples.back().time_s)) {
            throw fail("times not strictly increasing");
        }
        trace.samples.push_back({t, bw});
    }
    if (trace.samples.empty()) throw std::invalid_argument("trace: empty input");
    return trace;
}

// Seconds to move `bytes` starting at `start_s` through the trace. Infinity
// if the trace ends at zero bandwidth with bytes still pending.
inline double download_duration(const BandwidthTrace& trace, double start_s, double bytes) {
    if (bytes <= 0) return 0.0;
    const auto& s = trace.samples;
    if (s.empty()) throw std::invalid_argument("trace: empty");
    double t = start_s, remaining = bytes;
    std::size_t k = 0;
    while (k + 1 < s.size() && s[k + 1].time_s <= t) ++k;
    for (;;) {
        double rate_bytes = s[k].kbps * 1000.0 / 8.0;  // kilobits/s -> bytes/s
        bool last = (k + 1 == s.size());
        if (last) {
            if (rate_bytes <= 0) return std::numeric_limits<double>::infinity();
            return (t - start_s) + remaining / rate_bytes;
        }
        double span = s[k + 1].time_s - t;
        double capacity = rate_bytes * span;
        if (capacity >= remaining && rate_bytes > 0)
            return (t - start_s) + remaining / rate_bytes;
        remaining -= capacity;
        t = s[k + 1].time_s;
        ++k;
    }
}

// Highest level whose missing segments are predicted to download within the
// deadline; level 0 is fetched unconditionally when nothing is held yet.
inline int abr_decide(int downloaded_levels, double deadline_s, double predicted_kbps,
                      const StreamManifest& manifest) {
    if (!(deadline_s > 0)) throw std::invalid_argument("abr_decide: deadline must be > 0");
    if (manifest.levels.empty()) throw std::invalid_argument("abr_decide: empty manifest");
    int n = static_cast<int>(manifest.levels.size());
    if (downloaded_levels >= n) return n - 1;

    // Mandatory base: with nothing held, level 0 is fetched even if the
    // prediction says it will stall.
    int best = downloaded_levels == 0 ? 0 : downloaded_levels - 1;
    if (predicted_kbps <= 0) return best;
    double cum_bytes = 0;
    for (int level = downloaded_levels; level < n; ++level) {
        cum_bytes += static_cast<double>(manifest.levels[level].bytes);
        double seconds = cum_bytes * 8.0 / (predicted_kbps * 1000.0);
        if (seconds <= deadline_s)
            best = level;
        else
            break;  // segments are nonempty, so later levels cannot fit either
    }
    return best;
}

using AbrPolicy = std::function<int(int /*downloaded*/, double /*deadline_s*/,
                                    double /*predicted_kbps*/, const StreamManifest&)>;

inline SessionLog simulate(const StreamManifest& manifest, const BandwidthTrace& trace,
                           const SessionConfig& cfg, const AbrPolicy& policy = abr_decide) {
    if (cfg.window_count < 0) throw std::invalid_argument("simulate: negative window count");
    if (!(cfg.deadline_s > 0)) throw std::invalid_argument("simulate: deadline must be > 0");

    SessionLog log;
    double wall = 0;
    int downloaded = 0;  // complete levels held
    double predicted = trace.rate_at(0.0);

    for (int w = 0; w < cfg.window_count; ++w) {
        int target = policy(downloaded, cfg.deadline_s, predicted, manifest);
        if (target >= static_cast<int>(manifest.levels.size()))
            throw std::logic_error("simulate: policy chose a level beyond the manifest");

        double bytes = 0;
        for (int l = downloaded; l <= target; ++l)
            bytes += static_cast<double>(manifest.levels[l].bytes);

        SessionRecord rec;
        rec.window = w;
        rec.wall_s = wall;
        rec.bytes = static_cast<std::uint64_t>(bytes);
        if (bytes > 0) {
            rec.download_s = download_duration(trace, wall, bytes);
            rec.stall_s = std::max(0.0, rec.download_s - cfg.deadline_s);
            if (rec.download_s > 0 && std::isfinite(rec.download_s))
                predicted = bytes * 8.0 / 1000.0 / rec.download_s;
            downloaded = std::max(downloaded, target + 1);
        }
        rec.level = downloaded > 0 ? downloaded - 1 : 0;
        wall += std::max(rec.download_s, cfg.deadline_s);
        log.total_bytes += rec.bytes;
        log.total_stall_s += rec.stall_s;
        log.records.push_back(rec);
    }
    return log;
}

inline SessionMetrics session_metrics(const SessionLog& log, const StreamManifest& manifest) {
    SessionMetrics m;
    m.total_bytes = 0;
    double level_sum = 0;
    for (const auto& rec : log.records) {
        level_sum += rec.level;
        m.total_stall_s += rec.stall_s;
        m.total_bytes += rec.bytes;
        double q = std::numeric_limits<double>::quiet_NaN();
        if (rec.level >= 0 && rec.level < static_cast<int>(manifest.levels.size()))
            q = manifest.levels[rec.level].quality;
        m.quality_timeline.push_back(q);
    }
    m.mean_delivered_level = log.records.empty() ? 0.0 : level_sum / log.records.size();
    return m;
}

// --- line-oriented output formats ------------------------------------------

inline std::string format_session_log(const SessionLog& log) {
    std::string out;
    char buf[160];
    for (const auto& rec : log.records) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%llu,%.6f,%.6f\n", rec.window, rec.level,
                      static_cast<unsigned long long>(rec.bytes), rec.download_s, rec.stall_s);
        out += buf;
    }
    return out;
}

inline std::string format_manifest(const StreamManifest& m) {
    std::string out;
    char buf[160];
    for (std::size_t l = 0; l < m.levels.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%zu,%llu,%.9g,%.9g\n", l,
                      static_cast<unsigned long long>(m.levels[l].bytes),
                      static_cast<double>(m.levels[l].resolution), m.levels[l].quality);
        out += buf;
    }
    for (const auto& v : m.occupancy_variants)
        for (std::size_t l = 0; l < v.level_bytes.size(); ++l) {
            std::snprintf(buf, sizeof(buf), "variant,%.9g,%zu,%llu\n",
                          static_cast<double>(v.threshold), l,
                          static_cast<unsigned long long>(v.level_bytes[l]));
            out += buf;
        }
    return out;
}

}  // namespace lapis
