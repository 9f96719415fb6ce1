#pragma once

// Layered container codec ("LAPS"), occupancy construction, checkpoint PLY
// ingest, and the score-based pruning baseline.
//
// Container layout, all little-endian:
//   magic "LAPS" | u16 version=1 | u16 schema entry count
//   per entry: u8 name length, name bytes, u8 arity
//   u8 level count | u32 full width | u32 full height
//   per level: f32 resolution | u32 new splat count | f32 rows (count*width)
//              u32 update count | (u32 index, f32 opacity) pairs
//              occupancy bitmap, ceil(cumulative/8) bytes, LSB first
//   u32 CRC32 (IEEE) over the concatenated level blocks
//
// The per-level blocks are self-contained upgrades: decoding only the first
// k blocks yields a valid k-level model.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lapis/core.hpp"

namespace lapis {

enum class CodecErrc {
    bad_magic,
    version_mismatch,
    truncated,
    crc_mismatch,
    schema_mismatch,
    malformed,
    ply_unsupported,
    ply_missing_property,
    ply_count_mismatch,
};

class CodecError : public std::runtime_error {
public:
    CodecError(CodecErrc code, const std::string& what, std::ptrdiff_t layer = -1)
        : std::runtime_error(what), code_(code), layer_(layer) {}
    CodecErrc code() const { return code_; }
    std::ptrdiff_t layer() const { return layer_; }  // -1 when not layer-specific

private:
    CodecErrc code_;
    std::ptrdiff_t layer_;
};

inline std::uint32_t crc32_ieee(std::span<const std::uint8_t> data,
                                std::uint32_t seed = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    for (std::uint8_t b : data) c = table[(c ^ b) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct AttributeSchema {
    struct Entry {
        std::string name;
        std::uint8_t arity = 0;
        friend bool operator==(const Entry&, const Entry&) = default;
    };
    std::vector<Entry> entries;

    std::size_t width() const {
        std::size_t w = 0;
        for (const auto& e : entries) w += e.arity;
        return w;
    }
    std::ptrdiff_t find(std::string_view name) const {
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return static_cast<std::ptrdiff_t>(i);
        return -1;
    }
    // Offset of the first value of the named attribute within a row.
    std::size_t offset_of(std::string_view name) const {
        std::size_t off = 0;
        for (const auto& e : entries) {
            if (e.name == name) return off;
            off += e.arity;
        }
        throw std::invalid_argument("schema: no attribute named " + std::string(name));
    }
    void validate() const {
        if (entries.empty()) throw std::invalid_argument("schema: empty");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].name.empty() || entries[i].name.size() > 255)
                throw std::invalid_argument("schema: bad attribute name");
            if (entries[i].arity == 0) throw std::invalid_argument("schema: zero arity");
            for (std::size_t j = i + 1; j < entries.size(); ++j)
                if (entries[i].name == entries[j].name)
                    throw std::invalid_argument("schema: duplicate attribute " + entries[i].name);
        }
        auto op = find("opacity");
        if (op < 0 || entries[static_cast<std::size_t>(op)].arity != 1)
            throw std::invalid_argument("schema: requires an opacity attribute of arity 1");
    }

    static AttributeSchema splat2d() {
        return AttributeSchema{{{"position", 2},
                                {"scale", 2},
                                {"rotation", 1},
                                {"color", 3},
                                {"opacity", 1},
                                {"depth", 1}}};
    }
    static AttributeSchema splat3d() {
        return AttributeSchema{{{"position", 3},
                                {"normal", 3},
                                {"sh_dc", 3},
                                {"sh_rest", 45},
                                {"opacity", 1},
                                {"scale", 3},
                                {"rotation", 4}}};
    }

    friend bool operator==(const AttributeSchema&, const AttributeSchema&) = default;
};

// Row serialization per record type.
template <class Record>
struct RowCodec;

template <>
struct RowCodec<Splat2D> {
    static constexpr std::size_t width = 10;
    static AttributeSchema schema() { return AttributeSchema::splat2d(); }
    static void write(const Splat2D& s, float* row) {
        row[0] = s.position[0];
        row[1] = s.position[1];
        row[2] = s.scale[0];
        row[3] = s.scale[1];
        row[4] = s.rotation;
        row[5] = s.color[0];
        row[6] = s.color[1];
        row[7] = s.color[2];
        row[8] = s.opacity;
        row[9] = s.depth;
    }
    static Splat2D read(const float* row) {
        Splat2D s;
        s.position = {row[0], row[1]};
        s.scale = {row[2], row[3]};
        s.rotation = row[4];
        s.color = {row[5], row[6], row[7]};
        s.opacity = row[8];
        s.depth = row[9];
        return s;
    }
};

template <>
struct RowCodec<Splat3DRecord> {
    static constexpr std::size_t width = Splat3DRecord::kWidth;
    static AttributeSchema schema() { return AttributeSchema::splat3d(); }
    static void write(const Splat3DRecord& s, float* row) {
        std::copy(s.values.begin(), s.values.end(), row);
    }
    static Splat3DRecord read(const float* row) {
        Splat3DRecord s;
        std::copy(row, row + width, s.values.begin());
        return s;
    }
};

// Schema-typed but record-agnostic container contents.
struct RawLevel {
    std::vector<float> rows;  // splat_count * schema width
    std::vector<OpacityUpdate> updates;
    std::vector<bool> occupancy;
    std::size_t splat_count(std::size_t width) const { return width ? rows.size() / width : 0; }
};

struct ContainerData {
    AttributeSchema schema;
    std::uint32_t full_width = 0;
    std::uint32_t full_height = 0;
    std::vector<float> resolutions;
    std::vector<RawLevel> levels;
};

struct PackedModel {
    std::vector<std::uint8_t> bytes;
    std::size_t header_bytes = 0;  // payload (level blocks) starts here
    struct Range {
        std::size_t offset = 0, length = 0;
    };
    std::vector<Range> layer_ranges;

    std::size_t payload_bytes() const {
        std::size_t n = 0;
        for (const auto& r : layer_ranges) n += r.length;
        return n;
    }
};

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        buf_.push_back(static_cast<std::uint8_t>(v));
        buf_.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    std::size_t size() const { return buf_.size(); }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
    std::ptrdiff_t layer_context = -1;

    std::uint8_t u8() { return take(1)[0]; }
    std::uint16_t u16() {
        auto b = take(2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        auto b = take(4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64() {
        std::uint64_t lo = u32(), hi = u32();
        return lo | (hi << 32);
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::span<const std::uint8_t> take(std::size_t n) {
        if (pos_ + n > data_.size()) {
            std::string what = "container truncated";
            if (layer_context >= 0) what += " inside layer " + std::to_string(layer_context);
            throw CodecError(CodecErrc::truncated, what, layer_context);
        }
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

inline void validate_container(const ContainerData& c) {
    c.schema.validate();
    if (c.levels.empty())
        throw CodecError(CodecErrc::malformed, "container: no levels");
    if (c.resolutions.size() != c.levels.size())
        throw CodecError(CodecErrc::malformed, "container: resolution count mismatch");
    const std::size_t width = c.schema.width();
    std::size_t cum = 0;
    for (std::size_t l = 0; l < c.levels.size(); ++l) {
        const RawLevel& lv = c.levels[l];
        if (width == 0 || lv.rows.size() % width != 0)
            throw CodecError(CodecErrc::schema_mismatch,
                             "container: row data does not match schema width",
                             static_cast<std::ptrdiff_t>(l));
        for (const auto& up : lv.updates)
            if (up.index >= cum)
                throw CodecError(CodecErrc::malformed,
                                 "container: update index beyond prior layers",
                                 static_cast<std::ptrdiff_t>(l));
        cum += lv.rows.size() / width;
        if (lv.occupancy.size() != cum)
            throw CodecError(CodecErrc::malformed, "container: occupancy size mismatch",
                             static_cast<std::ptrdiff_t>(l));
    }
}

}  // namespace detail

inline PackedModel pack_raw(const ContainerData& c) {
    detail::validate_container(c);
    if (c.levels.size() > 255)
        throw CodecError(CodecErrc::malformed, "container: too many levels");
    const std::size_t width = c.schema.width();

    detail::ByteWriter w;
    w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("LAPS"), 4));
    w.u16(1);
    w.u16(static_cast<std::uint16_t>(c.schema.entries.size()));
    for (const auto& e : c.schema.entries) {
        w.u8(static_cast<std::uint8_t>(e.name.size()));
        w.bytes(std::span<const std::uint8_t>(
            reinterpret_cast<const std::uint8_t*>(e.name.data()), e.name.size()));
        w.u8(e.arity);
    }
    w.u8(static_cast<std::uint8_t>(c.levels.size()));
    w.u32(c.full_width);
    w.u32(c.full_height);

    PackedModel out;
    out.header_bytes = w.size();

    std::size_t cum = 0;
    for (std::size_t l = 0; l < c.levels.size(); ++l) {
        const RawLevel& lv = c.levels[l];
        std::size_t begin = w.size();
        w.f32(c.resolutions[l]);
        w.u32(static_cast<std::uint32_t>(lv.rows.size() / width));
        for (float v : lv.rows) w.f32(v);
        w.u32(static_cast<std::uint32_t>(lv.updates.size()));
        for (const auto& up : lv.updates) {
            w.u32(up.index);
            w.f32(up.opacity);
        }
        cum += lv.rows.size() / width;
        std::vector<std::uint8_t> bitmap((cum + 7) / 8, 0);
        for (std::size_t j = 0; j < cum; ++j)
            if (lv.occupancy[j]) bitmap[j / 8] |= static_cast<std::uint8_t>(1u << (j % 8));
        w.bytes(bitmap);
        out.layer_ranges.push_back({begin, w.size() - begin});
    }

    std::vector<std::uint8_t> buf = w.take();
    std::uint32_t crc = crc32_ieee(
        std::span<const std::uint8_t>(buf.data() + out.header_bytes, buf.size() - out.header_bytes));
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    out.bytes = std::move(buf);
    return out;
}

namespace detail {

// Shared header + level-block parser. `max_levels` bounds how many blocks are
// decoded; strict mode additionally demands the trailing CRC and no slack.
inline ContainerData unpack_impl(std::span<const std::uint8_t> bytes,
                                 std::size_t max_levels, bool strict) {
    ByteReader r(bytes);
    auto magic = r.take(4);
    if (std::memcmp(magic.data(), "LAPS", 4) != 0)
        throw CodecError(CodecErrc::bad_magic, "container: bad magic");
    std::uint16_t version = r.u16();
    if (version != 1)
        throw CodecError(CodecErrc::version_mismatch,
                         "container: unsupported version " + std::to_string(version));
    ContainerData c;
    std::uint16_t n_entries = r.u16();
    for (std::uint16_t i = 0; i < n_entries; ++i) {
        std::uint8_t len = r.u8();
        auto name = r.take(len);
        std::uint8_t arity = r.u8();
        c.schema.entries.push_back(
            {std::string(reinterpret_cast<const char*>(name.data()), len), arity});
    }
    std::uint8_t n_levels = r.u8();
    if (n_levels == 0) throw CodecError(CodecErrc::malformed, "container: zero levels");
    c.full_width = r.u32();
    c.full_height = r.u32();
    const std::size_t width = c.schema.width();
    if (width == 0) throw CodecError(CodecErrc::malformed, "container: empty schema");

    std::size_t levels_to_read = std::min<std::size_t>(n_levels, max_levels);
    std::size_t payload_begin = r.pos();
    std::size_t cum = 0;
    for (std::size_t l = 0; l < levels_to_read; ++l) {
        r.layer_context = static_cast<std::ptrdiff_t>(l);
        RawLevel lv;
        c.resolutions.push_back(r.f32());
        std::uint32_t count = r.u32();
        lv.rows.resize(static_cast<std::size_t>(count) * width);
        for (auto& v : lv.rows) v = r.f32();
        std::uint32_t n_up = r.u32();
        lv.updates.resize(n_up);
        for (auto& up : lv.updates) {
            up.index = r.u32();
            up.opacity = r.f32();
        }
        cum += count;
        auto bitmap = r.take((cum + 7) / 8);
        lv.occupancy.resize(cum);
        for (std::size_t j = 0; j < cum; ++j)
            lv.occupancy[j] = (bitmap[j / 8] >> (j % 8)) & 1u;
        c.levels.push_back(std::move(lv));
    }
    r.layer_context = -1;

    if (strict) {
        std::size_t payload_end = r.pos();
        std::uint32_t declared = r.u32();
        if (r.remaining() != 0)
            throw CodecError(CodecErrc::malformed, "container: trailing bytes");
        std::uint32_t actual = crc32_ieee(
            bytes.subspan(payload_begin, payload_end - payload_begin));
        if (declared != actual)
            throw CodecError(CodecErrc::crc_mismatch, "container: CRC mismatch");
    }
    validate_container(c);
    return c;
}

}  // namespace detail

// Strict decode of a complete container (validates trailing CRC).
inline ContainerData unpack_raw(std::span<const std::uint8_t> bytes) {
    return detail::unpack_impl(bytes, static_cast<std::size_t>(-1), true);
}

// Decodes the header plus the first `levels` blocks; ignores everything
// after them (including the CRC), so a byte-range prefix is sufficient.
inline ContainerData unpack_prefix_raw(std::span<const std::uint8_t> bytes,
                                       std::size_t levels) {
    if (levels == 0) throw std::invalid_argument("unpack_prefix: zero levels");
    return detail::unpack_impl(bytes, levels, false);
}

template <class Record>
ContainerData to_container(const LayeredModel<Record>& model, std::uint32_t full_width = 0,
                           std::uint32_t full_height = 0) {
    validate_model(model);
    if (model.occupancy.size() != model.levels.size())
        throw std::invalid_argument("pack: model is missing occupancy maps");
    ContainerData c;
    c.schema = RowCodec<Record>::schema();
    c.full_width = full_width;
    c.full_height = full_height;
    c.resolutions = model.resolutions;
    const std::size_t width = RowCodec<Record>::width;
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
        RawLevel lv;
        lv.rows.resize(model.levels[l].new_splats.size() * width);
        for (std::size_t i = 0; i < model.levels[l].new_splats.size(); ++i)
            RowCodec<Record>::write(model.levels[l].new_splats[i], lv.rows.data() + i * width);
        lv.updates = model.levels[l].opacity_updates;
        lv.occupancy = model.occupancy[l].bits;
        c.levels.push_back(std::move(lv));
    }
    return c;
}

template <class Record>
LayeredModel<Record> from_container(const ContainerData& c) {
    if (!(c.schema == RowCodec<Record>::schema()))
        throw CodecError(CodecErrc::schema_mismatch,
                         "container: schema does not match the requested record type");
    const std::size_t width = RowCodec<Record>::width;
    LayeredModel<Record> model;
    model.resolutions = c.resolutions;
    for (const auto& lv : c.levels) {
        Layer<Record> layer;
        std::size_t count = lv.rows.size() / width;
        layer.new_splats.reserve(count);
        for (std::size_t i = 0; i < count; ++i)
            layer.new_splats.push_back(RowCodec<Record>::read(lv.rows.data() + i * width));
        layer.opacity_updates = lv.updates;
        model.levels.push_back(std::move(layer));
        model.occupancy.push_back(OccupancyMap{lv.occupancy});
    }
    return model;
}

template <class Record>
PackedModel pack(const LayeredModel<Record>& model, const AttributeSchema& schema,
                 std::uint32_t full_width = 0, std::uint32_t full_height = 0) {
    schema.validate();
    if (!(schema == RowCodec<Record>::schema()) || schema.width() != RowCodec<Record>::width)
        throw CodecError(CodecErrc::schema_mismatch, "pack: schema/record width mismatch");
    return pack_raw(to_container(model, full_width, full_height));
}

template <class Record>
struct UnpackResult {
    LayeredModel<Record> model;
    AttributeSchema schema;
    std::uint32_t full_width = 0;
    std::uint32_t full_height = 0;
};

template <class Record>
UnpackResult<Record> unpack(std::span<const std::uint8_t> bytes) {
    ContainerData c = unpack_raw(bytes);
    UnpackResult<Record> out;
    out.schema = c.schema;
    out.full_width = c.full_width;
    out.full_height = c.full_height;
    out.model = from_container<Record>(c);
    return out;
}

template <class Record>
UnpackResult<Record> unpack_prefix(std::span<const std::uint8_t> bytes, std::size_t levels) {
    ContainerData c = unpack_prefix_raw(bytes, levels);
    UnpackResult<Record> out;
    out.schema = c.schema;
    out.full_width = c.full_width;
    out.full_height = c.full_height;
    out.model = from_container<Record>(c);
    return out;
}

// Per-level inclusion bitmaps: bit j set iff the splat's effective opacity at
// that level is >= threshold (strictly below prunes).
template <class Record>
std::vector<OccupancyMap> build_occupancy(const LayeredModel<Record>& model, float threshold) {
    if (!(threshold > 0.f)) throw std::invalid_argument("build_occupancy: threshold must be > 0");
    std::vector<OccupancyMap> maps;
    maps.reserve(model.levels.size());
    std::vector<float> opacity;  // effective opacities, updated level by level
    for (const auto& lv : model.levels) {
        for (const auto& s : lv.new_splats) opacity.push_back(RecordOpacity<Record>::get(s));
        for (const auto& up : lv.opacity_updates) {
            if (up.index >= opacity.size())
                throw std::invalid_argument("build_occupancy: update index out of range");
            opacity[up.index] = up.opacity;
        }
        OccupancyMap m;
        m.bits.resize(opacity.size());
        for (std::size_t j = 0; j < opacity.size(); ++j) m.bits[j] = opacity[j] >= threshold;
        maps.push_back(std::move(m));
    }
    return maps;
}

// Bytes needed to serve `level` standalone with occupancy applied: occupied
// rows plus the bitmap. Every cleared bit removes exactly one row.
template <class Record>
std::size_t streamed_level_bytes(const LayeredModel<Record>& model, std::size_t level) {
    if (level >= model.levels.size())
        throw std::out_of_range("streamed_level_bytes: level out of range");
    if (model.occupancy.size() != model.levels.size())
        throw std::invalid_argument("streamed_level_bytes: model has no occupancy maps");
    std::size_t cum = model.cumulative_count(level);
    std::size_t rows = model.occupancy[level].popcount();
    return rows * RowCodec<Record>::width * 4 + (cum + 7) / 8;
}

namespace detail {

template <class Record>
double significance_score(const Record& s);

template <>
inline double significance_score<Splat2D>(const Splat2D& s) {
    return static_cast<double>(s.opacity) * s.scale[0] * s.scale[1];
}

template <>
inline double significance_score<Splat3DRecord>(const Splat3DRecord& s) {
    return static_cast<double>(s.values[Splat3DRecord::kOpacity]) *
           s.values[Splat3DRecord::kScale] * s.values[Splat3DRecord::kScale + 1] *
           s.values[Splat3DRecord::kScale + 2];
}

}  // namespace detail

// Keeps the top ceil(keep_fraction*n) splats by opacity*scale-product score,
// ties broken toward lower index; survivors keep their original order.
template <class Record>
std::vector<Record> downsample_baseline(std::span<const Record> splats, double keep_fraction) {
    if (splats.empty()) throw std::invalid_argument("downsample_baseline: empty input");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw std::invalid_argument("downsample_baseline: keep fraction out of (0,1]");
    std::size_t keep = static_cast<std::size_t>(
        std::ceil(keep_fraction * static_cast<double>(splats.size())));
    keep = std::min(keep, splats.size());

    std::vector<std::size_t> order(splats.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detail::significance_score(splats[a]) > detail::significance_score(splats[b]);
    });
    std::vector<bool> survive(splats.size(), false);
    for (std::size_t i = 0; i < keep; ++i) survive[order[i]] = true;

    std::vector<Record> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < splats.size(); ++i)
        if (survive[i]) out.push_back(splats[i]);
    return out;
}

// --- official checkpoint PLY ingest ---------------------------------------

namespace detail {

inline const std::vector<std::string>& ply_required_properties() {
    static const std::vector<std::string> props = [] {
        std::vector<std::string> p = {"x", "y", "z", "nx", "ny", "nz"};
        for (int i = 0; i < 3; ++i) p.push_back("f_dc_" + std::to_string(i));
        for (int i = 0; i < 45; ++i) p.push_back("f_rest_" + std::to_string(i));
        p.push_back("opacity");
        for (int i = 0; i < 3; ++i) p.push_back("scale_" + std::to_string(i));
        for (int i = 0; i < 4; ++i) p.push_back("rot_" + std::to_string(i));
        return p;
    }();
    return props;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// Parses a binary-little-endian checkpoint PLY (the official attribute
// layout) and returns activated records in file order: sigmoid on the stored
// opacity logit, exp on stored log-scales, quaternion normalized.
inline std::vector<Splat3DRecord> ingest_ply(std::span<const std::uint8_t> bytes) {
    // Header is ASCII up to "end_header".
    std::size_t header_end = 0;
    std::string header;
    {
        std::string_view view(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        auto pos = view.find("end_header");
        if (pos == std::string_view::npos)
            throw CodecError(CodecErrc::malformed, "ply: missing end_header");
        auto nl = view.find('\n', pos);
        if (nl == std::string_view::npos)
            throw CodecError(CodecErrc::malformed, "ply: missing newline after end_header");
        header_end = nl + 1;
        header = std::string(view.substr(0, header_end));
    }

    std::istringstream in(header);
    std::string line;
    if (!std::getline(in, line) || (line != "ply" && line != "ply\r"))
        throw CodecError(CodecErrc::malformed, "ply: bad signature");

    std::size_t vertex_count = 0;
    bool in_vertex = false, seen_vertex = false;
    std::vector<std::string> prop_names;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment" || tok == "obj_info" || tok.empty()) continue;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "ascii")
                throw CodecError(CodecErrc::ply_unsupported, "ply: ASCII format unsupported");
            if (fmt != "binary_little_endian")
                throw CodecError(CodecErrc::ply_unsupported, "ply: unsupported format " + fmt);
        } else if (tok == "element") {
            std::string name;
            ls >> name >> vertex_count;
            if (name != "vertex") {
                if (!seen_vertex)
                    throw CodecError(CodecErrc::ply_unsupported,
                                     "ply: vertex must be the first element");
                in_vertex = false;
                continue;
            }
            seen_vertex = true;
            in_vertex = true;
        } else if (tok == "property") {
            if (!in_vertex) continue;
            std::string type, name;
            ls >> type >> name;
            if (type != "float")
                throw CodecError(CodecErrc::ply_unsupported,
                                 "ply: non-float vertex property " + name);
            prop_names.push_back(name);
        } else if (tok == "end_header") {
            break;
        }
    }
    if (!seen_vertex) throw CodecError(CodecErrc::malformed, "ply: no vertex element");

    std::vector<std::size_t> prop_index;
    for (const auto& need : detail::ply_required_properties()) {
        auto it = std::find(prop_names.begin(), prop_names.end(), need);
        if (it == prop_names.end())
            throw CodecError(CodecErrc::ply_missing_property, "ply: missing property " + need);
        prop_index.push_back(static_cast<std::size_t>(it - prop_names.begin()));
    }

    const std::size_t stride = prop_names.size() * 4;
    if (bytes.size() - header_end < vertex_count * stride)
        throw CodecError(CodecErrc::ply_count_mismatch,
                         "ply: payload smaller than declared vertex count");

    std::vector<Splat3DRecord> out;
    out.reserve(vertex_count);
    const std::uint8_t* base = bytes.data() + header_end;
    for (std::size_t v = 0; v < vertex_count; ++v) {
        const std::uint8_t* row = base + v * stride;
        auto get = [&](std::size_t slot) {
            float f;
            std::memcpy(&f, row + prop_index[slot] * 4, 4);
            return f;
        };
        Splat3DRecord rec;
        for (std::size_t i = 0; i < 54; ++i) rec.values[i] = get(i);  // x..f_rest_44 verbatim
        rec.values[Splat3DRecord::kOpacity] = static_cast<float>(detail::sigmoid(get(54)));
        for (std::size_t i = 0; i < 3; ++i)
            rec.values[Splat3DRecord::kScale + i] =
                static_cast<float>(std::exp(static_cast<double>(get(55 + i))));
        double qn = 0;
        std::array<double, 4> q{};
        for (std::size_t i = 0; i < 4; ++i) {
            q[i] = get(58 + i);
            qn += q[i] * q[i];
        }
        qn = std::sqrt(qn);
        if (qn > 0) {
            for (std::size_t i = 0; i < 4; ++i)
                rec.values[Splat3DRecord::kRotation + i] = static_cast<float>(q[i] / qn);
        } else {
            rec.values[Splat3DRecord::kRotation] = 1.f;
        }
        out.push_back(rec);
    }
    return out;
}

// --- debug text dump --------------------------------------------------------

namespace detail {

inline std::string float_str(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

// Human-readable dump of a container; parse_text inverts it losslessly
// (floats use shortest round-trip formatting).
inline std::string dump_text(const ContainerData& c) {
    std::string out;
    out += "laps 1\n";
    out += "dims " + std::to_string(c.full_width) + " " + std::to_string(c.full_height) + "\n";
    for (const auto& e : c.schema.entries)
        out += "attribute " + e.name + " " + std::to_string(e.arity) + "\n";
    out += "levels " + std::to_string(c.levels.size()) + "\n";
    const std::size_t width = c.schema.width();
    for (std::size_t l = 0; l < c.levels.size(); ++l) {
        const RawLevel& lv = c.levels[l];
        out += "level " + std::to_string(l) + " " + detail::float_str(c.resolutions[l]) + "\n";
        std::size_t count = lv.rows.size() / width;
        out += "splats " + std::to_string(count) + "\n";
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t k = 0; k < width; ++k) {
                if (k) out += ' ';
                out += detail::float_str(lv.rows[i * width + k]);
            }
            out += '\n';
        }
        out += "updates " + std::to_string(lv.updates.size()) + "\n";
        for (const auto& up : lv.updates)
            out += std::to_string(up.index) + " " + detail::float_str(up.opacity) + "\n";
        out += "occupancy ";
        for (bool b : lv.occupancy) out += b ? '1' : '0';
        out += '\n';
    }
    out += "end\n";
    return out;
}

inline ContainerData parse_text(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& why) -> CodecError {
        return CodecError(CodecErrc::malformed,
                          "dump line " + std::to_string(line_no) + ": " + why);
    };
    auto next = [&](const char* what) {
        if (!std::getline(in, line)) throw fail(std::string("expected ") + what);
        ++line_no;
        return std::istringstream(line);
    };
    auto parse_f32 = [&](const std::string& tok) {
        float v;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
            throw fail("bad float '" + tok + "'");
        return v;
    };

    ContainerData c;
    {
        auto ls = next("laps header");
        std::string tag;
        int ver = 0;
        ls >> tag >> ver;
        if (tag != "laps" || ver != 1) throw fail("expected 'laps 1'");
    }
    {
        auto ls = next("dims");
        std::string tag;
        ls >> tag >> c.full_width >> c.full_height;
        if (tag != "dims" || ls.fail()) throw fail("expected 'dims W H'");
    }
    std::size_t n_levels = 0;
    for (;;) {
        auto ls = next("attribute or levels");
        std::string tag;
        ls >> tag;
        if (tag == "attribute") {
            std::string name;
            unsigned arity;
            ls >> name >> arity;
            if (ls.fail() || arity == 0 || arity > 255) throw fail("bad attribute line");
            c.schema.entries.push_back({name, static_cast<std::uint8_t>(arity)});
        } else if (tag == "levels") {
            ls >> n_levels;
            if (ls.fail()) throw fail("bad levels line");
            break;
        } else {
            throw fail("expected 'attribute' or 'levels'");
        }
    }
    const std::size_t width = c.schema.width();
    std::size_t cum = 0;
    for (std::size_t l = 0; l < n_levels; ++l) {
        RawLevel lv;
        {
            auto ls = next("level");
            std::string tag, res;
            std::size_t idx;
            ls >> tag >> idx >> res;
            if (tag != "level" || idx != l || ls.fail()) throw fail("bad level line");
            c.resolutions.push_back(parse_f32(res));
        }
        std::size_t count = 0;
        {
            auto ls = next("splats");
            std::string tag;
            ls >> tag >> count;
            if (tag != "splats" || ls.fail()) throw fail("bad splats line");
        }
        lv.rows.reserve(count * width);
        for (std::size_t i = 0; i < count; ++i) {
            auto ls = next("splat row");
            std::string tok;
            for (std::size_t k = 0; k < width; ++k) {
                if (!(ls >> tok)) throw fail("short splat row");
                lv.rows.push_back(parse_f32(tok));
            }
        }
        std::size_t n_up = 0;
        {
            auto ls = next("updates");
            std::string tag;
            ls >> tag >> n_up;
            if (tag != "updates" || ls.fail()) throw fail("bad updates line");
        }
        for (std::size_t i = 0; i < n_up; ++i) {
            auto ls = next("update");
            std::uint32_t idx;
            std::string tok;
            ls >> idx >> tok;
            if (ls.fail()) throw fail("bad update line");
            lv.updates.push_back({idx, parse_f32(tok)});
        }
        cum += count;
        {
            auto ls = next("occupancy");
            std::string tag, bits;
            ls >> tag >> bits;
            if (tag != "occupancy") throw fail("bad occupancy line");
            if (cum > 0 && bits.size() != cum) throw fail("occupancy bit count mismatch");
            lv.occupancy.resize(cum);
            for (std::size_t j = 0; j < cum; ++j) {
                if (bits[j] != '0' && bits[j] != '1') throw fail("bad occupancy bit");
                lv.occupancy[j] = bits[j] == '1';
            }
        }
        c.levels.push_back(std::move(lv));
    }
    detail::validate_container(c);
    return c;
}

}  // namespace lapis
