#pragma once

// Core value types for layered 2D Gaussian splat models: splats, delta
// layers with opacity refinements, occupancy maps, and the cumulative
// composition that turns a layer stack into a flat renderable splat list.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lapis {

// One anisotropic 2D Gaussian. Geometry lives in full-resolution pixel
// coordinates; covariance is R(rotation) * diag(scale^2) * R^T.
struct Splat2D {
    std::array<float, 2> position{0.f, 0.f};
    std::array<float, 2> scale{1.f, 1.f};  // stddevs, must stay > 0
    float rotation = 0.f;                  // radians
    std::array<float, 3> color{0.f, 0.f, 0.f};
    float opacity = 0.f;                   // [0,1]
    float depth = 0.f;                     // sort key, lower composites first

    friend bool operator==(const Splat2D&, const Splat2D&) = default;
};

// Flat attribute row in the official 3D splat checkpoint layout. Carried
// opaquely by the container codec; never rasterized here. Values are stored
// post-activation (opacity in [0,1], scales positive, unit quaternion).
struct Splat3DRecord {
    static constexpr std::size_t kPosition = 0;   // 3
    static constexpr std::size_t kNormal = 3;     // 3
    static constexpr std::size_t kShDc = 6;       // 3
    static constexpr std::size_t kShRest = 9;     // 45
    static constexpr std::size_t kOpacity = 54;   // 1
    static constexpr std::size_t kScale = 55;     // 3
    static constexpr std::size_t kRotation = 58;  // 4
    static constexpr std::size_t kWidth = 62;

    std::array<float, kWidth> values{};

    float opacity() const { return values[kOpacity]; }

    friend bool operator==(const Splat3DRecord&, const Splat3DRecord&) = default;
};

// Post-hoc opacity refinement of a splat introduced in an earlier layer.
struct OpacityUpdate {
    std::uint32_t index = 0;  // global splat index (layer concatenation order)
    float opacity = 0.f;

    friend bool operator==(const OpacityUpdate&, const OpacityUpdate&) = default;
};

// Per-level inclusion bitmap; bit j covers global splat j at that level.
struct OccupancyMap {
    std::vector<bool> bits;

    std::size_t size() const { return bits.size(); }
    std::size_t popcount() const {
        std::size_t n = 0;
        for (bool b : bits) n += b ? 1 : 0;
        return n;
    }

    friend bool operator==(const OccupancyMap&, const OccupancyMap&) = default;
};

template <class Record>
struct Layer {
    std::vector<Record> new_splats;
    std::vector<OpacityUpdate> opacity_updates;  // address strictly earlier layers

    friend bool operator==(const Layer&, const Layer&) = default;
};

// Base layer plus ordered enhancement layers. Global splat indices are the
// concatenation order of levels' new_splats. resolutions[i] is the scale
// fraction the level was trained for, strictly increasing, ending <= 1.
template <class Record>
struct LayeredModel {
    std::vector<Layer<Record>> levels;
    std::vector<float> resolutions;
    std::vector<OccupancyMap> occupancy;  // one snapshot per level

    std::size_t level_count() const { return levels.size(); }

    // Number of splats introduced through `level` inclusive.
    std::size_t cumulative_count(std::size_t level) const {
        if (level >= levels.size())
            throw std::out_of_range("LayeredModel: level " + std::to_string(level) +
                                    " out of range");
        std::size_t n = 0;
        for (std::size_t i = 0; i <= level; ++i) n += levels[i].new_splats.size();
        return n;
    }

    std::size_t total_count() const {
        return levels.empty() ? 0 : cumulative_count(levels.size() - 1);
    }

    // Level that introduced global splat `index`.
    std::size_t intro_level(std::size_t index) const {
        std::size_t base = 0;
        for (std::size_t i = 0; i < levels.size(); ++i) {
            base += levels[i].new_splats.size();
            if (index < base) return i;
        }
        throw std::out_of_range("LayeredModel: splat index " + std::to_string(index) +
                                " out of range");
    }

    const Record& splat(std::size_t index) const {
        std::size_t base = 0;
        for (const auto& lv : levels) {
            if (index < base + lv.new_splats.size()) return lv.new_splats[index - base];
            base += lv.new_splats.size();
        }
        throw std::out_of_range("LayeredModel: splat index out of range");
    }

    friend bool operator==(const LayeredModel&, const LayeredModel&) = default;
};

using Model2D = LayeredModel<Splat2D>;
using Model3D = LayeredModel<Splat3DRecord>;

// Uniform access to the opacity attribute of a record type.
template <class Record>
struct RecordOpacity;

template <>
struct RecordOpacity<Splat2D> {
    static float get(const Splat2D& s) { return s.opacity; }
    static void set(Splat2D& s, float v) { s.opacity = v; }
};

template <>
struct RecordOpacity<Splat3DRecord> {
    static float get(const Splat3DRecord& s) { return s.values[Splat3DRecord::kOpacity]; }
    static void set(Splat3DRecord& s, float v) { s.values[Splat3DRecord::kOpacity] = v; }
};

// Opacity of global splat `index` as seen at `level`: 0 before the splat is
// introduced, otherwise the base value overwritten by the latest update with
// level <= `level`.
template <class Record>
float effective_opacity(const LayeredModel<Record>& model, std::size_t index,
                        std::size_t level) {
    if (level >= model.levels.size())
        throw std::out_of_range("effective_opacity: level out of range");
    if (index >= model.total_count())
        throw std::out_of_range("effective_opacity: splat index out of range");
    if (model.intro_level(index) > level) return 0.f;
    float value = RecordOpacity<Record>::get(model.splat(index));
    for (std::size_t l = 0; l <= level; ++l) {
        for (const auto& up : model.levels[l].opacity_updates) {
            if (up.index == index) value = up.opacity;
        }
    }
    return value;
}

namespace detail {

template <class Record>
std::vector<Record> compose_records(const LayeredModel<Record>& model, std::size_t level) {
    std::vector<Record> out;
    out.reserve(model.cumulative_count(level));
    for (std::size_t l = 0; l <= level; ++l)
        out.insert(out.end(), model.levels[l].new_splats.begin(),
                   model.levels[l].new_splats.end());
    // Replay opacity refinements in layer order; later layers win.
    for (std::size_t l = 0; l <= level; ++l) {
        for (const auto& up : model.levels[l].opacity_updates) {
            if (up.index >= out.size())
                throw std::invalid_argument("compose: opacity update addresses future splat");
            RecordOpacity<Record>::set(out[up.index], up.opacity);
        }
    }
    return out;
}

}  // namespace detail

// Flattened splat list for `level` with effective opacities, occupancy not
// applied. Non-opacity fields are copied bitwise from the introducing layer.
template <class Record>
std::vector<Record> compose_level_unfiltered(const LayeredModel<Record>& model,
                                             std::size_t level) {
    if (level >= model.levels.size())
        throw std::out_of_range("compose_level: level out of range");
    return detail::compose_records(model, level);
}

// Same, but splats whose occupancy bit at `level` is clear are dropped.
template <class Record>
std::vector<Record> compose_level(const LayeredModel<Record>& model, std::size_t level) {
    if (level >= model.levels.size())
        throw std::out_of_range("compose_level: level out of range");
    if (model.occupancy.size() != model.levels.size())
        throw std::invalid_argument("compose_level: model has no occupancy maps");
    const OccupancyMap& occ = model.occupancy[level];
    std::vector<Record> all = detail::compose_records(model, level);
    if (occ.bits.size() != all.size())
        throw std::invalid_argument("compose_level: occupancy size mismatch");
    std::vector<Record> out;
    out.reserve(all.size());
    for (std::size_t j = 0; j < all.size(); ++j)
        if (occ.bits[j]) out.push_back(all[j]);
    return out;
}

// All-inclusive occupancy maps, for models assembled by hand.
template <class Record>
void fill_full_occupancy(LayeredModel<Record>& model) {
    model.occupancy.clear();
    model.occupancy.reserve(model.levels.size());
    std::size_t cum = 0;
    for (const auto& lv : model.levels) {
        cum += lv.new_splats.size();
        model.occupancy.push_back(OccupancyMap{std::vector<bool>(cum, true)});
    }
}

// Structural validation of layer/update/occupancy invariants. Throws
// std::invalid_argument naming the first violation.
template <class Record>
void validate_model(const LayeredModel<Record>& model) {
    if (model.levels.empty()) throw std::invalid_argument("model: no levels");
    if (model.resolutions.size() != model.levels.size())
        throw std::invalid_argument("model: resolutions count mismatch");
    for (std::size_t i = 0; i < model.resolutions.size(); ++i) {
        float r = model.resolutions[i];
        if (!(r > 0.f && r <= 1.f)) throw std::invalid_argument("model: resolution out of (0,1]");
        if (i > 0 && !(model.resolutions[i - 1] < r))
            throw std::invalid_argument("model: resolutions not strictly increasing");
    }
    std::size_t cum = 0;
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
        const auto& lv = model.levels[l];
        std::vector<bool> seen(cum, false);
        for (const auto& up : lv.opacity_updates) {
            if (up.index >= cum)
                throw std::invalid_argument("model: update index not in an earlier layer");
            if (seen[up.index])
                throw std::invalid_argument("model: duplicate update index within layer");
            seen[up.index] = true;
            if (!(up.opacity >= 0.f && up.opacity <= 1.f))
                throw std::invalid_argument("model: update opacity out of [0,1]");
        }
        cum += lv.new_splats.size();
        if (!model.occupancy.empty() && model.occupancy.size() == model.levels.size() &&
            model.occupancy[l].bits.size() != cum)
            throw std::invalid_argument("model: occupancy length mismatch at level " +
                                        std::to_string(l));
    }
}

}  // namespace lapis
