#pragma once

// Continuous transitions between adjacent levels by opacity blending, plus
// splat-wise view-adaptive modulation driven by a per-splat target
// resolution. Blending never touches geometry; a splat's opacity moves
// linearly between its effective values at the two bracketing levels (0
// before it is introduced).
//
// Inclusion is endpoint-exact: at t=0 exactly the lower level's occupancy
// applies, at t=1 exactly the upper level's, and in between the union. The
// only pops this allows sit at the endpoints and are bounded by the
// occupancy threshold.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "lapis/core.hpp"

namespace lapis {

// Eq-style blend factor for a target resolution inside [r_i, r_next).
inline double interp_factor(double r_t, double r_i, double r_next) {
    if (!(r_i < r_next))
        throw std::invalid_argument("interp_factor: degenerate bracket (r_i >= r_next)");
    if (!(r_t >= r_i && r_t < r_next))
        throw std::invalid_argument("interp_factor: target resolution outside [r_i, r_next)");
    return (r_t - r_i) / (r_next - r_i);
}

namespace detail {

// Effective opacity of every splat at every level (replayed once).
template <class Record>
std::vector<std::vector<float>> effective_opacity_table(const LayeredModel<Record>& model) {
    std::vector<std::vector<float>> table;
    table.reserve(model.levels.size());
    std::vector<float> cur;
    for (const auto& lv : model.levels) {
        for (const auto& s : lv.new_splats) cur.push_back(RecordOpacity<Record>::get(s));
        for (const auto& up : lv.opacity_updates) cur[up.index] = up.opacity;
        table.push_back(cur);
    }
    return table;
}

}  // namespace detail

// Splat set of level i+1 with opacities blended between levels i and i+1.
// New splats of level i+1 blend up from zero.
template <class Record>
std::vector<Record> interpolate_level(const LayeredModel<Record>& model, std::size_t i,
                                      double t) {
    if (model.levels.size() < 2 || i + 1 >= model.levels.size())
        throw std::out_of_range("interpolate_level: level index out of range");
    if (!(t >= 0.0 && t <= 1.0))
        throw std::invalid_argument("interpolate_level: t out of [0,1]");
    if (model.occupancy.size() != model.levels.size())
        throw std::invalid_argument("interpolate_level: model has no occupancy maps");

    const auto eff = detail::effective_opacity_table(model);
    const auto& occ_lo = model.occupancy[i].bits;
    const auto& occ_hi = model.occupancy[i + 1].bits;
    const std::size_t cum_lo = model.cumulative_count(i);

    std::vector<Record> records = compose_level_unfiltered(model, i + 1);
    std::vector<Record> out;
    out.reserve(records.size());
    for (std::size_t j = 0; j < records.size(); ++j) {
        bool include;
        double blended;
        if (j >= cum_lo) {  // introduced by level i+1
            include = occ_hi[j];
            blended = t * eff[i + 1][j];
        } else {
            include = (t < 1.0 && occ_lo[j]) || (t > 0.0 && occ_hi[j]);
            blended = (1.0 - t) * eff[i][j] + t * eff[i + 1][j];
        }
        if (!include) continue;
        Record r = records[j];
        RecordOpacity<Record>::set(r, static_cast<float>(blended));
        out.push_back(r);
    }
    return out;
}

// Splat-wise blend: `target` maps (global index, splat) to the resolution
// fraction the splat should be rendered for. Values must lie within
// [r_0, r_N]; r_N selects the top level exactly.
template <class Record, class TargetFn>
std::vector<Record> view_adaptive(const LayeredModel<Record>& model, TargetFn&& target) {
    if (model.levels.empty()) throw std::invalid_argument("view_adaptive: empty model");
    if (model.occupancy.size() != model.levels.size())
        throw std::invalid_argument("view_adaptive: model has no occupancy maps");
    const auto eff = detail::effective_opacity_table(model);
    const std::size_t top = model.levels.size() - 1;
    const auto& res = model.resolutions;

    std::vector<Record> records = compose_level_unfiltered(model, top);
    std::vector<std::size_t> intro(records.size());
    {
        std::size_t base = 0;
        for (std::size_t l = 0; l < model.levels.size(); ++l) {
            for (std::size_t k = 0; k < model.levels[l].new_splats.size(); ++k)
                intro[base + k] = l;
            base += model.levels[l].new_splats.size();
        }
    }

    std::vector<Record> out;
    out.reserve(records.size());
    for (std::size_t j = 0; j < records.size(); ++j) {
        double r_t = static_cast<double>(target(j, records[j]));
        if (!(r_t >= res.front() && r_t <= res.back()))
            throw std::invalid_argument("view_adaptive: target resolution out of range");

        bool include;
        double blended;
        if (r_t == static_cast<double>(res.back())) {
            include = model.occupancy[top].bits[j];
            blended = eff[top][j];
        } else {
            std::size_t i = 0;
            while (i + 1 < res.size() && !(r_t < static_cast<double>(res[i + 1]))) ++i;
            double t = interp_factor(r_t, res[i], res[i + 1]);
            if (intro[j] > i + 1) continue;  // not introduced in this bracket
            if (intro[j] == i + 1) {
                include = model.occupancy[i + 1].bits[j];
                blended = t * eff[i + 1][j];
            } else {
                include = (t < 1.0 && model.occupancy[i].bits[j]) ||
                          (t > 0.0 && model.occupancy[i + 1].bits[j]);
                blended = (1.0 - t) * eff[i][j] + t * eff[i + 1][j];
            }
        }
        if (!include) continue;
        Record r = records[j];
        RecordOpacity<Record>::set(r, static_cast<float>(blended));
        out.push_back(r);
    }
    return out;
}

}  // namespace lapis
