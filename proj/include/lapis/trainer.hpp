#pragma once

// Progressive layered optimization. The base layer is fit against the
// coarsest pyramid level; each enhancement stage then trains a fresh set of
// splats against the next resolution while earlier layers stay frozen except
// for their opacity. Differences of prior opacities are emitted as update
// records, never as mutations of the stored layers.
//
// Internal parameterization: opacity and color through a sigmoid, scale
// through exp of a log-scale, positions in full-resolution pixels. Adam with
// per-group learning rates; the position rate decays exponentially to 1% of
// its start over a stage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapis/codec.hpp"
#include "lapis/core.hpp"
#include "lapis/metrics.hpp"
#include "lapis/raster.hpp"

namespace lapis {

struct TrainConfig {
    double lambda = 0.2;
    int iters_per_level = 400;
    double lr_position = 1.6e-4;  // scaled by the full-resolution image extent
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_color = 2.5e-3;
    double lr_opacity = 5e-2;
    int densify_interval = 100;
    double densify_grad_threshold = 2e-3;  // mean render-space |dL/dposition|
    double prune_opacity_threshold = 0.005;
    int init_splat_count = 64;
    std::uint64_t rng_seed = 1;
    std::array<float, 3> background{0.f, 0.f, 0.f};

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0))
            throw std::invalid_argument("train config: lambda out of [0,1]");
        if (iters_per_level < 0) throw std::invalid_argument("train config: negative iters");
        if (!(lr_position > 0 && lr_scale > 0 && lr_rotation > 0 && lr_color > 0 &&
              lr_opacity > 0))
            throw std::invalid_argument("train config: learning rates must be > 0");
        if (densify_interval <= 0)
            throw std::invalid_argument("train config: densify interval must be > 0");
        if (!(densify_grad_threshold > 0) || !(prune_opacity_threshold > 0))
            throw std::invalid_argument("train config: thresholds must be > 0");
        if (init_splat_count <= 0)
            throw std::invalid_argument("train config: init splat count must be > 0");
    }
};

namespace detail {

inline double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit_clamped(double p) {
    p = std::clamp(p, 1e-9, 1.0 - 1e-9);
    double l = std::log(p / (1.0 - p));
    return std::clamp(l, -20.0, 20.0);
}

// Platform-stable uniform double in [0,1).
inline double rand01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Parameters (plus Adam moments) of one scalar group, `stride` values per splat.
struct ParamGroup {
    std::vector<double> value, m, v;

    void resize_splats(std::size_t n, std::size_t stride) {
        value.resize(n * stride, 0.0);
        m.resize(n * stride, 0.0);
        v.resize(n * stride, 0.0);
    }
    void push(double val) {
        value.push_back(val);
        m.push_back(0.0);
        v.push_back(0.0);
    }
    void push_from(const ParamGroup& src, std::size_t i, std::size_t stride, bool keep_moments) {
        for (std::size_t k = 0; k < stride; ++k) {
            value.push_back(src.value[i * stride + k]);
            m.push_back(keep_moments ? src.m[i * stride + k] : 0.0);
            v.push_back(keep_moments ? src.v[i * stride + k] : 0.0);
        }
    }
};

// Live optimization state of the layer currently being trained.
struct LayerState {
    ParamGroup position;      // stride 2, full-resolution pixels
    ParamGroup log_scale;     // stride 2
    ParamGroup rotation;      // stride 1
    ParamGroup color_logit;   // stride 3
    ParamGroup opacity_logit; // stride 1
    std::vector<float> depth; // creation-order sort keys
    float next_depth = 0.f;

    std::size_t count() const { return rotation.value.size(); }

    Splat2D materialize(std::size_t i) const {
        Splat2D s;
        s.position = {static_cast<float>(position.value[2 * i]),
                      static_cast<float>(position.value[2 * i + 1])};
        s.scale = {static_cast<float>(std::exp(log_scale.value[2 * i])),
                   static_cast<float>(std::exp(log_scale.value[2 * i + 1]))};
        s.rotation = static_cast<float>(rotation.value[i]);
        s.color = {static_cast<float>(detail::sigmoid_d(color_logit.value[3 * i])),
                   static_cast<float>(detail::sigmoid_d(color_logit.value[3 * i + 1])),
                   static_cast<float>(detail::sigmoid_d(color_logit.value[3 * i + 2]))};
        s.opacity = static_cast<float>(detail::sigmoid_d(opacity_logit.value[i]));
        s.depth = depth[i];
        return s;
    }

    void push_splat(double px, double py, double log_s, double rot,
                    const std::array<double, 3>& color_logits, double op_logit) {
        position.push(px);
        position.push(py);
        log_scale.push(log_s);
        log_scale.push(log_s);
        rotation.push(rot);
        for (double c : color_logits) color_logit.push(c);
        opacity_logit.push(op_logit);
        depth.push_back(next_depth);
        next_depth += 1.f;
    }
};

// Adaptive refinement of the in-training layer: clones small high-gradient
// splats, splits large ones into two children along the major axis, prunes
// by opacity. `mean_pos_grads` is the mean render-space |dL/dposition| per
// splat; `resolution` converts the 4 px small/large cut into full-res units.
inline LayerState densify_and_prune(const LayerState& in, std::span<const double> mean_pos_grads,
                                    const TrainConfig& cfg, double resolution) {
    if (mean_pos_grads.size() != in.count())
        throw std::invalid_argument("densify_and_prune: gradient count mismatch");
    LayerState out;
    out.next_depth = in.next_depth;
    const double split_cut_full = 4.0 / resolution;  // 4 px at the training scale

    for (std::size_t i = 0; i < in.count(); ++i) {
        double opacity = detail::sigmoid_d(in.opacity_logit.value[i]);
        if (opacity < cfg.prune_opacity_threshold) continue;  // moments dropped

        bool refine = mean_pos_grads[i] > cfg.densify_grad_threshold;
        double sx = std::exp(in.log_scale.value[2 * i]);
        double sy = std::exp(in.log_scale.value[2 * i + 1]);
        if (!refine || std::max(sx, sy) < split_cut_full) {
            out.position.push_from(in.position, i, 2, true);
            out.log_scale.push_from(in.log_scale, i, 2, true);
            out.rotation.push_from(in.rotation, i, 1, true);
            out.color_logit.push_from(in.color_logit, i, 3, true);
            out.opacity_logit.push_from(in.opacity_logit, i, 1, true);
            out.depth.push_back(in.depth[i]);
            if (refine) {
                // clone: duplicate with fresh moments and a fresh depth key
                out.position.push_from(in.position, i, 2, false);
                out.log_scale.push_from(in.log_scale, i, 2, false);
                out.rotation.push_from(in.rotation, i, 1, false);
                out.color_logit.push_from(in.color_logit, i, 3, false);
                out.opacity_logit.push_from(in.opacity_logit, i, 1, false);
                out.depth.push_back(out.next_depth);
                out.next_depth += 1.f;
            }
        } else {
            // split: two children at +-0.5*scale along the major axis, scale/1.6
            double rot = in.rotation.value[i];
            double ax, ay, s_major;
            if (sx >= sy) {
                ax = std::cos(rot);
                ay = std::sin(rot);
                s_major = sx;
            } else {
                ax = -std::sin(rot);
                ay = std::cos(rot);
                s_major = sy;
            }
            const double shrink = std::log(1.6);
            for (int child = 0; child < 2; ++child) {
                double sign = child == 0 ? 0.5 : -0.5;
                out.position.push(in.position.value[2 * i] + sign * s_major * ax);
                out.position.push(in.position.value[2 * i + 1] + sign * s_major * ay);
                out.log_scale.push(in.log_scale.value[2 * i] - shrink);
                out.log_scale.push(in.log_scale.value[2 * i + 1] - shrink);
                out.rotation.push(rot);
                for (int c = 0; c < 3; ++c)
                    out.color_logit.push(in.color_logit.value[3 * i + c]);
                out.opacity_logit.push(in.opacity_logit.value[i]);
                out.depth.push_back(out.next_depth);
                out.next_depth += 1.f;
            }
        }
    }
    return out;
}

struct LevelReport {
    double final_loss = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    double final_ssim = 0;
    double mean_prior_opacity = std::numeric_limits<double>::quiet_NaN();
    std::size_t splat_count = 0;  // new splats introduced by this level
    std::vector<double> loss_history;
};

struct TrainResult {
    Model2D model;
    std::vector<LevelReport> reports;
    int full_width = 0;
    int full_height = 0;
};

struct Checkpoint {
    std::vector<std::uint8_t> container;  // finalized levels, empty before the first
    std::vector<std::uint8_t> sidecar;    // optimizer + in-flight stage state
};

// Drives train_base / train_enhancement stages over a pyramid. The free
// functions below are thin wrappers; the class exists so a run can be
// checkpointed at any iteration boundary and resumed bit-exactly.
class ProgressiveTrainer {
public:
    ProgressiveTrainer(const ImagePyramid& pyramid, const TrainConfig& cfg)
        : pyramid_(&pyramid), cfg_(cfg), rng_(cfg.rng_seed) {
        cfg_.validate();
        if (pyramid.levels.empty()) throw std::invalid_argument("trainer: empty pyramid");
        full_width_ = pyramid.levels.back().width;
        full_height_ = pyramid.levels.back().height;
        truths_.reserve(pyramid.levels.size());
        for (const auto& lv : pyramid.levels) truths_.push_back(lv.cast<double>());
    }

    bool done() const { return stage_ >= pyramid_->levels.size(); }

    // Runs up to `max_iters` optimization iterations (-1: to completion).
    // Stage boundaries (init/emit) do not count against the budget.
    void run(long max_iters = -1) {
        long used = 0;
        while (!done()) {
            if (!stage_initialized_) init_stage();
            while (iter_ < cfg_.iters_per_level) {
                if (max_iters >= 0 && used >= max_iters) return;
                iterate();
                ++used;
            }
            finish_stage();
        }
    }

    TrainResult result() const {
        if (!done()) throw std::logic_error("trainer: result requested before completion");
        TrainResult out;
        out.model = model_;
        out.model.resolutions = pyramid_->resolutions;
        out.model.occupancy =
            build_occupancy(out.model, static_cast<float>(cfg_.prune_opacity_threshold));
        out.reports = reports_;
        out.full_width = full_width_;
        out.full_height = full_height_;
        return out;
    }

    Checkpoint save() const;
    static ProgressiveTrainer restore(const ImagePyramid& pyramid, const TrainConfig& cfg,
                                      const Checkpoint& ck);

    // Starts from an existing prefix of trained levels; the next stage to run
    // is `stage`. Fresh splats get depth keys above every existing one.
    void adopt_prefix(const Model2D& model, std::size_t stage) {
        if (stage_ != 0 || stage_initialized_)
            throw std::logic_error("trainer: adopt_prefix on a started run");
        if (model.levels.size() != stage)
            throw std::invalid_argument("trainer: prefix level count mismatch");
        if (stage >= pyramid_->levels.size())
            throw std::invalid_argument("trainer: prefix beyond pyramid");
        model_.levels = model.levels;
        float max_depth = -1.f;
        for (const auto& lv : model.levels)
            for (const auto& s : lv.new_splats) max_depth = std::max(max_depth, s.depth);
        next_depth_ = max_depth + 1.f;
        for (std::size_t l = 0; l < stage; ++l) reports_.push_back(LevelReport{});
        stage_ = stage;
    }

    // Parameters of the stage in flight, exposed for refinement tests.
    const LayerState& current_layer() const { return layer_; }
    std::size_t current_stage() const { return stage_; }

private:
    void init_stage() {
        const Image& truth = pyramid_->levels[stage_];
        double r = pyramid_->resolutions[stage_];
        layer_ = LayerState{};
        layer_.next_depth = next_depth_;
        prior_ = stage_ == 0 ? std::vector<Splat2D>{}
                             : compose_level_unfiltered(partial_model(), stage_ - 1);
        prior_opacity_ = ParamGroup{};
        prior_start_opacity_.clear();
        for (const Splat2D& s : prior_) {
            prior_opacity_.push(detail::logit_clamped(s.opacity));
            prior_start_opacity_.push_back(s.opacity);
        }

        if (stage_ == 0) {
            // Uniform positions, colors sampled from the target, opacity 0.5,
            // 2 px isotropic stddev at this stage's scale.
            double log_s = std::log(2.0 / r);
            for (int i = 0; i < cfg_.init_splat_count; ++i) {
                double px = detail::rand01(rng_) * full_width_;
                double py = detail::rand01(rng_) * full_height_;
                layer_.push_splat(px, py, log_s, 0.0, sample_color_logits(truth, px * r, py * r),
                                  0.0);
            }
        } else {
            // Seed half the base budget at the pixels the previous level
            // explains worst at this resolution.
            std::vector<Splat2D> scaled = scale_splats(prior_materialized(), r);
            ImageD img = render_d(scaled, truth.width, truth.height, render_opts());
            std::vector<double> residual(static_cast<std::size_t>(truth.width) * truth.height);
            for (int y = 0; y < truth.height; ++y)
                for (int x = 0; x < truth.width; ++x) {
                    double s = 0;
                    for (int c = 0; c < 3; ++c)
                        s += std::abs(img.at(x, y, c) - static_cast<double>(truth.at(x, y, c)));
                    residual[static_cast<std::size_t>(y) * truth.width + x] = s;
                }
            std::size_t seeds = static_cast<std::size_t>((cfg_.init_splat_count + 1) / 2);
            seeds = std::min(seeds, residual.size());
            std::vector<std::size_t> order(residual.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::partial_sort(order.begin(), order.begin() + seeds, order.end(),
                              [&](std::size_t a, std::size_t b) {
                                  if (residual[a] != residual[b]) return residual[a] > residual[b];
                                  return a < b;
                              });
            double log_s = std::log(2.0 / r);
            for (std::size_t k = 0; k < seeds; ++k) {
                int px = static_cast<int>(order[k] % truth.width);
                int py = static_cast<int>(order[k] / truth.width);
                double fx = (px + 0.5) / r, fy = (py + 0.5) / r;
                layer_.push_splat(fx, fy, log_s, 0.0,
                                  sample_color_logits(truth, px + 0.5, py + 0.5), 0.0);
            }
        }
        grad_accum_.assign(layer_.count(), 0.0);
        adam_t_ = 0;
        iter_ = 0;
        report_ = LevelReport{};
        stage_initialized_ = true;
    }

    void iterate() {
        const Image& truth = pyramid_->levels[stage_];
        const ImageD& truth_d = truths_[stage_];
        double r = pyramid_->resolutions[stage_];

        std::vector<Splat2D> splats = prior_materialized();
        std::size_t n_prior = splats.size();
        for (std::size_t i = 0; i < layer_.count(); ++i) splats.push_back(layer_.materialize(i));
        std::vector<Splat2D> scaled = scale_splats(splats, r);

        ImageD img = render_d(scaled, truth.width, truth.height, render_opts());
        LossAndGrad lg = total_loss_with_grad(img, truth_d, cfg_.lambda);
        if (!std::isfinite(lg.loss)) {
            std::ostringstream os;
            os << "training diverged: non-finite loss at level " << stage_ << ", iteration "
               << iter_;
            throw std::runtime_error(os.str());
        }
        report_.loss_history.push_back(lg.loss);
        report_.best_loss = std::min(report_.best_loss, lg.loss);
        report_.final_loss = lg.loss;

        SplatGrads grads =
            render_backward(scaled, truth.width, truth.height, lg.grad, render_opts());

        ++adam_t_;
        double extent = std::max(full_width_, full_height_);
        double decay = cfg_.iters_per_level > 0
                           ? std::pow(0.01, static_cast<double>(iter_) / cfg_.iters_per_level)
                           : 1.0;
        double lr_pos = cfg_.lr_position * extent * decay;

        // Prior splats: only the opacity logit moves.
        for (std::size_t i = 0; i < n_prior; ++i) {
            double sig = detail::sigmoid_d(prior_opacity_.value[i]);
            double g = grads[i].opacity * sig * (1.0 - sig);
            adam_step(prior_opacity_, i, g, cfg_.lr_opacity);
        }
        // Current layer: every group moves.
        for (std::size_t i = 0; i < layer_.count(); ++i) {
            const SplatGrad& g = grads[n_prior + i];
            grad_accum_[i] += std::hypot(g.position[0], g.position[1]);

            adam_step(layer_.position, 2 * i, g.position[0] * r, lr_pos);
            adam_step(layer_.position, 2 * i + 1, g.position[1] * r, lr_pos);
            for (int k = 0; k < 2; ++k) {
                double s_full = std::exp(layer_.log_scale.value[2 * i + k]);
                adam_step(layer_.log_scale, 2 * i + k, g.scale[k] * r * s_full, cfg_.lr_scale);
            }
            adam_step(layer_.rotation, i, g.rotation, cfg_.lr_rotation);
            for (int k = 0; k < 3; ++k) {
                double c = detail::sigmoid_d(layer_.color_logit.value[3 * i + k]);
                adam_step(layer_.color_logit, 3 * i + k, g.color[k] * c * (1.0 - c),
                          cfg_.lr_color);
            }
            double sig = detail::sigmoid_d(layer_.opacity_logit.value[i]);
            adam_step(layer_.opacity_logit, i, g.opacity * sig * (1.0 - sig), cfg_.lr_opacity);
        }

        ++iter_;
        if (iter_ % cfg_.densify_interval == 0 &&
            iter_ <= static_cast<int>(0.8 * cfg_.iters_per_level) && layer_.count() > 0) {
            std::vector<double> mean(grad_accum_.size());
            for (std::size_t i = 0; i < mean.size(); ++i)
                mean[i] = grad_accum_[i] / cfg_.densify_interval;
            layer_ = lapis::densify_and_prune(layer_, mean, cfg_, r);
            grad_accum_.assign(layer_.count(), 0.0);
        }
    }

    void finish_stage() {
        const Image& truth = pyramid_->levels[stage_];
        double r = pyramid_->resolutions[stage_];

        Layer<Splat2D> emitted;
        emitted.new_splats.reserve(layer_.count());
        for (std::size_t i = 0; i < layer_.count(); ++i)
            emitted.new_splats.push_back(layer_.materialize(i));
        double prior_sum = 0;
        for (std::size_t i = 0; i < prior_.size(); ++i) {
            float now = static_cast<float>(detail::sigmoid_d(prior_opacity_.value[i]));
            prior_sum += now;
            if (std::abs(static_cast<double>(now) - prior_start_opacity_[i]) > 1e-6)
                emitted.opacity_updates.push_back(
                    {static_cast<std::uint32_t>(i), now});
        }
        model_.levels.push_back(std::move(emitted));

        report_.splat_count = layer_.count();
        report_.mean_prior_opacity = prior_.empty()
                                         ? std::numeric_limits<double>::quiet_NaN()
                                         : prior_sum / static_cast<double>(prior_.size());
        {
            std::vector<Splat2D> all = compose_level_unfiltered(partial_model(), stage_);
            ImageD img = render_d(scale_splats(all, r), truth.width, truth.height, render_opts());
            report_.final_ssim = ssim(img, truths_[stage_]);
            if (report_.loss_history.empty())
                report_.final_loss = total_loss(img, truths_[stage_], cfg_.lambda);
        }
        reports_.push_back(std::move(report_));

        next_depth_ = layer_.next_depth;
        ++stage_;
        stage_initialized_ = false;
        iter_ = 0;
    }

    // Model with the levels finalized so far (resolutions trimmed to match).
    Model2D partial_model() const {
        Model2D m;
        m.levels = model_.levels;
        m.resolutions.assign(pyramid_->resolutions.begin(),
                             pyramid_->resolutions.begin() + model_.levels.size());
        return m;
    }

    std::vector<Splat2D> prior_materialized() const {
        std::vector<Splat2D> out = prior_;
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i].opacity = static_cast<float>(detail::sigmoid_d(prior_opacity_.value[i]));
        return out;
    }

    std::array<double, 3> sample_color_logits(const Image& img, double x, double y) const {
        int px = std::clamp(static_cast<int>(x), 0, img.width - 1);
        int py = std::clamp(static_cast<int>(y), 0, img.height - 1);
        return {detail::logit_clamped(img.at(px, py, 0)),
                detail::logit_clamped(img.at(px, py, 1)),
                detail::logit_clamped(img.at(px, py, 2))};
    }

    RenderOptions render_opts() const {
        RenderOptions o;
        o.background = cfg_.background;
        return o;
    }

    void adam_step(ParamGroup& g, std::size_t idx, double grad, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-15;
        g.m[idx] = b1 * g.m[idx] + (1.0 - b1) * grad;
        g.v[idx] = b2 * g.v[idx] + (1.0 - b2) * grad * grad;
        double mhat = g.m[idx] / (1.0 - std::pow(b1, static_cast<double>(adam_t_)));
        double vhat = g.v[idx] / (1.0 - std::pow(b2, static_cast<double>(adam_t_)));
        g.value[idx] -= lr * mhat / (std::sqrt(vhat) + eps);
    }

    const ImagePyramid* pyramid_;
    TrainConfig cfg_;
    std::mt19937_64 rng_;
    std::vector<ImageD> truths_;
    int full_width_ = 0, full_height_ = 0;

    Model2D model_;  // finalized levels only (resolutions/occupancy at result())
    std::vector<LevelReport> reports_;
    std::size_t stage_ = 0;
    int iter_ = 0;
    bool stage_initialized_ = false;
    float next_depth_ = 0.f;

    std::vector<Splat2D> prior_;            // flattened earlier levels, stage-start opacity
    std::vector<float> prior_start_opacity_;
    ParamGroup prior_opacity_;              // live logits for prior splats
    LayerState layer_;                      // splats being trained
    std::vector<double> grad_accum_;
    std::uint64_t adam_t_ = 0;
    LevelReport report_;

    friend struct CheckpointIo;
};

// --- spec-level convenience wrappers ---------------------------------------

struct BaseResult {
    Layer<Splat2D> layer;
    double final_loss = 0;
    LevelReport report;
};

inline BaseResult train_base(const ImagePyramid& pyramid, const TrainConfig& cfg) {
    ImagePyramid first;
    first.levels = {pyramid.levels.front()};
    first.resolutions = {pyramid.resolutions.front()};
    ProgressiveTrainer t(first, cfg);
    t.run();
    TrainResult r = t.result();
    return {r.model.levels[0], r.reports[0].final_loss, r.reports[0]};
}

// Trains level `i` on top of `model` (levels 0..i-1); returns the new layer
// without mutating the input.
inline Layer<Splat2D> train_enhancement(const Model2D& model, std::size_t i,
                                        const ImagePyramid& pyramid, const TrainConfig& cfg,
                                        LevelReport* report_out = nullptr) {
    if (i == 0 || i != model.levels.size())
        throw std::invalid_argument("train_enhancement: level out of order");
    if (i >= pyramid.levels.size())
        throw std::invalid_argument("train_enhancement: pyramid level missing");
    ImagePyramid sub;
    sub.levels.assign(pyramid.levels.begin(), pyramid.levels.begin() + i + 1);
    sub.resolutions.assign(pyramid.resolutions.begin(), pyramid.resolutions.begin() + i + 1);
    ProgressiveTrainer t(sub, cfg);
    // Adopt the already-trained prefix, then run only stage i.
    t.adopt_prefix(model, i);
    t.run();
    TrainResult r = t.result();
    if (report_out) *report_out = r.reports.back();
    return r.model.levels[i];
}

inline TrainResult train_progressive(const ImagePyramid& pyramid, const TrainConfig& cfg) {
    ProgressiveTrainer t(pyramid, cfg);
    t.run();
    return t.result();
}

}  // namespace lapis
