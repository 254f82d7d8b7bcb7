#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "marepo/geometry.hpp"
#include "marepo/model.hpp"
#include "marepo/parallel.hpp"
#include "marepo/rng.hpp"
#include "marepo/scm.hpp"

namespace marepo::training {

using geometry::Intrinsics;
using geometry::Pose;

struct TrainSample {
    SceneCoordinateMap scm;
    Intrinsics k;
    Pose gt;
};

// Online rigid jitter applied image-wise to the scene coordinates and pose.
struct AugmentConfig {
    double jitter_trans = 1.0;   // meters, per component
    double jitter_rot = 180.0;   // degrees, max angle
};

struct OptimConfig {
    double lr_min = 3e-4;
    double lr_max = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    int epochs = 150;
    int batch_size = 16;
    std::uint64_t seed = 0;
};

// L1 pose regression loss: entrywise over the 9 rotation entries plus the
// 3 translation components.
inline double pose_loss(const Pose& estimate, const Pose& truth) {
    return (estimate.R - truth.R).cwiseAbs().sum() + (estimate.t - truth.t).cwiseAbs().sum();
}

// Deep supervision: the same loss on each intermediate head plus the final.
inline double total_loss(const Pose& p0, const Pose& p1, const Pose& p, const Pose& truth) {
    return pose_loss(p0, truth) + pose_loss(p1, truth) + pose_loss(p, truth);
}

// ---------------------------------------------------------------------------
// Augmentation

inline Pose draw_rigid_jitter(const AugmentConfig& cfg, Rng& rng) {
    const double z = rng.uniform(-1.0, 1.0);
    const double az = rng.uniform(0.0, 2.0 * EIGEN_PI);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const geometry::Vec3 axis(r * std::cos(az), r * std::sin(az), z);
    const double angle = rng.uniform(0.0, cfg.jitter_rot) * EIGEN_PI / 180.0;
    Pose t;
    t.R = geometry::axis_angle_to_matrix(axis, angle);
    for (int i = 0; i < 3; ++i) t.t(i) = rng.uniform(-cfg.jitter_trans, cfg.jitter_trans);
    return t;
}

// Every valid coordinate moves by the same rigid transform and the ground
// truth is composed with it, so the 2D-3D-pose consistency is preserved.
inline TrainSample apply_rigid_jitter(const TrainSample& s, const Pose& t) {
    TrainSample out = s;
    for (int i = 0; i < s.scm.size(); ++i) {
        if (!s.scm.mask[static_cast<std::size_t>(i)]) continue;
        const geometry::Vec3 p = s.scm.coords.row(i).transpose();
        out.scm.coords.row(i) = (t.R * p + t.t).transpose();
    }
    out.gt = geometry::pose_compose(t, s.gt);
    return out;
}

inline TrainSample augment(const TrainSample& s, const AugmentConfig& cfg, Rng& rng) {
    return apply_rigid_jitter(s, draw_rigid_jitter(cfg, rng));
}

// ---------------------------------------------------------------------------
// Loss + gradient through the decode stage (templated for the FD checks)

namespace detail {

template <class S>
S sign(S x) {
    return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
}

// L1 loss of one head vector against the ground truth, with its gradient.
template <class S>
S head_loss_grad(const model::VecX<S>& vec, const Pose& gt, model::RotationRepr repr,
                 model::VecX<S>& g_vec) {
    model::DecodeCache<S> cache;
    Eigen::Matrix<S, 3, 3> r;
    Eigen::Matrix<S, 3, 1> t;
    model::decode_pose<S>(vec, repr, r, t, &cache);
    const Eigen::Matrix<S, 3, 3> r_gt = gt.R.cast<S>();
    const Eigen::Matrix<S, 3, 1> t_gt = gt.t.cast<S>();

    S loss = S(0);
    Eigen::Matrix<S, 3, 3> g_r;
    Eigen::Matrix<S, 3, 1> g_t;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const S d = r(i, j) - r_gt(i, j);
            loss += std::abs(d);
            g_r(i, j) = sign(d);
        }
        const S d = t(i) - t_gt(i);
        loss += std::abs(d);
        g_t(i) = sign(d);
    }
    g_vec = model::VecX<S>::Zero(vec.size());
    model::decode_pose_backward<S>(cache, g_r, g_t, g_vec);
    return loss;
}

}  // namespace detail

// Decoded-pose L1 loss of one sample, summed over all heads, with gradients
// accumulated into g_params. Returns the sample loss.
template <class S>
double sample_grads(const TrainSample& sample, const model::RegressorConfig& cfg,
                    const model::ModelParams<S>& params, model::ModelParams<S>& g_params,
                    geometry::Pose* final_pose = nullptr) {
    model::ForwardCache<S> cache;
    const std::vector<model::VecX<S>> outs =
        model::forward_cached<S>(sample.scm, sample.k, cfg, params, /*training=*/true, cache);
    std::vector<model::VecX<S>> g_heads(outs.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < outs.size(); ++i)
        loss += static_cast<double>(
            detail::head_loss_grad<S>(outs[i], sample.gt, cfg.rotation_repr, g_heads[i]));
    if (!std::isfinite(loss)) throw NonFiniteLoss("training: non-finite loss in forward pass");
    model::backward<S>(cfg, params, cache, g_heads, g_params);
    if (final_pose) {
        Eigen::Matrix<S, 3, 3> r;
        Eigen::Matrix<S, 3, 1> t;
        model::decode_pose<S>(outs.back(), cfg.rotation_repr, r, t, nullptr);
        final_pose->R = r.template cast<double>();
        final_pose->t = t.template cast<double>();
    }
    return loss;
}

// Exact reverse-mode gradients of the mean per-sample loss over a batch.
// Per-sample work may run in parallel; the reduction is in index order, so
// results are independent of the worker count.
template <class S>
double gradients(const model::ModelParams<S>& params, const std::vector<TrainSample>& batch,
                 const model::RegressorConfig& cfg, model::ModelParams<S>& g_out,
                 std::vector<geometry::Pose>* final_poses = nullptr) {
    if (batch.empty()) throw EmptySequence("gradients: empty batch");
    const int b = static_cast<int>(batch.size());
    std::vector<model::ModelParams<S>> per_sample(static_cast<std::size_t>(b));
    std::vector<double> losses(static_cast<std::size_t>(b));
    std::vector<geometry::Pose> poses(static_cast<std::size_t>(b));
    std::exception_ptr error;
    parallel_for(b, [&](int i) {
        per_sample[static_cast<std::size_t>(i)] = model::make_zero_params<S>(cfg);
        losses[static_cast<std::size_t>(i)] =
            sample_grads<S>(batch[static_cast<std::size_t>(i)], cfg, params,
                            per_sample[static_cast<std::size_t>(i)],
                            &poses[static_cast<std::size_t>(i)]);
    });

    g_out = model::make_zero_params<S>(cfg);
    const S inv_b = S(1) / static_cast<S>(b);
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        loss += losses[static_cast<std::size_t>(i)];
        auto& gs = per_sample[static_cast<std::size_t>(i)];
        std::vector<S*> src;
        model::for_each_tensor(gs, [&](const std::string&, auto& t) { src.push_back(t.data()); });
        std::size_t k = 0;
        model::for_each_tensor(g_out, [&](const std::string&, auto& t) {
            Eigen::Map<model::VecX<S>> dst(t.data(), t.size());
            dst += Eigen::Map<model::VecX<S>>(src[k], t.size()) * inv_b;
            ++k;
        });
    }
    if (final_poses) *final_poses = poses;
    return loss / b;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class S>
struct OptimState {
    model::ModelParams<S> m, v;
    std::int64_t step = 0;
};

template <class S>
OptimState<S> make_optim_state(const model::RegressorConfig& cfg) {
    return {model::make_zero_params<S>(cfg), model::make_zero_params<S>(cfg), 0};
}

// One-cycle schedule: linear warm-up from lr_min to lr_max over the first
// 30% of steps, then cosine anneal down to lr_min / 10.
inline double one_cycle_lr(std::int64_t step, std::int64_t total_steps, const OptimConfig& cfg) {
    if (total_steps <= 0) return cfg.lr_min;
    const double warm = 0.3 * static_cast<double>(total_steps);
    const double s = static_cast<double>(std::min(step, total_steps));
    if (s < warm) return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (warm > 0.0 ? s / warm : 1.0);
    const double floor_lr = cfg.lr_min / 10.0;
    const double u = (s - warm) / (static_cast<double>(total_steps) - warm);
    return floor_lr + (cfg.lr_max - floor_lr) * 0.5 * (1.0 + std::cos(EIGEN_PI * u));
}

// Bias-corrected adaptive moment update with decoupled weight decay.
template <class S>
void adamw_step(model::ModelParams<S>& params, const model::ModelParams<S>& grads,
                OptimState<S>& state, const OptimConfig& cfg, double lr) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    std::vector<const S*> g_ptrs;
    model::for_each_tensor(grads, [&](const std::string&, auto& t) { g_ptrs.push_back(t.data()); });
    std::vector<S*> m_ptrs, v_ptrs;
    model::for_each_tensor(state.m, [&](const std::string&, auto& t) { m_ptrs.push_back(t.data()); });
    model::for_each_tensor(state.v, [&](const std::string&, auto& t) { v_ptrs.push_back(t.data()); });

    std::size_t k = 0;
    model::for_each_tensor(params, [&](const std::string&, auto& t) {
        const Eigen::Index len = t.size();
        Eigen::Map<model::VecX<S>> p(t.data(), len);
        Eigen::Map<const model::VecX<S>> g(g_ptrs[k], len);
        Eigen::Map<model::VecX<S>> m(m_ptrs[k], len);
        Eigen::Map<model::VecX<S>> v(v_ptrs[k], len);
        m = static_cast<S>(cfg.beta1) * m + static_cast<S>(1.0 - cfg.beta1) * g;
        v = static_cast<S>(cfg.beta2) * v.array().matrix() +
            static_cast<S>(1.0 - cfg.beta2) * g.cwiseProduct(g);
        const auto m_hat = m.array() / static_cast<S>(bc1);
        const auto v_hat = v.array() / static_cast<S>(bc2);
        p.array() -= static_cast<S>(lr) * (m_hat / (v_hat.sqrt() + static_cast<S>(cfg.eps)) +
                                           static_cast<S>(cfg.weight_decay) * p.array());
        ++k;
    });
}

// ---------------------------------------------------------------------------
// Training loops (float parameters; dataset already in memory)

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double train_median_trans = 0.0;
    double train_median_rot = 0.0;
    double val_loss = 0.0;
    double val_median_trans = 0.0;
    double val_median_rot = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    model::ModelParams<float> params;
    std::vector<EpochStats> epochs;
    std::string metrics_csv;
    bool aborted_non_finite = false;
};

// Epochs over shuffled samples with online augmentation; deterministic in
// ocfg.seed. val_samples may be empty.
TrainResult train_in_memory(const std::vector<TrainSample>& train_samples,
                            const std::vector<TrainSample>& val_samples,
                            const model::RegressorConfig& rcfg, const OptimConfig& ocfg,
                            const AugmentConfig& acfg,
                            model::ModelParams<float> initial_params,
                            bool one_cycle_schedule, double fixed_lr);

// Dataset-directory front-ends (mapping split, 10% validation hold-out by
// filename hash). Defined with the IO layer linked in.
TrainResult train(const std::string& dataset_dir, const model::RegressorConfig& rcfg,
                  const OptimConfig& ocfg, const AugmentConfig& acfg);

model::ModelParams<float> finetune(model::ModelParams<float> params,
                                   const std::string& dataset_dir,
                                   const model::RegressorConfig& rcfg, const OptimConfig& ocfg,
                                   const AugmentConfig& acfg, int epochs);

}  // namespace marepo::training
