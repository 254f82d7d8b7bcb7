#include "marepo/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "marepo/eval.hpp"
#include "marepo/io.hpp"

namespace marepo::training {

namespace {

// Per-(epoch, sample) augmentation stream, independent of batching and
// worker count.
Rng augment_rng(std::uint64_t seed, int epoch, int sample_index) {
    const std::uint64_t stream =
        (static_cast<std::uint64_t>(epoch) << 32) | static_cast<std::uint64_t>(sample_index);
    return Rng::derive(seed ^ 0xa076bc1ull, stream);
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_index(i);
        std::swap(idx[i - 1], idx[j]);
    }
}

struct ValScore {
    double loss = 0.0;
    double median_trans = 0.0;
    double median_rot = 0.0;
};

ValScore score_validation(const std::vector<TrainSample>& samples,
                          const model::ModelParams<float>& params,
                          const model::RegressorConfig& cfg) {
    ValScore out;
    if (samples.empty()) return out;
    const int n = static_cast<int>(samples.size());
    std::vector<double> losses(static_cast<std::size_t>(n));
    std::vector<double> terr(static_cast<std::size_t>(n)), rerr(static_cast<std::size_t>(n));
    parallel_for(n, [&](int i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        const model::ForwardResult r = model::forward<float>(s.scm, s.k, params, cfg, true);
        double loss = pose_loss(r.pose, s.gt);
        for (const auto& aux : r.aux_poses) loss += pose_loss(aux, s.gt);
        losses[static_cast<std::size_t>(i)] = loss;
        const geometry::PoseError e = geometry::pose_error(r.pose, s.gt);
        terr[static_cast<std::size_t>(i)] = e.trans_err;
        rerr[static_cast<std::size_t>(i)] = e.rot_err;
    });
    out.loss = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
    out.median_trans = eval::median(terr);
    out.median_rot = eval::median(rerr);
    return out;
}

std::string metrics_to_csv(const std::vector<EpochStats>& stats) {
    std::ostringstream csv;
    csv << "epoch,split,loss,median_trans_m,median_rot_deg\n";
    for (const auto& s : stats) {
        csv << s.epoch << ",train," << io::format_double(s.train_loss) << ","
            << io::format_double(s.train_median_trans) << ","
            << io::format_double(s.train_median_rot) << "\n";
        csv << s.epoch << ",val," << io::format_double(s.val_loss) << ","
            << io::format_double(s.val_median_trans) << ","
            << io::format_double(s.val_median_rot) << "\n";
    }
    return csv.str();
}

}  // namespace

TrainResult train_in_memory(const std::vector<TrainSample>& train_samples,
                            const std::vector<TrainSample>& val_samples,
                            const model::RegressorConfig& rcfg, const OptimConfig& ocfg,
                            const AugmentConfig& acfg, model::ModelParams<float> initial_params,
                            bool one_cycle_schedule, double fixed_lr) {
    rcfg.check();
    if (train_samples.empty()) throw EmptySequence("train: no training samples");
    const int n = static_cast<int>(train_samples.size());
    const int batch = std::max(1, std::min(ocfg.batch_size, n));
    const std::int64_t steps_per_epoch = (n + batch - 1) / batch;
    const std::int64_t total_steps = steps_per_epoch * ocfg.epochs;

    TrainResult result;
    result.params = std::move(initial_params);
    model::ModelParams<float> last_good = result.params;
    OptimState<float> state = make_optim_state<float>(rcfg);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::int64_t global_step = 0;

    for (int epoch = 0; epoch < ocfg.epochs; ++epoch) {
        Rng shuffle_rng = Rng::derive(ocfg.seed ^ 0x5bdd1eull, static_cast<std::uint64_t>(epoch));
        shuffle_indices(order, shuffle_rng);

        double epoch_loss = 0.0;
        std::vector<double> train_terr, train_rerr;
        train_terr.reserve(static_cast<std::size_t>(n));
        train_rerr.reserve(static_cast<std::size_t>(n));
        bool aborted = false;

        for (int start = 0; start < n; start += batch) {
            const int b = std::min(batch, n - start);
            std::vector<TrainSample> samples(static_cast<std::size_t>(b));
            parallel_for(b, [&](int i) {
                const int src = order[static_cast<std::size_t>(start + i)];
                Rng rng = augment_rng(ocfg.seed, epoch, src);
                samples[static_cast<std::size_t>(i)] =
                    augment(train_samples[static_cast<std::size_t>(src)], acfg, rng);
            });

            model::ModelParams<float> grads;
            std::vector<geometry::Pose> poses;
            double loss;
            try {
                loss = gradients<float>(result.params, samples, rcfg, grads, &poses);
            } catch (const NonFiniteLoss&) {
                result.params = last_good;
                result.aborted_non_finite = true;
                aborted = true;
                break;
            }
            epoch_loss += loss * b;
            for (int i = 0; i < b; ++i) {
                const geometry::PoseError e =
                    geometry::pose_error(poses[static_cast<std::size_t>(i)],
                                         samples[static_cast<std::size_t>(i)].gt);
                train_terr.push_back(e.trans_err);
                train_rerr.push_back(e.rot_err);
            }

            const double lr =
                one_cycle_schedule ? one_cycle_lr(global_step, total_steps, ocfg) : fixed_lr;
            adamw_step<float>(result.params, grads, state, ocfg, lr);
            ++global_step;
        }
        if (aborted) break;

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss / n;
        stats.train_median_trans = eval::median(train_terr);
        stats.train_median_rot = eval::median(train_rerr);
        stats.lr = one_cycle_schedule ? one_cycle_lr(global_step, total_steps, ocfg) : fixed_lr;
        const ValScore val = score_validation(val_samples, result.params, rcfg);
        stats.val_loss = val.loss;
        stats.val_median_trans = val.median_trans;
        stats.val_median_rot = val.median_rot;
        result.epochs.push_back(stats);
        last_good = result.params;
        std::cerr << "epoch " << epoch << "/" << ocfg.epochs << " train_loss "
                  << stats.train_loss << " train_med " << stats.train_median_trans << "m/"
                  << stats.train_median_rot << "deg val_med " << stats.val_median_trans << "m/"
                  << stats.val_median_rot << "deg lr " << stats.lr << "\n";
    }

    result.metrics_csv = metrics_to_csv(result.epochs);
    return result;
}

TrainResult train(const std::string& dataset_dir, const model::RegressorConfig& rcfg,
                  const OptimConfig& ocfg, const AugmentConfig& acfg) {
    const std::vector<io::NamedSample> mapping = io::load_split(dataset_dir, "mapping");
    std::vector<TrainSample> train_samples, val_samples;
    for (const auto& ns : mapping) {
        if (io::is_validation_frame(ns.name))
            val_samples.push_back(ns.sample);
        else
            train_samples.push_back(ns.sample);
    }
    if (train_samples.empty()) train_samples = val_samples;  // tiny datasets
    return train_in_memory(train_samples, val_samples, rcfg, ocfg, acfg,
                           model::init_params<float>(rcfg, ocfg.seed),
                           /*one_cycle_schedule=*/true, 0.0);
}

model::ModelParams<float> finetune(model::ModelParams<float> params,
                                   const std::string& dataset_dir,
                                   const model::RegressorConfig& rcfg, const OptimConfig& ocfg,
                                   const AugmentConfig& acfg, int epochs) {
    if (epochs == 0) return params;
    const std::vector<io::NamedSample> mapping = io::load_split(dataset_dir, "mapping");
    std::vector<TrainSample> samples;
    for (const auto& ns : mapping) samples.push_back(ns.sample);
    OptimConfig cfg = ocfg;
    cfg.epochs = epochs;
    // fixed low rate, one tenth of the schedule peak
    const double lr = ocfg.lr_max / 10.0;
    TrainResult r = train_in_memory(samples, {}, rcfg, cfg, acfg, std::move(params),
                                    /*one_cycle_schedule=*/false, lr);
    return std::move(r.params);
}

}  // namespace marepo::training
