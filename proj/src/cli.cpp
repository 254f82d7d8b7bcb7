#include "marepo/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "marepo/errors.hpp"
#include "marepo/eval.hpp"
#include "marepo/io.hpp"
#include "marepo/model.hpp"
#include "marepo/oracle.hpp"
#include "marepo/simulator.hpp"
#include "marepo/training.hpp"

namespace marepo::cli {

namespace {

io::TrainConfig load_train_config(const std::string& path) {
    if (path.empty()) return {};
    return io::train_config_from_kv(io::parse_kv_file(path));
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << text;
}

int cmd_simulate(const std::string& spec_path, const std::string& out_dir) {
    const sim::SceneSpec spec = sim::spec_from_kv(io::parse_kv_file(spec_path));
    sim::make_dataset(spec, out_dir);
    std::cout << "wrote dataset to " << out_dir << " (" << spec.n_map << " mapping, "
              << spec.n_query << " query frames)\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_ckpt, const std::string& metrics_csv) {
    const io::TrainConfig cfg = load_train_config(config_path);
    const training::TrainResult result =
        training::train(data_dir, cfg.regressor, cfg.optim, cfg.augment);
    io::save_checkpoint(out_ckpt, cfg.regressor, result.params);
    if (!metrics_csv.empty()) write_text(metrics_csv, result.metrics_csv);
    if (result.aborted_non_finite) {
        std::cerr << "training aborted on non-finite loss; last good checkpoint written\n";
        throw NonFiniteLoss("training aborted on non-finite loss");
    }
    if (!result.epochs.empty()) {
        const auto& last = result.epochs.back();
        std::cout << "final epoch " << last.epoch << ": train loss "
                  << io::format_double(last.train_loss) << ", val median "
                  << io::format_double(last.val_median_trans) << " m / "
                  << io::format_double(last.val_median_rot) << " deg\n";
    }
    return 0;
}

int cmd_finetune(const std::string& ckpt, const std::string& data_dir, int epochs,
                 const std::string& config_path, const std::string& out_ckpt) {
    auto [cfg, params] = io::load_checkpoint(ckpt);
    io::TrainConfig tc = load_train_config(config_path);
    const auto tuned =
        training::finetune(std::move(params), data_dir, cfg, tc.optim, tc.augment, epochs);
    io::save_checkpoint(out_ckpt, cfg, tuned);
    std::cout << "fine-tuned " << epochs << " epoch(s) -> " << out_ckpt << "\n";
    return 0;
}

int cmd_localize(const std::string& ckpt, const std::string& scm_path,
                 const std::string& intr_path, bool use_oracle, std::uint64_t seed) {
    const SceneCoordinateMap scm = io::read_scm(scm_path);
    const geometry::Intrinsics k = io::read_intrinsics(intr_path);
    geometry::Pose pose;
    if (use_oracle) {
        oracle::RansacConfig rc;
        rc.seed = seed;
        pose = oracle::ransac_pnp(oracle::correspondences_from_scm(scm), k, rc).pose;
    } else {
        if (ckpt.empty()) throw DataError("localize: provide --ckpt or --oracle");
        auto [cfg, params] = io::load_checkpoint(ckpt);
        pose = model::forward<float>(scm, k, params, cfg, false).pose;
    }
    std::cout << io::pose_to_string(pose);
    return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data_dir, const std::string& out_csv,
                 const std::string& per_frame_csv, const std::string& split) {
    auto [cfg, params] = io::load_checkpoint(ckpt);
    const eval::EvalReport report =
        eval::evaluate(params, cfg, data_dir, split, per_frame_csv, out_csv);
    std::cout << "median " << io::format_double(report.median_trans) << " m / "
              << io::format_double(report.median_rot) << " deg; acc(5cm/10cm/50cm @5deg) "
              << io::format_double(report.accuracy[0]) << "/"
              << io::format_double(report.accuracy[1]) << "/"
              << io::format_double(report.accuracy[2]) << "\n";
    return 0;
}

int cmd_oracle(const std::string& data_dir, const std::string& out_csv,
               const std::string& per_frame_csv, const std::string& split, double threshold,
               std::uint64_t seed) {
    const eval::EvalReport report =
        eval::evaluate_oracle(data_dir, split, threshold, seed, per_frame_csv, out_csv);
    std::cout << "median " << io::format_double(report.median_trans) << " m / "
              << io::format_double(report.median_rot) << " deg\n";
    return 0;
}

int cmd_noise_exp(const std::string& ckpt, const std::string& data_dir,
                  const std::string& out_csv, std::vector<double> magnitudes,
                  std::vector<double> fractions, double acc_trans, double acc_rot,
                  std::uint64_t seed) {
    auto [cfg, params] = io::load_checkpoint(ckpt);
    if (magnitudes.empty()) magnitudes = {0.10, 0.50};
    if (fractions.empty()) fractions = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    const eval::NoiseExperiment exp = eval::noise_experiment(
        params, cfg, data_dir, magnitudes, fractions, seed, acc_trans, acc_rot, out_csv);
    for (std::size_t mi = 0; mi < exp.magnitudes.size(); ++mi) {
        std::cout << "magnitude " << io::format_double(exp.magnitudes[mi]) << " m:";
        for (const double a : exp.accuracy[mi]) std::cout << " " << io::format_double(a);
        std::cout << "\n";
    }
    return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& config_path,
               const std::string& out_csv, int n_seeds) {
    const io::TrainConfig base = load_train_config(config_path);
    struct Variant {
        const char* name;
        bool reattention;
        bool dynamic_pe;
    };
    const Variant variants[] = {
        {"full", true, true},
        {"no_reattention", false, true},
        {"no_dynamic_pe", true, false},
        {"no_reattention_no_dynamic_pe", false, false},
    };
    std::string csv = "variant,seed,median_trans_m,median_rot_deg,acc_5cm_5deg,acc_10cm_5deg,"
                      "acc_50cm_5deg\n";
    for (const auto& v : variants) {
        for (int s = 0; s < n_seeds; ++s) {
            model::RegressorConfig cfg = base.regressor;
            cfg.enable_reattention = v.reattention;
            cfg.enable_dynamic_pe = v.dynamic_pe;
            training::OptimConfig ocfg = base.optim;
            ocfg.seed = base.optim.seed + static_cast<std::uint64_t>(s);
            const training::TrainResult r = training::train(data_dir, cfg, ocfg, base.augment);
            const eval::EvalReport rep = eval::evaluate(r.params, cfg, data_dir, "query");
            csv += std::string(v.name) + "," + std::to_string(ocfg.seed) + "," +
                   io::format_double(rep.median_trans) + "," + io::format_double(rep.median_rot) +
                   "," + io::format_double(rep.accuracy[0]) + "," +
                   io::format_double(rep.accuracy[1]) + "," + io::format_double(rep.accuracy[2]) +
                   "\n";
            std::cout << v.name << " seed " << ocfg.seed << ": median "
                      << io::format_double(rep.median_trans) << " m\n";
        }
    }
    write_text(out_csv, csv);
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"map-relative pose regression over scene coordinate maps"};
    app.require_subcommand(1);

    // simulate
    std::string spec_path, out_dir;
    auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset");
    simulate->add_option("--spec", spec_path, "scene spec file (key=value)")->required();
    simulate->add_option("--out", out_dir, "output dataset directory")->required();

    // train
    std::string data_dir, config_path, out_ckpt, metrics_csv;
    auto* train = app.add_subcommand("train", "train the pose regressor");
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--config", config_path, "training config file (key=value)");
    train->add_option("--out", out_ckpt, "output checkpoint")->required();
    train->add_option("--metrics", metrics_csv, "metrics CSV output");

    // finetune
    std::string ft_ckpt, ft_data, ft_out, ft_config;
    int ft_epochs = 2;
    auto* finetune = app.add_subcommand("finetune", "fine-tune a checkpoint on a mapping split");
    finetune->add_option("--ckpt", ft_ckpt, "input checkpoint")->required();
    finetune->add_option("--data", ft_data, "dataset directory")->required();
    finetune->add_option("--epochs", ft_epochs, "number of passes (default 2)");
    finetune->add_option("--config", ft_config, "training config file");
    finetune->add_option("--out", ft_out, "output checkpoint")->required();

    // localize
    std::string lc_ckpt, lc_scm, lc_intr;
    bool lc_oracle = false;
    std::uint64_t lc_seed = 0;
    auto* localize = app.add_subcommand("localize", "estimate the pose of a single frame");
    localize->add_option("--ckpt", lc_ckpt, "checkpoint");
    localize->add_option("--scm", lc_scm, "scene coordinate map file")->required();
    localize->add_option("--intrinsics", lc_intr, "intrinsics file")->required();
    localize->add_flag("--oracle", lc_oracle, "use the PnP/RANSAC solver instead of the model");
    localize->add_option("--seed", lc_seed, "RANSAC seed");

    // evaluate
    std::string ev_ckpt, ev_data, ev_out, ev_per_frame, ev_split = "query";
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset split");
    evaluate->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    evaluate->add_option("--data", ev_data, "dataset directory")->required();
    evaluate->add_option("--out", ev_out, "summary CSV")->required();
    evaluate->add_option("--per-frame", ev_per_frame, "per-frame CSV");
    evaluate->add_option("--split", ev_split, "dataset split (default query)");

    // oracle
    std::string or_data, or_out, or_per_frame, or_split = "query";
    double or_threshold = 2.0;
    std::uint64_t or_seed = 0;
    auto* oracle_cmd = app.add_subcommand("oracle", "run the PnP/RANSAC reference solver");
    oracle_cmd->add_option("--data", or_data, "dataset directory")->required();
    oracle_cmd->add_option("--out", or_out, "summary CSV")->required();
    oracle_cmd->add_option("--per-frame", or_per_frame, "per-frame CSV");
    oracle_cmd->add_option("--split", or_split, "dataset split (default query)");
    oracle_cmd->add_option("--threshold", or_threshold, "reprojection threshold, grid units");
    oracle_cmd->add_option("--seed", or_seed, "RANSAC seed");

    // noise-exp
    std::string nx_ckpt, nx_data, nx_out;
    std::vector<double> nx_magnitudes, nx_fractions;
    double nx_acc_trans = 0.10, nx_acc_rot = 5.0;
    std::uint64_t nx_seed = 0;
    auto* noise = app.add_subcommand("noise-exp", "noise robustness sweep");
    noise->add_option("--ckpt", nx_ckpt, "checkpoint")->required();
    noise->add_option("--data", nx_data, "dataset directory")->required();
    noise->add_option("--out", nx_out, "grid CSV")->required();
    noise->add_option("--magnitudes", nx_magnitudes, "noise magnitudes in meters");
    noise->add_option("--fractions", nx_fractions, "corrupted fractions");
    noise->add_option("--acc-trans", nx_acc_trans, "accuracy translation threshold, meters");
    noise->add_option("--acc-rot", nx_acc_rot, "accuracy rotation threshold, degrees");
    noise->add_option("--seed", nx_seed, "noise seed");

    // ablate
    std::string ab_data, ab_config, ab_out;
    int ab_seeds = 1;
    auto* ablate = app.add_subcommand("ablate", "train and evaluate architecture ablations");
    ablate->add_option("--data", ab_data, "dataset directory")->required();
    ablate->add_option("--config", ab_config, "training config file");
    ablate->add_option("--out", ab_out, "results CSV")->required();
    ablate->add_option("--seeds", ab_seeds, "seeds per variant (default 1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            app.exit(e);
            return 0;
        }
        app.exit(e);
        return 1;
    }

    try {
        if (simulate->parsed()) return cmd_simulate(spec_path, out_dir);
        if (train->parsed()) return cmd_train(data_dir, config_path, out_ckpt, metrics_csv);
        if (finetune->parsed())
            return cmd_finetune(ft_ckpt, ft_data, ft_epochs, ft_config, ft_out);
        if (localize->parsed()) return cmd_localize(lc_ckpt, lc_scm, lc_intr, lc_oracle, lc_seed);
        if (evaluate->parsed())
            return cmd_evaluate(ev_ckpt, ev_data, ev_out, ev_per_frame, ev_split);
        if (oracle_cmd->parsed())
            return cmd_oracle(or_data, or_out, or_per_frame, or_split, or_threshold, or_seed);
        if (noise->parsed())
            return cmd_noise_exp(nx_ckpt, nx_data, nx_out, nx_magnitudes, nx_fractions,
                                 nx_acc_trans, nx_acc_rot, nx_seed);
        if (ablate->parsed()) return cmd_ablate(ab_data, ab_config, ab_out, ab_seeds);
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace marepo::cli
