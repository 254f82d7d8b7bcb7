#include "marepo/eval.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "marepo/io.hpp"
#include "marepo/oracle.hpp"
#include "marepo/parallel.hpp"

namespace marepo::eval {

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double EvalReport::accuracy_at(double trans_m, double rot_deg) const {
    if (per_frame.empty()) return 0.0;
    int hits = 0;
    for (const auto& e : per_frame) hits += (e.trans_err < trans_m && e.rot_err < rot_deg);
    return static_cast<double>(hits) / static_cast<double>(per_frame.size());
}

EvalReport make_report(const std::vector<geometry::PoseError>& errors) {
    EvalReport r;
    r.per_frame = errors;
    std::vector<double> terr, rerr;
    for (const auto& e : errors) {
        terr.push_back(e.trans_err);
        rerr.push_back(e.rot_err);
    }
    r.median_trans = median(terr);
    r.median_rot = median(rerr);
    for (std::size_t i = 0; i < kTransThresholds.size(); ++i)
        r.accuracy[i] = r.accuracy_at(kTransThresholds[i], kRotThresholdDeg);
    return r;
}

void write_summary_csv(const std::string& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "median_trans_m,median_rot_deg,acc_5cm_5deg,acc_10cm_5deg,acc_50cm_5deg\n";
    out << io::format_double(report.median_trans) << "," << io::format_double(report.median_rot)
        << "," << io::format_double(report.accuracy[0]) << ","
        << io::format_double(report.accuracy[1]) << "," << io::format_double(report.accuracy[2])
        << "\n";
}

void write_per_frame_csv(const std::string& path, const std::vector<std::string>& names,
                         const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "frame,trans_m,rot_deg\n";
    for (std::size_t i = 0; i < report.per_frame.size(); ++i) {
        out << names[i] << "," << io::format_double(report.per_frame[i].trans_err) << ","
            << io::format_double(report.per_frame[i].rot_err) << "\n";
    }
}

namespace {

EvalReport report_from(const std::vector<io::NamedSample>& frames,
                       const std::vector<geometry::Pose>& predictions,
                       const std::string& per_frame_csv, const std::string& summary_csv) {
    std::vector<geometry::PoseError> errors(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i)
        errors[i] = geometry::pose_error(predictions[i], frames[i].sample.gt);
    const EvalReport report = make_report(errors);
    if (!per_frame_csv.empty()) {
        std::vector<std::string> names;
        for (const auto& f : frames) names.push_back(f.name);
        write_per_frame_csv(per_frame_csv, names, report);
    }
    if (!summary_csv.empty()) write_summary_csv(summary_csv, report);
    return report;
}

}  // namespace

EvalReport evaluate(const model::ModelParams<float>& params, const model::RegressorConfig& cfg,
                    const std::string& dataset_dir, const std::string& split,
                    const std::string& per_frame_csv, const std::string& summary_csv) {
    const std::vector<io::NamedSample> frames = io::load_split(dataset_dir, split);
    std::vector<geometry::Pose> preds(frames.size());
    parallel_for(static_cast<int>(frames.size()), [&](int i) {
        const auto& s = frames[static_cast<std::size_t>(i)].sample;
        preds[static_cast<std::size_t>(i)] =
            model::forward<float>(s.scm, s.k, params, cfg, false).pose;
    });
    return report_from(frames, preds, per_frame_csv, summary_csv);
}

EvalReport evaluate_oracle(const std::string& dataset_dir, const std::string& split,
                           double reproj_threshold, std::uint64_t seed,
                           const std::string& per_frame_csv, const std::string& summary_csv) {
    const std::vector<io::NamedSample> frames = io::load_split(dataset_dir, split);
    std::vector<geometry::Pose> preds(frames.size());
    parallel_for(static_cast<int>(frames.size()), [&](int i) {
        const auto& s = frames[static_cast<std::size_t>(i)].sample;
        oracle::RansacConfig rc;
        rc.reproj_threshold = reproj_threshold;
        rc.seed = seed + static_cast<std::uint64_t>(i);
        const auto corrs = oracle::correspondences_from_scm(s.scm);
        preds[static_cast<std::size_t>(i)] = oracle::ransac_pnp(corrs, s.k, rc).pose;
    });
    return report_from(frames, preds, per_frame_csv, summary_csv);
}

EvalReport evaluate_identity(const std::string& dataset_dir, const std::string& split) {
    const std::vector<io::NamedSample> frames = io::load_split(dataset_dir, split);
    std::vector<geometry::Pose> preds(frames.size(), geometry::Pose::identity());
    return report_from(frames, preds, "", "");
}

NoiseExperiment noise_experiment(const model::ModelParams<float>& params,
                                 const model::RegressorConfig& cfg,
                                 const std::string& dataset_dir,
                                 const std::vector<double>& magnitudes,
                                 const std::vector<double>& fractions, std::uint64_t seed,
                                 double acc_trans_threshold, double acc_rot_threshold,
                                 const std::string& csv_path) {
    const std::vector<io::NamedSample> frames = io::load_split(dataset_dir, "query");
    NoiseExperiment exp;
    exp.magnitudes = magnitudes;
    exp.fractions = fractions;
    exp.acc_trans_threshold = acc_trans_threshold;
    exp.acc_rot_threshold = acc_rot_threshold;

    for (std::size_t mi = 0; mi < magnitudes.size(); ++mi) {
        std::vector<double> acc_row, med_row;
        for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
            sim::NoiseSpec spec;
            spec.magnitude = magnitudes[mi];
            spec.fraction = fractions[fi];
            std::vector<geometry::PoseError> errors(frames.size());
            parallel_for(static_cast<int>(frames.size()), [&](int i) {
                const auto& s = frames[static_cast<std::size_t>(i)].sample;
                Rng rng = Rng::derive(seed ^ (0xbeefull + mi * 131 + fi * 977),
                                      static_cast<std::uint64_t>(i));
                const SceneCoordinateMap noisy = sim::inject_noise(s.scm, spec, rng);
                const geometry::Pose pred =
                    model::forward<float>(noisy, s.k, params, cfg, false).pose;
                errors[static_cast<std::size_t>(i)] = geometry::pose_error(pred, s.gt);
            });
            const EvalReport rep = make_report(errors);
            acc_row.push_back(rep.accuracy_at(acc_trans_threshold, acc_rot_threshold));
            med_row.push_back(rep.median_trans);
        }
        exp.accuracy.push_back(acc_row);
        exp.median_trans.push_back(med_row);
    }

    if (!csv_path.empty()) {
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + csv_path);
        out << "magnitude_m";
        for (const double f : fractions) out << ",frac_" << io::format_double(f);
        out << "\n";
        for (std::size_t mi = 0; mi < magnitudes.size(); ++mi) {
            out << io::format_double(magnitudes[mi]);
            for (const double a : exp.accuracy[mi]) out << "," << io::format_double(a);
            out << "\n";
        }
    }
    return exp;
}

}  // namespace marepo::eval
