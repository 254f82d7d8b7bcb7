#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "marepo/geometry.hpp"
#include "marepo/model.hpp"
#include "marepo/simulator.hpp"
#include "marepo/training.hpp"

namespace marepo::eval {

// Accuracy thresholds, meters at a fixed 5 degree rotation gate.
inline constexpr std::array<double, 3> kTransThresholds = {0.05, 0.10, 0.50};
inline constexpr double kRotThresholdDeg = 5.0;

struct EvalReport {
    std::vector<geometry::PoseError> per_frame;
    double median_trans = 0.0;  // meters
    double median_rot = 0.0;    // degrees
    std::array<double, 3> accuracy = {0.0, 0.0, 0.0};  // fractions at kTransThresholds

    // Fraction of frames below an arbitrary pair of thresholds.
    double accuracy_at(double trans_m, double rot_deg) const;
};

// Median: middle order statistic for odd lengths, mean of the two middle
// values for even lengths.
double median(std::vector<double> values);

EvalReport make_report(const std::vector<geometry::PoseError>& errors);

// Runs the regressor on every frame of a split and scores against the stored
// ground truth. Optional CSV outputs: per-frame "frame,trans_m,rot_deg" and a
// one-row summary.
EvalReport evaluate(const model::ModelParams<float>& params, const model::RegressorConfig& cfg,
                    const std::string& dataset_dir, const std::string& split = "query",
                    const std::string& per_frame_csv = "", const std::string& summary_csv = "");

// Same report shape from a classical solver: ransac_pnp per frame.
EvalReport evaluate_oracle(const std::string& dataset_dir, const std::string& split = "query",
                           double reproj_threshold = 2.0, std::uint64_t seed = 0,
                           const std::string& per_frame_csv = "",
                           const std::string& summary_csv = "");

// Baseline that predicts the identity pose for every frame.
EvalReport evaluate_identity(const std::string& dataset_dir, const std::string& split = "query");

struct NoiseExperiment {
    std::vector<double> magnitudes;          // meters
    std::vector<double> fractions;           // of valid cells
    std::vector<std::vector<double>> accuracy;  // [magnitude][fraction]
    std::vector<std::vector<double>> median_trans;
    double acc_trans_threshold = 0.10;       // meters
    double acc_rot_threshold = 5.0;          // degrees
};

// For each (magnitude, fraction) corrupts every query map with inject_noise
// and evaluates; fraction 0 reproduces the clean run exactly. One CSV row
// per magnitude.
NoiseExperiment noise_experiment(const model::ModelParams<float>& params,
                                 const model::RegressorConfig& cfg,
                                 const std::string& dataset_dir,
                                 const std::vector<double>& magnitudes,
                                 const std::vector<double>& fractions, std::uint64_t seed,
                                 double acc_trans_threshold, double acc_rot_threshold,
                                 const std::string& csv_path = "");

void write_summary_csv(const std::string& path, const EvalReport& report);
void write_per_frame_csv(const std::string& path, const std::vector<std::string>& names,
                         const EvalReport& report);

}  // namespace marepo::eval
