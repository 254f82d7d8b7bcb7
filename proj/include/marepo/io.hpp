#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "marepo/geometry.hpp"
#include "marepo/model.hpp"
#include "marepo/oracle.hpp"
#include "marepo/scm.hpp"
#include "marepo/training.hpp"

namespace marepo::io {

// Shortest decimal representation that round-trips the exact value.
std::string format_double(double v);
std::string format_float(float v);

// --- SceneCoordinateMap container -----------------------------------------
// Binary, little-endian: magic "SCM1", u32 h, u32 w, h*w*3 f32 coords
// (row-major, xyz interleaved), h*w u8 mask.
void write_scm(const std::string& path, const SceneCoordinateMap& scm);
SceneCoordinateMap read_scm(const std::string& path);

// --- Pose text format ------------------------------------------------------
// 16 whitespace-separated decimals, row-major 4x4 homogeneous matrix,
// camera-to-scene. Rotation invariants checked to 1e-6 on read.
void write_pose(const std::string& path, const geometry::Pose& pose);
geometry::Pose read_pose(const std::string& path);
std::string pose_to_string(const geometry::Pose& pose);
geometry::Pose pose_from_string(const std::string& text);

// --- Intrinsics text format ------------------------------------------------
// One line: "fx fy cx cy" in grid units.
void write_intrinsics(const std::string& path, const geometry::Intrinsics& k);
geometry::Intrinsics read_intrinsics(const std::string& path);

// --- Correspondence text format ---------------------------------------------
// One "u v x y z" line per record.
void write_correspondences(const std::string& path,
                           const std::vector<oracle::Correspondence>& corrs);
std::vector<oracle::Correspondence> read_correspondences(const std::string& path);

// --- Checkpoint --------------------------------------------------------------
// Magic "MRPO", u32 version, serialized RegressorConfig, u32 tensor count,
// then per tensor: u32 name length, name, u32 rank, u32 dims, f32 data.
void save_checkpoint(const std::string& path, const model::RegressorConfig& cfg,
                     const model::ModelParams<float>& params);
std::pair<model::RegressorConfig, model::ModelParams<float>> load_checkpoint(
    const std::string& path);

// --- Datasets ----------------------------------------------------------------
// A frame is a basename triple <base>.scm / <base>.pose.txt / <base>.intr.txt.
std::vector<std::string> list_frames(const std::string& split_dir);
training::TrainSample load_sample(const std::string& base_path);

struct NamedSample {
    std::string name;  // basename without extension
    training::TrainSample sample;
};
std::vector<NamedSample> load_split(const std::string& dataset_dir, const std::string& split);

// Deterministic validation hold-out: FNV-1a hash of the basename mod 10 == 0.
bool is_validation_frame(const std::string& basename);

// --- key=value config files ---------------------------------------------------
// UTF-8 key=value lines; '#' starts a comment. Unknown keys are rejected by
// the typed loaders below.
std::map<std::string, std::string> parse_kv_file(const std::string& path);

struct TrainConfig {
    model::RegressorConfig regressor;
    training::OptimConfig optim;
    training::AugmentConfig augment;
};
TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv);

}  // namespace marepo::io
