#include "marepo/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace marepo::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string format_float(float v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path);
}

struct ByteReader {
    const std::string& bytes;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw TruncatedFile("truncated file: " + path);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    }
    void raw(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, bytes.data() + pos, n);
        pos += n;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    void done() const {
        if (pos != bytes.size()) throw TruncatedFile("trailing bytes in " + path);
    }
};

void append_u32(std::string& out, std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}

}  // namespace

// ---------------------------------------------------------------------------
// SCM container

void write_scm(const std::string& path, const SceneCoordinateMap& scm) {
    scm.check_consistent();
    std::string out;
    out.reserve(12 + static_cast<std::size_t>(scm.size()) * 13);
    out.append("SCM1", 4);
    append_u32(out, static_cast<std::uint32_t>(scm.h));
    append_u32(out, static_cast<std::uint32_t>(scm.w));
    for (int i = 0; i < scm.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            const float f = static_cast<float>(scm.coords(i, c));
            out.append(reinterpret_cast<const char*>(&f), 4);
        }
    }
    out.append(reinterpret_cast<const char*>(scm.mask.data()), scm.mask.size());
    write_file_bytes(path, out);
}

SceneCoordinateMap read_scm(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteReader r{bytes, 0, path};
    if (r.str(4) != "SCM1") throw BadMagic("not an SCM file: " + path);
    const std::uint32_t h = r.u32();
    const std::uint32_t w = r.u32();
    if (h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (1u << 26))
        throw TruncatedFile("implausible dimensions in " + path);
    SceneCoordinateMap scm(static_cast<int>(h), static_cast<int>(w));
    for (int i = 0; i < scm.size(); ++i) {
        float f[3];
        r.raw(f, 12);
        for (int c = 0; c < 3; ++c) scm.coords(i, c) = static_cast<double>(f[c]);
    }
    r.raw(scm.mask.data(), scm.mask.size());
    r.done();
    for (int i = 0; i < scm.size(); ++i) {
        if (scm.mask[static_cast<std::size_t>(i)] && !scm.coords.row(i).allFinite())
            throw NonFiniteValue("non-finite coordinate in " + path);
    }
    return scm;
}

// ---------------------------------------------------------------------------
// Pose / intrinsics text

std::string pose_to_string(const geometry::Pose& pose) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = pose.R;
    m.topRightCorner<3, 1>() = pose.t;
    std::string out;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            out += format_double(m(i, j));
            out += (j == 3 ? '\n' : ' ');
        }
    }
    return out;
}

geometry::Pose pose_from_string(const std::string& text) {
    // from_chars accepts nan/inf tokens, which must map to NonFiniteValue
    std::istringstream in(text);
    double vals[16];
    for (int i = 0; i < 16; ++i) {
        std::string token;
        if (!(in >> token)) throw TruncatedFile("pose text needs 16 decimals");
        const auto res = std::from_chars(token.data(), token.data() + token.size(), vals[i]);
        if (res.ec != std::errc{} || res.ptr != token.data() + token.size())
            throw TruncatedFile("malformed pose entry: " + token);
    }
    for (int i = 0; i < 16; ++i)
        if (!std::isfinite(vals[i])) throw NonFiniteValue("non-finite entry in pose text");
    geometry::Pose pose;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) pose.R(i, j) = vals[4 * i + j];
        pose.t(i) = vals[4 * i + 3];
    }
    if (!pose.is_valid_rotation(1e-6))
        throw NotARotation("pose text rotation fails orthonormality beyond 1e-6");
    return pose;
}

void write_pose(const std::string& path, const geometry::Pose& pose) {
    write_file_bytes(path, pose_to_string(pose));
}

geometry::Pose read_pose(const std::string& path) {
    try {
        return pose_from_string(read_file_bytes(path));
    } catch (const TruncatedFile&) {
        throw TruncatedFile("truncated pose file: " + path);
    }
}

void write_intrinsics(const std::string& path, const geometry::Intrinsics& k) {
    std::string out = format_double(k.fx) + " " + format_double(k.fy) + " " +
                      format_double(k.cx) + " " + format_double(k.cy) + "\n";
    write_file_bytes(path, out);
}

geometry::Intrinsics read_intrinsics(const std::string& path) {
    std::istringstream in(read_file_bytes(path));
    geometry::Intrinsics k;
    if (!(in >> k.fx >> k.fy >> k.cx >> k.cy))
        throw TruncatedFile("intrinsics text needs 4 decimals: " + path);
    if (!k.valid()) throw NonFiniteValue("invalid intrinsics in " + path);
    return k;
}

// ---------------------------------------------------------------------------
// Correspondences

void write_correspondences(const std::string& path,
                           const std::vector<oracle::Correspondence>& corrs) {
    std::string out;
    for (const auto& c : corrs) {
        out += format_double(c.u) + " " + format_double(c.v) + " " + format_double(c.p.x()) +
               " " + format_double(c.p.y()) + " " + format_double(c.p.z()) + "\n";
    }
    write_file_bytes(path, out);
}

std::vector<oracle::Correspondence> read_correspondences(const std::string& path) {
    std::istringstream in(read_file_bytes(path));
    std::vector<oracle::Correspondence> corrs;
    oracle::Correspondence c;
    while (in >> c.u >> c.v >> c.p.x() >> c.p.y() >> c.p.z()) corrs.push_back(c);
    if (!in.eof() && in.fail()) throw TruncatedFile("malformed correspondence file: " + path);
    return corrs;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void append_config(std::string& out, const model::RegressorConfig& cfg) {
    append_u32(out, static_cast<std::uint32_t>(cfg.d_model));
    append_u32(out, static_cast<std::uint32_t>(cfg.n_heads));
    append_u32(out, static_cast<std::uint32_t>(cfg.n_blocks));
    append_u32(out, static_cast<std::uint32_t>(cfg.group_size));
    append_u32(out, static_cast<std::uint32_t>(cfg.ffn_dim));
    append_u32(out, static_cast<std::uint32_t>(cfg.freq_bands));
    append_u32(out, cfg.rotation_repr == model::RotationRepr::k6d ? 0u : 1u);
    std::uint32_t flags = 0;
    if (cfg.enable_reattention) flags |= 1u;
    if (cfg.enable_dynamic_pe) flags |= 2u;
    if (cfg.reinject_group_input) flags |= 4u;
    append_u32(out, flags);
}

model::RegressorConfig read_config(ByteReader& r) {
    model::RegressorConfig cfg;
    cfg.d_model = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.n_blocks = static_cast<int>(r.u32());
    cfg.group_size = static_cast<int>(r.u32());
    cfg.ffn_dim = static_cast<int>(r.u32());
    cfg.freq_bands = static_cast<int>(r.u32());
    cfg.rotation_repr = r.u32() == 0 ? model::RotationRepr::k6d : model::RotationRepr::k9d;
    const std::uint32_t flags = r.u32();
    cfg.enable_reattention = (flags & 1u) != 0;
    cfg.enable_dynamic_pe = (flags & 2u) != 0;
    cfg.reinject_group_input = (flags & 4u) != 0;
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const model::RegressorConfig& cfg,
                     const model::ModelParams<float>& params) {
    std::string out;
    out.append("MRPO", 4);
    append_u32(out, kCheckpointVersion);
    append_config(out, cfg);

    std::uint32_t count = 0;
    model::for_each_tensor(params, [&](const std::string&, const auto&) { ++count; });
    append_u32(out, count);

    model::for_each_tensor(params, [&](const std::string& name, const auto& t) {
        using T = std::decay_t<decltype(t)>;
        append_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        if constexpr (T::ColsAtCompileTime == 1) {
            append_u32(out, 1);
            append_u32(out, static_cast<std::uint32_t>(t.size()));
        } else {
            append_u32(out, 2);
            append_u32(out, static_cast<std::uint32_t>(t.rows()));
            append_u32(out, static_cast<std::uint32_t>(t.cols()));
        }
        out.append(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::size_t>(t.size()) * sizeof(float));
    });
    write_file_bytes(path, out);
}

std::pair<model::RegressorConfig, model::ModelParams<float>> load_checkpoint(
    const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteReader r{bytes, 0, path};
    if (r.str(4) != "MRPO") throw BadMagic("not a checkpoint file: " + path);
    if (r.u32() != kCheckpointVersion) throw BadMagic("unsupported checkpoint version: " + path);
    const model::RegressorConfig cfg = read_config(r);
    cfg.check();
    model::ModelParams<float> params = model::make_zero_params<float>(cfg);

    const std::uint32_t count = r.u32();
    std::map<std::string, std::vector<float>> loaded;
    std::map<std::string, std::array<std::uint32_t, 2>> shapes;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        if (rank != 1 && rank != 2) throw TruncatedFile("bad tensor rank in " + path);
        std::array<std::uint32_t, 2> dims = {0, 1};
        for (std::uint32_t d = 0; d < rank; ++d) dims[d] = r.u32();
        const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1];
        std::vector<float> data(n);
        r.raw(data.data(), n * sizeof(float));
        loaded.emplace(name, std::move(data));
        shapes.emplace(name, dims);
    }
    r.done();

    model::for_each_tensor(params, [&](const std::string& name, auto& t) {
        using T = std::decay_t<decltype(t)>;
        const auto it = loaded.find(name);
        if (it == loaded.end()) throw TruncatedFile("checkpoint missing tensor " + name);
        const auto dims = shapes.at(name);
        const auto d0 = static_cast<Eigen::Index>(dims[0]);
        const auto d1 = static_cast<Eigen::Index>(dims[1]);
        const bool shape_ok = T::ColsAtCompileTime == 1 ? d0 == t.size() && d1 == 1
                                                        : d0 == t.rows() && d1 == t.cols();
        if (!shape_ok || static_cast<Eigen::Index>(it->second.size()) != t.size())
            throw ShapeMismatch("checkpoint tensor " + name + " has wrong shape");
        std::memcpy(t.data(), it->second.data(), it->second.size() * sizeof(float));
        loaded.erase(it);
    });
    if (!loaded.empty())
        throw ShapeMismatch("checkpoint has unexpected tensor " + loaded.begin()->first);
    return {cfg, std::move(params)};
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<std::string> list_frames(const std::string& split_dir) {
    std::vector<std::string> bases;
    if (!fs::is_directory(split_dir)) throw IoError("not a directory: " + split_dir);
    for (const auto& entry : fs::directory_iterator(split_dir)) {
        if (!entry.is_regular_file()) continue;
        const fs::path p = entry.path();
        if (p.extension() == ".scm") bases.push_back((p.parent_path() / p.stem()).string());
    }
    std::sort(bases.begin(), bases.end());
    return bases;
}

training::TrainSample load_sample(const std::string& base_path) {
    training::TrainSample s;
    s.scm = read_scm(base_path + ".scm");
    s.gt = read_pose(base_path + ".pose.txt");
    s.k = read_intrinsics(base_path + ".intr.txt");
    if (s.scm.valid_count() < 1) throw DataError("sample has no valid cells: " + base_path);
    return s;
}

std::vector<NamedSample> load_split(const std::string& dataset_dir, const std::string& split) {
    const std::string dir = (fs::path(dataset_dir) / split).string();
    std::vector<NamedSample> samples;
    for (const auto& base : list_frames(dir)) {
        NamedSample ns;
        ns.name = fs::path(base).filename().string();
        ns.sample = load_sample(base);
        samples.push_back(std::move(ns));
    }
    if (samples.empty()) throw IoError("no frames found in " + dir);
    return samples;
}

bool is_validation_frame(const std::string& basename) {
    std::uint64_t h = 1469598103934665603ull;
    for (const char ch : basename) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return h % 10 == 0;
}

// ---------------------------------------------------------------------------
// key=value configs

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t\r\n");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r\n");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError(path + ":" + std::to_string(line_no) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
        };
        trim(key);
        trim(value);
        if (key.empty()) throw DataError(path + ":" + std::to_string(line_no) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

namespace {

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw DataError("config value for '" + key + "' is not a number: " + value);
    }
}

int to_int(const std::string& key, const std::string& value) {
    const double v = to_double(key, value);
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
        throw DataError("config value for '" + key + "' is not an integer: " + value);
    return i;
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "on") return true;
    if (value == "0" || value == "false" || value == "off") return false;
    throw DataError("config value for '" + key + "' is not a boolean: " + value);
}

}  // namespace

TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv) {
    TrainConfig cfg;
    for (const auto& [key, value] : kv) {
        if (key == "d_model")
            cfg.regressor.d_model = to_int(key, value);
        else if (key == "n_heads")
            cfg.regressor.n_heads = to_int(key, value);
        else if (key == "n_blocks")
            cfg.regressor.n_blocks = to_int(key, value);
        else if (key == "group_size")
            cfg.regressor.group_size = to_int(key, value);
        else if (key == "ffn_dim")
            cfg.regressor.ffn_dim = to_int(key, value);
        else if (key == "freq_bands")
            cfg.regressor.freq_bands = to_int(key, value);
        else if (key == "enable_reattention")
            cfg.regressor.enable_reattention = to_bool(key, value);
        else if (key == "enable_dynamic_pe")
            cfg.regressor.enable_dynamic_pe = to_bool(key, value);
        else if (key == "reinject_group_input")
            cfg.regressor.reinject_group_input = to_bool(key, value);
        else if (key == "rotation_repr") {
            if (value == "6d")
                cfg.regressor.rotation_repr = model::RotationRepr::k6d;
            else if (value == "9d")
                cfg.regressor.rotation_repr = model::RotationRepr::k9d;
            else
                throw DataError("rotation_repr must be 6d or 9d, got " + value);
        } else if (key == "lr_min")
            cfg.optim.lr_min = to_double(key, value);
        else if (key == "lr_max")
            cfg.optim.lr_max = to_double(key, value);
        else if (key == "beta1")
            cfg.optim.beta1 = to_double(key, value);
        else if (key == "beta2")
            cfg.optim.beta2 = to_double(key, value);
        else if (key == "weight_decay")
            cfg.optim.weight_decay = to_double(key, value);
        else if (key == "epochs")
            cfg.optim.epochs = to_int(key, value);
        else if (key == "batch_size")
            cfg.optim.batch_size = to_int(key, value);
        else if (key == "seed")
            cfg.optim.seed = static_cast<std::uint64_t>(to_double(key, value));
        else if (key == "jitter_trans")
            cfg.augment.jitter_trans = to_double(key, value);
        else if (key == "jitter_rot")
            cfg.augment.jitter_rot = to_double(key, value);
        else
            throw DataError("unknown config key: " + key);
    }
    if (cfg.optim.lr_min <= 0.0 || cfg.optim.lr_max <= 0.0)
        throw DataError("learning rates must be positive");
    if (cfg.optim.beta1 <= 0.0 || cfg.optim.beta1 >= 1.0 || cfg.optim.beta2 <= 0.0 ||
        cfg.optim.beta2 >= 1.0)
        throw DataError("betas must be in (0, 1)");
    if (cfg.optim.epochs < 0 || cfg.optim.batch_size < 1)
        throw DataError("epochs must be >= 0 and batch_size >= 1");
    if (cfg.augment.jitter_trans < 0.0 || cfg.augment.jitter_rot < 0.0)
        throw DataError("jitter amounts must be >= 0");
    cfg.regressor.check();
    return cfg;
}

}  // namespace marepo::io
