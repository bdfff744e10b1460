#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tilenorm/diagnose.hpp"
#include "tilenorm/synthdata.hpp"
#include "tilenorm/train.hpp"
#include "tilenorm/unet.hpp"

namespace tilenorm {

//! Malformed or inconsistent file contents.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

//! NPY file stored in column-major order, which this reader does not accept.
class FortranOrderError : public FormatError {
  public:
    using FormatError::FormatError;
};

// ---------------------------------------------------------------------------
// NPY v1.0

enum class DType { F8, F4 };

inline const char* descr(DType t) { return t == DType::F8 ? "<f8" : "<f4"; }

/*!
 * Full header block: magic, version 1.0, little-endian header length and the
 * dict literal, space padded and newline terminated so the data starts at a
 * multiple of 64 bytes.
 */
inline std::string npy_header(const Shape& shape, DType dtype) {
    std::string dict = std::string("{'descr': '") + descr(dtype) + "', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) dict += ", ";
        dict += std::to_string(shape[i]);
    }
    if (shape.size() == 1) dict += ",";
    dict += "), }";
    const std::size_t prefix = 10;
    std::size_t total = prefix + dict.size() + 1;
    total = (total + 63) / 64 * 64;
    dict.append(total - prefix - dict.size() - 1, ' ');
    dict += '\n';
    if (dict.size() > 0xFFFF) throw FormatError("npy: header too long for format 1.0");
    std::string out = "\x93NUMPY";
    out += '\x01';
    out += '\x00';
    out += static_cast<char>(dict.size() & 0xFF);
    out += static_cast<char>(dict.size() >> 8);
    return out + dict;
}

namespace detail {

template <class U>
void put_le(std::string& out, U bits) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out += static_cast<char>((bits >> (8 * b)) & 0xFF);
}

template <class U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
    return v;
}

}  // namespace detail

inline std::string npy_bytes(const Tensor& t, DType dtype = DType::F8) {
    if (t.empty()) throw FormatError("npy: cannot write an empty tensor");
    std::string out = npy_header(t.shape(), dtype);
    out.reserve(out.size() + t.size() * (dtype == DType::F8 ? 8 : 4));
    for (double v : t.data()) {
        if (dtype == DType::F8)
            detail::put_le(out, std::bit_cast<std::uint64_t>(v));
        else
            detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write to " + path.string() + " failed");
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_npy(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F8) {
    write_file(path, npy_bytes(t, dtype));
}

inline Tensor parse_npy(const std::string& bytes, const std::string& what = "npy") {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0) throw FormatError(what + ": bad magic");
    if (p[6] != 1 || p[7] != 0)
        throw FormatError(what + ": unsupported format version " + std::to_string(p[6]) + "." + std::to_string(p[7]));
    const std::size_t hlen = detail::get_le<std::uint16_t>(p + 8);
    if (bytes.size() < 10 + hlen) throw FormatError(what + ": truncated header");
    const std::string header = bytes.substr(10, hlen);

    std::smatch m;
    static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
    static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
    static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
    if (!std::regex_search(header, m, descr_re)) throw FormatError(what + ": header lacks 'descr'");
    const std::string dt = m[1];
    if (!std::regex_search(header, m, order_re)) throw FormatError(what + ": header lacks 'fortran_order'");
    if (m[1] == "True") throw FortranOrderError(what + ": fortran_order=True is not supported");
    if (dt != "<f8" && dt != "<f4") throw FormatError(what + ": unsupported dtype '" + dt + "'");
    if (!std::regex_search(header, m, shape_re)) throw FormatError(what + ": header lacks 'shape'");
    Shape shape;
    {
        std::string dims = m[1];
        std::stringstream ss(dims);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto b = item.find_first_not_of(" \t");
            if (b == std::string::npos) continue;
            std::size_t v = 0;
            const char* s = item.data() + b;
            const char* e = item.data() + item.size();
            while (e > s && (e[-1] == ' ' || e[-1] == '\t')) --e;
            auto [ptr, ec] = std::from_chars(s, e, v);
            if (ec != std::errc() || ptr != e) throw FormatError(what + ": bad shape entry '" + item + "'");
            shape.push_back(v);
        }
    }
    if (shape.empty()) throw FormatError(what + ": scalar arrays are not supported");
    const std::size_t n = shape_volume(shape);
    const std::size_t width = dt == "<f8" ? 8 : 4;
    const std::size_t offset = 10 + hlen;
    if (bytes.size() - offset < n * width)
        throw FormatError(what + ": truncated payload, expected " + std::to_string(n * width) + " bytes, found " +
                          std::to_string(bytes.size() - offset));
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* q = p + offset + i * width;
        data[i] = width == 8 ? std::bit_cast<double>(detail::get_le<std::uint64_t>(q))
                             : static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(q)));
    }
    return Tensor(std::move(shape), std::move(data));
}

inline Tensor read_npy(const std::filesystem::path& path) { return parse_npy(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// JSON mappings

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"in_channels", c.in_channels},
         {"out_channels", c.out_channels},
         {"features", c.features},
         {"levels", c.levels},
         {"blocks_per_level", c.blocks_per_level},
         {"norm_kind", to_string(c.norm_kind)},
         {"conv_kernel", c.conv_kernel},
         {"final_activation", c.final_activation == FinalActivation::Sigmoid ? "sigmoid" : "none"},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("out_channels").get_to(c.out_channels);
    j.at("features").get_to(c.features);
    j.at("levels").get_to(c.levels);
    j.at("blocks_per_level").get_to(c.blocks_per_level);
    const auto kind = parse_norm_kind(j.at("norm_kind").get<std::string>());
    if (!kind) throw FormatError("unknown norm kind '" + j.at("norm_kind").get<std::string>() + "'");
    c.norm_kind = *kind;
    j.at("conv_kernel").get_to(c.conv_kernel);
    const auto act = j.at("final_activation").get<std::string>();
    if (act != "sigmoid" && act != "none") throw FormatError("unknown final activation '" + act + "'");
    c.final_activation = act == "sigmoid" ? FinalActivation::Sigmoid : FinalActivation::None;
    j.at("seed").get_to(c.seed);
}

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
    j = {{"shape", s.shape},
         {"blob_count_min", s.blob_count_min},
         {"blob_count_max", s.blob_count_max},
         {"radius_min", s.radius_min},
         {"radius_max", s.radius_max},
         {"shell_thickness", s.shell_thickness},
         {"dense_fraction", s.dense_fraction},
         {"background", s.background},
         {"brightness_min", s.brightness_min},
         {"brightness_max", s.brightness_max},
         {"ramp_amplitude", s.ramp_amplitude},
         {"noise_sigma", s.noise_sigma},
         {"bright_plane_prob", s.bright_plane_prob},
         {"bright_plane_intensity", s.bright_plane_intensity},
         {"max_retries", s.max_retries},
         {"seed", s.seed}};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// A checkpoint is a directory holding manifest.json and one NPY file per
// tensor. The manifest stores the model config, the step counter, the scalar
// settings of every norm layer and, per tensor, its file and shape.

namespace detail {

struct CheckpointEntry {
    std::string name;
    Tensor* tensor;
};

inline std::vector<std::string> norm_fields() { return {"gamma", "beta", "running_mean", "running_var"}; }

inline std::vector<double>& norm_field(NormState& s, const std::string& f) {
    if (f == "gamma") return s.gamma;
    if (f == "beta") return s.beta;
    if (f == "running_mean") return s.running_mean;
    return s.running_var;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "tilenorm-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = model.config();
    manifest["step_count"] = model.step_count;
    auto tensors = nlohmann::json::array();
    auto put = [&](const std::string& name, const Tensor& t) {
        const std::string file = name + ".npy";
        write_npy(dir / file, t);
        tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
    };
    for (const auto& [name, t] : model.named_tensors()) put(name, *t);
    auto layers = nlohmann::json::array();
    const auto states = model.norm_states();
    for (std::size_t i = 0; i < states.size(); ++i) {
        NormState s = *states[i];
        const std::string base = model.block_name(i) + ".norm";
        layers.push_back({{"name", base},
                          {"momentum", s.momentum},
                          {"eps", s.eps},
                          {"r_max", s.r_max},
                          {"d_max", s.d_max},
                          {"step_count", s.step_count}});
        for (const auto& f : detail::norm_fields()) {
            const auto& v = detail::norm_field(s, f);
            put(base + "." + f, Tensor({v.size()}, v));
        }
    }
    manifest["norm_layers"] = layers;
    manifest["tensors"] = tensors;
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Model load_checkpoint(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "tilenorm-checkpoint") throw FormatError("checkpoint: not a tilenorm checkpoint");
    Model m;
    try {
        m = build(manifest.at("config").get<ModelConfig>());
        m.step_count = manifest.at("step_count").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint manifest: " + std::string(e.what()));
    } catch (const std::invalid_argument& e) {
        throw FormatError("checkpoint config: " + std::string(e.what()));
    }

    std::map<std::string, nlohmann::json> index;
    for (const auto& t : manifest.at("tensors")) index[t.at("name").get<std::string>()] = t;

    auto load = [&](const std::string& name, const Shape& expected) {
        auto it = index.find(name);
        if (it == index.end()) throw FormatError("checkpoint: manifest has no entry for tensor '" + name + "'");
        const Shape listed = it->second.at("shape").get<Shape>();
        if (listed != expected)
            throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_string(listed) + ", model expects " +
                              shape_string(expected));
        const auto file = dir / it->second.at("file").get<std::string>();
        if (!std::filesystem::exists(file))
            throw FormatError("checkpoint: missing tensor file " + file.string() + " for '" + name + "'");
        Tensor t = read_npy(file);
        if (t.shape() != expected)
            throw FormatError("checkpoint: file for tensor '" + name + "' has shape " + shape_string(t.shape()));
        return t;
    };
    for (auto& nt : m.named_tensors()) *nt.tensor = load(nt.name, nt.tensor->shape());

    const auto& layers = manifest.at("norm_layers");
    auto states = m.norm_states();
    if (layers.size() != states.size())
        throw FormatError("checkpoint: " + std::to_string(layers.size()) + " norm layers listed, model has " +
                          std::to_string(states.size()));
    for (std::size_t i = 0; i < states.size(); ++i) {
        const std::string base = m.block_name(i) + ".norm";
        const auto& l = layers[i];
        if (l.at("name").get<std::string>() != base) throw FormatError("checkpoint: norm layer " + std::to_string(i) + " is not '" + base + "'");
        NormState& s = *states[i];
        s.momentum = l.at("momentum").get<double>();
        s.eps = l.at("eps").get<double>();
        s.r_max = l.at("r_max").get<double>();
        s.d_max = l.at("d_max").get<double>();
        s.step_count = l.at("step_count").get<std::int64_t>();
        for (const auto& f : detail::norm_fields()) {
            auto& v = detail::norm_field(s, f);
            v = load(base + "." + f, {v.size()}).vec();
        }
        s.validate();
    }
    return m;
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { Json, Csv };

//! Json unless the path ends in ".csv".
inline ReportFormat format_for(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? ReportFormat::Csv : ReportFormat::Json;
}

//! Shortest decimal that reads back to the same double.
inline std::string format_number(double v) {
    std::array<char, 32> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

inline constexpr const char* kNoMismatch = "no";

inline void to_json(nlohmann::json& j, const MismatchReport& r) {
    auto channels = nlohmann::json::array();
    for (double v : r.per_channel_mismatch) channels.push_back(r.seamless ? nlohmann::json(kNoMismatch) : nlohmann::json(v));
    j = {{"kind", "mismatch"},
         {"max_dist", r.max_dist},
         {"per_channel_mismatch", channels},
         {"tiles_compared", r.tiles_compared},
         {"seamless", r.seamless}};
}

inline void from_json(const nlohmann::json& j, MismatchReport& r) {
    r.max_dist = j.at("max_dist").get<double>();
    r.tiles_compared = j.at("tiles_compared").get<std::size_t>();
    r.seamless = j.at("seamless").get<bool>();
    r.per_channel_mismatch.clear();
    for (const auto& v : j.at("per_channel_mismatch")) r.per_channel_mismatch.push_back(v.is_string() ? 0.0 : v.get<double>());
}

inline void to_json(nlohmann::json& j, const DisparityReport& r) {
    j = {{"kind", "disparity"}, {"per_volume", r.per_volume}, {"median", r.median}};
}

inline void from_json(const nlohmann::json& j, DisparityReport& r) {
    j.at("per_volume").get_to(r.per_volume);
    j.at("median").get_to(r.median);
}

inline void to_json(nlohmann::json& j, const DiceReport& r) {
    j = {{"kind", "dice"}, {"per_volume", r.per_volume}, {"median", r.median}};
}

inline void from_json(const nlohmann::json& j, DiceReport& r) {
    j.at("per_volume").get_to(r.per_volume);
    j.at("median").get_to(r.median);
}

inline void to_json(nlohmann::json& j, const RFReport& r) {
    j = {{"kind", "rf"},
         {"trf", r.trf.full_tile ? nlohmann::json("FULL_TILE") : nlohmann::json(r.trf.radius)},
         {"tile", r.tile},
         {"samples", r.samples}};
}

inline void from_json(const nlohmann::json& j, RFReport& r) {
    const auto& t = j.at("trf");
    r.trf.full_tile = t.is_string();
    if (t.is_string() && t.get<std::string>() != "FULL_TILE") throw FormatError("rf report: bad trf value");
    if (!r.trf.full_tile) t.get_to(r.trf.radius);
    j.at("tile").get_to(r.tile);
    j.at("samples").get_to(r.samples);
}

inline std::string class_name(std::size_t c) {
    static const char* names[] = {"background", "foreground", "boundary"};
    return c < 3 ? names[c] : "channel" + std::to_string(c);
}

inline std::string to_csv(const MismatchReport& r) {
    std::string out = "channel,tile_mismatch,max_dist,tiles_compared\n";
    for (std::size_t c = 0; c < r.per_channel_mismatch.size(); ++c)
        out += class_name(c) + "," + (r.seamless ? std::string(kNoMismatch) : format_number(r.per_channel_mismatch[c])) + "," +
               format_number(r.max_dist) + "," + std::to_string(r.tiles_compared) + "\n";
    return out;
}

inline std::string to_csv(const DisparityReport& r) {
    std::string out = "volume,disparity\n";
    for (std::size_t i = 0; i < r.per_volume.size(); ++i) out += std::to_string(i) + "," + format_number(r.per_volume[i]) + "\n";
    return out + "median," + format_number(r.median) + "\n";
}

inline std::string to_csv(const DiceReport& r) {
    std::string out = "volume";
    for (std::size_t c = 0; c < r.median.size(); ++c) out += "," + class_name(c);
    out += "\n";
    auto row = [&](const std::string& label, const std::vector<double>& v) {
        out += label;
        for (double d : v) out += "," + format_number(d);
        out += "\n";
    };
    for (std::size_t i = 0; i < r.per_volume.size(); ++i) row(std::to_string(i), r.per_volume[i]);
    row("median", r.median);
    return out;
}

inline std::string to_csv(const RFReport& r) {
    std::string out = "axis,trf_radius,tile\n";
    for (int a = 0; a < 3; ++a)
        out += std::to_string(a) + "," + (r.trf.full_tile ? std::string("FULL_TILE") : std::to_string(r.trf.radius[a])) + "," +
               std::to_string(r.tile[a]) + "\n";
    return out;
}

//! Per-step loss curve. wall_ms is the only column that differs between identical runs.
inline std::string to_csv(const TrainingLog& log) {
    std::string out = "step,loss,r_max_eff,d_max_eff,wall_ms\n";
    for (const auto& s : log.steps)
        out += std::to_string(s.step) + "," + format_number(s.loss) + "," + format_number(s.r_max_eff) + "," +
               format_number(s.d_max_eff) + "," + format_number(std::round(s.wall_ms * 1000.0) / 1000.0) + "\n";
    return out;
}

template <class R>
void write_report(const R& report, const std::filesystem::path& path, ReportFormat format) {
    if (format == ReportFormat::Csv)
        write_file(path, to_csv(report));
    else
        write_file(path, nlohmann::json(report).dump(2) + "\n");
}

template <class R>
R read_report(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_file(path)).get<R>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

//! 8-bit PGM of the central slice along axis 0, scaled from the slice minimum to its maximum.
inline void write_pgm_center_slice(const std::filesystem::path& path, const Tensor& map) {
    require_rank(map, 3, "write_pgm_center_slice");
    const std::size_t z = map.dim(0) / 2, H = map.dim(1), W = map.dim(2);
    const double* s = map.ptr() + z * H * W;
    const auto [lo, hi] = std::minmax_element(s, s + H * W);
    const double range = *hi - *lo;
    std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (std::size_t i = 0; i < H * W; ++i)
        out += static_cast<char>(range > 0 ? static_cast<int>(std::lround(255.0 * (s[i] - *lo) / range)) : 0);
    write_file(path, out);
}

}  // namespace tilenorm
