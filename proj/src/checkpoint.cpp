#include "gabliteration/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "gabliteration/kernels.hpp"

namespace gabl::ckpt {

using nlohmann::json;

std::string dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F16: return "F16";
        case Dtype::F32: return "F32";
        case Dtype::F64: return "F64";
    }
    throw InvalidInputError("unknown dtype enum value");
}

Dtype dtype_from_name(const std::string& name) {
    if (name == "F16") return Dtype::F16;
    if (name == "F32") return Dtype::F32;
    if (name == "F64") return Dtype::F64;
    throw UnsupportedDtypeError("unsupported dtype \"" + name +
                                "\" (supported: F16, F32, F64)");
}

std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F16: return 2;
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
    }
    throw InvalidInputError("unknown dtype enum value");
}

// ---------- half conversion ----------

std::uint16_t float_to_half(float f) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    const std::int32_t exp = static_cast<std::int32_t>((bits >> 23) & 0xffu) - 127 + 15;
    std::uint32_t mant = bits & 0x7fffffu;

    if (((bits >> 23) & 0xffu) == 0xffu) {  // Inf / NaN
        return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
    }
    if (exp >= 0x1f) {  // overflow -> Inf
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (exp <= 0) {  // subnormal or zero
        if (exp < -10) return static_cast<std::uint16_t>(sign);
        mant |= 0x800000u;
        const int shift = 14 - exp;
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t half_mant = mant >> 13;
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1u))) {
        ++half_mant;
        if (half_mant == 0x400u) {  // mantissa carry bumps the exponent
            half_mant = 0;
            return static_cast<std::uint16_t>(sign | ((exp + 1) << 10));
        }
    }
    return static_cast<std::uint16_t>(sign | (exp << 10) | half_mant);
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {  // subnormal: renormalize
            int e = -1;
            do {
                mant <<= 1;
                ++e;
            } while ((mant & 0x400u) == 0);
            mant &= 0x3ffu;
            bits = sign | ((127 - 15 - e) << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

// ---------- config ----------

void ModelConfig::validate() const {
    if (num_layers < 1) throw ConfigError("config: num_layers must be >= 1");
    if (hidden_dim < 1) throw ConfigError("config: hidden_dim must be >= 1");
    if (vocab_size < 2) throw ConfigError("config: vocab_size must be >= 2");
    if (mlp_dim < 1) throw ConfigError("config: mlp_dim must be >= 1");
    for (const char* role : {"attn_out", "mlp_down"}) {
        if (!layer_key_template.count(role)) {
            throw ConfigError(std::string("config: layer_key_template missing role \"") + role +
                              "\"");
        }
        auto it = residual_orientation.find(role);
        if (it == residual_orientation.end()) {
            throw ConfigError(std::string("config: residual_orientation missing role \"") + role +
                              "\"");
        }
        if (it->second != "rows" && it->second != "cols") {
            throw ConfigError("config: residual_orientation values must be \"rows\" or \"cols\"");
        }
    }
}

std::string ModelConfig::to_json_string() const {
    json j;
    j["num_layers"] = num_layers;
    j["hidden_dim"] = hidden_dim;
    j["vocab_size"] = vocab_size;
    j["mlp_dim"] = mlp_dim;
    j["layer_key_template"] = layer_key_template;
    j["residual_orientation"] = residual_orientation;
    return j.dump(2) + "\n";
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    ModelConfig c;
    try {
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
        c.layer_key_template =
            j.at("layer_key_template").get<std::map<std::string, std::string>>();
        c.residual_orientation =
            j.at("residual_orientation").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: missing or mistyped field: ") + e.what());
    }
    c.validate();
    return c;
}

static std::string fill_layer_index(const std::string& pattern, std::size_t layer) {
    const std::string placeholder = "{i}";
    auto pos = pattern.find(placeholder);
    if (pos == std::string::npos) {
        throw ConfigError("layer_key_template pattern \"" + pattern + "\" lacks {i}");
    }
    std::string out = pattern;
    out.replace(pos, placeholder.size(), std::to_string(layer));
    return out;
}

WeightKeys resolve_weight_keys(const ModelConfig& config, std::size_t layer) {
    if (layer >= config.num_layers) {
        throw IndexError("layer index " + std::to_string(layer) + " out of range [0, " +
                         std::to_string(config.num_layers) + ")");
    }
    WeightKeys keys;
    keys.attn_out = fill_layer_index(config.layer_key_template.at("attn_out"), layer);
    keys.mlp_down = fill_layer_index(config.layer_key_template.at("mlp_down"), layer);
    return keys;
}

// ---------- container io ----------

namespace {

struct TensorMeta {
    Dtype dtype;
    std::size_t rows, cols;
    std::size_t begin, end;
};

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open \"" + path + "\" for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on \"" + path + "\"");
    return bytes;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open \"" + tmp + "\" for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failure on \"" + tmp + "\"");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename \"" + tmp + "\" -> \"" + path + "\": " + ec.message());
}

// True when this role's stored orientation puts the residual dimension in
// the rows, i.e. the tensor needs a transpose at the io boundary.
bool needs_transpose(const ModelConfig& config, const std::string& role) {
    return config.residual_orientation.at(role) == "rows";
}

// name -> role for every modifiable tensor.
std::map<std::string, std::string> modifiable_roles(const ModelConfig& config) {
    std::map<std::string, std::string> roles;
    for (std::size_t layer = 0; layer < config.num_layers; ++layer) {
        WeightKeys keys = resolve_weight_keys(config, layer);
        roles[keys.attn_out] = "attn_out";
        roles[keys.mlp_down] = "mlp_down";
    }
    return roles;
}

void check_modifiable_shapes(const Checkpoint& ckpt) {
    const auto roles = modifiable_roles(ckpt.config);
    const std::size_t d = ckpt.config.hidden_dim;
    for (const auto& [name, role] : roles) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw ConfigError("checkpoint is missing tensor \"" + name + "\" required by config");
        }
        const Matrix& m = it->second;
        if (m.cols != d) {
            throw ConfigError("tensor \"" + name + "\" has " + std::to_string(m.cols) +
                              " columns, expected hidden_dim " + std::to_string(d));
        }
        if (role == "mlp_down" && m.rows != ckpt.config.mlp_dim) {
            throw ConfigError("tensor \"" + name + "\" has " + std::to_string(m.rows) +
                              " rows, expected mlp_dim " + std::to_string(ckpt.config.mlp_dim));
        }
    }
}

}  // namespace

std::string default_config_path(const std::string& checkpoint_path) {
    return checkpoint_path + ".config.json";
}

Checkpoint load_checkpoint(const std::string& path) {
    return load_checkpoint(path, default_config_path(path));
}

Checkpoint load_checkpoint(const std::string& path, const std::string& config_path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 8) {
        throw FormatError("\"" + path + "\": truncated container at byte 0, need 8-byte header length");
    }
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) {
        header_len = (header_len << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
    }
    // Compare against the remaining size; 8 + header_len could wrap.
    if (header_len > bytes.size() - 8) {
        throw FormatError("\"" + path + "\": header length " + std::to_string(header_len) +
                          " exceeds file size at byte 8");
    }

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw FormatError("\"" + path + "\": invalid header JSON at byte 8: " + e.what());
    }
    if (!header.is_object()) {
        throw FormatError("\"" + path + "\": header is not a JSON object at byte 8");
    }

    const std::size_t buf_begin = 8 + header_len;
    const std::size_t buf_size = bytes.size() - buf_begin;

    std::vector<std::pair<std::string, TensorMeta>> metas;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") continue;
        const json& entry = it.value();
        TensorMeta meta;
        try {
            meta.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2) {
                throw FormatError("\"" + path + "\": tensor \"" + it.key() +
                                  "\" has rank " + std::to_string(shape.size()) +
                                  ", only 2-D tensors are supported");
            }
            meta.rows = shape[0];
            meta.cols = shape[1];
            const auto offs = entry.at("data_offsets").get<std::vector<std::size_t>>();
            if (offs.size() != 2) {
                throw FormatError("\"" + path + "\": tensor \"" + it.key() +
                                  "\" data_offsets must have two entries");
            }
            meta.begin = offs[0];
            meta.end = offs[1];
        } catch (const json::exception& e) {
            throw FormatError("\"" + path + "\": malformed header entry for \"" + it.key() +
                              "\": " + e.what());
        }
        const std::size_t expect = meta.rows * meta.cols * dtype_size(meta.dtype);
        if (meta.end < meta.begin || meta.end - meta.begin != expect) {
            throw FormatError("\"" + path + "\": tensor \"" + it.key() + "\" spans " +
                              std::to_string(meta.end - meta.begin) + " bytes, expected " +
                              std::to_string(expect));
        }
        if (meta.end > buf_size) {
            throw FormatError("\"" + path + "\": tensor \"" + it.key() +
                              "\" ends at buffer offset " + std::to_string(meta.end) +
                              " past buffer size " + std::to_string(buf_size));
        }
        metas.emplace_back(it.key(), meta);
    }
    if (metas.empty()) {
        throw FormatError("\"" + path + "\": container holds no tensors");
    }

    // Offsets must tile the buffer: sorted, gap-free, no overlap.
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    spans.reserve(metas.size());
    for (const auto& [name, meta] : metas) spans.emplace_back(meta.begin, meta.end);
    std::sort(spans.begin(), spans.end());
    std::size_t cursor = 0;
    for (const auto& [b, e] : spans) {
        if (b != cursor) {
            throw FormatError("\"" + path + "\": data offsets leave a gap or overlap at buffer offset " +
                              std::to_string(cursor));
        }
        cursor = e;
    }
    if (cursor != buf_size) {
        throw FormatError("\"" + path + "\": data buffer has " + std::to_string(buf_size - cursor) +
                          " trailing bytes past the last tensor");
    }

    Checkpoint ckpt;
    ckpt.config = ModelConfig::from_json_string(read_file_bytes(config_path));

    const char* buf = bytes.data() + buf_begin;
    for (const auto& [name, meta] : metas) {
        const std::size_t count = meta.rows * meta.cols;
        std::vector<double> vals(count);
        const char* src = buf + meta.begin;
        switch (meta.dtype) {
            case Dtype::F16:
                for (std::size_t i = 0; i < count; ++i) {
                    std::uint16_t h;
                    std::memcpy(&h, src + 2 * i, 2);
                    vals[i] = static_cast<double>(half_to_float(h));
                }
                break;
            case Dtype::F32:
                for (std::size_t i = 0; i < count; ++i) {
                    float f;
                    std::memcpy(&f, src + 4 * i, 4);
                    vals[i] = static_cast<double>(f);
                }
                break;
            case Dtype::F64:
                for (std::size_t i = 0; i < count; ++i) {
                    std::memcpy(&vals[i], src + 8 * i, 8);
                }
                break;
        }
        Matrix m(meta.rows, meta.cols, std::move(vals));
        ckpt.tensors.emplace(name, std::move(m));
        ckpt.dtype_map.emplace(name, meta.dtype);
    }

    // Normalize orientation: residual dimension becomes the column
    // dimension of every modifiable matrix.
    const auto roles = modifiable_roles(ckpt.config);
    for (const auto& [name, role] : roles) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw ConfigError("checkpoint is missing tensor \"" + name + "\" required by config");
        }
        if (needs_transpose(ckpt.config, role)) {
            it->second = kernels::transpose(it->second);
        }
    }
    check_modifiable_shapes(ckpt);
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    save_checkpoint(ckpt, path, default_config_path(path));
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path,
                     const std::string& config_path) {
    if (ckpt.tensors.empty()) {
        throw FormatError("save_checkpoint: container requires at least one tensor");
    }
    ckpt.config.validate();
    for (const auto& [name, m] : ckpt.tensors) {
        if (!ckpt.dtype_map.count(name)) {
            throw InvalidInputError("save_checkpoint: tensor \"" + name + "\" has no dtype entry");
        }
        m.require_finite(("save_checkpoint tensor \"" + name + "\"").c_str());
    }

    // De-normalize orientation back to the stored convention.
    const auto roles = modifiable_roles(ckpt.config);
    std::map<std::string, Matrix> staged;
    for (const auto& [name, m] : ckpt.tensors) {
        auto role_it = roles.find(name);
        if (role_it != roles.end() && needs_transpose(ckpt.config, role_it->second)) {
            staged.emplace(name, kernels::transpose(m));
        } else {
            staged.emplace(name, m);
        }
    }

    // Offsets assigned in sorted-name order; header keys are sorted by the
    // JSON object itself, so the byte output is deterministic.
    json header = json::object();
    std::size_t cursor = 0;
    for (const auto& [name, m] : staged) {
        const Dtype dt = ckpt.dtype_map.at(name);
        const std::size_t nbytes = m.rows * m.cols * dtype_size(dt);
        header[name] = {{"dtype", dtype_name(dt)},
                        {"shape", {m.rows, m.cols}},
                        {"data_offsets", {cursor, cursor + nbytes}}};
        cursor += nbytes;
    }
    const std::string header_str = header.dump();

    std::string bytes;
    bytes.reserve(8 + header_str.size() + cursor);
    std::uint64_t hlen = header_str.size();
    for (int i = 0; i < 8; ++i) {
        bytes.push_back(static_cast<char>((hlen >> (8 * i)) & 0xffu));
    }
    bytes += header_str;

    for (const auto& [name, m] : staged) {
        const Dtype dt = ckpt.dtype_map.at(name);
        switch (dt) {
            case Dtype::F16:
                for (double v : m.data) {
                    const std::uint16_t h = float_to_half(static_cast<float>(v));
                    bytes.push_back(static_cast<char>(h & 0xffu));
                    bytes.push_back(static_cast<char>((h >> 8) & 0xffu));
                }
                break;
            case Dtype::F32:
                for (double v : m.data) {
                    const float f = static_cast<float>(v);
                    std::uint32_t u;
                    std::memcpy(&u, &f, 4);
                    for (int i = 0; i < 4; ++i) {
                        bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
                    }
                }
                break;
            case Dtype::F64:
                for (double v : m.data) {
                    std::uint64_t u;
                    std::memcpy(&u, &v, 8);
                    for (int i = 0; i < 8; ++i) {
                        bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
                    }
                }
                break;
        }
    }

    write_file_atomic(path, bytes);
    write_file_atomic(config_path, ckpt.config.to_json_string());
}

}  // namespace gabl::ckpt
