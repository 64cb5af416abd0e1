#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "gabliteration/matrix.hpp"

namespace gabl::ckpt {

// On-disk element types. Everything is widened to double in memory;
// dtype_map remembers the original type for round-tripping.
enum class Dtype { F16, F32, F64 };

std::string dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& name);
std::size_t dtype_size(Dtype d);

// Architecture description. layer_key_template maps a role (attn_out,
// mlp_down) to a tensor-name pattern with an "{i}" placeholder for the
// 0-based layer index. residual_orientation says, per role, whether the
// stored tensor keeps the residual-stream dimension in its rows or its
// columns; the loader transposes "rows" tensors so that in memory the
// residual dimension is always the column dimension.
struct ModelConfig {
    std::size_t num_layers = 0;
    std::size_t hidden_dim = 0;
    std::size_t vocab_size = 0;
    std::size_t mlp_dim = 0;
    std::map<std::string, std::string> layer_key_template;
    std::map<std::string, std::string> residual_orientation;  // "rows" | "cols"

    void validate() const;
    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& text);
};

struct WeightKeys {
    std::string attn_out;
    std::string mlp_down;
};

// Concrete tensor names for the two modifiable matrices at a 0-based
// layer index. Throws IndexError when layer >= num_layers.
WeightKeys resolve_weight_keys(const ModelConfig& config, std::size_t layer);

// Named-tensor container plus its architecture config. Tensors are stored
// in math orientation (residual dimension = columns for modifiable
// matrices). Immutable by convention after load; modification passes
// produce new tensor values.
struct Checkpoint {
    std::map<std::string, Matrix> tensors;
    std::map<std::string, Dtype> dtype_map;
    ModelConfig config;
};

// Container layout: 8-byte little-endian header length N, N bytes of JSON
// mapping tensor name -> {dtype, shape, data_offsets}, then one contiguous
// little-endian data buffer. Offsets must tile the buffer exactly.
// The config travels as a sidecar JSON file at <path>.config.json.
Checkpoint load_checkpoint(const std::string& path);
Checkpoint load_checkpoint(const std::string& path, const std::string& config_path);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path,
                     const std::string& config_path);

std::string default_config_path(const std::string& checkpoint_path);

// float <-> IEEE 754 binary16, round-to-nearest-even. Exposed for tests.
std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);

}  // namespace gabl::ckpt
