#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

/// Self-describing binary parameter container.
/// Layout: magic "XMODCKPT", u32 version, u64 config hash, u32 json length,
/// config JSON text, u32 block count, then per block: name, shape, raw
/// float32 little-endian payload. Save/load/save reproduces identical bytes.
struct Checkpoint {
    std::uint32_t version = 1;
    std::uint64_t config_hash = 0;
    std::string config_json; // full training config, enough to rebuild the model

    struct Block {
        std::string name;
        Shape shape;
        std::vector<float> values;
    };
    std::vector<Block> blocks;

    void add(const std::string& name, const Shape& shape, const std::vector<double>& values);
    const Block* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

} // namespace xmodal
