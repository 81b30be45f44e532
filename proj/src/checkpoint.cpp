#include "xmodal/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace xmodal {

namespace {

constexpr char kMagic[8] = {'X', 'M', 'O', 'D', 'C', 'K', 'P', 'T'};

template <typename T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void write_string(std::ofstream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is) {
    const auto n = read_pod<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

} // namespace

void Checkpoint::add(const std::string& name, const Shape& shape,
                     const std::vector<double>& values) {
    Block b;
    b.name = name;
    b.shape = shape;
    b.values.reserve(values.size());
    for (double v : values) b.values.push_back(static_cast<float>(v));
    blocks.push_back(std::move(b));
}

const Checkpoint::Block* Checkpoint::find(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return &b;
    return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, ckpt.version);
    write_pod<std::uint64_t>(os, ckpt.config_hash);
    write_string(os, ckpt.config_json);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.blocks.size()));
    for (const auto& b : ckpt.blocks) {
        write_string(os, b.name);
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(b.shape.size()));
        for (int d : b.shape) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(b.values.size()));
        os.write(reinterpret_cast<const char*>(b.values.data()),
                 static_cast<std::streamsize>(b.values.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    Checkpoint ckpt;
    ckpt.version = read_pod<std::uint32_t>(is);
    if (ckpt.version != 1)
        throw std::runtime_error("load_checkpoint: unsupported version " +
                                 std::to_string(ckpt.version));
    ckpt.config_hash = read_pod<std::uint64_t>(is);
    ckpt.config_json = read_string(is);
    const auto n_blocks = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_blocks; ++i) {
        Checkpoint::Block b;
        b.name = read_string(is);
        const auto rank = read_pod<std::uint32_t>(is);
        for (std::uint32_t d = 0; d < rank; ++d)
            b.shape.push_back(static_cast<int>(read_pod<std::uint32_t>(is)));
        const auto count = read_pod<std::uint64_t>(is);
        b.values.resize(count);
        is.read(reinterpret_cast<char*>(b.values.data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        ckpt.blocks.push_back(std::move(b));
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return ckpt;
}

} // namespace xmodal
